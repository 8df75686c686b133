#include "captlab/attnlab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace captlab {
namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream f(path, std::ios::out | mode);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

// Blue for low, white in the middle, red for high.
std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const double lo[3] = {49, 54, 149}, mid[3] = {247, 247, 247}, hi[3] = {165, 0, 38};
  double c[3];
  for (int i = 0; i < 3; ++i) {
    c[i] = t < 0.5 ? lo[i] + (mid[i] - lo[i]) * (t / 0.5) : mid[i] + (hi[i] - mid[i]) * ((t - 0.5) / 0.5);
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(c[0])),
                static_cast<int>(std::lround(c[1])), static_cast<int>(std::lround(c[2])));
  return buf;
}

std::size_t leading_guidance(const std::vector<TokenRole>& labels) {
  std::size_t n = 0;
  while (n < labels.size() && is_guidance(labels[n])) ++n;
  return n;
}

}  // namespace

std::vector<TokenRole> position_roles(const ForwardTrace& trace, std::size_t layer_index,
                                      std::size_t example) {
  const LayerTrace& lt = trace.layers.at(layer_index);
  std::vector<TokenRole> roles = lt.prompt_roles;
  const auto& structural = trace.structural_indices.at(example);
  for (std::size_t t = 0; t < trace.input_len; ++t) {
    if (!trace.mask[example * trace.input_len + t]) {
      roles.push_back(TokenRole::pad);
    } else if (std::find(structural.begin(), structural.end(), t) != structural.end()) {
      roles.push_back(TokenRole::structural_input);
    } else {
      roles.push_back(TokenRole::input);
    }
  }
  return roles;
}

std::vector<AttentionRecord> capture(const ForwardTrace& trace, ScoreKind kind) {
  if (trace.layers.empty() || trace.batch_size == 0) throw ContractError("trace holds no layers");
  const std::size_t B = trace.batch_size, T = trace.input_len;
  for (std::size_t b = 1; b < B; ++b) {
    if (!std::equal(trace.mask.begin(), trace.mask.begin() + T, trace.mask.begin() + b * T) ||
        trace.structural_indices[b] != trace.structural_indices[0]) {
      throw ContractError("captured examples differ in length or structure; bin by length first");
    }
  }
  std::vector<AttentionRecord> out;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const LayerTrace& lt = trace.layers[l];
    const std::size_t L = lt.seq_len;
    const std::vector<double>& source = kind == ScoreKind::logits ? lt.attention_logits : lt.attention;
    if (source.size() != B * trace.heads * L * L) {
      throw ContractError("trace was captured without attention scores");
    }
    const auto roles = position_roles(trace, l, 0);
    for (std::size_t h = 0; h < trace.heads; ++h) {
      AttentionRecord r;
      r.layer = l + 1;
      r.head = h;
      r.q = r.k = L;
      r.q_labels = r.k_labels = roles;
      r.scores.assign(L * L, 0.0);
      for (std::size_t b = 0; b < B; ++b) {
        const double* src = source.data() + (b * trace.heads + h) * L * L;
        for (std::size_t i = 0; i < L * L; ++i) r.scores[i] += src[i];
      }
      for (double& v : r.scores) v /= static_cast<double>(B);
      out.push_back(std::move(r));
    }
  }
  return out;
}

bool Selector::matches(const AttentionRecord& r) const {
  switch (kind) {
    case Kind::all: return true;
    case Kind::per_layer: return r.layer == layer;
    case Kind::single_head: return r.layer == layer && r.head == head;
  }
  return false;
}

std::string Selector::name() const {
  switch (kind) {
    case Kind::all: return "all";
    case Kind::per_layer: return "layer" + std::to_string(layer);
    case Kind::single_head: return "head" + std::to_string(layer) + "-" + std::to_string(head);
  }
  return "all";
}

Selector Selector::parse(std::string_view text) {
  const std::string s(text);
  try {
    if (s == "all") return all();
    if (s.rfind("layer", 0) == 0) return per_layer(std::stoul(s.substr(5)));
    if (s.rfind("head", 0) == 0) {
      const auto dash = s.find('-');
      if (dash != std::string::npos) {
        return single_head(std::stoul(s.substr(4, dash - 4)), std::stoul(s.substr(dash + 1)));
      }
    }
  } catch (const std::logic_error&) {
  }
  throw ConfigError("bad selector '" + s + "' (use all, layerN or headL-H)");
}

AggregatedMap aggregate(const std::vector<AttentionRecord>& records, const Selector& selector) {
  AggregatedMap map;
  map.selector = selector.name();
  std::size_t used = 0;
  for (const AttentionRecord& r : records) {
    if (!selector.matches(r)) continue;
    if (used == 0) {
      map.q = r.q;
      map.k = r.k;
      map.q_labels = r.q_labels;
      map.k_labels = r.k_labels;
      map.scores.assign(r.q * r.k, 0.0);
    } else if (r.q != map.q || r.k != map.k || r.q_labels != map.q_labels ||
               r.k_labels != map.k_labels) {
      throw AggregationError("records of layer " + std::to_string(r.layer) + " head " +
                             std::to_string(r.head) + " do not share the selection's layout");
    }
    for (std::size_t i = 0; i < map.scores.size(); ++i) map.scores[i] += r.scores[i];
    ++used;
  }
  if (used == 0) throw AggregationError("selector " + map.selector + " matches no record");
  for (double& v : map.scores) v /= static_cast<double>(used);
  return map;
}

AnchorMetrics anchor_metrics(const AggregatedMap& map) {
  auto mass = [&](auto query_pred, auto key_pred) -> std::optional<double> {
    bool any_key = false;
    for (TokenRole r : map.k_labels) any_key |= key_pred(r);
    if (!any_key) return std::nullopt;
    double total = 0.0;
    std::size_t rows = 0;
    for (std::size_t q = 0; q < map.q; ++q) {
      if (!query_pred(map.q_labels[q])) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < map.k; ++k) {
        if (key_pred(map.k_labels[k])) s += map.at(q, k);
      }
      total += s;
      ++rows;
    }
    if (rows == 0) return std::nullopt;
    return total / static_cast<double>(rows);
  };
  auto structural = [](TokenRole r) { return r == TokenRole::structural_input; };
  AnchorMetrics m;
  m.prompt_self_mass = mass(is_guidance, is_guidance);
  m.prompt_to_structural_mass = mass(is_guidance, structural);
  m.input_to_prompt_mass = mass(is_input, is_guidance);
  return m;
}

double uniform_structural_baseline(const AggregatedMap& map) {
  std::size_t valid = 0, structural = 0;
  for (TokenRole r : map.k_labels) {
    if (r != TokenRole::pad) ++valid;
    if (r == TokenRole::structural_input) ++structural;
  }
  return valid ? static_cast<double>(structural) / static_cast<double>(valid) : 0.0;
}

void emit_csv(const AggregatedMap& map, const std::string& path) {
  auto f = open_out(path);
  f << "query";
  for (TokenRole r : map.k_labels) f << ',' << role_name(r);
  f << '\n';
  for (std::size_t q = 0; q < map.q; ++q) {
    f << role_name(map.q_labels[q]);
    for (std::size_t k = 0; k < map.k; ++k) f << ',' << fmt6(map.at(q, k));
    f << '\n';
  }
  if (!f) throw IoError("write failed for " + path);
}

AggregatedMap parse_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  AggregatedMap map;
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(f, line)) throw ParseError("missing header", line_no);
  const auto header = split(line);
  for (std::size_t i = 1; i < header.size(); ++i) map.k_labels.push_back(parse_role(header[i]));
  map.k = map.k_labels.size();
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != map.k + 1) throw ParseError("expected " + std::to_string(map.k + 1) + " cells", line_no);
    map.q_labels.push_back(parse_role(cells[0]));
    for (std::size_t i = 1; i < cells.size(); ++i) {
      try {
        map.scores.push_back(std::stod(cells[i]));
      } catch (const std::logic_error&) {
        throw ParseError("bad number '" + cells[i] + "'", line_no);
      }
    }
  }
  map.q = map.q_labels.size();
  return map;
}

void emit_heatmap(const AggregatedMap& map, const std::string& path) {
  constexpr double cell = 12.0, margin = 110.0;
  const double width = margin + cell * static_cast<double>(map.k) + 10.0;
  const double height = margin + cell * static_cast<double>(map.q) + 10.0;
  double peak = 0.0;
  for (double v : map.scores) peak = std::max(peak, v);

  auto f = open_out(path);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"monospace\" font-size=\"9\">\n";
  f << "<title>attention " << map.selector << "</title>\n";
  for (std::size_t q = 0; q < map.q; ++q) {
    const double y = margin + cell * static_cast<double>(q);
    f << "<text x=\"" << margin - 4 << "\" y=\"" << y + cell - 3
      << "\" text-anchor=\"end\">" << role_name(map.q_labels[q]) << "</text>\n";
    for (std::size_t k = 0; k < map.k; ++k) {
      const double v = map.at(q, k);
      f << "<rect x=\"" << margin + cell * static_cast<double>(k) << "\" y=\"" << y
        << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
        << ramp(peak > 0 ? v / peak : 0.0) << "\"><title>" << fmt6(v) << "</title></rect>\n";
    }
  }
  for (std::size_t k = 0; k < map.k; ++k) {
    const double x = margin + cell * static_cast<double>(k) + cell - 3;
    f << "<text x=\"" << x << "\" y=\"" << margin - 4 << "\" transform=\"rotate(-90 " << x << ' '
      << margin - 4 << ")\">" << role_name(map.k_labels[k]) << "</text>\n";
  }
  const std::size_t gk = leading_guidance(map.k_labels), gq = leading_guidance(map.q_labels);
  if (gk > 0 && gk < map.k) {
    const double x = margin + cell * static_cast<double>(gk);
    f << "<line x1=\"" << x << "\" y1=\"" << margin << "\" x2=\"" << x << "\" y2=\""
      << margin + cell * static_cast<double>(map.q) << "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
  }
  if (gq > 0 && gq < map.q) {
    const double y = margin + cell * static_cast<double>(gq);
    f << "<line x1=\"" << margin << "\" y1=\"" << y << "\" x2=\""
      << margin + cell * static_cast<double>(map.k) << "\" y2=\"" << y
      << "\" stroke=\"black\" stroke-width=\"1.5\"/>\n";
  }
  f << "</svg>\n";
  if (!f) throw IoError("write failed for " + path);
}

void append_metrics_jsonl(const std::string& path, const std::string& run,
                          const std::string& selector, const AnchorMetrics& metrics) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json j = {{"run", run},
                      {"selector", selector},
                      {"prompt_self_mass", opt(metrics.prompt_self_mass)},
                      {"prompt_to_structural_mass", opt(metrics.prompt_to_structural_mass)},
                      {"input_to_prompt_mass", opt(metrics.input_to_prompt_mass)}};
  auto f = open_out(path, std::ios::app);
  f << j.dump() << '\n';
  if (!f) throw IoError("write failed for " + path);
}

}  // namespace captlab
