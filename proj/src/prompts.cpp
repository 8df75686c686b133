#include "captlab/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "captlab/errors.hpp"
#include "captlab/ops.hpp"

namespace captlab {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

constexpr double kInitStd = 0.02;

std::string layer_key(std::string_view prefix, std::size_t layer) {
  return std::string(prefix) + ".L" + std::to_string(layer);
}

Tensor gaussian(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, kInitStd);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// [len x d] block repeated once per example: [B*len x d].
Tensor tile_rows(const Tensor& block, std::size_t batch) {
  const std::size_t len = block.rows();
  std::vector<std::size_t> idx;
  idx.reserve(batch * len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < len; ++r) idx.push_back(r);
  }
  return gather_rows(block, idx);
}

// Per example: rows of `first` (a per example) followed by rows of `second` (c per example).
Tensor interleave(const Tensor& first, std::size_t a, const Tensor& second, std::size_t c,
                  std::size_t batch) {
  const Tensor parts[] = {first, second};
  Tensor stacked = concat_rows(parts);
  std::vector<std::size_t> idx;
  idx.reserve(batch * (a + c));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < a; ++r) idx.push_back(b * a + r);
    for (std::size_t r = 0; r < c; ++r) idx.push_back(batch * a + b * c + r);
  }
  return gather_rows(stacked, idx);
}

std::size_t depth_count(const Capsule& c, std::size_t n_layers) {
  return c.depth.resolve(n_layers).size();
}

}  // namespace

// ---------------------------------------------------------------- DepthSet

std::vector<std::size_t> DepthSet::resolve(std::size_t n_layers) const {
  std::vector<std::size_t> out;
  const std::size_t half = n_layers / 2;
  switch (kind) {
    case Kind::input_only: out = {1}; break;
    case Kind::first_half:
      for (std::size_t i = 1; i <= std::max<std::size_t>(half, 1); ++i) out.push_back(i);
      break;
    case Kind::latter_half:
      for (std::size_t i = half + 1; i <= n_layers; ++i) out.push_back(i);
      break;
    case Kind::odd_layers:
      for (std::size_t i = 1; i <= n_layers; i += 2) out.push_back(i);
      break;
    case Kind::all_layers:
      for (std::size_t i = 1; i <= n_layers; ++i) out.push_back(i);
      break;
    case Kind::explicit_list:
      out = layers;
      std::sort(out.begin(), out.end());
      out.erase(std::unique(out.begin(), out.end()), out.end());
      break;
  }
  for (std::size_t l : out) {
    if (l < 1 || l > n_layers) {
      throw ConfigError("depth set references layer " + std::to_string(l) + " of " +
                        std::to_string(n_layers));
    }
  }
  if (out.empty()) throw ConfigError("depth set is empty");
  return out;
}

std::string DepthSet::name() const {
  switch (kind) {
    case Kind::input_only: return "input";
    case Kind::first_half: return "first_half";
    case Kind::latter_half: return "latter_half";
    case Kind::odd_layers: return "odd";
    case Kind::all_layers: return "all";
    case Kind::explicit_list: {
      std::string s;
      for (std::size_t i = 0; i < layers.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(layers[i]);
      }
      return s;
    }
  }
  return "all";
}

DepthSet DepthSet::parse(std::string_view text) {
  DepthSet d;
  if (text == "input" || text == "input_only") d.kind = Kind::input_only;
  else if (text == "first_half") d.kind = Kind::first_half;
  else if (text == "latter_half") d.kind = Kind::latter_half;
  else if (text == "odd" || text == "odd_layers") d.kind = Kind::odd_layers;
  else if (text == "all" || text == "all_layers") d.kind = Kind::all_layers;
  else {
    d.kind = Kind::explicit_list;
    std::stringstream ss{std::string(text)};
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        std::size_t pos = 0;
        const unsigned long v = std::stoul(item, &pos);
        if (pos != item.size()) throw std::invalid_argument(item);
        d.layers.push_back(v);
      } catch (const std::exception&) {
        throw ConfigError("bad depth set '" + std::string(text) + "'");
      }
    }
    if (d.layers.empty()) throw ConfigError("bad depth set '" + std::string(text) + "'");
  }
  return d;
}

// ---------------------------------------------------------------- Variant

std::string Variant::name() const {
  switch (tag) {
    case Tag::addition: return "addition";
    case Tag::prepending: return "prepending";
    case Tag::extraction: return "extraction";
    case Tag::projection: return "projection";
  }
  return "addition";
}

Variant Variant::parse(std::string_view text) {
  Variant v;
  if (text == "addition") v.tag = Tag::addition;
  else if (text == "prepending") v.tag = Tag::prepending;
  else if (text == "extraction") v.tag = Tag::extraction;
  else if (text == "projection") v.tag = Tag::projection;
  else throw ConfigError("unknown variant '" + std::string(text) + "'");
  return v;
}

std::string strategy_name(const StrategyKind& kind) {
  return std::visit(overloaded{
                        [](const NoPrompt&) { return std::string("none"); },
                        [](const Shallow&) { return std::string("shallow"); },
                        [](const Deep&) { return std::string("deep"); },
                        [](const Capsule&) { return std::string("capt"); },
                        [](const PooledInstance&) { return std::string("pooled"); },
                        [](const InstanceOnly&) { return std::string("instance_only"); },
                    },
                    kind);
}

// ---------------------------------------------------------------- accounting

ParamCount count_strategy_params(const StrategyKind& kind, const ModelConfig& config) {
  const std::size_t d = config.d_model, n = config.n_layers;
  ParamCount pc;
  pc.trainable = std::visit(
      overloaded{
          [](const NoPrompt&) -> std::size_t { return 0; },
          [d](const Shallow& s) -> std::size_t { return s.length * d; },
          [d, n](const Deep& s) -> std::size_t { return s.length * d * n; },
          [d, n](const Capsule& c) -> std::size_t {
            const std::size_t layers = depth_count(c, n);
            std::size_t per_layer = d;
            if (c.variant.tag == Variant::Tag::extraction) per_layer += c.variant.kernel_width * d + d;
            if (c.variant.tag == Variant::Tag::projection) per_layer += 2 * d * c.variant.rank;
            return layers * per_layer;
          },
          [](const PooledInstance&) -> std::size_t { return 0; },
          [](const InstanceOnly&) -> std::size_t { return 0; },
      },
      kind);
  if (config.classifier_trainable()) pc.head = d * config.num_classes + config.num_classes;
  pc.backbone_total = config.backbone_total();
  pc.ratio = static_cast<double>(pc.trainable) / pc.backbone_total;
  return pc;
}

std::string format_param_percent(double ratio) {
  const double pct = ratio * 100.0;
  char buf[64];
  if (pct == 0.0) return "0%";
  if (pct >= 0.01) {
    std::snprintf(buf, sizeof buf, "%.2f%%", pct);
    return buf;
  }
  std::snprintf(buf, sizeof buf, "%.0e", pct);
  // "4e-03" -> "4e-3"
  std::string s = buf;
  const auto e = s.find('e');
  std::string mant = s.substr(0, e);
  std::string exp = s.substr(e + 1);
  const bool neg = !exp.empty() && exp[0] == '-';
  if (!exp.empty() && (exp[0] == '-' || exp[0] == '+')) exp.erase(0, 1);
  while (exp.size() > 1 && exp[0] == '0') exp.erase(0, 1);
  return mant + "e" + (neg ? "-" : "") + exp + "%";
}

// ---------------------------------------------------------------- construction

void PromptStrategy::check_config(const ModelConfig& config) const {
  std::visit(overloaded{
                 [](const NoPrompt&) {},
                 [](const Shallow& s) {
                   if (s.length < 1) throw ConfigError("shallow prompt length must be >= 1");
                 },
                 [](const Deep& s) {
                   if (s.length < 1) throw ConfigError("deep prompt length must be >= 1");
                 },
                 [&config](const Capsule& c) {
                   c.depth.resolve(config.n_layers);
                   if (c.variant.tag == Variant::Tag::extraction && c.variant.kernel_width < 1) {
                     throw ConfigError("extraction kernel_width must be >= 1");
                   }
                   if (c.variant.tag == Variant::Tag::projection &&
                       (c.variant.rank < 1 || c.variant.rank >= config.d_model)) {
                     throw ConfigError("projection rank must be in [1, d_model)");
                   }
                 },
                 [](const PooledInstance& p) {
                   if (p.k < 1) throw ConfigError("pooled instance k must be >= 1");
                   if (p.base && p.base->length < 1) throw ConfigError("base deep length must be >= 1");
                 },
                 [](const InstanceOnly&) {},
             },
             kind_);
  if (d_model_ != 0 && (d_model_ != config.d_model || n_layers_ != config.n_layers)) {
    throw ConfigError("strategy was built for d_model " + std::to_string(d_model_) + ", " +
                      std::to_string(n_layers_) + " layers");
  }
  const std::size_t p = max_prompt_len();
  if (p >= config.max_len) {
    throw ConfigError("prompt length " + std::to_string(p) + " leaves no room under max_len " +
                      std::to_string(config.max_len));
  }
}

PromptStrategy PromptStrategy::create(const StrategyKind& kind, const ModelConfig& config,
                                      std::uint64_t seed) {
  PromptStrategy s;
  s.kind_ = kind;
  s.check_config(config);
  s.d_model_ = config.d_model;
  s.n_layers_ = config.n_layers;
  const std::size_t d = config.d_model;
  std::mt19937_64 rng(seed);

  std::visit(overloaded{
                 [](const NoPrompt&) {},
                 [&](const Shallow& sh) { s.shallow_ = gaussian({sh.length, d}, rng); },
                 [&](const Deep& dp) {
                   for (std::size_t l = 1; l <= config.n_layers; ++l) {
                     s.deep_[l] = gaussian({dp.length, d}, rng);
                   }
                 },
                 [&](const Capsule& c) {
                   s.active_layers_ = c.depth.resolve(config.n_layers);
                   for (std::size_t l : s.active_layers_) {
                     s.capsule_.p[l] = gaussian({d}, rng);
                     if (c.variant.tag == Variant::Tag::extraction) {
                       // Centre tap 1, others 0: starts out as the plain mean.
                       const std::size_t w = c.variant.kernel_width;
                       std::vector<double> k(w * d, 0.0);
                       const std::size_t centre = (w - 1) / 2;
                       for (std::size_t j = 0; j < d; ++j) k[centre * d + j] = 1.0;
                       s.capsule_.conv_kernel[l] = Tensor::from({w, d}, std::move(k), true);
                       s.capsule_.conv_bias[l] = Tensor::zeros({d}, true);
                     }
                     if (c.variant.tag == Variant::Tag::projection) {
                       s.capsule_.proj_down[l] = gaussian({d, c.variant.rank}, rng);
                       s.capsule_.proj_up[l] = Tensor::zeros({c.variant.rank, d}, true);
                     }
                   }
                 },
                 [&](const PooledInstance& p) {
                   if (p.base) {
                     for (std::size_t l = 1; l <= config.n_layers; ++l) {
                       Tensor t = gaussian({p.base->length, d}, rng);
                       t.set_requires_grad(false);
                       s.deep_[l] = t;
                     }
                   }
                 },
                 [&](const InstanceOnly&) {
                   for (std::size_t l = 1; l <= config.n_layers; ++l) s.active_layers_.push_back(l);
                 },
             },
             kind);
  return s;
}

PromptStrategy PromptStrategy::pooled_over(const PromptStrategy& deep, std::size_t k) {
  const auto* base = std::get_if<Deep>(&deep.kind_);
  if (!base) throw ConfigError("pooled instance tokens need a deep prompt strategy");
  if (k < 1) throw ConfigError("pooled instance k must be >= 1");
  PromptStrategy s;
  s.kind_ = PooledInstance{k, *base};
  s.d_model_ = deep.d_model_;
  s.n_layers_ = deep.n_layers_;
  for (const auto& [layer, block] : deep.deep_) {
    Tensor frozen = block.detach();
    s.deep_[layer] = frozen;
  }
  return s;
}

PromptStrategy PromptStrategy::clone() const {
  PromptStrategy s = *this;
  for (auto& [l, t] : s.deep_) t = t.clone();
  if (s.shallow_) s.shallow_ = s.shallow_->clone();
  for (auto* m : {&s.capsule_.p, &s.capsule_.conv_kernel, &s.capsule_.conv_bias,
                  &s.capsule_.proj_down, &s.capsule_.proj_up}) {
    for (auto& [l, t] : *m) t = t.clone();
  }
  return s;
}

std::string PromptStrategy::describe() const {
  std::ostringstream os;
  os << "strategy=" << name() << '\n';
  std::visit(overloaded{
                 [](const NoPrompt&) {},
                 [&os](const Shallow& s) { os << "len=" << s.length << '\n'; },
                 [&os](const Deep& s) { os << "len=" << s.length << '\n'; },
                 [&os](const Capsule& c) {
                   os << "variant=" << c.variant.name() << '\n' << "depth=" << c.depth.name() << '\n';
                   if (c.variant.tag == Variant::Tag::extraction) {
                     os << "kernel_width=" << c.variant.kernel_width << '\n';
                   }
                   if (c.variant.tag == Variant::Tag::projection) os << "rank=" << c.variant.rank << '\n';
                 },
                 [&os](const PooledInstance& p) {
                   os << "k=" << p.k << '\n';
                   if (p.base) os << "len=" << p.base->length << '\n';
                 },
                 [](const InstanceOnly&) {},
             },
             kind_);
  return os.str();
}

std::vector<std::pair<std::string, Tensor>> PromptStrategy::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (std::holds_alternative<PooledInstance>(kind_)) return out;
  if (shallow_) out.emplace_back("prompt.shallow", *shallow_);
  for (const auto& [l, t] : deep_) out.emplace_back(layer_key("prompt.deep", l), t);
  for (const auto& [l, t] : capsule_.p) out.emplace_back(layer_key("capsule.p", l), t);
  for (const auto& [l, t] : capsule_.conv_kernel) out.emplace_back(layer_key("capsule.conv_kernel", l), t);
  for (const auto& [l, t] : capsule_.conv_bias) out.emplace_back(layer_key("capsule.conv_bias", l), t);
  for (const auto& [l, t] : capsule_.proj_down) out.emplace_back(layer_key("capsule.proj_down", l), t);
  for (const auto& [l, t] : capsule_.proj_up) out.emplace_back(layer_key("capsule.proj_up", l), t);
  return out;
}

std::size_t PromptStrategy::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

std::size_t PromptStrategy::max_prompt_len() const {
  return std::visit(overloaded{
                        [](const NoPrompt&) -> std::size_t { return 0; },
                        [](const Shallow& s) -> std::size_t { return s.length; },
                        [](const Deep& s) -> std::size_t { return s.length; },
                        [](const Capsule& c) -> std::size_t {
                          return c.variant.tag == Variant::Tag::prepending ? 2 : 1;
                        },
                        [](const PooledInstance& p) -> std::size_t {
                          return p.k + (p.base ? p.base->length : 0);
                        },
                        [](const InstanceOnly&) -> std::size_t { return 1; },
                    },
                    kind_);
}

const Tensor& PromptStrategy::deep_block(std::size_t layer) const {
  auto it = deep_.find(layer);
  if (it == deep_.end()) throw ContractError("no deep prompt block for layer " + std::to_string(layer));
  return it->second;
}

// ---------------------------------------------------------------- per-layer prompts

LayerPrompt PromptStrategy::layer_prompt(const LayerContext& ctx) const {
  if (ctx.layer < 1 || (n_layers_ != 0 && ctx.layer > n_layers_)) {
    throw ContractError("layer index " + std::to_string(ctx.layer) + " out of range");
  }
  const std::size_t B = ctx.batch_size;
  const std::size_t d = ctx.prev_hidden->cols();
  LayerPrompt out;
  out.tokens = Tensor::zeros({0, d});

  std::visit(
      overloaded{
          [](const NoPrompt&) {},
          [&](const Shallow& s) {
            if (ctx.layer == 1) {
              out.tokens = tile_rows(*shallow_, B);
            } else {
              // Vanilla prompts ride along: the previous layer's outputs are the next inputs.
              if (!ctx.carried) throw ContractError("shallow prompt lost between layers");
              out.tokens = *ctx.carried;
            }
            out.count = s.length;
            out.roles.assign(s.length, TokenRole::prompt);
          },
          [&](const Deep& s) {
            out.tokens = tile_rows(deep_block(ctx.layer), B);
            out.count = s.length;
            out.roles.assign(s.length, TokenRole::prompt);
          },
          [&](const Capsule& c) { out = capsule_prompt(c, ctx); },
          [&](const PooledInstance& p) {
            Tensor pooled = batched_pooled_tokens(*ctx.embeddings, ctx.mask, B, ctx.seq_len, p.k);
            out.roles.assign(p.k, TokenRole::instance_pooled);
            if (p.base) {
              out.tokens = interleave(pooled, p.k, tile_rows(deep_block(ctx.layer), B),
                                      p.base->length, B);
              out.count = p.k + p.base->length;
              out.roles.insert(out.roles.end(), p.base->length, TokenRole::prompt);
            } else {
              out.tokens = pooled;
              out.count = p.k;
            }
          },
          [&](const InstanceOnly&) {
            out.tokens = batched_capsule_mean(ctx.carried, ctx.carried_len, *ctx.prev_hidden,
                                              ctx.mask, B, ctx.seq_len);
            out.count = 1;
            out.roles = {TokenRole::capsule};
          },
      },
      kind_);
  return out;
}

LayerPrompt PromptStrategy::capsule_prompt(const Capsule& c, const LayerContext& ctx) const {
  LayerPrompt out;
  const std::size_t B = ctx.batch_size, T = ctx.seq_len;
  const std::size_t d = ctx.prev_hidden->cols();
  auto p_it = capsule_.p.find(ctx.layer);
  if (p_it == capsule_.p.end()) {
    out.tokens = Tensor::zeros({0, d});
    return out;
  }
  const Tensor& p = p_it->second;
  const std::size_t l = ctx.layer;

  switch (c.variant.tag) {
    case Variant::Tag::addition: {
      Tensor mean = batched_capsule_mean(ctx.carried, ctx.carried_len, *ctx.prev_hidden, ctx.mask, B, T);
      out.tokens = add_row(mean, p);
      out.count = 1;
      out.roles = {TokenRole::capsule};
      break;
    }
    case Variant::Tag::prepending: {
      Tensor mean = batched_capsule_mean(ctx.carried, ctx.carried_len, *ctx.prev_hidden, ctx.mask, B, T);
      out.tokens = interleave(mean, 1, tile_rows(reshape(p, {1, d}), B), 1, B);
      out.count = 2;
      out.roles = {TokenRole::capsule, TokenRole::prompt};
      break;
    }
    case Variant::Tag::extraction: {
      // Per example: conv over [carried rows ; unpadded hidden rows], then mean.
      Tensor source = *ctx.prev_hidden;
      std::size_t offset = 0;
      if (ctx.carried) {
        const Tensor parts[] = {*ctx.carried, *ctx.prev_hidden};
        source = concat_rows(parts);
        offset = B * ctx.carried_len;
      }
      std::vector<Tensor> rows;
      rows.reserve(B);
      for (std::size_t b = 0; b < B; ++b) {
        std::vector<std::size_t> idx;
        for (std::size_t j = 0; j < ctx.carried_len && ctx.carried; ++j) idx.push_back(b * ctx.carried_len + j);
        for (std::size_t t = 0; t < T; ++t) {
          if (ctx.mask[b * T + t]) idx.push_back(offset + b * T + t);
        }
        if (idx.empty()) throw ContractError("capsule extraction over an empty sequence");
        Tensor seq = gather_rows(source, idx);
        Tensor conv = add_row(depthwise_conv1d(seq, capsule_.conv_kernel.at(l)), capsule_.conv_bias.at(l));
        RowMix mix;
        for (std::size_t r = 0; r < idx.size(); ++r) mix.terms.push_back({0, r, 1.0});
        mix.divisor = {static_cast<double>(idx.size())};
        rows.push_back(row_mix(conv, mix));
      }
      out.tokens = add_row(concat_rows(rows), p);
      out.count = 1;
      out.roles = {TokenRole::capsule};
      break;
    }
    case Variant::Tag::projection: {
      Tensor mean = batched_capsule_mean(ctx.carried, ctx.carried_len, *ctx.prev_hidden, ctx.mask, B, T);
      Tensor projected = matmul(matmul(mean, capsule_.proj_down.at(l)), capsule_.proj_up.at(l));
      out.tokens = add_row(projected, p);
      out.count = 1;
      out.roles = {TokenRole::capsule};
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------- free functions

Tensor batched_capsule_mean(const Tensor* carried, std::size_t carried_len, const Tensor& hidden,
                            std::span<const std::uint8_t> mask, std::size_t batch,
                            std::size_t seq_len) {
  if (hidden.rows() != batch * seq_len || mask.size() != batch * seq_len) {
    throw ShapeError("capsule mean: hidden/mask do not match the batch geometry");
  }
  const Tensor* source = &hidden;
  Tensor stacked;
  std::size_t offset = 0;
  if (carried && carried_len > 0) {
    if (carried->rows() != batch * carried_len) throw ShapeError("capsule mean: carried rows mismatch");
    if (carried->cols() != hidden.cols()) throw ShapeError("capsule mean: width mismatch");
    const Tensor parts[] = {*carried, hidden};
    stacked = concat_rows(parts);
    source = &stacked;
    offset = batch * carried_len;
  } else {
    carried_len = 0;
  }
  RowMix mix;
  mix.divisor.assign(batch, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < carried_len; ++j) mix.terms.push_back({b, b * carried_len + j, 1.0});
    std::size_t count = 0;
    for (std::size_t t = 0; t < seq_len; ++t) {
      if (mask[b * seq_len + t]) {
        mix.terms.push_back({b, offset + b * seq_len + t, 1.0});
        ++count;
      }
    }
    if (carried_len + count == 0) throw ContractError("capsule mean over an empty sequence");
    mix.divisor[b] = static_cast<double>(carried_len + count);
  }
  return row_mix(*source, mix);
}

Tensor capsule_token(const Tensor* p, const Tensor* prev_processed, const Tensor& prev_hidden,
                     std::span<const std::uint8_t> mask) {
  if (prev_hidden.rank() != 2) throw ShapeError("capsule_token: hidden must be [T x d]");
  const std::size_t d = prev_hidden.cols();
  if (p && p->numel() != d) throw ShapeError("capsule_token: p width mismatch");
  std::optional<Tensor> prev;
  if (prev_processed) {
    prev = prev_processed->rank() == 1 ? reshape(*prev_processed, {1, prev_processed->numel()})
                                       : *prev_processed;
  }
  const std::size_t carried_len = prev ? prev->rows() : 0;
  Tensor mean = batched_capsule_mean(prev ? &*prev : nullptr, carried_len, prev_hidden, mask, 1,
                                     prev_hidden.rows());
  if (p) mean = add_row(mean, *p);
  return reshape(mean, {d});
}

Tensor instance_only_token(const Tensor* prev_processed, const Tensor& prev_hidden,
                           std::span<const std::uint8_t> mask) {
  return capsule_token(nullptr, prev_processed, prev_hidden, mask);
}

std::vector<std::size_t> pooled_segment_sizes(std::size_t length, std::size_t k) {
  if (k < 1) throw ContractError("pooled instance k must be >= 1");
  if (k > length) {
    throw ContractError("cannot pool " + std::to_string(length) + " rows into " +
                        std::to_string(k) + " segments");
  }
  std::vector<std::size_t> sizes(k, length / k);
  for (std::size_t s = 0; s < length % k; ++s) ++sizes[s];
  return sizes;
}

Tensor batched_pooled_tokens(const Tensor& embeddings, std::span<const std::uint8_t> mask,
                             std::size_t batch, std::size_t seq_len, std::size_t k) {
  if (embeddings.rows() != batch * seq_len || mask.size() != batch * seq_len) {
    throw ShapeError("pooled tokens: embeddings/mask do not match the batch geometry");
  }
  RowMix mix;
  mix.divisor.assign(batch * k, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::size_t> rows;
    for (std::size_t t = 0; t < seq_len; ++t) {
      if (mask[b * seq_len + t]) rows.push_back(b * seq_len + t);
    }
    const auto sizes = pooled_segment_sizes(rows.size(), k);
    std::size_t next = 0;
    for (std::size_t s = 0; s < k; ++s) {
      for (std::size_t j = 0; j < sizes[s]; ++j) mix.terms.push_back({b * k + s, rows[next++], 1.0});
      mix.divisor[b * k + s] = static_cast<double>(sizes[s]);
    }
  }
  return row_mix(embeddings, mix);
}

Tensor pooled_instance_tokens(const Tensor& embeddings, std::span<const std::uint8_t> mask,
                              std::size_t k) {
  if (embeddings.rank() != 2) throw ShapeError("pooled_instance_tokens: E must be [T x d]");
  return batched_pooled_tokens(embeddings, mask, 1, embeddings.rows(), k);
}

}  // namespace captlab
