#include "captlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "captlab/checkpoint.hpp"
#include "captlab/errors.hpp"
#include "json.hpp"

namespace captlab {
namespace {

const char* const kSpecials[] = {"<pad>", "<unk>", "<bos>"};
const char* const kTemplateWords[] = {"premise", "hypothesis", "sentence", "1", "2", ":",
                                      ".", "question", "passage", "answer", "word", "context"};
const char* const kMarkers[] = {"alpha", "omega", "good", "bad"};
constexpr std::size_t kKeyWords = 8;
constexpr std::size_t kVocabSize = 200;

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::vector<std::string> standard_words() {
  std::vector<std::string> words(std::begin(kTemplateWords), std::end(kTemplateWords));
  words.insert(words.end(), std::begin(kMarkers), std::end(kMarkers));
  for (std::size_t k = 0; k < kKeyWords; ++k) words.push_back("key" + std::to_string(k));
  const std::size_t content = kVocabSize - std::size(kSpecials) - words.size();
  for (std::size_t i = 0; i < content; ++i) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "w%03zu", i);
    words.emplace_back(buf);
  }
  return words;
}

std::vector<std::string> content_words() {
  std::vector<std::string> out;
  for (const auto& w : Tokenizer::standard().words()) {
    if (w.size() == 4 && w[0] == 'w') out.push_back(w);
  }
  return out;
}

std::vector<std::size_t> compute_structural(const TaskSpec& task, const Tokenizer& tok) {
  std::vector<std::size_t> pos = {0};
  std::size_t cursor = 1;
  for (const auto& piece : task.pieces) {
    if (piece.is_slot()) {
      if (piece.slot_len == 0) break;  // later positions shift with content
      cursor += piece.slot_len;
    } else {
      for (std::size_t i = 0; i < tok.tokenize(piece.fixed).size(); ++i) pos.push_back(cursor++);
    }
  }
  return pos;
}

TaskSpec make_task(std::string name, std::vector<TemplatePiece> pieces,
                   std::vector<std::string> classes) {
  TaskSpec t;
  t.name = std::move(name);
  t.pieces = std::move(pieces);
  t.classes = std::move(classes);
  t.structural_positions = compute_structural(t, Tokenizer::standard());
  return t;
}

TemplatePiece fixed(std::string text) { return {std::move(text), {}, 0}; }
TemplatePiece slot(std::string name, std::size_t len) { return {{}, std::move(name), len}; }

// n words drawn from the content pool with `special` dropped in at a random spot.
std::string slot_text(std::mt19937_64& rng, const std::vector<std::string>& pool, std::size_t n,
                      const std::string& special) {
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<std::string> words;
  for (std::size_t i = 0; i + 1 < n; ++i) words.push_back(pool[pick(rng)]);
  std::uniform_int_distribution<std::size_t> where(0, words.size());
  words.insert(words.begin() + static_cast<std::ptrdiff_t>(where(rng)), special);
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s += ' ';
    s += words[i];
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------- Tokenizer

Tokenizer::Tokenizer(const std::vector<std::string>& words) {
  for (const char* s : kSpecials) words_.emplace_back(s);
  words_.insert(words_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<std::int32_t>(i)).second) {
      throw ConfigError("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

const Tokenizer& Tokenizer::standard() {
  static const Tokenizer tok(standard_words());
  return tok;
}

std::int32_t Tokenizer::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end() || it->second == kPad) return kUnk;
  return it->second;
}

const std::string& Tokenizer::word(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) return words_[kUnk];
  return words_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Tokenizer::tokenize(std::string_view text) const {
  std::vector<std::int32_t> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Tokenizer::detokenize(std::span<const std::int32_t> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

std::string Tokenizer::vocabulary_hash() const {
  std::string joined;
  for (const auto& w : words_) joined += w + '\n';
  return git_blob_hash(joined);
}

// ---------------------------------------------------------------- tasks

std::optional<std::size_t> TaskSpec::class_index(std::string_view label) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] == label) return i;
  }
  return std::nullopt;
}

std::vector<std::string> TaskSpec::slot_names() const {
  std::vector<std::string> out;
  for (const auto& p : pieces) {
    if (p.is_slot()) out.push_back(p.slot);
  }
  return out;
}

std::size_t TaskSpec::template_token_count(const Tokenizer& tok) const {
  std::size_t n = 1;
  for (const auto& p : pieces) {
    if (!p.is_slot()) n += tok.tokenize(p.fixed).size();
  }
  return n;
}

std::string_view synthetic_name(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::pair_match: return "pair_match";
    case SyntheticKind::keyword_presence: return "keyword_presence";
    case SyntheticKind::order_sensitive: return "order_sensitive";
  }
  return "pair_match";
}

SyntheticKind parse_synthetic(std::string_view name) {
  if (name == "pair_match") return SyntheticKind::pair_match;
  if (name == "keyword_presence") return SyntheticKind::keyword_presence;
  if (name == "order_sensitive") return SyntheticKind::order_sensitive;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

const TaskSpec& builtin_task(SyntheticKind kind) {
  static const TaskSpec pair = make_task(
      "pair_match",
      {fixed("premise :"), slot("slot_1", 5), fixed("hypothesis :"), slot("slot_2", 5), fixed(".")},
      {"no", "yes"});
  static const TaskSpec keyword = make_task(
      "keyword_presence", {fixed("sentence :"), slot("slot_1", 8), fixed(".")},
      {"negative", "positive"});
  static const TaskSpec order = make_task(
      "order_sensitive",
      {fixed("sentence 1 :"), slot("slot_1", 3), fixed("sentence 2 :"), slot("slot_2", 3), fixed(".")},
      {"after", "before"});
  switch (kind) {
    case SyntheticKind::pair_match: return pair;
    case SyntheticKind::keyword_presence: return keyword;
    case SyntheticKind::order_sensitive: return order;
  }
  return pair;
}

const TaskSpec& builtin_task(std::string_view name) { return builtin_task(parse_synthetic(name)); }

Example render_example(const TaskSpec& task, const std::map<std::string, std::string>& slots,
                       std::size_t label, std::size_t budget, const Tokenizer& tok) {
  std::vector<std::vector<std::int32_t>> pieces;
  std::size_t total = 1;
  for (const auto& p : task.pieces) {
    if (p.is_slot()) {
      auto it = slots.find(p.slot);
      pieces.push_back(it == slots.end() ? std::vector<std::int32_t>{} : tok.tokenize(it->second));
    } else {
      pieces.push_back(tok.tokenize(p.fixed));
    }
    total += pieces.back().size();
  }
  const std::size_t fixed_total = task.template_token_count(tok);
  if (fixed_total > budget) {
    throw ConfigError("template of task " + task.name + " needs " + std::to_string(fixed_total) +
                      " tokens, budget is " + std::to_string(budget));
  }
  while (total > budget) {
    // Longest slot gives up its last token; ties go to the later slot.
    std::size_t victim = pieces.size();
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      if (!task.pieces[i].is_slot() || pieces[i].empty()) continue;
      if (victim == pieces.size() || pieces[i].size() >= pieces[victim].size()) victim = i;
    }
    pieces[victim].pop_back();
    --total;
  }
  Example ex;
  ex.label = label;
  ex.ids.push_back(Tokenizer::kBos);
  ex.structural.push_back(0);
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    for (std::int32_t id : pieces[i]) {
      if (!task.pieces[i].is_slot()) ex.structural.push_back(ex.ids.size());
      ex.ids.push_back(id);
    }
  }
  return ex;
}

Dataset gen_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 10) throw ContractError("synthetic datasets need n >= 10");
  const TaskSpec& task = builtin_task(kind);
  const auto pool = content_words();
  std::mt19937_64 rng(seed);

  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % 2;
  std::shuffle(labels.begin(), labels.end(), rng);

  Dataset data;
  data.task = task.name;
  data.examples.reserve(n);
  std::uniform_int_distribution<std::size_t> key_pick(0, kKeyWords - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = labels[i];
    std::map<std::string, std::string> slots;
    switch (kind) {
      case SyntheticKind::pair_match: {
        const std::size_t a = key_pick(rng);
        std::size_t b = a;
        if (label == 0) {
          while (b == a) b = key_pick(rng);
        }
        slots["slot_1"] = slot_text(rng, pool, task.pieces[1].slot_len, "key" + std::to_string(a));
        slots["slot_2"] = slot_text(rng, pool, task.pieces[3].slot_len, "key" + std::to_string(b));
        break;
      }
      case SyntheticKind::keyword_presence:
        slots["slot_1"] = slot_text(rng, pool, task.pieces[1].slot_len, label ? "good" : "bad");
        break;
      case SyntheticKind::order_sensitive:
        slots["slot_1"] = slot_text(rng, pool, task.pieces[1].slot_len, label ? "alpha" : "omega");
        slots["slot_2"] = slot_text(rng, pool, task.pieces[3].slot_len, label ? "omega" : "alpha");
        break;
    }
    data.examples.push_back(render_example(task, slots, label, static_cast<std::size_t>(-1)));
  }
  return data;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double train_frac,
                                          std::uint64_t seed) {
  if (data.size() < 10) throw ContractError("split needs at least 10 examples");
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ContractError("train_frac must be in (0, 1)");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(data.size())));
  Dataset train{data.task, {}}, val{data.task, {}};
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? train : val).examples.push_back(data.examples[order[i]]);
  }
  return {std::move(train), std::move(val)};
}

Dataset load_jsonl(const std::string& path, const TaskSpec& task, std::size_t max_len,
                   std::size_t max_prompt_len, const Tokenizer& tok) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  if (max_prompt_len >= max_len) throw ConfigError("prompt length leaves no room for input");
  const std::size_t budget = max_len - max_prompt_len;
  const auto slot_names = task.slot_names();

  Dataset data;
  data.task = task.name;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!obj.is_object()) throw ParseError("expected a JSON object", line_no);
    std::map<std::string, std::string> slots;
    for (std::size_t i = 0; i < slot_names.size(); ++i) {
      const auto& name = slot_names[i];
      if (!obj.contains(name)) {
        if (i == 0) throw ParseError("missing field '" + name + "'", line_no);
        continue;  // later slots are optional
      }
      if (!obj[name].is_string()) throw ParseError("field '" + name + "' is not a string", line_no);
      slots[name] = obj[name].get<std::string>();
    }
    if (!obj.contains(task.label_field) || !obj[task.label_field].is_string()) {
      throw ParseError("missing string field '" + task.label_field + "'", line_no);
    }
    const auto label_text = obj[task.label_field].get<std::string>();
    const auto label = task.class_index(label_text);
    if (!label) throw ParseError("unknown label '" + label_text + "'", line_no);
    data.examples.push_back(render_example(task, slots, *label, budget, tok));
  }
  return data;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  Batch batch;
  batch.batch_size = indices.size();
  for (std::size_t i : indices) batch.seq_len = std::max(batch.seq_len, data.examples.at(i).length());
  batch.token_ids.assign(batch.batch_size * batch.seq_len, Tokenizer::kPad);
  batch.mask.assign(batch.batch_size * batch.seq_len, 0);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Example& ex = data.examples[indices[b]];
    for (std::size_t t = 0; t < ex.length(); ++t) {
      batch.token_ids[b * batch.seq_len + t] = ex.ids[t];
      batch.mask[b * batch.seq_len + t] = 1;
    }
    batch.labels.push_back(ex.label);
    batch.structural_indices.push_back(ex.structural);
  }
  return batch;
}

Batch make_batch(const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return make_batch(data, all);
}

}  // namespace captlab
