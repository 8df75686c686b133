#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "captlab/batch.hpp"

namespace captlab {

/// Closed word-level vocabulary with whitespace tokenization.
class Tokenizer {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kBos = 2;

  /// Specials first, then `words` in order. Duplicates are rejected.
  explicit Tokenizer(const std::vector<std::string>& words);

  /// The shared vocabulary of the synthetic tasks (~200 words).
  static const Tokenizer& standard();

  std::vector<std::int32_t> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const std::int32_t> ids) const;
  std::int32_t id(std::string_view word) const;  // kUnk when absent
  const std::string& word(std::int32_t id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  std::string vocabulary_hash() const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// A template piece is either fixed text or a named content slot.
struct TemplatePiece {
  std::string fixed;       // non-empty for fixed text (may hold several words)
  std::string slot;        // non-empty for a slot
  std::size_t slot_len = 0;  // fixed word count for generated data; 0 = free length

  bool is_slot() const { return !slot.empty(); }
};

struct TaskSpec {
  std::string name;
  std::vector<TemplatePiece> pieces;
  std::vector<std::string> classes;
  std::string label_field = "label";
  // Positions (bos included) holding fixed template tokens in every example.
  std::vector<std::size_t> structural_positions;

  std::optional<std::size_t> class_index(std::string_view label) const;
  std::vector<std::string> slot_names() const;
  /// Fixed template tokens plus the leading bos.
  std::size_t template_token_count(const Tokenizer& tok) const;
};

enum class SyntheticKind { pair_match, keyword_presence, order_sensitive };

std::string_view synthetic_name(SyntheticKind kind);
SyntheticKind parse_synthetic(std::string_view name);
const TaskSpec& builtin_task(SyntheticKind kind);
const TaskSpec& builtin_task(std::string_view name);

struct Example {
  std::vector<std::int32_t> ids;
  std::size_t label = 0;
  std::vector<std::size_t> structural;

  std::size_t length() const { return ids.size(); }
};

struct Dataset {
  std::string task;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

/// Renders slot texts through the template: bos, fixed words, slot words.
/// When the result exceeds `budget` tokens the longest slot loses its tail
/// first; the template itself is never cut.
Example render_example(const TaskSpec& task, const std::map<std::string, std::string>& slots,
                       std::size_t label, std::size_t budget,
                       const Tokenizer& tok = Tokenizer::standard());

/// Deterministic, class-balanced (within one) synthetic dataset, n >= 10.
Dataset gen_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed);

/// Seeded shuffle then split; returns (train, val).
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double train_frac,
                                          std::uint64_t seed);

/// One JSON object per line with the template's slot fields and the label
/// field. Blank lines are skipped. Inputs are truncated to
/// max_len - max_prompt_len tokens.
Dataset load_jsonl(const std::string& path, const TaskSpec& task, std::size_t max_len,
                   std::size_t max_prompt_len, const Tokenizer& tok = Tokenizer::standard());

/// Right-padded batch over the selected examples.
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);
Batch make_batch(const Dataset& data);

}  // namespace captlab
