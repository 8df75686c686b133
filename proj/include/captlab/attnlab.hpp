#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "captlab/batch.hpp"
#include "captlab/errors.hpp"
#include "captlab/model.hpp"

namespace captlab {

/// Post-softmax scores of one (layer, head), averaged over the examples of a
/// captured batch.
struct AttentionRecord {
  std::size_t layer = 1;  // 1-based
  std::size_t head = 0;   // 0-based
  std::size_t q = 0, k = 0;
  std::vector<double> scores;  // q x k, row-major
  std::vector<TokenRole> q_labels, k_labels;
};

/// Role of every position of a layer's [prompt ; input] sequence for one example.
std::vector<TokenRole> position_roles(const ForwardTrace& trace, std::size_t layer_index,
                                      std::size_t example);

enum class ScoreKind { probabilities, logits };

/// One record per (layer, head). All examples must share mask and structural
/// positions (bin variable-length data by length first). Logit records are
/// for viewing only; the anchor metrics expect probabilities.
std::vector<AttentionRecord> capture(const ForwardTrace& trace,
                                     ScoreKind kind = ScoreKind::probabilities);

struct Selector {
  enum class Kind { all, per_layer, single_head };
  Kind kind = Kind::all;
  std::size_t layer = 1;
  std::size_t head = 0;

  static Selector all() { return {}; }
  static Selector per_layer(std::size_t layer) { return {Kind::per_layer, layer, 0}; }
  static Selector single_head(std::size_t layer, std::size_t head) {
    return {Kind::single_head, layer, head};
  }
  bool matches(const AttentionRecord& r) const;
  std::string name() const;  // "all", "layer2", "head2-1"
  static Selector parse(std::string_view text);
};

struct AggregatedMap {
  std::size_t q = 0, k = 0;
  std::vector<double> scores;
  std::vector<TokenRole> q_labels, k_labels;
  std::string selector = "all";

  double at(std::size_t r, std::size_t c) const { return scores[r * k + c]; }
};

class AggregationError : public Error {
 public:
  using Error::Error;
};

/// Uniform elementwise mean over the selected records.
AggregatedMap aggregate(const std::vector<AttentionRecord>& records, const Selector& selector);

struct AnchorMetrics {
  std::optional<double> prompt_self_mass;
  std::optional<double> prompt_to_structural_mass;
  std::optional<double> input_to_prompt_mass;
};

/// Guidance tokens (prompt, capsule, pooled) count as "prompt" here; input
/// queries include structural ones. A metric whose query or key class is
/// empty is absent.
AnchorMetrics anchor_metrics(const AggregatedMap& map);

/// Structural mass a prompt row would get from uniform attention over the
/// non-pad keys: structural keys / non-pad keys.
double uniform_structural_baseline(const AggregatedMap& map);

void emit_csv(const AggregatedMap& map, const std::string& path);
AggregatedMap parse_csv(const std::string& path);
void emit_heatmap(const AggregatedMap& map, const std::string& path);

/// Appends one JSON line describing the metrics of (run, selector).
void append_metrics_jsonl(const std::string& path, const std::string& run,
                          const std::string& selector, const AnchorMetrics& metrics);

}  // namespace captlab
