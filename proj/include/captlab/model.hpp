#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "captlab/batch.hpp"
#include "captlab/config.hpp"
#include "captlab/prompts.hpp"
#include "captlab/tensor.hpp"

namespace captlab {

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_qkv, b_qkv;  // [d x 3d], [3d]
  Tensor w_out, b_out;  // [d x d], [d]
  Tensor ln2_gain, ln2_bias;
  Tensor w_ff1, b_ff1;  // [d x d_ff], [d_ff]
  Tensor w_ff2, b_ff2;  // [d_ff x d], [d]
};

/// Frozen transformer weights. All tensors are created with requires_grad
/// off; only the classifier head may be switched on.
struct Backbone {
  Tensor token_embedding;     // [vocab x d]
  Tensor position_embedding;  // [max_len x d]
  std::vector<LayerWeights> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor head_weight, head_bias;  // [d x C], [C]

  static Backbone init(const ModelConfig& config);

  /// Every tensor with its checkpoint name, head last.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::size_t parameter_count() const;
  Backbone clone() const;
};

/// Per-layer record of a captured forward pass.
struct LayerTrace {
  std::size_t prompt_count = 0;
  std::vector<TokenRole> prompt_roles;  // positions 0..prompt_count-1
  Tensor processed_prompt;              // [B*P x d]
  Tensor hidden;                        // H^i, [B*T x d]
  std::size_t seq_len = 0;              // P + T
  std::vector<double> attention;        // [B][heads][seq_len][seq_len]
  std::vector<double> attention_logits; // same layout, scaled scores before softmax
};

struct ForwardTrace {
  std::size_t batch_size = 0;
  std::size_t input_len = 0;  // T
  std::size_t heads = 0;
  std::vector<std::uint8_t> mask;  // B*T copy of the batch mask
  std::vector<std::vector<std::size_t>> structural_indices;
  Tensor embeddings;  // E, [B*T x d]
  std::vector<LayerTrace> layers;

  double attention_at(std::size_t layer, std::size_t b, std::size_t head, std::size_t q,
                      std::size_t k) const;
  /// Positions of layer `layer` (0-based) that hold prompt tokens.
  std::vector<std::size_t> prompt_positions(std::size_t layer) const;
};

struct LayerOutput {
  Tensor processed_prompt;  // [B*P x d]
  Tensor hidden;            // [B*T x d]
  std::vector<double> attention;  // filled only when captured
  std::vector<double> attention_logits;
};

struct ForwardResult {
  Tensor logits;  // [B x C]
  std::optional<ForwardTrace> trace;
};

/// (P+T)x(P+T) visibility mask, row = query: 1 where key <= query.
std::vector<std::uint8_t> build_causal_mask(std::size_t prompt_len, std::size_t input_len);

class Model {
 public:
  explicit Model(ModelConfig config);
  Model(ModelConfig config, Backbone backbone);

  const ModelConfig& config() const { return config_; }
  const Backbone& backbone() const { return backbone_; }
  Backbone& backbone() { return backbone_; }

  /// Token plus position embedding; padded rows are zero. [B*T x d].
  Tensor embed(const Batch& batch) const;

  /// One transformer layer over [prompt ; hidden] for every example.
  /// `layer_index` is 1-based.
  LayerOutput layer_forward(std::size_t layer_index, const Tensor& prompt_tokens,
                            std::size_t prompt_count, const Tensor& hidden, const Batch& batch,
                            bool capture) const;

  ForwardResult forward(const Batch& batch, const PromptStrategy& strategy,
                        bool capture = false) const;

  /// Final hidden states H^N, [B*T x d], before the classifier.
  Tensor encode(const Batch& batch, const PromptStrategy& strategy) const;

  /// Picks each example's designated position, final norm, linear head.
  Tensor classify(const Tensor& final_hidden, const Batch& batch) const;
  std::size_t classifier_position(const Batch& batch, std::size_t b) const;

  void set_head_trainable(bool trainable);
  Model clone() const;

 private:
  ModelConfig config_;
  Backbone backbone_;

  Tensor run_layers(const Batch& batch, const PromptStrategy& strategy,
                    std::optional<ForwardTrace>* trace) const;
};

}  // namespace captlab
