#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "captlab/batch.hpp"
#include "captlab/config.hpp"
#include "captlab/tensor.hpp"

namespace captlab {

/// Layers (1-based) at which a capsule strategy injects its token.
struct DepthSet {
  enum class Kind { input_only, first_half, latter_half, odd_layers, all_layers, explicit_list };
  Kind kind = Kind::all_layers;
  std::vector<std::size_t> layers;  // explicit_list only

  std::vector<std::size_t> resolve(std::size_t n_layers) const;
  std::string name() const;
  // Accepts input, first_half, latter_half, odd, all, or a comma list like "1,3".
  static DepthSet parse(std::string_view text);
};

struct Variant {
  enum class Tag { addition, prepending, extraction, projection };
  Tag tag = Tag::addition;
  std::size_t kernel_width = 3;  // extraction
  std::size_t rank = 8;          // projection

  std::string name() const;
  static Variant parse(std::string_view text);
};

struct NoPrompt {};
struct Shallow {
  std::size_t length = 1;
};
struct Deep {
  std::size_t length = 1;
};
struct Capsule {
  Variant variant;
  DepthSet depth;
};
/// Parameter-free segment-pooled copies of E, prepended before an optional
/// set of deep prompts.
struct PooledInstance {
  std::size_t k = 1;
  std::optional<Deep> base;
};
struct InstanceOnly {};

using StrategyKind = std::variant<NoPrompt, Shallow, Deep, Capsule, PooledInstance, InstanceOnly>;

std::string strategy_name(const StrategyKind& kind);

/// Learnable capsule vectors p^i plus the variant-specific extras.
struct CapsuleParams {
  std::map<std::size_t, Tensor> p;            // layer -> [d]
  std::map<std::size_t, Tensor> conv_kernel;  // layer -> [width x d]
  std::map<std::size_t, Tensor> conv_bias;    // layer -> [d]
  std::map<std::size_t, Tensor> proj_down;    // layer -> [d x rank]
  std::map<std::size_t, Tensor> proj_up;      // layer -> [rank x d]
};

/// What the model hands the strategy before running layer `layer`.
struct LayerContext {
  std::size_t layer = 1;  // 1-based
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  const Tensor* embeddings = nullptr;   // E, [B*T x d]
  const Tensor* prev_hidden = nullptr;  // H^{i-1} (E at layer 1), [B*T x d]
  // Processed prompt rows from the most recent layer that had any, [B*carried_len x d].
  const Tensor* carried = nullptr;
  std::size_t carried_len = 0;
  std::span<const std::uint8_t> mask;  // B*T
};

struct LayerPrompt {
  Tensor tokens;       // [B*count x d]; example b owns rows [b*count, (b+1)*count)
  std::size_t count = 0;
  std::vector<TokenRole> roles;  // one per prompt position
};

struct ParamCount {
  std::size_t trainable = 0;  // strategy parameters only
  std::size_t head = 0;       // classifier head, when it trains
  double backbone_total = 0.0;
  double ratio = 0.0;  // trainable / backbone_total
};

/// Analytic parameter accounting; never allocates model-sized buffers.
ParamCount count_strategy_params(const StrategyKind& kind, const ModelConfig& config);

/// Formats a ratio the way parameter tables print it: "0.53%" at or above
/// 0.01%, one significant digit in scientific form ("4e-3%") below.
std::string format_param_percent(double ratio);

class PromptStrategy {
 public:
  PromptStrategy() = default;

  /// Allocates and seeds the parameter bundle for `kind`.
  static PromptStrategy create(const StrategyKind& kind, const ModelConfig& config,
                               std::uint64_t seed);

  /// Pooled instance tokens over a trained Deep strategy, reading frozen
  /// copies of its prompt blocks.
  static PromptStrategy pooled_over(const PromptStrategy& deep, std::size_t k);

  const StrategyKind& kind() const { return kind_; }
  std::string name() const { return strategy_name(kind_); }
  std::string describe() const;  // key=value lines

  LayerPrompt layer_prompt(const LayerContext& ctx) const;

  /// Trainable tensors with stable names (checkpoint keys).
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::size_t trainable_count() const;
  std::size_t max_prompt_len() const;

  /// Throws ConfigError when the strategy cannot run on this model.
  void check_config(const ModelConfig& config) const;

  /// Fresh learnable block P^i for layer i (Deep and pooled-over-Deep only).
  const Tensor& deep_block(std::size_t layer) const;
  const CapsuleParams& capsule() const { return capsule_; }
  CapsuleParams& capsule() { return capsule_; }

  /// Copy with independent parameter storage.
  PromptStrategy clone() const;

 private:
  StrategyKind kind_ = NoPrompt{};
  std::size_t d_model_ = 0;
  std::size_t n_layers_ = 0;
  std::vector<std::size_t> active_layers_;
  std::map<std::size_t, Tensor> deep_;  // layer -> [len x d]
  std::optional<Tensor> shallow_;       // [len x d]
  CapsuleParams capsule_;

  LayerPrompt capsule_prompt(const Capsule& c, const LayerContext& ctx) const;
};

// Single-example forms of the guidance constructions. The batched versions
// used by the model go through the same code.

/// Capsule for one example: p + mean over [prev_processed rows ; unpadded
/// hidden rows]. `p` may be null (treated as zero); `prev_processed` may be
/// null, a [d] vector, or an [r x d] block.
Tensor capsule_token(const Tensor* p, const Tensor* prev_processed, const Tensor& prev_hidden,
                     std::span<const std::uint8_t> mask);

/// capsule_token with p = 0.
Tensor instance_only_token(const Tensor* prev_processed, const Tensor& prev_hidden,
                           std::span<const std::uint8_t> mask);

/// Splits the unpadded rows of E[T x d] into k contiguous near-equal segments
/// (earlier segments take the remainder) and mean-pools each: [k x d].
Tensor pooled_instance_tokens(const Tensor& embeddings, std::span<const std::uint8_t> mask,
                              std::size_t k);

/// Segment sizes used by pooled_instance_tokens.
std::vector<std::size_t> pooled_segment_sizes(std::size_t length, std::size_t k);

/// Batched mean over [carried rows of b ; unpadded hidden rows of b], [B x d].
Tensor batched_capsule_mean(const Tensor* carried, std::size_t carried_len, const Tensor& hidden,
                            std::span<const std::uint8_t> mask, std::size_t batch,
                            std::size_t seq_len);

Tensor batched_pooled_tokens(const Tensor& embeddings, std::span<const std::uint8_t> mask,
                             std::size_t batch, std::size_t seq_len, std::size_t k);

}  // namespace captlab
