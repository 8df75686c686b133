#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace captlab {

enum class AttentionMode { bidirectional, causal };
enum class HeadKind { first_token, last_nonpad_token };

std::string_view mode_name(AttentionMode mode);
AttentionMode parse_mode(std::string_view name);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 256;
  // Longest sequence the model accepts, prompt tokens included.
  std::size_t max_len = 512;
  std::size_t num_classes = 2;
  AttentionMode mode = AttentionMode::bidirectional;
  // Unset means the mode default: trainable for causal, frozen for bidirectional.
  std::optional<bool> head_trainable;
  double ln_eps = 1e-5;
  std::uint64_t backbone_seed = 0;
  // Parameter total used for ratio reporting; 0 means count the instantiated weights.
  double declared_backbone_params = 0.0;

  HeadKind head_kind() const {
    return mode == AttentionMode::causal ? HeadKind::last_nonpad_token : HeadKind::first_token;
  }
  bool classifier_trainable() const {
    return head_trainable.value_or(mode == AttentionMode::causal);
  }
  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const;

  /// Analytic count of backbone weights (embeddings, layers, final norm, head).
  std::size_t backbone_param_count() const;
  double backbone_total() const;

  // Accounting-only presets; their weights are never instantiated.
  static ModelConfig t5base();
  static ModelConfig llama1b();
  static ModelConfig preset(std::string_view name);
};

}  // namespace captlab
