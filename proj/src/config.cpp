#include "captlab/config.hpp"

#include <string>

#include "captlab/errors.hpp"

namespace captlab {

std::string_view mode_name(AttentionMode mode) {
  return mode == AttentionMode::causal ? "causal" : "bidirectional";
}

AttentionMode parse_mode(std::string_view name) {
  if (name == "causal") return AttentionMode::causal;
  if (name == "bidirectional") return AttentionMode::bidirectional;
  throw ConfigError("unknown attention mode '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (vocab_size == 0 || max_len == 0 || num_classes < 2) {
    throw ConfigError("vocab_size, max_len must be positive and num_classes >= 2");
  }
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

std::size_t ModelConfig::backbone_param_count() const {
  const std::size_t d = d_model;
  const std::size_t per_layer = 2 * d                  // ln1
                                + d * 3 * d + 3 * d    // qkv
                                + d * d + d            // out projection
                                + 2 * d                // ln2
                                + d * d_ff + d_ff      // ff in
                                + d_ff * d + d;        // ff out
  return vocab_size * d + max_len * d + n_layers * per_layer + 2 * d + d * num_classes +
         num_classes;
}

double ModelConfig::backbone_total() const {
  return declared_backbone_params > 0.0 ? declared_backbone_params
                                        : static_cast<double>(backbone_param_count());
}

ModelConfig ModelConfig::t5base() {
  ModelConfig c;
  c.d_model = 768;
  c.n_layers = 12;
  c.n_heads = 12;
  c.d_ff = 3072;
  c.vocab_size = 32128;
  c.max_len = 512;
  c.mode = AttentionMode::bidirectional;
  c.declared_backbone_params = 220e6;
  return c;
}

ModelConfig ModelConfig::llama1b() {
  ModelConfig c;
  c.d_model = 2048;
  c.n_layers = 16;
  c.n_heads = 32;
  c.d_ff = 8192;
  c.vocab_size = 128256;
  c.max_len = 512;
  c.mode = AttentionMode::causal;
  c.declared_backbone_params = 1.236e9;
  return c;
}

ModelConfig ModelConfig::preset(std::string_view name) {
  if (name == "t5base") return t5base();
  if (name == "llama1b") return llama1b();
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

}  // namespace captlab
