#include "captlab/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "captlab/errors.hpp"
#include "captlab/ops.hpp"

namespace captlab {
namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), false);
}

double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

Backbone Backbone::init(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  std::mt19937_64 rng(config.backbone_seed);
  Backbone bb;
  bb.token_embedding = normal_tensor({config.vocab_size, d}, 1.0, rng);
  bb.position_embedding = normal_tensor({config.max_len, d}, 1.0, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.ln1_gain = Tensor::full({d}, 1.0);
    w.ln1_bias = Tensor::zeros({d});
    w.w_qkv = normal_tensor({d, 3 * d}, fan_in_std(d), rng);
    w.b_qkv = Tensor::zeros({3 * d});
    w.w_out = normal_tensor({d, d}, fan_in_std(d), rng);
    w.b_out = Tensor::zeros({d});
    w.ln2_gain = Tensor::full({d}, 1.0);
    w.ln2_bias = Tensor::zeros({d});
    w.w_ff1 = normal_tensor({d, config.d_ff}, fan_in_std(d), rng);
    w.b_ff1 = Tensor::zeros({config.d_ff});
    w.w_ff2 = normal_tensor({config.d_ff, d}, fan_in_std(config.d_ff), rng);
    w.b_ff2 = Tensor::zeros({d});
    bb.layers.push_back(std::move(w));
  }
  bb.final_ln_gain = Tensor::full({d}, 1.0);
  bb.final_ln_bias = Tensor::zeros({d});
  bb.head_weight = normal_tensor({d, config.num_classes}, fan_in_std(d), rng);
  bb.head_bias = Tensor::zeros({config.num_classes});
  return bb;
}

std::vector<std::pair<std::string, Tensor>> Backbone::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed.token", token_embedding);
  out.emplace_back("embed.position", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l + 1) + ".";
    const LayerWeights& w = layers[l];
    out.emplace_back(p + "ln1.gain", w.ln1_gain);
    out.emplace_back(p + "ln1.bias", w.ln1_bias);
    out.emplace_back(p + "attn.w_qkv", w.w_qkv);
    out.emplace_back(p + "attn.b_qkv", w.b_qkv);
    out.emplace_back(p + "attn.w_out", w.w_out);
    out.emplace_back(p + "attn.b_out", w.b_out);
    out.emplace_back(p + "ln2.gain", w.ln2_gain);
    out.emplace_back(p + "ln2.bias", w.ln2_bias);
    out.emplace_back(p + "ff.w1", w.w_ff1);
    out.emplace_back(p + "ff.b1", w.b_ff1);
    out.emplace_back(p + "ff.w2", w.w_ff2);
    out.emplace_back(p + "ff.b2", w.b_ff2);
  }
  out.emplace_back("final_ln.gain", final_ln_gain);
  out.emplace_back("final_ln.bias", final_ln_bias);
  out.emplace_back("head.weight", head_weight);
  out.emplace_back("head.bias", head_bias);
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

Backbone Backbone::clone() const {
  Backbone bb = *this;
  bb.token_embedding = token_embedding.clone();
  bb.position_embedding = position_embedding.clone();
  for (LayerWeights& w : bb.layers) {
    for (Tensor* t : {&w.ln1_gain, &w.ln1_bias, &w.w_qkv, &w.b_qkv, &w.w_out, &w.b_out,
                      &w.ln2_gain, &w.ln2_bias, &w.w_ff1, &w.b_ff1, &w.w_ff2, &w.b_ff2}) {
      *t = t->clone();
    }
  }
  bb.final_ln_gain = final_ln_gain.clone();
  bb.final_ln_bias = final_ln_bias.clone();
  bb.head_weight = head_weight.clone();
  bb.head_bias = head_bias.clone();
  return bb;
}

double ForwardTrace::attention_at(std::size_t layer, std::size_t b, std::size_t head,
                                  std::size_t q, std::size_t k) const {
  const LayerTrace& lt = layers.at(layer);
  const std::size_t L = lt.seq_len;
  return lt.attention.at(((b * heads + head) * L + q) * L + k);
}

std::vector<std::size_t> ForwardTrace::prompt_positions(std::size_t layer) const {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < layers.at(layer).prompt_count; ++p) out.push_back(p);
  return out;
}

std::vector<std::uint8_t> build_causal_mask(std::size_t prompt_len, std::size_t input_len) {
  const std::size_t L = prompt_len + input_len;
  std::vector<std::uint8_t> m(L * L, 0);
  for (std::size_t q = 0; q < L; ++q) {
    for (std::size_t k = 0; k <= q; ++k) m[q * L + k] = 1;
  }
  return m;
}

Model::Model(ModelConfig config) : config_(config), backbone_(Backbone::init(config)) {
  set_head_trainable(config_.classifier_trainable());
}

Model::Model(ModelConfig config, Backbone backbone)
    : config_(config), backbone_(std::move(backbone)) {
  config_.validate();
  set_head_trainable(config_.classifier_trainable());
}

void Model::set_head_trainable(bool trainable) {
  config_.head_trainable = trainable;
  backbone_.head_weight.set_requires_grad(trainable);
  backbone_.head_bias.set_requires_grad(trainable);
}

Model Model::clone() const { return Model(config_, backbone_.clone()); }

Tensor Model::embed(const Batch& batch) const {
  batch.validate();
  const std::size_t B = batch.batch_size, T = batch.seq_len;
  if (T > config_.max_len) {
    throw ContractError("sequence length " + std::to_string(T) + " exceeds max_len " +
                        std::to_string(config_.max_len) + "; truncate upstream");
  }
  std::vector<std::size_t> ids(B * T), positions(B * T);
  std::vector<double> keep(B * T);
  for (std::size_t i = 0; i < B * T; ++i) {
    const std::int32_t id = batch.token_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(config_.vocab_size));
    }
    ids[i] = static_cast<std::size_t>(id);
    positions[i] = i % T;
    keep[i] = batch.mask[i] ? 1.0 : 0.0;
  }
  Tensor tok = gather_rows(backbone_.token_embedding, ids);
  Tensor pos = gather_rows(backbone_.position_embedding, positions);
  return scale_rows(add(tok, pos), keep);
}

LayerOutput Model::layer_forward(std::size_t layer_index, const Tensor& prompt_tokens,
                                 std::size_t prompt_count, const Tensor& hidden,
                                 const Batch& batch, bool capture) const {
  if (layer_index < 1 || layer_index > config_.n_layers) {
    throw ContractError("layer index " + std::to_string(layer_index) + " out of range");
  }
  const std::size_t d = config_.d_model, B = batch.batch_size, T = batch.seq_len;
  const std::size_t P = prompt_count, L = P + T;
  if (hidden.rank() != 2 || hidden.cols() != d || hidden.rows() != B * T) {
    throw ShapeError("layer_forward: hidden " + shape_str(hidden.shape()) + " for batch " +
                     std::to_string(B) + "x" + std::to_string(T) + "x" + std::to_string(d));
  }
  if (P > 0 && (prompt_tokens.rank() != 2 || prompt_tokens.cols() != d ||
                prompt_tokens.rows() != B * P)) {
    throw ShapeError("layer_forward: prompt block " + shape_str(prompt_tokens.shape()) +
                     " does not match " + std::to_string(B) + "x" + std::to_string(P) + "x" +
                     std::to_string(d));
  }
  const LayerWeights& w = backbone_.layers[layer_index - 1];

  Tensor x = hidden;
  std::vector<std::size_t> prompt_rows, hidden_rows;
  if (P > 0) {
    const Tensor parts[] = {prompt_tokens, hidden};
    Tensor stacked = concat_rows(parts);
    std::vector<std::size_t> order;
    order.reserve(B * L);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t p = 0; p < P; ++p) {
        prompt_rows.push_back(order.size());
        order.push_back(b * P + p);
      }
      for (std::size_t t = 0; t < T; ++t) {
        hidden_rows.push_back(order.size());
        order.push_back(B * P + b * T + t);
      }
    }
    x = gather_rows(stacked, order);
  }

  AttentionLayout layout;
  layout.batch = B;
  layout.seq_len = L;
  layout.heads = config_.n_heads;
  layout.causal = config_.mode == AttentionMode::causal;
  layout.key_valid.resize(B * L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < L; ++k) {
      layout.key_valid[b * L + k] = k < P ? 1 : batch.mask[b * T + (k - P)];
    }
  }

  LayerOutput out;
  Tensor h = layer_norm(x, w.ln1_gain, w.ln1_bias, config_.ln_eps);
  Tensor qkv = add_row(matmul(h, w.w_qkv), w.b_qkv);
  Tensor att = attention(qkv, layout, capture ? &out.attention : nullptr,
                         capture ? &out.attention_logits : nullptr);
  x = add(x, add_row(matmul(att, w.w_out), w.b_out));
  Tensor h2 = layer_norm(x, w.ln2_gain, w.ln2_bias, config_.ln_eps);
  Tensor ff = add_row(matmul(gelu(add_row(matmul(h2, w.w_ff1), w.b_ff1)), w.w_ff2), w.b_ff2);
  x = add(x, ff);

  std::vector<double> keep(B * T);
  for (std::size_t i = 0; i < B * T; ++i) keep[i] = batch.mask[i] ? 1.0 : 0.0;
  if (P > 0) {
    out.processed_prompt = gather_rows(x, prompt_rows);
    out.hidden = scale_rows(gather_rows(x, hidden_rows), keep);
  } else {
    out.processed_prompt = Tensor::zeros({0, d});
    out.hidden = scale_rows(x, keep);
  }
  return out;
}

ForwardResult Model::forward(const Batch& batch, const PromptStrategy& strategy,
                             bool capture) const {
  ForwardResult result;
  const Tensor hidden = run_layers(batch, strategy, capture ? &result.trace : nullptr);
  result.logits = classify(hidden, batch);
  return result;
}

Tensor Model::encode(const Batch& batch, const PromptStrategy& strategy) const {
  return run_layers(batch, strategy, nullptr);
}

Tensor Model::run_layers(const Batch& batch, const PromptStrategy& strategy,
                         std::optional<ForwardTrace>* trace) const {
  strategy.check_config(config_);
  const std::size_t B = batch.batch_size, T = batch.seq_len;
  if (T + strategy.max_prompt_len() > config_.max_len) {
    throw ConfigError("input length " + std::to_string(T) + " plus " +
                      std::to_string(strategy.max_prompt_len()) + " prompt tokens exceeds max_len " +
                      std::to_string(config_.max_len));
  }
  Tensor E = embed(batch);
  const bool capture = trace != nullptr;
  if (capture) {
    ForwardTrace tr;
    tr.batch_size = B;
    tr.input_len = T;
    tr.heads = config_.n_heads;
    tr.mask = batch.mask;
    tr.structural_indices = batch.structural_indices;
    tr.embeddings = E;
    *trace = std::move(tr);
  }

  Tensor hidden = E;
  std::optional<Tensor> carried;
  std::size_t carried_len = 0;
  for (std::size_t layer = 1; layer <= config_.n_layers; ++layer) {
    LayerContext ctx;
    ctx.layer = layer;
    ctx.batch_size = B;
    ctx.seq_len = T;
    ctx.embeddings = &E;
    ctx.prev_hidden = &hidden;
    ctx.carried = carried ? &*carried : nullptr;
    ctx.carried_len = carried_len;
    ctx.mask = batch.mask;
    LayerPrompt lp = strategy.layer_prompt(ctx);

    LayerOutput lo = layer_forward(layer, lp.tokens, lp.count, hidden, batch, capture);
    hidden = lo.hidden;
    if (lp.count > 0) {
      carried = lo.processed_prompt;
      carried_len = lp.count;
    }
    if (capture) {
      LayerTrace lt;
      lt.prompt_count = lp.count;
      lt.prompt_roles = std::move(lp.roles);
      lt.processed_prompt = lo.processed_prompt;
      lt.hidden = lo.hidden;
      lt.seq_len = lp.count + T;
      lt.attention = std::move(lo.attention);
      lt.attention_logits = std::move(lo.attention_logits);
      (*trace)->layers.push_back(std::move(lt));
    }
  }
  return hidden;
}

std::size_t Model::classifier_position(const Batch& batch, std::size_t b) const {
  const auto mask = batch.mask_row(b);
  if (config_.head_kind() == HeadKind::first_token) {
    for (std::size_t t = 0; t < mask.size(); ++t) {
      if (mask[t]) return t;
    }
  } else {
    for (std::size_t t = mask.size(); t-- > 0;) {
      if (mask[t]) return t;
    }
  }
  throw ContractError("cannot classify an empty sequence");
}

Tensor Model::classify(const Tensor& final_hidden, const Batch& batch) const {
  std::vector<std::size_t> rows(batch.batch_size);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    rows[b] = b * batch.seq_len + classifier_position(batch, b);
  }
  Tensor picked = gather_rows(final_hidden, rows);
  Tensor normed = layer_norm(picked, backbone_.final_ln_gain, backbone_.final_ln_bias, config_.ln_eps);
  return add_row(matmul(normed, backbone_.head_weight), backbone_.head_bias);
}

}  // namespace captlab
