#include "captlab/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "captlab/errors.hpp"
#include "captlab/ops.hpp"

namespace captlab {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const Tensor& t : params) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

void restore(std::vector<Tensor>& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(snap[i].begin(), snap[i].end(), params[i].mutable_values().begin());
  }
}

std::size_t prompt_length_of(const StrategyKind& kind) {
  if (const auto* s = std::get_if<Shallow>(&kind)) return s->length;
  if (const auto* d = std::get_if<Deep>(&kind)) return d->length;
  if (const auto* p = std::get_if<PooledInstance>(&kind)) return p->k + (p->base ? p->base->length : 0);
  if (std::holds_alternative<Capsule>(kind) || std::holds_alternative<InstanceOnly>(kind)) return 1;
  return 0;
}

}  // namespace

void TrainConfig::validate() const {
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
}

double scheduled_lr(double base, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  return base * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

void optimizer_step(std::span<Tensor> params, AdamState& state, double lr,
                    const TrainConfig& config) {
  if (state.m.empty()) {
    for (const Tensor& t : params) {
      state.m.emplace_back(t.numel(), 0.0);
      state.v.emplace_back(t.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != t.numel()) throw ShapeError("optimizer state does not match parameters");
    if (!t.has_grad()) {
      // Zero gradient: the moments only decay.
      for (std::size_t j = 0; j < m.size(); ++j) {
        m[j] *= config.beta1;
        v[j] *= config.beta2;
      }
    }
    const auto g = t.has_grad() ? t.grad() : std::span<const double>{};
    auto x = t.mutable_values();
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (!g.empty()) {
        m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
        v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      }
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      x[j] -= lr * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
  }
}

std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

EvalResult score_predictions(std::span<const std::size_t> predicted,
                             std::span<const std::size_t> labels, std::size_t num_classes) {
  if (predicted.size() != labels.size()) throw ShapeError("prediction and label counts differ");
  EvalResult r;
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes || predicted[i] >= num_classes) {
      throw IndexError("class index out of range");
    }
    ++r.confusion[labels[i]][predicted[i]];
    if (labels[i] == predicted[i]) ++correct;
  }
  if (labels.empty()) return r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t tp = r.confusion[c][c], fp = 0, fn = 0;
    for (std::size_t o = 0; o < num_classes; ++o) {
      if (o == c) continue;
      fp += r.confusion[o][c];
      fn += r.confusion[c][o];
    }
    const std::size_t denom = 2 * tp + fp + fn;
    f1_sum += denom ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 0.0;
  }
  r.macro_f1 = f1_sum / static_cast<double>(num_classes);
  return r;
}

EvalResult evaluate(const Model& model, const PromptStrategy& strategy, const Dataset& split,
                    std::size_t batch_size) {
  if (split.empty()) throw ContractError("cannot evaluate an empty split");
  NoGradGuard no_grad;
  std::vector<std::size_t> predicted, labels;
  const std::size_t C = model.config().num_classes;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, split.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(split, idx);
    const Tensor logits = model.forward(batch, strategy).logits;
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
      predicted.push_back(argmax_row(logits.values().subspan(b * C, C)));
      labels.push_back(batch.labels[b]);
    }
  }
  return score_predictions(predicted, labels, C);
}

std::vector<Tensor> trainable_tensors(const Model& model, const PromptStrategy& strategy) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : strategy.parameters()) out.push_back(t);
  if (model.config().classifier_trainable()) {
    out.push_back(model.backbone().head_weight);
    out.push_back(model.backbone().head_bias);
  }
  return out;
}

RunMetrics train_run(const TrainConfig& config, Model& model, PromptStrategy& strategy,
                     const Splits& data) {
  config.validate();
  if (data.train.empty() || data.val.empty()) throw ContractError("train and val splits must be nonempty");
  const auto start = Clock::now();

  RunMetrics rm;
  rm.strategy = strategy.name();
  rm.prompt_length = prompt_length_of(strategy.kind());
  rm.learning_rate = config.learning_rate;
  rm.seed = config.seed;
  const ParamCount pc = count_strategy_params(strategy.kind(), model.config());
  rm.trainable_params = strategy.trainable_count();
  rm.head_params = pc.head;
  rm.param_ratio = static_cast<double>(rm.trainable_params) / model.config().backbone_total();

  std::vector<Tensor> params = trainable_tensors(model, strategy);
  for (Tensor& t : params) t.zero_grad();

  auto best_snap = snapshot(params);
  auto fail = [&rm](const NumericError& e, std::size_t at) {
    rm.failed = true;
    rm.failed_step = at;
    rm.failure = e.what();
  };
  try {
    const EvalResult initial = evaluate(model, strategy, data.val);
    rm.best_val_score = initial.accuracy;
    rm.best_val_f1 = initial.macro_f1;
  } catch (const NumericError& e) {
    fail(e, 0);
  }

  const std::size_t n = data.train.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::size_t total_steps = steps_per_epoch * config.max_epochs;
  if (config.max_steps) total_steps = std::min(total_steps, config.max_steps);
  const std::size_t eval_every = config.eval_every ? config.eval_every : steps_per_epoch;

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  AdamState adam;
  std::size_t step = 0, rounds_without_gain = 0;
  bool stop = params.empty() || rm.failed;

  for (std::size_t epoch = 0; epoch < config.max_epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    ++rm.epochs_run;
    for (std::size_t s = 0; s < n && !stop; s += config.batch_size) {
      std::span<const std::size_t> idx(order.data() + s, std::min(config.batch_size, n - s));
      const Batch batch = make_batch(data.train, idx);
      try {
        for (Tensor& t : params) t.zero_grad();
        Tensor loss = cross_entropy_loss(model.forward(batch, strategy).logits, batch.labels);
        if (!std::isfinite(loss.item())) throw NumericError("loss is not finite");
        loss.backward();
        optimizer_step(params, adam, scheduled_lr(config.learning_rate, step, total_steps), config);
        rm.loss_curve.push_back(loss.item());
        ++step;
        if (step % eval_every == 0 || step == total_steps) {
          const EvalResult r = evaluate(model, strategy, data.val);
          if (r.accuracy > rm.best_val_score) {
            rm.best_val_score = r.accuracy;
            rm.best_val_f1 = r.macro_f1;
            rm.best_step = step;
            best_snap = snapshot(params);
            rounds_without_gain = 0;
          } else if (++rounds_without_gain >= config.patience) {
            stop = true;
          }
        }
      } catch (const NumericError& e) {
        fail(e, step);
        stop = true;
        break;
      }
      if (step >= total_steps) stop = true;
    }
  }
  rm.steps = step;
  for (Tensor& t : params) t.zero_grad();
  restore(params, best_snap);
  if (!rm.failed) {
    const EvalResult test = evaluate(model, strategy, data.test.empty() ? data.val : data.test);
    rm.test_score = test.accuracy;
    rm.test_f1 = test.macro_f1;
  }
  rm.wall_clock_seconds = seconds_since(start);
  return rm;
}

void GridSpec::validate() const {
  if (prompt_lengths.empty()) throw ConfigError("grid needs at least one prompt length");
}

const RunMetrics& GridResult::best() const {
  if (!best_index) throw ContractError("every grid run failed");
  return runs.at(*best_index);
}

GridResult grid_search(const TrainConfig& config, const GridSpec& grid,
                       const StrategyFamily& family, const Model& base, const Splits& data,
                       std::size_t threads) {
  grid.validate();
  struct Point {
    std::size_t length;
    double lr;
  };
  std::vector<Point> points;
  const std::vector<double> lrs =
      grid.learning_rates.empty() ? std::vector<double>{config.learning_rate} : grid.learning_rates;
  for (std::size_t len : grid.prompt_lengths) {
    for (double lr : lrs) points.push_back({len, lr});
  }

  GridResult result;
  result.runs.resize(points.size());
  std::vector<std::string> errors(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      TrainConfig cfg = config;
      cfg.learning_rate = points[i].lr;
      const auto start = Clock::now();
      try {
        Model model = base.clone();
        PromptStrategy strategy = PromptStrategy::create(family(points[i].length), model.config(), cfg.seed);
        result.runs[i] = train_run(cfg, model, strategy, data);
      } catch (const Error& e) {
        RunMetrics& rm = result.runs[i];
        rm.prompt_length = points[i].length;
        rm.learning_rate = points[i].lr;
        rm.seed = cfg.seed;
        rm.failed = true;
        rm.failure = e.what();
        rm.wall_clock_seconds = seconds_since(start);
      }
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, points.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    const RunMetrics& r = result.runs[i];
    result.total_wall_seconds += r.wall_clock_seconds;
    if (r.failed) continue;
    if (!result.best_index) {
      result.best_index = i;
      continue;
    }
    const RunMetrics& b = result.runs[*result.best_index];
    if (r.best_val_score > b.best_val_score ||
        (r.best_val_score == b.best_val_score && r.prompt_length < b.prompt_length)) {
      result.best_index = i;
    }
  }
  return result;
}

double pretrain_backbone(Model& model, const Dataset& corpus, const PretrainConfig& config) {
  if (config.steps == 0) return 0.0;
  if (corpus.empty()) throw ContractError("pretraining needs a nonempty corpus");
  if (config.batch_size < 1) throw ConfigError("pretraining batch_size must be >= 1");
  if (!(config.mask_rate > 0.0 && config.mask_rate < 1.0)) {
    throw ConfigError("mask_rate must lie in (0, 1)");
  }
  const std::size_t d = model.config().d_model, V = model.config().vocab_size;
  std::vector<Tensor> params;
  for (auto& [name, t] : model.backbone().named()) {
    if (name.rfind("head.", 0) == 0) continue;
    params.push_back(t);
  }
  for (Tensor& t : params) t.set_requires_grad(true);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> init(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<double> w(d * V);
  for (double& x : w) x = init(rng);
  params.push_back(Tensor::from({d, V}, std::move(w), true));
  params.push_back(Tensor::zeros({V}, true));
  const Tensor& decoder = params[params.size() - 2];
  const Tensor& decoder_bias = params.back();

  const PromptStrategy none = PromptStrategy::create(NoPrompt{}, model.config(), 0);
  TrainConfig adam_cfg;
  AdamState adam;
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const std::size_t tail_from = config.steps - std::max<std::size_t>(1, config.steps / 10);
  double tail_sum = 0.0;
  std::size_t tail_count = 0;
  std::vector<std::size_t> idx(config.batch_size);
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (std::size_t& i : idx) i = pick(rng);
    Batch batch = make_batch(corpus, idx);
    std::vector<std::size_t> rows, targets;
    for (std::size_t i = 0; i < batch.token_ids.size(); ++i) {
      if (!batch.mask[i] || i % batch.seq_len == 0) continue;
      if (coin(rng) < config.mask_rate) {
        rows.push_back(i);
        targets.push_back(static_cast<std::size_t>(batch.token_ids[i]));
        batch.token_ids[i] = Tokenizer::kUnk;
      }
    }
    if (rows.empty()) continue;
    for (Tensor& t : params) t.zero_grad();
    const Tensor hidden = model.encode(batch, none);
    const Tensor normed = layer_norm(gather_rows(hidden, rows), model.backbone().final_ln_gain,
                                     model.backbone().final_ln_bias, model.config().ln_eps);
    Tensor loss = cross_entropy_loss(add_row(matmul(normed, decoder), decoder_bias), targets);
    loss.backward();
    optimizer_step(params, adam, scheduled_lr(config.learning_rate, step, config.steps), adam_cfg);
    if (step >= tail_from) {
      tail_sum += loss.item();
      ++tail_count;
    }
  }
  for (Tensor& t : params) {
    t.zero_grad();
    t.set_requires_grad(false);
  }
  return tail_count ? tail_sum / static_cast<double>(tail_count) : 0.0;
}

bool freeze_audit(const Model& before, const Model& after) {
  const auto a = before.backbone().named();
  const auto b = after.backbone().named();
  if (a.size() != b.size()) throw ContractError("freeze_audit: architectures differ");
  const bool skip_head = after.config().classifier_trainable();
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second.shape() != b[i].second.shape()) {
      throw ContractError("freeze_audit: tensor " + a[i].first + " does not match " + b[i].first);
    }
    if (skip_head && a[i].first.rfind("head.", 0) == 0) continue;
    const auto va = a[i].second.values(), vb = b[i].second.values();
    if (std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) != 0) same = false;
  }
  return same;
}

}  // namespace captlab
