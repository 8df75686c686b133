#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "captlab/data.hpp"
#include "captlab/model.hpp"
#include "captlab/prompts.hpp"

namespace captlab {

struct TrainConfig {
  double learning_rate = 1e-2;
  std::vector<double> lr_grid = {1e-1, 1e-2, 1e-3};
  std::size_t max_epochs = 50;
  std::size_t patience = 5;  // evaluation rounds without improvement
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  std::size_t eval_every = 0;  // steps; 0 means once per epoch
  std::size_t max_steps = 0;   // 0 means no cap beyond max_epochs
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Adam moments for one parameter list, in list order.
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Linear decay from `base` at step 0 to 0 at `total_steps`.
double scheduled_lr(double base, std::size_t step, std::size_t total_steps);

/// One bias-corrected Adam update using each tensor's accumulated gradient
/// (a tensor without a gradient counts as zero).
void optimizer_step(std::span<Tensor> params, AdamState& state, double lr,
                    const TrainConfig& config);

struct EvalResult {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

/// Accuracy and macro-F1 from predictions; a class with no true and no
/// predicted members contributes F1 = 0.
EvalResult score_predictions(std::span<const std::size_t> predicted,
                             std::span<const std::size_t> labels, std::size_t num_classes);

/// Index of the largest logit, the lowest index on ties.
std::size_t argmax_row(std::span<const double> row);

/// Inference-only evaluation in chunks of `batch_size` examples.
EvalResult evaluate(const Model& model, const PromptStrategy& strategy, const Dataset& split,
                    std::size_t batch_size = 64);

struct RunMetrics {
  std::string strategy;
  std::size_t prompt_length = 0;
  double learning_rate = 0.0;
  double best_val_score = 0.0;
  double best_val_f1 = 0.0;
  double test_score = 0.0;
  double test_f1 = 0.0;
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  std::size_t best_step = 0;
  double wall_clock_seconds = 0.0;
  std::size_t trainable_params = 0;
  std::size_t head_params = 0;
  double param_ratio = 0.0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::size_t failed_step = 0;
  std::string failure;
  std::vector<double> loss_curve;  // one entry per optimizer step
};

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Trains the strategy parameters (and the head when the model config makes
/// it trainable) with Adam and early stopping on validation accuracy. The
/// best validation snapshot is restored before the test evaluation. A
/// non-finite loss or operation ends the run with `failed` set.
RunMetrics train_run(const TrainConfig& config, Model& model, PromptStrategy& strategy,
                     const Splits& data);

/// Trainable tensors of a run: strategy parameters, then the head if it trains.
std::vector<Tensor> trainable_tensors(const Model& model, const PromptStrategy& strategy);

struct GridSpec {
  std::vector<std::size_t> prompt_lengths = {1, 5, 10, 20, 50, 100};
  std::vector<double> learning_rates;  // empty means the config learning rate

  void validate() const;
};

struct GridResult {
  std::optional<std::size_t> best_index;  // empty when every run failed
  double total_wall_seconds = 0.0;
  std::vector<RunMetrics> runs;  // length-major, then learning rate

  const RunMetrics& best() const;
};

using StrategyFamily = std::function<StrategyKind(std::size_t prompt_length)>;

/// One run per (length, learning rate) on clones of `base`. Best is the
/// highest validation accuracy; ties go to the shorter prompt, then the
/// earlier grid point. Failed runs are kept but never selected. Runs spread
/// over `threads` workers; total time is the sum of the run times.
GridResult grid_search(const TrainConfig& config, const GridSpec& grid,
                       const StrategyFamily& family, const Model& base, const Splits& data,
                       std::size_t threads = 1);

struct PretrainConfig {
  std::size_t steps = 0;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double mask_rate = 0.15;
  std::uint64_t seed = 1;
};

/// Masked-token warm-up of the backbone before it is frozen. A random
/// `mask_rate` share of the non-bos positions is replaced by the unk id and
/// predicted through a throwaway linear decoder on top of the final norm.
/// Every backbone tensor except the classifier head trains; afterwards all
/// of them are frozen again with empty gradients. Returns the mean loss over
/// the last tenth of the steps (0 when `steps` is 0).
double pretrain_backbone(Model& model, const Dataset& corpus, const PretrainConfig& config);

/// True iff every backbone tensor is bit-identical. The head is skipped when
/// `after` is configured to train it.
bool freeze_audit(const Model& before, const Model& after);

}  // namespace captlab
