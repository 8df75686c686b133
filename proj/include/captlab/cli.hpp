#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "captlab/config.hpp"
#include "captlab/errors.hpp"
#include "captlab/prompts.hpp"
#include "captlab/train.hpp"

namespace captlab::cli {

/// Bad command line or configuration; maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Every knob a subcommand reads, with its documented default.
struct RunConfig {
  // data
  std::string task = "order_sensitive";
  std::string data;       // JSONL train file; synthetic data when empty
  std::string test_data;  // JSONL test file; the validation split when empty
  std::size_t n = 2000;
  std::size_t n_test = 500;
  double train_frac = 0.9;
  // seeds; the data and backbone seeds follow `seed` unless set
  std::uint64_t seed = 1;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::uint64_t> backbone_seed;
  // strategy
  std::string strategy = "capt";
  std::string variant = "addition";
  std::string depth = "all";
  std::size_t len = 1;
  std::size_t k = 1;
  std::size_t kernel_width = 3;
  std::size_t rank = 8;
  // optimisation
  double lr = 1e-2;
  std::vector<double> lr_grid = {1e-1, 1e-2, 1e-3};
  bool grid_lr = false;
  std::size_t epochs = 50;
  std::size_t patience = 5;
  std::size_t batch_size = 32;
  std::size_t eval_every = 0;
  std::size_t max_steps = 0;
  std::vector<std::size_t> lengths = {1, 5, 10, 20, 50, 100};
  // model
  std::string preset;  // accounting-only presets for `params`
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_len = 64;
  std::string mode = "bidirectional";
  std::optional<bool> head_trainable;
  // masked-token warm-up of the backbone; 0 keeps the random initialization
  std::size_t pretrain_steps = 0;
  std::size_t pretrain_n = 10000;
  // analysis and I/O
  std::vector<std::size_t> ks = {1, 2, 3, 4, 10};
  std::string selector = "all";
  std::size_t attn_examples = 64;
  bool export_logits = false;  // attn also writes pre-softmax scores
  std::string checkpoint;
  std::string out = "runs";

  /// Sets one key from its text form. Unknown keys and malformed values
  /// raise UsageError.
  void apply(const std::string& key, const std::string& value);

  /// Resolved key/value pairs in text form, sorted by key.
  std::map<std::string, std::string> resolved() const;
  std::string to_json() const;

  std::uint64_t effective_data_seed() const { return data_seed.value_or(seed); }
  std::uint64_t effective_backbone_seed() const { return backbone_seed.value_or(seed); }

  ModelConfig model_config() const;
  StrategyKind strategy_kind() const;
  TrainConfig train_config() const;
  PretrainConfig pretrain_config() const;
};

/// Defaults, then the file (key=value lines or one JSON object), then the
/// overrides in order.
RunConfig parse_config(const std::string& file_text,
                       const std::vector<std::pair<std::string, std::string>>& overrides);

/// Backbone seeded from the config, warmed up on unlabeled task text when
/// `pretrain_steps` is set.
Model build_model(const RunConfig& cfg);

/// Train and validation from one shuffled split; test drawn separately with
/// its own seed unless a test file is given.
Splits build_splits(const RunConfig& cfg, std::size_t max_prompt_len);

/// Runs one subcommand. Returns 0 on success, 1 when the run fails, 2 on a
/// usage error.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace captlab::cli
