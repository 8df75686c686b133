#include "captlab/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "captlab/attnlab.hpp"
#include "captlab/checkpoint.hpp"
#include "captlab/data.hpp"
#include "captlab/ops.hpp"
#include "json.hpp"

namespace captlab::cli {

// The warm-up corpus is drawn with its own seed.
Model build_model(const RunConfig& cfg) {
  Model model(cfg.model_config());
  const PretrainConfig pc = cfg.pretrain_config();
  if (pc.steps > 0) {
    const Dataset corpus =
        gen_synthetic(parse_synthetic(cfg.task), cfg.pretrain_n, cfg.effective_backbone_seed() + 2000003);
    pretrain_backbone(model, corpus, pc);
  }
  return model;
}

Splits build_splits(const RunConfig& cfg, std::size_t max_prompt_len) {
  const TaskSpec& task = builtin_task(cfg.task);
  const std::uint64_t ds = cfg.effective_data_seed();
  Splits s;
  Dataset all;
  if (!cfg.data.empty()) {
    all = load_jsonl(cfg.data, task, cfg.max_len, max_prompt_len);
  } else {
    all = gen_synthetic(parse_synthetic(cfg.task), cfg.n, ds);
  }
  std::tie(s.train, s.val) = split_dataset(all, cfg.train_frac, ds);
  if (!cfg.test_data.empty()) {
    s.test = load_jsonl(cfg.test_data, task, cfg.max_len, max_prompt_len);
  } else if (cfg.data.empty()) {
    s.test = gen_synthetic(parse_synthetic(cfg.task), cfg.n_test, ds + 1000003);
  } else {
    s.test = s.val;
  }
  return s;
}

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------ value parsing

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::logic_error&) {
    throw UsageError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::logic_error&) {
    throw UsageError(key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError(key + ": expected true or false, got '" + v + "'");
}

bool is_unset(const std::string& v) { return v.empty() || v == "auto" || v == "null"; }

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<json(const RunConfig&)> get;
};

template <class T>
json opt_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

const std::map<std::string, Field>& fields() {
  using C = RunConfig;
  auto str = [](std::string C::*m) {
    return Field{[m](C& c, const std::string& v) { c.*m = v; }, [m](const C& c) { return json(c.*m); }};
  };
  auto size = [](std::size_t C::*m, const char* key) {
    return Field{[m, key](C& c, const std::string& v) { c.*m = to_size(key, v); },
                 [m](const C& c) { return json(c.*m); }};
  };
  auto real = [](double C::*m, const char* key) {
    return Field{[m, key](C& c, const std::string& v) { c.*m = to_double(key, v); },
                 [m](const C& c) { return json(c.*m); }};
  };
  auto sizes = [](std::vector<std::size_t> C::*m, const char* key) {
    return Field{[m, key](C& c, const std::string& v) {
                   (c.*m).clear();
                   for (const auto& item : split_list(v)) (c.*m).push_back(to_size(key, item));
                 },
                 [m](const C& c) { return json(c.*m); }};
  };
  auto seed_opt = [](std::optional<std::uint64_t> C::*m, const char* key) {
    return Field{[m, key](C& c, const std::string& v) {
                   c.*m = is_unset(v) ? std::nullopt : std::optional(to_u64(key, v));
                 },
                 [m](const C& c) { return opt_json(c.*m); }};
  };
  static const std::map<std::string, Field> table = {
      {"task", str(&C::task)},
      {"data", str(&C::data)},
      {"test_data", str(&C::test_data)},
      {"n", size(&C::n, "n")},
      {"n_test", size(&C::n_test, "n_test")},
      {"train_frac", real(&C::train_frac, "train_frac")},
      {"seed", {[](C& c, const std::string& v) { c.seed = to_u64("seed", v); },
                [](const C& c) { return json(c.seed); }}},
      {"data_seed", seed_opt(&C::data_seed, "data_seed")},
      {"backbone_seed", seed_opt(&C::backbone_seed, "backbone_seed")},
      {"strategy", str(&C::strategy)},
      {"variant", str(&C::variant)},
      {"depth", str(&C::depth)},
      {"depth_set", str(&C::depth)},
      {"len", size(&C::len, "len")},
      {"k", size(&C::k, "k")},
      {"kernel_width", size(&C::kernel_width, "kernel_width")},
      {"rank", size(&C::rank, "rank")},
      {"lr", real(&C::lr, "lr")},
      {"lr_grid", {[](C& c, const std::string& v) {
                     c.lr_grid.clear();
                     for (const auto& item : split_list(v)) c.lr_grid.push_back(to_double("lr_grid", item));
                   },
                   [](const C& c) { return json(c.lr_grid); }}},
      {"grid_lr", {[](C& c, const std::string& v) { c.grid_lr = to_bool("grid_lr", v); },
                   [](const C& c) { return json(c.grid_lr); }}},
      {"epochs", size(&C::epochs, "epochs")},
      {"max_epochs", size(&C::epochs, "max_epochs")},
      {"patience", size(&C::patience, "patience")},
      {"batch_size", size(&C::batch_size, "batch_size")},
      {"eval_every", size(&C::eval_every, "eval_every")},
      {"max_steps", size(&C::max_steps, "max_steps")},
      {"lengths", sizes(&C::lengths, "lengths")},
      {"preset", str(&C::preset)},
      {"d_model", size(&C::d_model, "d_model")},
      {"n_layers", size(&C::n_layers, "n_layers")},
      {"n_heads", size(&C::n_heads, "n_heads")},
      {"d_ff", size(&C::d_ff, "d_ff")},
      {"max_len", size(&C::max_len, "max_len")},
      {"mode", str(&C::mode)},
      {"head_trainable", {[](C& c, const std::string& v) {
                            c.head_trainable = is_unset(v) ? std::nullopt
                                                           : std::optional(to_bool("head_trainable", v));
                          },
                          [](const C& c) { return opt_json(c.head_trainable); }}},
      {"pretrain_steps", size(&C::pretrain_steps, "pretrain_steps")},
      {"pretrain_n", size(&C::pretrain_n, "pretrain_n")},
      {"ks", sizes(&C::ks, "ks")},
      {"selector", str(&C::selector)},
      {"attn_examples", size(&C::attn_examples, "attn_examples")},
      {"export_logits", {[](C& c, const std::string& v) { c.export_logits = to_bool("export_logits", v); },
                         [](const C& c) { return json(c.export_logits); }}},
      {"checkpoint", str(&C::checkpoint)},
      {"out", str(&C::out)},
  };
  return table;
}

// Aliases set the same member as another key and are left out of the resolved view.
bool is_alias(const std::string& key) { return key == "depth_set" || key == "max_epochs"; }

std::string json_to_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "";
  if (v.is_array()) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ',';
      out += json_to_text(v[i]);
    }
    return out;
  }
  if (v.is_object()) throw UsageError("nested objects are not valid config values");
  return v.dump();
}

// ------------------------------------------------------------ run plumbing

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("CAPT_THREADS")) {
    try {
      const unsigned long v = std::stoul(env);
      if (v >= 1) return v;
    } catch (const std::logic_error&) {
    }
  }
  return 1;
}

const std::vector<std::string>& deviation_notes() {
  static const std::vector<std::string> notes = {
      "optimizer: Adam with bias correction and linear learning-rate decay (stands in for Adafactor)",
      "positions: learned absolute embeddings on input tokens; prompt tokens carry none",
      "attention metrics: post-softmax scores, uniform weighting over heads and layers",
  };
  return notes;
}

class Run {
 public:
  Run(std::string command, const RunConfig& cfg, std::ostream& out)
      : command_(std::move(command)), cfg_(cfg), out_(out), started_(utc_now()),
        start_(std::chrono::steady_clock::now()) {
    dir_ = cfg.out;
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory " + cfg.out + ": " + ec.message());
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void write_text(const std::string& name, const std::string& text) {
    std::ofstream f(path(name), std::ios::trunc);
    if (!f) throw IoError("cannot write " + path(name).string());
    f << text;
    if (!f) throw IoError("write failed for " + path(name).string());
    produced(name);
  }

  void produced(const std::string& name) {
    const std::string p = path(name).string();
    if (std::find(artifacts_.begin(), artifacts_.end(), p) == artifacts_.end()) artifacts_.push_back(p);
  }

  /// Deterministic results: no timestamps, no wall-clock values.
  void write_metrics(json metrics) {
    metrics["command"] = command_;
    write_text("metrics.json", metrics.dump(2) + "\n");
  }

  void write_config() { write_text("config.json", cfg_.to_json() + "\n"); }

  json& extra() { return extra_; }
  std::ostream& out() { return out_; }

  void finish(bool ok) {
    produced("manifest.jsonl");
    json rec;
    rec["command"] = command_;
    rec["config"] = json::parse(cfg_.to_json());
    rec["seed"] = cfg_.seed;
    rec["artifacts"] = artifacts_;
    rec["started"] = started_;
    rec["finished"] = utc_now();
    rec["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    rec["deviations"] = deviation_notes();
    rec["status"] = ok ? "ok" : "failed";
    for (auto& [k, v] : extra_.items()) rec[k] = v;
    std::ofstream f(path("manifest.jsonl"), std::ios::app);
    if (!f) throw IoError("cannot append to " + path("manifest.jsonl").string());
    f << rec.dump() << '\n';
  }

 private:
  std::string command_;
  const RunConfig& cfg_;
  std::ostream& out_;
  std::string started_;
  std::chrono::steady_clock::time_point start_;
  fs::path dir_;
  std::vector<std::string> artifacts_;
  json extra_ = json::object();
};

std::size_t longest(const Dataset& d) {
  std::size_t n = 0;
  for (const auto& ex : d.examples) n = std::max(n, ex.length());
  return n;
}

json metrics_json(const RunMetrics& r) {
  return {{"strategy", r.strategy},
          {"prompt_length", r.prompt_length},
          {"learning_rate", r.learning_rate},
          {"best_val_score", r.best_val_score},
          {"best_val_f1", r.best_val_f1},
          {"test_score", r.test_score},
          {"test_f1", r.test_f1},
          {"epochs_run", r.epochs_run},
          {"steps", r.steps},
          {"best_step", r.best_step},
          {"trainable_params", r.trainable_params},
          {"head_params", r.head_params},
          {"param_ratio", r.param_ratio},
          {"param_percent", format_param_percent(r.param_ratio)},
          {"seed", r.seed},
          {"failed", r.failed},
          {"failed_step", r.failed_step},
          {"failure", r.failure},
          {"loss_curve", r.loss_curve}};
}

std::string method_label(const RunConfig& cfg, const PromptStrategy& s) {
  std::string m = s.name();
  const auto kind = s.kind();
  if (const auto* c = std::get_if<Capsule>(&kind)) {
    if (c->variant.tag != Variant::Tag::addition) m += "-" + c->variant.name();
    if (c->depth.kind != DepthSet::Kind::all_layers) m += "@" + c->depth.name();
  }
  if (std::holds_alternative<Deep>(kind) || std::holds_alternative<Shallow>(kind)) {
    m += "(len=" + std::to_string(cfg.len) + ")";
  }
  return m;
}

// ------------------------------------------------------------ subcommands

int cmd_train(const RunConfig& cfg, Run& run) {
  const ModelConfig mc = cfg.model_config();
  Model model = build_model(cfg);
  PromptStrategy strategy = PromptStrategy::create(cfg.strategy_kind(), mc, cfg.seed);
  const Splits splits = build_splits(cfg, strategy.max_prompt_len());
  const Model before = model.clone();
  const RunMetrics rm = train_run(cfg.train_config(), model, strategy, splits);
  const bool frozen = freeze_audit(before, model);

  NamedTensors tensors = model.backbone().named();
  for (auto& p : strategy.parameters()) tensors.push_back(p);
  const std::string bytes = encode_checkpoint(tensors);
  run.write_text("model.capt", bytes);
  const std::string hash = git_blob_hash(bytes);
  run.write_config();

  json m = {{"task", cfg.task}, {"strategy", strategy.describe()}, {"run", metrics_json(rm)},
            {"freeze_audit", frozen}, {"checkpoint_hash", hash}};
  run.write_metrics(m);

  run.extra()["method"] = method_label(cfg, strategy);
  run.extra()["params"] = rm.trainable_params;
  run.extra()["param_ratio"] = rm.param_ratio;
  run.extra()["score"] = rm.test_score;
  run.extra()["run_wall_clock_seconds"] = rm.wall_clock_seconds;
  run.extra()["checkpoint_hash"] = hash;
  run.extra()["strategy_block"] = strategy.describe();

  run.out() << method_label(cfg, strategy) << ": val " << rm.best_val_score << " test "
            << rm.test_score << " epochs " << rm.epochs_run << " params " << rm.trainable_params
            << " (" << format_param_percent(rm.param_ratio) << ") " << rm.wall_clock_seconds
            << " s\n";
  if (rm.failed) {
    run.out() << "run failed at step " << rm.failed_step << ": " << rm.failure << "\n";
    return 1;
  }
  if (!frozen) {
    run.out() << "freeze audit failed: backbone weights changed\n";
    return 1;
  }
  return 0;
}

int cmd_grid(const RunConfig& cfg, Run& run) {
  if (cfg.strategy != "deep" && cfg.strategy != "shallow") {
    throw UsageError("grid sweeps prompt lengths of the shallow or deep family");
  }
  const ModelConfig mc = cfg.model_config();
  GridSpec spec;
  spec.prompt_lengths = cfg.lengths;
  if (cfg.grid_lr) spec.learning_rates = cfg.lr_grid;
  spec.validate();
  const std::size_t max_prompt = *std::max_element(cfg.lengths.begin(), cfg.lengths.end());
  const Splits splits = build_splits(cfg, max_prompt);
  const std::size_t need = max_prompt + std::max({longest(splits.train), longest(splits.val), longest(splits.test)});
  if (need > mc.max_len) {
    throw UsageError("max_len " + std::to_string(mc.max_len) + " cannot hold prompt length " +
                     std::to_string(max_prompt) + " plus the inputs; need " + std::to_string(need));
  }
  const bool deep = cfg.strategy == "deep";
  StrategyFamily family = [deep](std::size_t len) -> StrategyKind {
    if (deep) return Deep{len};
    return Shallow{len};
  };
  const Model base = build_model(cfg);
  const GridResult gr = grid_search(cfg.train_config(), spec, family, base, splits, worker_threads());

  std::ostringstream csv;
  csv << "method,prompt_length,learning_rate,best_val_score,test_score,epochs_run,failed\n";
  json runs = json::array();
  json walls = json::array();
  for (const RunMetrics& r : gr.runs) {
    csv << cfg.strategy << ',' << r.prompt_length << ',' << r.learning_rate << ','
        << r.best_val_score << ',' << r.test_score << ',' << r.epochs_run << ','
        << (r.failed ? 1 : 0) << '\n';
    json j = metrics_json(r);
    j.erase("loss_curve");
    runs.push_back(j);
    walls.push_back(r.wall_clock_seconds);
  }
  run.write_text("grid.csv", csv.str());
  run.write_config();
  json m = {{"task", cfg.task}, {"family", cfg.strategy}, {"runs", runs}};
  m["best_index"] = gr.best_index ? json(*gr.best_index) : json(nullptr);
  run.write_metrics(m);

  run.extra()["method"] = cfg.strategy + " (grid)";
  run.extra()["total_wall_seconds"] = gr.total_wall_seconds;
  run.extra()["run_wall_seconds"] = walls;
  if (gr.best_index) {
    run.extra()["params"] = gr.best().trainable_params;
    run.extra()["param_ratio"] = gr.best().param_ratio;
    run.extra()["score"] = gr.best().test_score;
  }
  run.extra()["run_wall_clock_seconds"] = gr.total_wall_seconds;

  run.out() << "grid over " << gr.runs.size() << " runs, total " << gr.total_wall_seconds << " s";
  if (gr.best_index) {
    run.out() << ", best length " << gr.best().prompt_length << " val " << gr.best().best_val_score
              << " test " << gr.best().test_score;
  }
  run.out() << "\n";
  return gr.best_index ? 0 : 1;
}

// Model and strategy from the config, with weights from --checkpoint when given.
std::pair<Model, PromptStrategy> load_pair(const RunConfig& cfg, bool required) {
  const ModelConfig mc = cfg.model_config();
  Model model = cfg.checkpoint.empty() ? build_model(cfg) : Model(mc);
  PromptStrategy strategy = PromptStrategy::create(cfg.strategy_kind(), mc, cfg.seed);
  if (!cfg.checkpoint.empty()) {
    load_model(cfg.checkpoint, model, strategy);
  } else if (required) {
    throw UsageError("this command needs --checkpoint");
  }
  return {std::move(model), std::move(strategy)};
}

int cmd_eval(const RunConfig& cfg, Run& run) {
  auto [model, strategy] = load_pair(cfg, true);
  const Splits splits = build_splits(cfg, strategy.max_prompt_len());
  const EvalResult r = evaluate(model, strategy, splits.test);
  run.write_metrics({{"accuracy", r.accuracy},
                     {"macro_f1", r.macro_f1},
                     {"confusion", r.confusion},
                     {"examples", splits.test.size()},
                     {"strategy", strategy.describe()}});
  run.out() << "accuracy " << r.accuracy << " macro_f1 " << r.macro_f1 << "\n";
  return 0;
}

int cmd_attn(const RunConfig& cfg, Run& run) {
  auto [model, strategy] = load_pair(cfg, false);
  const Splits splits = build_splits(cfg, strategy.max_prompt_len());
  // Bin by length and keep the most common one (shortest on ties).
  std::map<std::size_t, std::vector<std::size_t>> bins;
  for (std::size_t i = 0; i < splits.test.size(); ++i) bins[splits.test.examples[i].length()].push_back(i);
  if (bins.empty()) throw ContractError("no test examples to analyse");
  const auto* pick = &bins.begin()->second;
  for (const auto& [len, idx] : bins) {
    if (idx.size() > pick->size()) pick = &idx;
  }
  std::vector<std::size_t> idx(pick->begin(),
                               pick->begin() + static_cast<std::ptrdiff_t>(std::min(cfg.attn_examples, pick->size())));
  const Batch batch = make_batch(splits.test, idx);

  NoGradGuard no_grad;
  const ForwardResult fr = model.forward(batch, strategy, true);
  const auto records = capture(*fr.trace);
  const Selector sel = Selector::parse(cfg.selector);
  const AggregatedMap map = aggregate(records, sel);
  const AnchorMetrics am = anchor_metrics(map);
  const double baseline = uniform_structural_baseline(map);

  const std::string stem = "attn_" + sel.name();
  emit_csv(map, run.path(stem + ".csv").string());
  run.produced(stem + ".csv");
  emit_heatmap(map, run.path(stem + ".svg").string());
  run.produced(stem + ".svg");
  if (cfg.export_logits) {
    emit_csv(aggregate(capture(*fr.trace, ScoreKind::logits), sel), run.path(stem + "_logits.csv").string());
    run.produced(stem + "_logits.csv");
  }
  append_metrics_jsonl(run.path("attn_metrics.jsonl").string(),
                       strategy.name() + "-seed" + std::to_string(cfg.seed), sel.name(), am);
  run.produced("attn_metrics.jsonl");

  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  run.write_metrics({{"selector", sel.name()},
                     {"examples", idx.size()},
                     {"sequence_length", map.k},
                     {"records", records.size()},
                     {"prompt_self_mass", opt(am.prompt_self_mass)},
                     {"prompt_to_structural_mass", opt(am.prompt_to_structural_mass)},
                     {"input_to_prompt_mass", opt(am.input_to_prompt_mass)},
                     {"uniform_structural_baseline", baseline},
                     {"strategy", strategy.describe()}});
  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("absent"); };
  run.out() << "prompt_self_mass " << show(am.prompt_self_mass) << "\nprompt_to_structural_mass "
            << show(am.prompt_to_structural_mass) << " (uniform " << baseline
            << ")\ninput_to_prompt_mass " << show(am.input_to_prompt_mass) << "\n";
  return 0;
}

int cmd_finding2(RunConfig cfg, Run& run) {
  if (cfg.strategy != "deep") {
    if (cfg.strategy != "capt") throw UsageError("finding2 runs over a deep prompt checkpoint");
    cfg.strategy = "deep";  // the default strategy key; the checkpoint decides the length
  }
  auto [model, deep] = load_pair(cfg, true);
  std::size_t max_k = 0;
  for (std::size_t k : cfg.ks) max_k = std::max(max_k, k);
  const Splits splits = build_splits(cfg, deep.max_prompt_len() + max_k);

  const AutogradStats before = autograd_stats();
  const EvalResult base = evaluate(model, deep, splits.test);
  std::ostringstream csv;
  csv << "pooled_tokens,accuracy,macro_f1\n" << 0 << ',' << base.accuracy << ',' << base.macro_f1 << '\n';
  json results = json::array();
  for (std::size_t k : cfg.ks) {
    const PromptStrategy pooled = PromptStrategy::pooled_over(deep, k);
    const EvalResult r = evaluate(model, pooled, splits.test);
    csv << k << ',' << r.accuracy << ',' << r.macro_f1 << '\n';
    results.push_back({{"k", k}, {"accuracy", r.accuracy}, {"macro_f1", r.macro_f1}});
    run.out() << "k=" << k << " accuracy " << r.accuracy << "\n";
  }

  // Single-segment pooling must reproduce the plain masked mean of E.
  bool k1_exact = true;
  {
    NoGradGuard no_grad;
    const std::vector<std::size_t> first = {0};
    const Batch one = make_batch(splits.test, first);
    const Tensor E = model.embed(one);
    const Tensor pooled = pooled_instance_tokens(E, one.mask, 1);
    const Tensor mean = mean_pool(E, one.mask);
    k1_exact = std::equal(pooled.values().begin(), pooled.values().end(), mean.values().begin());
  }
  const AutogradStats after = autograd_stats();
  const bool inference_only = after.nodes_recorded == before.nodes_recorded &&
                              after.backward_calls == before.backward_calls;

  run.write_text("finding2.csv", csv.str());
  run.write_metrics({{"baseline", {{"accuracy", base.accuracy}, {"macro_f1", base.macro_f1}}},
                     {"results", results},
                     {"inference_only", inference_only},
                     {"tape_nodes_recorded", after.nodes_recorded - before.nodes_recorded},
                     {"backward_calls", after.backward_calls - before.backward_calls},
                     {"k1_equals_mean_pool", k1_exact},
                     {"strategy", deep.describe()}});
  run.out() << "baseline accuracy " << base.accuracy << "; inference only: " << (inference_only ? "yes" : "no") << "\n";
  return inference_only && k1_exact ? 0 : 1;
}

int cmd_params(const RunConfig& cfg, Run& run) {
  ModelConfig mc = cfg.preset.empty() ? cfg.model_config() : ModelConfig::preset(cfg.preset);
  RunConfig local = cfg;
  local.n_layers = mc.n_layers;
  local.d_model = mc.d_model;
  const StrategyKind kind = local.strategy_kind();
  const ParamCount pc = count_strategy_params(kind, mc);
  const std::string pct = format_param_percent(pc.ratio);
  char ratio[32];
  std::snprintf(ratio, sizeof ratio, "%.2e", pc.ratio);
  run.out() << "strategy " << strategy_name(kind) << "\ntrainable_params " << pc.trainable
            << "\nhead_params " << pc.head << "\nbackbone_params "
            << static_cast<std::uint64_t>(std::llround(pc.backbone_total))
            << "\nratio " << ratio << "\npercent " << pct << "\n";
  run.write_metrics({{"preset", cfg.preset},
                     {"strategy", strategy_name(kind)},
                     {"trainable_params", pc.trainable},
                     {"head_params", pc.head},
                     {"backbone_params", static_cast<std::uint64_t>(std::llround(pc.backbone_total))},
                     {"ratio", pc.ratio},
                     {"ratio_text", ratio},
                     {"percent", pct}});
  return 0;
}

int cmd_report(const RunConfig& cfg, const std::vector<std::string>& inputs, Run& run) {
  std::vector<std::string> paths = inputs;
  if (paths.empty()) paths.push_back((fs::path(cfg.out) / "manifest.jsonl").string());
  struct Row {
    std::string method;
    std::string params;
    double seconds;
    double score;
  };
  std::vector<Row> rows;
  for (const auto& p : paths) {
    std::ifstream f(p);
    if (!f) throw IoError("cannot read manifest " + p);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      json rec;
      try {
        rec = json::parse(line);
      } catch (const json::exception& e) {
        throw ParseError(p + ": " + e.what(), line_no);
      }
      const std::string command = rec.value("command", "");
      if ((command != "train" && command != "grid") || rec.value("status", "") != "ok") continue;
      if (!rec.contains("score")) continue;
      rows.push_back({rec.value("method", command),
                      format_param_percent(rec.value("param_ratio", 0.0)),
                      rec.value("run_wall_clock_seconds", rec.value("wall_clock_seconds", 0.0)),
                      rec.value("score", 0.0)});
    }
  }
  double ref = 0.0;
  for (const Row& r : rows) {
    if (r.method == "capt") {
      ref = r.seconds;
      break;
    }
  }
  if (ref <= 0.0) {
    for (const Row& r : rows) {
      if (r.seconds > 0.0 && (ref <= 0.0 || r.seconds < ref)) ref = r.seconds;
    }
  }
  std::ostringstream csv;
  csv << "method,params,normalized_time,score\n";
  for (const Row& r : rows) {
    char t[32], s[32];
    std::snprintf(t, sizeof t, "%.2fx", ref > 0.0 ? r.seconds / ref : 0.0);
    std::snprintf(s, sizeof s, "%.4f", r.score);
    csv << r.method << ',' << r.params << ',' << t << ',' << s << '\n';
  }
  run.write_text("report.csv", csv.str());
  run.out() << csv.str();
  return 0;
}

}  // namespace

// ------------------------------------------------------------ RunConfig

void RunConfig::apply(const std::string& key, const std::string& value) {
  const auto& table = fields();
  auto it = table.find(key);
  if (it == table.end()) throw UsageError("unknown config key '" + key + "'");
  it->second.set(*this, trim(value));
}

std::map<std::string, std::string> RunConfig::resolved() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : fields()) {
    if (!is_alias(key)) out[key] = json_to_text(field.get(*this));
  }
  return out;
}

std::string RunConfig::to_json() const {
  json j = json::object();
  for (const auto& [key, field] : fields()) {
    if (!is_alias(key)) j[key] = field.get(*this);
  }
  return j.dump();
}

ModelConfig RunConfig::model_config() const {
  ModelConfig mc;
  mc.d_model = d_model;
  mc.n_layers = n_layers;
  mc.n_heads = n_heads;
  mc.d_ff = d_ff;
  mc.max_len = max_len;
  mc.vocab_size = Tokenizer::standard().size();
  mc.num_classes = builtin_task(task).classes.size();
  mc.mode = parse_mode(mode);
  mc.head_trainable = head_trainable;
  mc.backbone_seed = effective_backbone_seed();
  mc.validate();
  return mc;
}

StrategyKind RunConfig::strategy_kind() const {
  if (strategy == "none") return NoPrompt{};
  if (strategy == "shallow") return Shallow{len};
  if (strategy == "deep") return Deep{len};
  if (strategy == "capt") {
    Variant v = Variant::parse(variant);
    v.kernel_width = kernel_width;
    v.rank = rank;
    return Capsule{v, DepthSet::parse(depth)};
  }
  if (strategy == "pooled") {
    PooledInstance p{k, std::nullopt};
    if (len > 0) p.base = Deep{len};
    return p;
  }
  if (strategy == "instance_only") return InstanceOnly{};
  throw UsageError("unknown strategy '" + strategy +
                   "' (none, shallow, deep, capt, pooled, instance_only)");
}

TrainConfig RunConfig::train_config() const {
  TrainConfig tc;
  tc.learning_rate = lr;
  tc.lr_grid = lr_grid;
  tc.max_epochs = epochs;
  tc.patience = patience;
  tc.batch_size = batch_size;
  tc.seed = seed;
  tc.eval_every = eval_every;
  tc.max_steps = max_steps;
  tc.validate();
  return tc;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig pc;
  pc.steps = pretrain_steps;
  pc.batch_size = batch_size;
  pc.seed = effective_backbone_seed();
  return pc;
}

RunConfig parse_config(const std::string& file_text,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  const std::string text = trim(file_text);
  if (!text.empty() && text.front() == '{') {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw UsageError(std::string("config is not valid JSON: ") + e.what());
    }
    for (auto& [key, value] : j.items()) cfg.apply(key, json_to_text(value));
  } else {
    std::stringstream ss(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(ss, line)) {
      ++line_no;
      line = trim(line.substr(0, line.find('#')));
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw UsageError("config line " + std::to_string(line_no) + ": expected key=value");
      }
      cfg.apply(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
  }
  for (const auto& [key, value] : overrides) cfg.apply(key, value);
  return cfg;
}

// ------------------------------------------------------------ dispatch

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"capt: capsule prompt-tuning lab"};
  app.require_subcommand(1);
  app.fallthrough(false);

  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> overrides;
  std::vector<std::string> manifests;

  struct Flag {
    const char* name;
    const char* key;
    const char* help;
  };
  const Flag common[] = {
      {"--strategy", "strategy", "none, shallow, deep, capt, pooled, instance_only"},
      {"--variant", "variant", "addition, prepending, extraction, projection"},
      {"--depth", "depth", "input, first_half, latter_half, odd, all, or a list like 1,3"},
      {"--len", "len", "prompt length for shallow/deep"},
      {"--task", "task", "pair_match, keyword_presence, order_sensitive"},
      {"--seed", "seed", "run seed"},
      {"--preset", "preset", "t5base or llama1b (parameter accounting only)"},
      {"--out", "out", "output directory"},
      {"--checkpoint", "checkpoint", "checkpoint file to load"},
      {"--data", "data", "JSONL training data"},
      {"--test-data", "test_data", "JSONL test data"},
      {"--epochs", "epochs", "maximum epochs"},
      {"--lr", "lr", "learning rate"},
      {"--mode", "mode", "bidirectional or causal"},
      {"--selector", "selector", "all, layerN or headL-H"},
  };

  const char* names[][2] = {
      {"train", "train one strategy on one task"},
      {"grid", "sweep prompt lengths of a baseline family"},
      {"eval", "evaluate a checkpoint on the test split"},
      {"attn", "capture, aggregate and emit attention maps"},
      {"finding2", "training-free pooled instance tokens over a deep checkpoint"},
      {"params", "parameter accounting for a strategy"},
      {"report", "merge run manifests into a comparison table"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, desc] : names) {
    CLI::App* sub = app.add_subcommand(name, desc);
    subs[name] = sub;
    sub->add_option("--config", config_file, "config file (key=value lines or JSON)");
    sub->add_option("--set", sets, "KEY=VALUE override, repeatable");
    for (const Flag& f : common) {
      const std::string key = f.key;
      sub->add_option_function<std::string>(
          f.name, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); }, f.help);
    }
    const std::string k_key = std::string(name) == "finding2" ? "ks" : "k";
    sub->add_option_function<std::string>(
        "--k", [&overrides, k_key](const std::string& v) { overrides.emplace_back(k_key, v); },
        "pooled token count (finding2: comma list)");
    if (std::string(name) == "report") sub->add_option("manifests", manifests, "manifest files");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    CLI::App* active = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << active->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    CLI::App* active = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << active->help();
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    std::string text;
    if (!config_file.empty()) {
      std::ifstream f(config_file);
      if (!f) throw UsageError("cannot read config file " + config_file);
      std::stringstream ss;
      ss << f.rdbuf();
      text = ss.str();
    }
    std::vector<std::pair<std::string, std::string>> all;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects KEY=VALUE, got '" + s + "'");
      all.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    all.insert(all.end(), overrides.begin(), overrides.end());
    cfg = parse_config(text, all);
    (void)cfg.strategy_kind();
    (void)cfg.model_config();
    (void)cfg.train_config();
    (void)builtin_task(cfg.task);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n\n" << subs[command]->help();
    return 2;
  }

  try {
    Run run(command, cfg, out);
    int code = 1;
    try {
      if (command == "train") code = cmd_train(cfg, run);
      else if (command == "grid") code = cmd_grid(cfg, run);
      else if (command == "eval") code = cmd_eval(cfg, run);
      else if (command == "attn") code = cmd_attn(cfg, run);
      else if (command == "finding2") code = cmd_finding2(cfg, run);
      else if (command == "params") code = cmd_params(cfg, run);
      else if (command == "report") code = cmd_report(cfg, manifests, run);
    } catch (...) {
      run.finish(false);
      throw;
    }
    run.finish(code == 0);
    return code;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "run failed: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace captlab::cli
