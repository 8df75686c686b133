#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "captlab/attnlab.hpp"
#include "captlab/data.hpp"
#include "captlab/errors.hpp"
#include "captlab/model.hpp"
#include "support.hpp"

using namespace captlab;

namespace {

ModelConfig lab_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = Tokenizer::standard().size();
  c.max_len = 40;
  c.num_classes = 2;
  c.backbone_seed = 4;
  return c;
}

ForwardTrace traced(const StrategyKind& kind, std::size_t n = 4) {
  const Model m(lab_config());
  const auto s = PromptStrategy::create(kind, m.config(), 4);
  const Dataset d = gen_synthetic(SyntheticKind::pair_match, std::max<std::size_t>(n, 10), 4);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  NoGradGuard ng;
  return *m.forward(make_batch(d, idx), s, true).trace;
}

std::size_t count_role(const std::vector<TokenRole>& roles, TokenRole role) {
  return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), role));
}

AggregatedMap make_map(std::size_t q, std::size_t k, std::vector<double> scores,
                       std::vector<TokenRole> ql, std::vector<TokenRole> kl) {
  AggregatedMap m;
  m.q = q;
  m.k = k;
  m.scores = std::move(scores);
  m.q_labels = std::move(ql);
  m.k_labels = std::move(kl);
  return m;
}

AttentionRecord record(std::size_t layer, std::size_t head, std::vector<double> scores,
                       std::size_t side, const std::vector<TokenRole>& roles) {
  AttentionRecord r;
  r.layer = layer;
  r.head = head;
  r.q = r.k = side;
  r.scores = std::move(scores);
  r.q_labels = r.k_labels = roles;
  return r;
}

// Row-stochastic random matrix.
std::vector<double> stochastic(std::size_t q, std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> s(q * k);
  for (std::size_t r = 0; r < q; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) total += s[r * k + c] = u(rng);
    for (std::size_t c = 0; c < k; ++c) s[r * k + c] /= total;
  }
  return s;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("captlab_attn_" + name)).string();
}

}  // namespace

TEST(Capture, OneRecordPerLayerAndHead) {
  const auto recs = capture(traced(Deep{2}));
  ASSERT_EQ(recs.size(), 4u);
  EXPECT_EQ(recs[3].layer, 2u);
  EXPECT_EQ(recs[3].head, 1u);
  for (const auto& r : recs) EXPECT_EQ(r.scores.size(), r.q * r.k);
}

TEST(Capture, CapsuleContributesOneKeyPerLayer) {
  for (const auto& r : capture(traced(Capsule{}))) {
    EXPECT_EQ(count_role(r.k_labels, TokenRole::capsule), 1u);
    EXPECT_EQ(r.k_labels.front(), TokenRole::capsule);
  }
}

TEST(Capture, DeepLengthTenTagsTenPromptKeys) {
  const ForwardTrace t = traced(Deep{10});
  for (std::size_t l = 0; l < t.layers.size(); ++l) EXPECT_EQ(t.prompt_positions(l).size(), 10u);
  for (const auto& r : capture(t)) {
    EXPECT_EQ(count_role(r.k_labels, TokenRole::prompt), 10u);
    EXPECT_EQ(r.k, 10u + t.input_len);
  }
}

TEST(Capture, StructuralTagsFollowTheTemplate) {
  const ForwardTrace t = traced(NoPrompt{});
  const auto recs = capture(t);
  const auto& task = builtin_task(SyntheticKind::pair_match);
  EXPECT_EQ(count_role(recs[0].k_labels, TokenRole::structural_input), task.structural_positions.size());
  for (auto p : task.structural_positions) EXPECT_EQ(recs[0].k_labels[p], TokenRole::structural_input);
}

TEST(Capture, ScoresAreRowStochastic) {
  for (const auto& r : capture(traced(Capsule{}))) {
    for (std::size_t q = 0; q < r.q; ++q) {
      double s = 0.0;
      for (std::size_t k = 0; k < r.k; ++k) {
        EXPECT_GE(r.scores[q * r.k + k], 0.0);
        s += r.scores[q * r.k + k];
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Capture, RejectsTracesWithoutAttention) {
  ForwardTrace t = traced(Deep{1});
  t.layers[1].attention.clear();
  EXPECT_THROW(capture(t), ContractError);
  EXPECT_THROW(capture(ForwardTrace{}), ContractError);
}

TEST(Capture, LogitsSoftmaxToTheProbabilities) {
  const ForwardTrace tr = traced(Capsule{}, 1);
  const auto probs = capture(tr);
  const auto logits = capture(tr, ScoreKind::logits);
  ASSERT_EQ(probs.size(), logits.size());
  double worst = 0.0;
  for (std::size_t r = 0; r < probs.size(); ++r) {
    const std::size_t L = probs[r].k;
    for (std::size_t q = 0; q < L; ++q) {
      const double* row = logits[r].scores.data() + q * L;
      const double mx = *std::max_element(row, row + L);
      double z = 0.0;
      for (std::size_t k = 0; k < L; ++k) z += std::exp(row[k] - mx);
      for (std::size_t k = 0; k < L; ++k) {
        worst = std::max(worst, std::abs(std::exp(row[k] - mx) / z - probs[r].scores[q * L + k]));
      }
    }
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(Capture, RejectsMixedLengths) {
  const Model m(lab_config());
  const auto s = PromptStrategy::create(Deep{1}, m.config(), 4);
  const auto& task = builtin_task("keyword_presence");
  Dataset d{task.name, {render_example(task, {{"slot_1", "w001 w002"}}, 0, 100),
                       render_example(task, {{"slot_1", "w001"}}, 1, 100)}};
  NoGradGuard ng;
  const auto trace = *m.forward(make_batch(d), s, true).trace;
  EXPECT_THROW(capture(trace), ContractError);
}

TEST(Aggregate, SingleRecordIsIdentity) {
  const std::vector<TokenRole> roles{TokenRole::prompt, TokenRole::input};
  const std::vector<double> a{0.1, 0.9, 0.4, 0.6};
  const auto m = aggregate({record(1, 0, a, 2, roles)}, Selector::all());
  EXPECT_EQ(m.scores, a);
  EXPECT_EQ(m.selector, "all");
}

TEST(Aggregate, TwoRecordsAverage) {
  const std::vector<TokenRole> roles{TokenRole::prompt, TokenRole::input};
  const auto m = aggregate({record(1, 0, {0.2, 0.8, 0.0, 1.0}, 2, roles), record(1, 1, {0.4, 0.6, 1.0, 0.0}, 2, roles)},
                           Selector::all());
  EXPECT_NEAR(m.at(0, 0), 0.3, 1e-15);
  EXPECT_NEAR(m.at(0, 1), 0.7, 1e-15);
  EXPECT_NEAR(m.at(1, 0), 0.5, 1e-15);
  EXPECT_NEAR(m.at(1, 1), 0.5, 1e-15);
}

TEST(Aggregate, MatchesFlatMeanOracle) {
  std::mt19937_64 rng(3);
  const std::vector<TokenRole> roles{TokenRole::capsule, TokenRole::input};
  std::vector<AttentionRecord> recs;
  for (std::size_t l = 1; l <= 3; ++l)
    for (std::size_t h = 0; h < 2; ++h) recs.push_back(record(l, h, stochastic(2, 2, rng), 2, roles));
  const auto all = aggregate(recs, Selector::all());
  const auto layer2 = aggregate(recs, Selector::per_layer(2));
  const auto head = aggregate(recs, Selector::single_head(3, 1));
  for (std::size_t i = 0; i < 4; ++i) {
    double flat = 0.0;
    for (const auto& r : recs) flat += r.scores[i];
    EXPECT_NEAR(all.scores[i], flat / 6.0, 1e-15);
    EXPECT_NEAR(layer2.scores[i], (recs[2].scores[i] + recs[3].scores[i]) / 2.0, 1e-15);
    EXPECT_EQ(head.scores[i], recs[5].scores[i]);
  }
  EXPECT_EQ(layer2.selector, "layer2");
  EXPECT_EQ(head.selector, "head3-1");
}

TEST(Aggregate, LayoutMismatchIsAnError) {
  const std::vector<TokenRole> two{TokenRole::prompt, TokenRole::input};
  const std::vector<TokenRole> three{TokenRole::prompt, TokenRole::input, TokenRole::pad};
  std::vector<AttentionRecord> recs{record(1, 0, {0.5, 0.5, 0.5, 0.5}, 2, two),
                                    record(2, 0, std::vector<double>(9, 1.0 / 3), 3, three)};
  EXPECT_THROW(aggregate(recs, Selector::all()), AggregationError);
  EXPECT_NO_THROW(aggregate(recs, Selector::per_layer(1)));
  EXPECT_THROW(aggregate(recs, Selector::per_layer(5)), AggregationError);
}

TEST(Anchor, UniformAttentionGivesPromptShare) {
  std::vector<TokenRole> roles(10, TokenRole::input);
  roles[0] = TokenRole::prompt;
  const auto m = make_map(10, 10, std::vector<double>(100, 0.1), roles, roles);
  const auto a = anchor_metrics(m);
  ASSERT_TRUE(a.input_to_prompt_mass);
  EXPECT_NEAR(*a.input_to_prompt_mass, 0.1, 1e-12);
  EXPECT_NEAR(*a.prompt_self_mass, 0.1, 1e-12);
}

TEST(Anchor, OneHotSelfAttention) {
  const std::vector<TokenRole> roles{TokenRole::capsule, TokenRole::structural_input, TokenRole::input};
  const auto m = make_map(3, 3, {1, 0, 0, 0.2, 0.3, 0.5, 0.1, 0.1, 0.8}, roles, roles);
  const auto a = anchor_metrics(m);
  EXPECT_DOUBLE_EQ(*a.prompt_self_mass, 1.0);
  EXPECT_DOUBLE_EQ(*a.prompt_to_structural_mass, 0.0);
  // Structural queries count as input queries.
  EXPECT_NEAR(*a.input_to_prompt_mass, 0.15, 1e-15);
}

TEST(Anchor, MatchesSummationOracle) {
  std::mt19937_64 rng(9);
  const std::vector<TokenRole> pool{TokenRole::prompt, TokenRole::capsule, TokenRole::instance_pooled,
                                    TokenRole::input, TokenRole::structural_input, TokenRole::pad};
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 7;
    std::vector<TokenRole> roles(n);
    for (auto& r : roles) r = pool[pick(rng)];
    roles[0] = TokenRole::prompt;
    roles[1] = TokenRole::input;
    roles[2] = TokenRole::structural_input;
    const auto m = make_map(n, n, stochastic(n, n, rng), roles, roles);
    double self = 0, structural = 0, in2p = 0;
    std::size_t pq = 0, iq = 0;
    for (std::size_t q = 0; q < n; ++q) {
      const bool pqrow = roles[q] == TokenRole::prompt || roles[q] == TokenRole::capsule ||
                         roles[q] == TokenRole::instance_pooled;
      const bool iqrow = roles[q] == TokenRole::input || roles[q] == TokenRole::structural_input;
      pq += pqrow;
      iq += iqrow;
      for (std::size_t k = 0; k < n; ++k) {
        const bool pk = roles[k] == TokenRole::prompt || roles[k] == TokenRole::capsule ||
                        roles[k] == TokenRole::instance_pooled;
        if (pqrow && pk) self += m.at(q, k);
        if (pqrow && roles[k] == TokenRole::structural_input) structural += m.at(q, k);
        if (iqrow && pk) in2p += m.at(q, k);
      }
    }
    const auto a = anchor_metrics(m);
    EXPECT_NEAR(*a.prompt_self_mass, self / static_cast<double>(pq), 1e-12);
    EXPECT_NEAR(*a.prompt_to_structural_mass, structural / static_cast<double>(pq), 1e-12);
    EXPECT_NEAR(*a.input_to_prompt_mass, in2p / static_cast<double>(iq), 1e-12);
  }
}

TEST(Anchor, EmptyRoleClassesAreAbsent) {
  const std::vector<TokenRole> inputs{TokenRole::input, TokenRole::input};
  const auto none = anchor_metrics(make_map(2, 2, {0.5, 0.5, 0.5, 0.5}, inputs, inputs));
  EXPECT_FALSE(none.prompt_self_mass);
  EXPECT_FALSE(none.prompt_to_structural_mass);
  EXPECT_FALSE(none.input_to_prompt_mass);
  const std::vector<TokenRole> no_struct{TokenRole::prompt, TokenRole::input};
  const auto partial = anchor_metrics(make_map(2, 2, {0.5, 0.5, 0.5, 0.5}, no_struct, no_struct));
  EXPECT_TRUE(partial.prompt_self_mass);
  EXPECT_FALSE(partial.prompt_to_structural_mass);
}

TEST(Anchor, RolePartitionIsExhaustive) {
  for (const StrategyKind& kind : {StrategyKind{Capsule{}}, StrategyKind{Deep{3}}, StrategyKind{NoPrompt{}}}) {
    const auto recs = capture(traced(kind));
    const auto m = aggregate(recs, Selector::all());
    for (std::size_t q = 0; q < m.q; ++q) {
      double guidance = 0, input = 0, pad = 0;
      for (std::size_t k = 0; k < m.k; ++k) {
        const TokenRole r = m.k_labels[k];
        (is_guidance(r) ? guidance : r == TokenRole::pad ? pad : input) += m.at(q, k);
      }
      EXPECT_NEAR(guidance + input + pad, 1.0, 1e-6);
      for (std::size_t k = 0; k < m.k; ++k) {
        EXPECT_GE(m.at(q, k), 0.0);
        EXPECT_LE(m.at(q, k), 1.0);
      }
    }
  }
}

TEST(Anchor, InvariantToRecordOrder) {
  auto recs = capture(traced(Capsule{}));
  const auto ref = anchor_metrics(aggregate(recs, Selector::all()));
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5; ++i) {
    std::shuffle(recs.begin(), recs.end(), rng);
    const auto got = anchor_metrics(aggregate(recs, Selector::all()));
    EXPECT_NEAR(*got.prompt_self_mass, *ref.prompt_self_mass, 1e-12);
    EXPECT_NEAR(*got.prompt_to_structural_mass, *ref.prompt_to_structural_mass, 1e-12);
    EXPECT_NEAR(*got.input_to_prompt_mass, *ref.input_to_prompt_mass, 1e-12);
  }
}

TEST(Anchor, UniformStructuralBaseline) {
  const std::vector<TokenRole> roles{TokenRole::prompt, TokenRole::structural_input, TokenRole::input,
                                     TokenRole::structural_input, TokenRole::pad};
  const auto m = make_map(5, 5, std::vector<double>(25, 0.2), roles, roles);
  EXPECT_DOUBLE_EQ(uniform_structural_baseline(m), 0.5);
}

TEST(Csv, TwoByTwoHasThreeLines) {
  const std::vector<TokenRole> roles{TokenRole::capsule, TokenRole::input};
  const auto m = make_map(2, 2, {0.25, 0.75, 0.5, 0.5}, roles, roles);
  const auto path = tmp_path("map.csv");
  emit_csv(m, path);
  std::ifstream f(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(f, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "query,capsule,input");
  EXPECT_EQ(lines[1], "capsule,0.250000,0.750000");
}

TEST(Csv, RoundTripWithinSixDecimals) {
  const auto recs = capture(traced(Capsule{}));
  const auto m = aggregate(recs, Selector::per_layer(1));
  const auto path = tmp_path("roundtrip.csv");
  emit_csv(m, path);
  const auto back = parse_csv(path);
  ASSERT_EQ(back.q, m.q);
  ASSERT_EQ(back.k, m.k);
  EXPECT_EQ(back.q_labels, m.q_labels);
  EXPECT_EQ(back.k_labels, m.k_labels);
  for (std::size_t i = 0; i < m.scores.size(); ++i) EXPECT_NEAR(back.scores[i], m.scores[i], 1e-6);
}

TEST(Csv, UnwritableAndMalformedFiles) {
  const std::vector<TokenRole> roles{TokenRole::input};
  const auto m = make_map(1, 1, {1.0}, roles, roles);
  EXPECT_THROW(emit_csv(m, "/nonexistent/dir/map.csv"), IoError);
  EXPECT_THROW(emit_heatmap(m, "/nonexistent/dir/map.svg"), IoError);
  const auto path = tmp_path("bad.csv");
  std::ofstream(path) << "query,input\ninput,abc\n";
  EXPECT_THROW(parse_csv(path), ParseError);
}

TEST(Heatmap, SingleCellFile) {
  const std::vector<TokenRole> roles{TokenRole::capsule};
  const auto path = tmp_path("one.svg");
  emit_heatmap(make_map(1, 1, {1.0}, roles, roles), path);
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string svg = ss.str();
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  std::size_t rects = 0;
  for (std::size_t p = svg.find("<rect"); p != std::string::npos; p = svg.find("<rect", p + 1)) ++rects;
  EXPECT_EQ(rects, 1u);
  // The peak cell takes the hot end of the ramp.
  EXPECT_NE(svg.find("#a50026"), std::string::npos);
}

TEST(Heatmap, DrawsRoleBoundary) {
  const std::vector<TokenRole> roles{TokenRole::prompt, TokenRole::prompt, TokenRole::input};
  const auto path = tmp_path("bound.svg");
  emit_heatmap(make_map(3, 3, std::vector<double>(9, 1.0 / 3), roles, roles), path);
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  std::size_t lines = 0;
  for (std::size_t p = ss.str().find("<line"); p != std::string::npos; p = ss.str().find("<line", p + 1)) ++lines;
  EXPECT_EQ(lines, 2u);
}

TEST(SelectorText, ParsesAndNames) {
  EXPECT_EQ(Selector::parse("all").kind, Selector::Kind::all);
  const auto l = Selector::parse("layer3");
  EXPECT_EQ(l.kind, Selector::Kind::per_layer);
  EXPECT_EQ(l.layer, 3u);
  const auto h = Selector::parse("head2-1");
  EXPECT_EQ(h.kind, Selector::Kind::single_head);
  EXPECT_EQ(h.layer, 2u);
  EXPECT_EQ(h.head, 1u);
  EXPECT_EQ(h.name(), "head2-1");
  EXPECT_THROW(Selector::parse("head2"), ConfigError);
  EXPECT_THROW(Selector::parse("layerx"), ConfigError);
  EXPECT_THROW(Selector::parse("everything"), ConfigError);
}

TEST(MetricsLog, AppendsOneLinePerCall) {
  const auto path = tmp_path("metrics.jsonl");
  std::filesystem::remove(path);
  AnchorMetrics a;
  a.prompt_self_mass = 0.5;
  append_metrics_jsonl(path, "run1", "all", a);
  append_metrics_jsonl(path, "run1", "layer1", a);
  std::ifstream f(path);
  std::string first, second;
  std::getline(f, first);
  std::getline(f, second);
  EXPECT_NE(first.find("\"input_to_prompt_mass\":null"), std::string::npos);
  EXPECT_NE(second.find("\"selector\":\"layer1\""), std::string::npos);
}
