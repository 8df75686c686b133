#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "captlab/data.hpp"
#include "captlab/errors.hpp"

using namespace captlab;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& body) {
  const auto path = std::filesystem::temp_directory_path() / ("captlab_data_" + name);
  std::ofstream(path) << body;
  return path;
}

// Logistic regression over bag-of-words counts, fitted by full-batch gradient
// descent. Returns held-out accuracy.
double bag_of_words_probe(const Dataset& train, const Dataset& test, std::size_t vocab) {
  std::vector<double> w(vocab, 0.0);
  double bias = 0.0;
  auto counts = [&](const Example& ex) {
    std::vector<double> c(vocab, 0.0);
    for (auto id : ex.ids) c[static_cast<std::size_t>(id)] += 1.0;
    return c;
  };
  std::vector<std::vector<double>> xs;
  for (const auto& ex : train.examples) xs.push_back(counts(ex));
  for (int it = 0; it < 300; ++it) {
    std::vector<double> gw(vocab, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double z = bias;
      for (std::size_t v = 0; v < vocab; ++v) z += w[v] * xs[i][v];
      const double err = 1.0 / (1.0 + std::exp(-z)) - static_cast<double>(train.examples[i].label);
      for (std::size_t v = 0; v < vocab; ++v) gw[v] += err * xs[i][v];
      gb += err;
    }
    const double n = static_cast<double>(xs.size());
    for (std::size_t v = 0; v < vocab; ++v) w[v] -= 0.5 * gw[v] / n;
    bias -= 0.5 * gb / n;
  }
  std::size_t correct = 0;
  for (const auto& ex : test.examples) {
    const auto x = counts(ex);
    double z = bias;
    for (std::size_t v = 0; v < vocab; ++v) z += w[v] * x[v];
    correct += static_cast<std::size_t>(z > 0) == ex.label;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace

TEST(Tokenizer, EmptyTextGivesNoTokens) {
  EXPECT_TRUE(Tokenizer::standard().tokenize("").empty());
  EXPECT_TRUE(Tokenizer::standard().tokenize("   \t ").empty());
}

TEST(Tokenizer, RoundTripsInVocabularyText) {
  const auto& tok = Tokenizer::standard();
  const std::string text = "premise : w001 key3 hypothesis : w017 .";
  const auto ids = tok.tokenize(text);
  ASSERT_EQ(ids.size(), 8u);
  EXPECT_EQ(tok.detokenize(ids), text);
}

TEST(Tokenizer, UnknownWordsMapToUnk) {
  const auto& tok = Tokenizer::standard();
  const auto ids = tok.tokenize("w001 zebra");
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(ids[1], Tokenizer::kUnk);
  EXPECT_EQ(tok.detokenize(ids), "w001 <unk>");
  // The pad spelling is not reachable through text.
  EXPECT_EQ(tok.id("<pad>"), Tokenizer::kUnk);
}

TEST(Tokenizer, RejectsDuplicateWords) {
  EXPECT_THROW(Tokenizer({"a", "b", "a"}), ConfigError);
}

TEST(Tokenizer, StandardVocabularyIsStable) {
  const auto& tok = Tokenizer::standard();
  EXPECT_EQ(tok.size(), 200u);
  EXPECT_EQ(tok.word(Tokenizer::kPad), "<pad>");
  EXPECT_EQ(tok.word(Tokenizer::kBos), "<bos>");
  EXPECT_EQ(tok.vocabulary_hash(), Tokenizer::standard().vocabulary_hash());
  EXPECT_EQ(tok.vocabulary_hash().size(), 40u);
}

TEST(Synthetic, SameSeedSameData) {
  for (auto kind : {SyntheticKind::pair_match, SyntheticKind::keyword_presence, SyntheticKind::order_sensitive}) {
    const auto a = gen_synthetic(kind, 64, 5), b = gen_synthetic(kind, 64, 5), c = gen_synthetic(kind, 64, 6);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a.examples[i].ids, b.examples[i].ids);
      EXPECT_EQ(a.examples[i].label, b.examples[i].label);
      differs |= a.examples[i].ids != c.examples[i].ids;
    }
    EXPECT_TRUE(differs);
  }
}

TEST(Synthetic, PairMatchIsBalanced) {
  const auto d = gen_synthetic(SyntheticKind::pair_match, 100, 3);
  std::size_t ones = 0;
  for (const auto& ex : d.examples) ones += ex.label;
  EXPECT_NEAR(static_cast<double>(ones), 50.0, 1.0);
  const auto odd = gen_synthetic(SyntheticKind::keyword_presence, 101, 3);
  ones = 0;
  for (const auto& ex : odd.examples) ones += ex.label;
  EXPECT_TRUE(ones == 50 || ones == 51);
}

TEST(Synthetic, RejectsTinyRequests) {
  EXPECT_THROW(gen_synthetic(SyntheticKind::pair_match, 9, 1), ContractError);
}

TEST(Synthetic, PairMatchLabelAgreesWithKeys) {
  const auto& tok = Tokenizer::standard();
  const auto d = gen_synthetic(SyntheticKind::pair_match, 200, 11);
  for (const auto& ex : d.examples) {
    std::vector<std::string> keys;
    for (auto id : ex.ids)
      if (tok.word(id).rfind("key", 0) == 0) keys.push_back(tok.word(id));
    ASSERT_EQ(keys.size(), 2u);
    EXPECT_EQ(ex.label, keys[0] == keys[1] ? 1u : 0u);
  }
}

TEST(Synthetic, StructuralTokensIdenticalAcrossExamples) {
  for (auto kind : {SyntheticKind::pair_match, SyntheticKind::keyword_presence, SyntheticKind::order_sensitive}) {
    const auto d = gen_synthetic(kind, 50, 2);
    const auto& task = builtin_task(kind);
    const auto& first = d.examples.front();
    EXPECT_EQ(first.structural, task.structural_positions);
    EXPECT_EQ(first.structural.size(), task.template_token_count(Tokenizer::standard()));
    for (const auto& ex : d.examples) {
      ASSERT_EQ(ex.structural, first.structural);
      ASSERT_EQ(ex.length(), first.length());
      for (auto p : ex.structural) EXPECT_EQ(ex.ids[p], first.ids[p]);
    }
  }
}

TEST(Synthetic, OrderTaskDefeatsBagOfWords) {
  const auto train = gen_synthetic(SyntheticKind::order_sensitive, 1000, 21);
  const auto test = gen_synthetic(SyntheticKind::order_sensitive, 400, 22);
  const double acc = bag_of_words_probe(train, test, Tokenizer::standard().size());
  EXPECT_GT(acc, 0.40);
  EXPECT_LT(acc, 0.60);
  // The same probe solves the keyword task, so the probe itself is sound.
  const auto ktrain = gen_synthetic(SyntheticKind::keyword_presence, 1000, 21);
  const auto ktest = gen_synthetic(SyntheticKind::keyword_presence, 400, 22);
  EXPECT_GE(bag_of_words_probe(ktrain, ktest, Tokenizer::standard().size()), 0.95);
}

TEST(Split, SizesAndPartition) {
  const auto d = gen_synthetic(SyntheticKind::keyword_presence, 100, 4);
  const auto [train, val] = split_dataset(d, 0.9, 8);
  EXPECT_EQ(train.size(), 90u);
  EXPECT_EQ(val.size(), 10u);
  std::multiset<std::vector<std::int32_t>> all, parts;
  for (const auto& ex : d.examples) all.insert(ex.ids);
  for (const auto& ex : train.examples) parts.insert(ex.ids);
  for (const auto& ex : val.examples) parts.insert(ex.ids);
  EXPECT_EQ(all, parts);
}

TEST(Split, SeedDeterminesSplit) {
  const auto d = gen_synthetic(SyntheticKind::keyword_presence, 100, 4);
  const auto a = split_dataset(d, 0.9, 8), b = split_dataset(d, 0.9, 8), c = split_dataset(d, 0.9, 9);
  bool differs = false;
  for (std::size_t i = 0; i < a.second.size(); ++i) {
    EXPECT_EQ(a.second.examples[i].ids, b.second.examples[i].ids);
    differs |= a.second.examples[i].ids != c.second.examples[i].ids;
  }
  EXPECT_TRUE(differs);
}

TEST(Split, RejectsBadArguments) {
  const auto d = gen_synthetic(SyntheticKind::keyword_presence, 20, 4);
  EXPECT_THROW(split_dataset(d, 1.0, 1), ContractError);
  EXPECT_THROW(split_dataset(d, 0.0, 1), ContractError);
  Dataset small{d.task, {d.examples.begin(), d.examples.begin() + 5}};
  EXPECT_THROW(split_dataset(small, 0.5, 1), ContractError);
}

TEST(Jsonl, EmptyFileGivesEmptyDataset) {
  const auto path = temp_file("empty.jsonl", "");
  const auto d = load_jsonl(path.string(), builtin_task("pair_match"), 64, 10);
  EXPECT_TRUE(d.empty());
}

TEST(Jsonl, SingleLineCarriesStructuralPositions) {
  const auto path = temp_file("one.jsonl",
                              R"({"slot_1": "w001 key2", "slot_2": "w003 w004 key2", "label": "yes"})" "\n\n");
  const auto& task = builtin_task("pair_match");
  const auto d = load_jsonl(path.string(), task, 64, 10);
  ASSERT_EQ(d.size(), 1u);
  const auto& ex = d.examples[0];
  EXPECT_EQ(ex.label, 1u);
  // bos premise : w001 key2 hypothesis : w003 w004 key2 .
  EXPECT_EQ(ex.length(), 11u);
  EXPECT_EQ(ex.structural, (std::vector<std::size_t>{0, 1, 2, 5, 6, 10}));
}

TEST(Jsonl, UnknownLabelReportsLineNumber) {
  const auto path = temp_file("badlabel.jsonl", R"({"slot_1": "w001", "slot_2": "w002", "label": "maybe"})" "\n");
  try {
    load_jsonl(path.string(), builtin_task("pair_match"), 64, 10);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
}

TEST(Jsonl, MalformedAndMissingFields) {
  const auto bad = temp_file("malformed.jsonl", R"({"slot_1": "w001", "label": "yes"})" "\n{oops\n");
  try {
    load_jsonl(bad.string(), builtin_task("pair_match"), 64, 10);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  const auto missing = temp_file("missing.jsonl", R"({"slot_2": "w001", "label": "yes"})" "\n");
  EXPECT_THROW(load_jsonl(missing.string(), builtin_task("pair_match"), 64, 10), ParseError);
  EXPECT_THROW(load_jsonl("/nonexistent/x.jsonl", builtin_task("pair_match"), 64, 10), IoError);
}

TEST(Render, TruncationKeepsTemplate) {
  const auto& task = builtin_task("pair_match");
  const auto& tok = Tokenizer::standard();
  std::map<std::string, std::string> slots{{"slot_1", "w001 w002 w003 w004 w005 w006"}, {"slot_2", "w007 w008"}};
  const auto full = render_example(task, slots, 0, 1000);
  const auto cut = render_example(task, slots, 0, 9);
  EXPECT_EQ(cut.length(), 9u);
  EXPECT_EQ(cut.structural.size(), task.template_token_count(tok));
  for (auto p : cut.structural) {
    EXPECT_NE(tok.word(cut.ids[p]).rfind('w', 0), 0u) << tok.word(cut.ids[p]);
  }
  // The longer slot shrinks before the shorter one.
  EXPECT_EQ(tok.detokenize(cut.ids), "<bos> premise : w001 w002 hypothesis : w007 .");
  EXPECT_GT(full.length(), cut.length());
  EXPECT_THROW(render_example(task, slots, 0, 5), ConfigError);
}

TEST(Batching, RightPadsToLongest) {
  const auto& task = builtin_task("keyword_presence");
  Dataset d{task.name, {render_example(task, {{"slot_1", "w001"}}, 0, 100),
                       render_example(task, {{"slot_1", "w001 w002 w003"}}, 1, 100)}};
  const Batch b = make_batch(d);
  EXPECT_EQ(b.batch_size, 2u);
  EXPECT_EQ(b.seq_len, 7u);
  EXPECT_EQ(b.token_ids[5], Tokenizer::kPad);
  EXPECT_EQ(b.mask[4], 1);
  EXPECT_EQ(b.mask[5], 0);
  EXPECT_EQ(b.labels, (std::vector<std::size_t>{0, 1}));
}
