#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <tuple>

#include "test_support.hpp"

using namespace mvm;
using namespace mvm::testing;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mvm_harness_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Five-frame words over the micro vocabulary, so micro_config() fits as is.
Dataset micro_dataset(int per_word, std::uint64_t split_seed) {
  LexiconSpec s;
  s.phonemes = 5;
  s.visemes = 3;
  s.words = 4;
  s.word_length = 5;
  s.homophene_pairs = 1;
  const auto lex = build_lexicon(s);
  return {lex, 5, sample_split(lex, 5, per_word, split_seed)};
}

std::vector<double> flat(const LipReadingModel<double>& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

}  // namespace

TEST(AdamW, DecayOnlyWhenGradientIsZero) {
  A p({3}, {1.0, -2.0, 0.5});
  std::vector<A> params{p};
  auto st = OptimizerState<double>::for_parameters(params, {1e-4, 0.9, 0.999, 1e-8, 0.01});
  p.ensure_grad();  // zero gradient buffer
  adamw_step(params, st);
  EXPECT_DOUBLE_EQ(p[0], 1.0 * (1 - 1e-6));
  EXPECT_DOUBLE_EQ(p[1], -2.0 * (1 - 1e-6));
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  // With bias correction the first step is lr * g/|g| for any g.
  A p({2}, {1.0, 1.0});
  std::vector<A> params{p};
  auto st = OptimizerState<double>::for_parameters(params, {1e-4, 0.9, 0.999, 1e-8, 0.0});
  p.ensure_grad()[0] = 3.0;
  p.ensure_grad()[1] = -0.02;
  adamw_step(params, st);
  EXPECT_NEAR(p[0], 1.0 - 1e-4, 1e-11);
  EXPECT_NEAR(p[1], 1.0 + 1e-4, 1e-9);
}

TEST(AdamW, NonFiniteGradientLeavesStateUntouched) {
  A p({2}, {1.0, 2.0});
  std::vector<A> params{p};
  auto st = OptimizerState<double>::for_parameters(params, {});
  p.ensure_grad()[1] = std::nan("");
  EXPECT_THROW(adamw_step(params, st), NumericalError);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(AdamW, StateSizeMismatchRejected) {
  std::vector<A> params{A({2})};
  auto st = OptimizerState<double>::for_parameters({A({3})}, {});
  EXPECT_THROW(adamw_step(params, st), std::invalid_argument);
}

TEST(Config, TextRoundTrip) {
  auto c = micro_config();
  c.lr = 3.5e-4;
  c.dilations = {1, 3};
  c.literal_rec_sum = true;
  c.seed = 12345678901234ull;
  EXPECT_EQ(parse_config_text(to_text(c)), c);
}

TEST(Config, UnknownKeyAndBadSchemaRejected) {
  EXPECT_THROW(parse_config_text("not_a_key = 3\n"), std::invalid_argument);
  EXPECT_THROW(parse_config_text("schema_version = 99\n"), std::invalid_argument);
  EXPECT_THROW(parse_config_text("dim\n"), std::invalid_argument);
  EXPECT_EQ(parse_config_text("# comment only\n\n dim = 16 \n").dim, 16);
}

TEST(Config, MissingFileIsFormatError) { EXPECT_THROW(load_config(scratch("nope.cfg")), FormatError); }

TEST(Config, ValidateRejectsIndivisibleHeads) {
  auto c = micro_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto cfg = config_for(micro_config(), micro_dataset(4, 1));
  cfg.steps = 5;
  const auto res = train<double>(cfg, micro_dataset(4, 1));
  const auto a = scratch("a.mvmc"), b = scratch("b.mvmc");
  save_checkpoint(a, res.checkpoint);
  save_checkpoint(b, load_checkpoint(a));
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_FALSE(sa.empty());
  EXPECT_EQ(sa, sb);

  const auto back = model_from_checkpoint<double>(load_checkpoint(a));
  EXPECT_EQ(flat(back), flat(res.model));
  const auto data = micro_dataset(2, 2);
  const auto batch = make_batch(data.examples, std::vector<std::size_t>{0, 1, 2}, 5, false);
  const auto x = forward_infer(res.model, batch.viseme_tokens, 5), y = forward_infer(back, batch.viseme_tokens, 5);
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));

  const auto opt = optimizer_from_checkpoint<double>(load_checkpoint(a));
  EXPECT_EQ(opt.step, 5u);
  EXPECT_EQ(opt.first_moment, res.optimizer.first_moment);
}

TEST(Checkpoint, CorruptionAndShapeMismatchDetected) {
  const auto m = LipReadingModel<double>::init(micro_config());
  const std::mt19937_64 rng(1);
  auto bytes = encode_checkpoint(make_checkpoint<double>(m, nullptr, 0, rng));
  bytes[bytes.size() / 2] ^= 1;
  EXPECT_THROW(decode_checkpoint(ByteReader(bytes)), FormatError);

  auto c = make_checkpoint<double>(m, nullptr, 0, rng);
  c.config.dim = 16;
  EXPECT_THROW(model_from_checkpoint<double>(c), FormatError);
  EXPECT_THROW(load_checkpoint(scratch("missing.mvmc")), FormatError);
}

TEST(Train, ZeroStepsReturnsInitialisation) {
  const auto data = micro_dataset(4, 1);
  auto cfg = config_for(micro_config(), data);
  cfg.steps = 0;
  const auto res = train<double>(cfg, data);
  EXPECT_TRUE(res.log.empty());
  EXPECT_EQ(flat(res.model), flat(LipReadingModel<double>::init(cfg)));
}

TEST(Train, LogHasOneRecordPerStep) {
  const auto data = micro_dataset(4, 1);
  auto cfg = config_for(micro_config(), data);
  cfg.steps = 7;
  std::size_t calls = 0;
  const auto res = train<double>(cfg, data, [&](const TrainLogRecord&) { ++calls; });
  ASSERT_EQ(res.log.size(), 7u);
  EXPECT_EQ(calls, 7u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(res.log[i].step, i + 1);
    EXPECT_TRUE(std::isfinite(res.log[i].total));
  }
  EXPECT_EQ(to_json(res.log[0])["step"], 1);
}

TEST(Train, OverfitsSingleBatch) {
  auto data = micro_dataset(1, 3);  // one example per word, one batch of four
  auto cfg = config_for(micro_config(), data);
  cfg.batch = 4;
  cfg.steps = 500;
  cfg.lr = 1e-2;
  const auto res = train<double>(cfg, data);
  ASSERT_FALSE(res.diverged);
  EXPECT_DOUBLE_EQ(evaluate(res.model, data).overall_accuracy, 1.0);
}

TEST(Train, SameSeedSameModel) {
  const auto data = micro_dataset(4, 1);
  auto cfg = config_for(micro_config(), data);
  cfg.steps = 10;
  EXPECT_EQ(flat(train<double>(cfg, data).model), flat(train<double>(cfg, data).model));
  auto other = cfg;
  other.seed = 2;
  EXPECT_NE(flat(train<double>(cfg, data).model), flat(train<double>(other, data).model));
}

TEST(Train, MismatchedDatasetRejected) {
  const auto data = micro_dataset(2, 1);
  auto cfg = micro_config();
  cfg.words = 5;
  EXPECT_THROW(train<double>(cfg, data), std::invalid_argument);
}

TEST(Evaluate, SelfDeltaIsZero) {
  const auto data = micro_dataset(5, 4);
  const auto m = LipReadingModel<double>::init(config_for(micro_config(), data));
  const auto r = evaluate(m, data, &m, "self");
  ASSERT_EQ(r.homophene_table.size(), data.lexicon.homophene_pairs.size());
  for (const auto& row : r.homophene_table) {
    EXPECT_EQ(row.delta_a, 0.0);
    EXPECT_EQ(row.delta_b, 0.0);
  }
  EXPECT_EQ(r.baseline, "self");
}

TEST(Evaluate, UntrainedModelSitsNearChance) {
  const auto lex = build_lexicon({});
  const Dataset data{lex, 24, sample_split(lex, 24, 50, 5)};
  auto cfg = config_for(ModelConfig{}, data);
  double mean = 0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    cfg.seed = seed;
    mean += evaluate(LipReadingModel<double>::init(cfg), data).overall_accuracy / 4;
  }
  // Four models on 1000 examples each; allow a generous band around 1/20.
  EXPECT_NEAR(mean, 0.05, 0.05);
}

TEST(Evaluate, AccuraciesAreConsistent) {
  const auto lex = build_lexicon({});
  const Dataset data{lex, 24, sample_split(lex, 24, 10, 6)};
  auto cfg = config_for(ModelConfig{}, data);
  cfg.steps = 20;
  cfg.lr = 1e-3;
  Dataset train_set{lex, 24, sample_split(lex, 24, 10, 7)};
  const auto res = train<double>(cfg, train_set);
  const auto calls = res.model.audio_frontend_calls->load();
  const auto r = evaluate(res.model, data);
  EXPECT_EQ(res.model.audio_frontend_calls->load(), calls);

  double weighted = 0, n = 0;
  for (std::size_t k = 0; k < r.per_word_accuracy.size(); ++k) {
    weighted += r.per_word_accuracy[k] * static_cast<double>(r.per_word_count[k]);
    n += static_cast<double>(r.per_word_count[k]);
  }
  EXPECT_NEAR(r.overall_accuracy, weighted / n, 1e-12);
  const double hom_share = 10.0 / 20.0;  // 5 pairs, 10 of 20 words
  EXPECT_NEAR(r.overall_accuracy, hom_share * r.homophene_accuracy + (1 - hom_share) * r.non_homophene_accuracy,
              1e-12);
  EXPECT_GT(r.mean_loss, 0.0);
  const auto j = to_json(r);
  EXPECT_EQ(j["homophene_table"].size(), 5u);
}

TEST(Evaluate, ReportIsDeterministic) {
  const auto data = micro_dataset(4, 8);
  auto cfg = config_for(micro_config(), data);
  cfg.steps = 10;
  const auto a = evaluate(train<double>(cfg, data).model, data);
  const auto b = evaluate(train<double>(cfg, data).model, data);
  EXPECT_TRUE(a == b);
}

TEST(InspectMemory, WritesOneCsvPerExample) {
  const auto data = micro_dataset(1, 9);
  const auto m = LipReadingModel<double>::init(config_for(micro_config(), data));
  const auto dir = scratch("inspect");
  std::filesystem::remove_all(dir);
  const auto paths = inspect_memory(m, data.examples, dir);
  ASSERT_EQ(paths.size(), data.examples.size());
  const auto& c = m.config;
  std::ifstream in(paths[0]);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kAddressingCsvHeader);
  std::map<std::tuple<int, int, int>, double> sums;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    int level, head, frame, slot;
    double score;
    ASSERT_EQ(std::sscanf(line.c_str(), "%d,%d,%d,%d,%lf", &level, &head, &frame, &slot, &score), 5) << line;
    sums[{level, head, frame}] += score;
    ++rows;
  }
  EXPECT_EQ(rows, static_cast<std::size_t>(c.levels * c.heads * c.frames * c.slots));
  for (const auto& [key, s] : sums) EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(AddressingSeparation, ReportsFiniteDistances) {
  const auto lex = build_lexicon({});
  const Dataset data{lex, 24, sample_split(lex, 24, 4, 10)};
  auto cfg = config_for(micro_config(), data);
  const auto m = LipReadingModel<double>::init(cfg);
  const auto s = addressing_separation(m, data, 3);
  EXPECT_GE(s.homophene_distance, 0.0);
  EXPECT_GE(s.same_word_distance, 0.0);
  EXPECT_LE(s.homophene_distance, 2.0);
}

TEST(Ablation, VariantsAreConstructibleAndNested) {
  const auto variants = default_ablation_variants(ModelConfig{});
  ASSERT_EQ(variants.size(), 5u);
  EXPECT_EQ(variants[0].levels, 0);
  EXPECT_EQ(variants[1].levels, 1);
  EXPECT_EQ(variants[1].heads, 1);
  EXPECT_EQ(variants[2].heads, 4);
  EXPECT_EQ(variants[3].levels, 3);
  EXPECT_EQ(variants[4].heads, 1);
}

TEST(Ablation, SummaryAveragesRuns) {
  std::vector<AblationRun> runs(2);
  runs[0].variant = runs[1].variant = "x";
  runs[0].report.overall_accuracy = 0.8;
  runs[1].report.overall_accuracy = 0.9;
  const auto s = summarize(runs);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0].mean_accuracy, 0.85, 1e-12);
  EXPECT_EQ(s[0].runs, 2u);
}

TEST(GradCheck, MicroModelPassesAtCoarseTolerance) {
  const auto r = grad_check(micro_config(), 1e-5, 1e-5);
  EXPECT_TRUE(r.passed());
  EXPECT_FALSE(r.groups.empty());
}
