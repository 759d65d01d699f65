#include <gtest/gtest.h>

#include <fstream>
#include <limits>

#include <unistd.h>

#include "crft/error.hpp"
#include "crft/trainer.hpp"

using namespace crft;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("crft_trainer_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.encoder.c2 = c.model.encoder.c4 = c.model.encoder.c8 = 8;
  c.model.coarse_layers = 1;
  c.model.dgfo.cf = 8;
  c.model.dgfo.residual_width = 8;
  c.model.dgfo.cenet_width = 4;
  c.model.dgfo.iterations = 2;
  c.lr = 1e-3;
  c.seed = 3;
  return c;
}

const fs::path& dataset() {
  static const fs::path d = [] {
    fs::path p = scratch("data");
    write_dataset(4, 21, Preset::Easy, 16, p);
    return p;
  }();
  return d;
}

std::vector<double> flat(const ParamStore& ps) {
  std::vector<double> out;
  for (const auto& n : ps.names()) {
    auto v = ps.get(n).values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

}  // namespace

TEST(TrainConfig, JsonRoundTripAndUnknownKeys) {
  TrainConfig c = tiny_config();
  c.enable_il = false;
  c.lambda_c = 0.25;
  TrainConfig back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_THROW(TrainConfig::from_json(json{{"learning_rate", 1.0}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(json{{"model", {{"dgfo", {{"cf", 8}}}}}}), ConfigError);
  EXPECT_EQ(TrainConfig::from_json(json{{"model", {{"cf", 8}}}}).model.dgfo.cf, 8u);
  TrainConfig bad = tiny_config();
  bad.batch = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.lr = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(SampleIndex, EachEpochIsAPermutation) {
  for (std::size_t e = 0; e < 3; ++e) {
    std::vector<int> seen(7, 0);
    for (std::size_t g = 0; g < 7; ++g) ++seen[sample_index(5, 7, e * 7 + g)];
    for (int s : seen) EXPECT_EQ(s, 1);
  }
  EXPECT_EQ(sample_index(5, 7, 3), sample_index(5, 7, 3));
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  TrainConfig c = tiny_config();
  c.lr = 0.0;
  auto data = read_dataset(dataset());
  Trainer t(c);
  const auto before = flat(t.params());
  for (int i = 0; i < 3; ++i) t.step(data);
  EXPECT_EQ(flat(t.params()), before);
  EXPECT_EQ(t.steps_done(), 3u);
}

TEST(Trainer, OverfitsSingleSample) {
  TrainConfig c = tiny_config();
  c.lr = 3e-3;
  auto data = read_dataset(dataset());
  data.resize(1);
  Trainer t(c);
  const double first = t.step(data).l_total;
  double last = first;
  for (int i = 0; i < 150; ++i) last = t.step(data).l_total;
  EXPECT_LT(last, 0.7 * first);
}

TEST(Trainer, NonFiniteParameterRaisesNumericError) {
  auto data = read_dataset(dataset());
  Trainer t(tiny_config());
  t.params().get(t.params().names().front()).mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    t.step(data);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Trainer, LogsAreBitIdenticalAcrossRuns) {
  TrainConfig c = tiny_config();
  c.data_dir = dataset().string();
  c.max_steps = 5;
  const fs::path o1 = scratch("run1"), o2 = scratch("run2");
  train(c, o1);
  train(c, o2);
  EXPECT_EQ(slurp(o1 / "train_log.jsonl"), slurp(o2 / "train_log.jsonl"));
  EXPECT_EQ(lines(o1 / "train_log.jsonl").size(), 5u);
  EXPECT_EQ(slurp(o1 / "final" / "manifest.json"), slurp(o2 / "final" / "manifest.json"));
  fs::remove_all(o1);
  fs::remove_all(o2);
}

TEST(Trainer, ResumeReproducesUninterruptedTrajectory) {
  TrainConfig c = tiny_config();
  c.data_dir = dataset().string();
  c.max_steps = 6;
  c.checkpoint_every = 3;
  const fs::path full = scratch("full"), part = scratch("part");
  train(c, full);
  const auto ref = lines(full / "train_log.jsonl");
  fs::create_directories(part);
  train(c, part, full / "checkpoints" / "step_000003");
  const auto resumed = lines(part / "train_log.jsonl");
  ASSERT_EQ(resumed.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(resumed[i], ref[3 + i]);
  fs::remove_all(full);
  fs::remove_all(part);
}

TEST(Trainer, CheckpointRoundTripIsExact) {
  TrainConfig c = tiny_config();
  auto data = read_dataset(dataset());
  Trainer t(c);
  t.step(data);
  const fs::path d = scratch("ckpt");
  t.save_checkpoint(d);
  Trainer r = Trainer::resume(d, c);
  EXPECT_EQ(flat(r.params()), flat(t.params()));
  EXPECT_EQ(r.steps_done(), 1u);
  EXPECT_EQ(r.step(data).l_total, t.step(data).l_total);
  EXPECT_EQ(checkpoint_config(d).model.to_json(), c.model.to_json());
  TrainConfig other = c;
  other.model.dgfo.cf = 16;
  EXPECT_THROW(Trainer::resume(d, other), ConfigError);
  fs::remove_all(d);
}

TEST(Evaluate, DeterministicAcrossThreadCounts) {
  TrainConfig c = tiny_config();
  ParamStore ps = build_params(c.model, 1);
  auto data = read_dataset(dataset());
  EvalReport a = evaluate(ps, c.model, c.forward_options(), data, 1);
  EvalReport b = evaluate(ps, c.model, c.forward_options(), data, 3);
  EXPECT_EQ(a.per_sample, b.per_sample);
  EXPECT_EQ(a.per_sample.size(), 4u);
  EXPECT_EQ(a.cmr.size(), 50u);
  EXPECT_GE(a.mean_coarse, 0.0);
}

TEST(Evaluate, EmptySetAndMissingCheckpoint) {
  TrainConfig c = tiny_config();
  ParamStore ps = build_params(c.model, 1);
  EXPECT_THROW(evaluate(ps, c.model, c.forward_options(), {}), ConfigError);
  EXPECT_THROW(checkpoint_config(scratch("nope")), IoError);
}
