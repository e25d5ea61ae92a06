#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "accentctc/training.hpp"

using namespace accentctc;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.conv_layers = {{8, 4, 2}, {8, 4, 2}};
  c.d_encoder = 8;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ffn = 16;
  c.n_accents = 3;
  c.dropout = 0.1;
  c.layerdrop = 0.0;
  return c;
}

Dataset tiny_data(std::size_t n = 6, bool labelled = true) {
  SynthSpec spec;
  spec.n_accents = 3;
  spec.samples_per_symbol = 16;
  spec.max_words = 2;
  spec.max_word_length = 3;
  Dataset out;
  synth::CharTrigram text(spec.alphabet, 1);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(100 + i);
    Utterance u;
    u.id = "u" + std::to_string(i);
    u.transcript = text.sample(rng, 1 + i % 2, 3);
    u.signal = synth::render(u.transcript, i % 3, spec, rng);
    if (labelled) u.accent = i % 3;
    out.push_back(std::move(u));
  }
  return out;
}

TrainConfig quick(Task task, std::size_t updates) {
  TrainConfig t;
  t.task = task;
  t.learning_rate = 1e-3;
  t.warmup_steps = 2;
  t.max_updates = updates;
  t.batch_size = 2;
  return t;
}

std::vector<Parameter<float>*> one_param(Parameter<float>& p) { return {&p}; }

}  // namespace

TEST(LrSchedule, Examples) {
  EXPECT_EQ(lr_schedule(0, 1600, 2e-5), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(800, 1600, 2e-5), 1e-5);
  EXPECT_EQ(lr_schedule(1600, 1600, 2e-5), 2e-5);
  EXPECT_EQ(lr_schedule(99999, 1600, 2e-5), 2e-5);
  EXPECT_EQ(lr_schedule(0, 0, 3e-4), 3e-4);
}

TEST(Adam, FirstStepClosedForm) {
  Parameter<float> p("w", Tensor<float>(Shape{1}));
  p.grad[0] = 1.0f;
  OptimizerState st;
  adam_step(one_param(p), st, 0.1);
  EXPECT_NEAR(p.value[0], -0.1, 1e-7);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Parameter<float> p("w", Tensor<float>(Shape{3}, {0.5f, -1.0f, 2.0f}));
  OptimizerState st;
  for (int i = 0; i < 50; ++i) adam_step(one_param(p), st, 0.1);
  EXPECT_EQ(p.value[0], 0.5f);
  EXPECT_EQ(p.value[1], -1.0f);
  EXPECT_EQ(p.value[2], 2.0f);
}

TEST(Adam, MatchesScalarRecurrence) {
  const double grads[] = {0.3, -1.2, 0.7, 0.0, 2.5};
  std::vector<double> p{1.0};
  AdamMoments mom;
  OptimizerState st;
  double ref = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    ++st.step;
    const double g = grads[t - 1];
    adam_update<double>(p, std::vector<double>{g}, mom, st, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ref -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p[0], ref, 1e-15);
  }
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<double> p(2), g(3);
  AdamMoments mom;
  OptimizerState st;
  st.step = 1;
  EXPECT_THROW(adam_update<double>(p, g, mom, st, 0.1), ShapeError);
}

TEST(Adam, FrozenParameterIsSkipped) {
  Parameter<float> p("w", Tensor<float>(Shape{1}, {1.0f}));
  p.grad[0] = 1.0f;
  p.trainable = false;
  OptimizerState st;
  adam_step(one_param(p), st, 0.1);
  EXPECT_EQ(p.value[0], 1.0f);
}

TEST(ClipGradNorm, ScalesOnlyAboveThreshold) {
  Parameter<float> a("a", Tensor<float>(Shape{2})), b("b", Tensor<float>(Shape{1}));
  a.grad[0] = 3.0f;
  a.grad[1] = 4.0f;
  b.grad[0] = 12.0f;
  std::vector<Parameter<float>*> ps{&a, &b};
  EXPECT_NEAR(clip_grad_norm(ps, 5.0), 13.0, 1e-6);
  EXPECT_NEAR(a.grad[0], 3.0 * 5 / 13, 1e-6);
  EXPECT_NEAR(b.grad[0], 12.0 * 5 / 13, 1e-6);
  EXPECT_NEAR(clip_grad_norm(ps, 5.0), 5.0, 1e-5);
  a.grad.fill(0.1f);
  b.grad.fill(0.0f);
  clip_grad_norm(ps, 5.0);
  EXPECT_EQ(a.grad[0], 0.1f);
}

TEST(TrainConfig, ValidationAndRoundTrip) {
  TrainConfig t = TrainConfig::accent_id_defaults();
  EXPECT_EQ(t.head_only_updates, 2000u);
  EXPECT_EQ(t.warmup_steps, 1600u);
  t.head_only_updates = t.max_updates + 1;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.learning_rate = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);

  t = TrainConfig{};
  t.accent_mode = AccentMode::dynamic;
  t.learning_rate = 3e-4;
  Config cfg;
  t.to_config(cfg);
  const TrainConfig back = TrainConfig::from_config(cfg, TrainConfig{});
  EXPECT_EQ(back.accent_mode, AccentMode::dynamic);
  EXPECT_EQ(back.learning_rate, 3e-4);
}

TEST(Checkpoint, RoundTripGivesBitwiseIdenticalForward) {
  const fs::path path = fs::temp_directory_path() / "accentctc_ckpt_rt.bin";
  ModelConfig mc = tiny_model();
  mc.accent_mode = AccentMode::true_label;
  AsrModel<float> a(mc);
  // Make the injection non-trivial so it is part of the round trip.
  for (float& v : a.params().get("inject.encoder.proj").value.data()) v = 0.25f;
  save_checkpoint(path, run_config(mc, TrainConfig{}), a.params());

  std::ifstream in(path, std::ios::binary);
  char magic[7];
  in.read(magic, 7);
  EXPECT_EQ(std::string(magic, 7), "NNCKPT1");

  const Checkpoint ck = load_checkpoint(path);
  auto b = load_asr<float>(ck);
  const Dataset d = tiny_data(2);
  const AccentInput<float> acc = AccentLabel(1, 3);
  const auto ya = a.log_probs(d[0].signal, acc), yb = b->log_probs(d[0].signal, acc);
  EXPECT_TRUE(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
  EXPECT_EQ(parameter_hash(a.params()), parameter_hash(b->params()));
  EXPECT_EQ(ck.config.get("model.accent_mode"), "true_label");
  fs::remove(path);
}

TEST(Checkpoint, CorruptOrMismatchedFilesAreDataErrors) {
  const fs::path path = fs::temp_directory_path() / "accentctc_ckpt_bad.bin";
  std::ofstream(path, std::ios::binary) << "NOTACKPT";
  EXPECT_THROW(load_checkpoint(path), DataError);

  AsrModel<float> m(tiny_model());
  save_checkpoint(path, run_config(tiny_model(), TrainConfig{}), m.params());
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 3);
  EXPECT_THROW(load_checkpoint(path), DataError);

  save_checkpoint(path, run_config(tiny_model(), TrainConfig{}), m.params());
  Checkpoint ck = load_checkpoint(path);
  ModelConfig wider = tiny_model();
  wider.d_ffn = 32;
  AsrModel<float> other(wider);
  EXPECT_THROW(apply_checkpoint(other.params(), ck), DataError);
  ck.tensors.erase("output.bias");
  EXPECT_THROW(apply_checkpoint(m.params(), ck), DataError);
  EXPECT_THROW(load_checkpoint(fs::temp_directory_path() / "accentctc_no_such.bin"), DataError);
  fs::remove(path);
}

TEST(TrainAccentId, HeadOnlyPhaseFreezesEverythingButTheHead) {
  TrainConfig tc = quick(Task::accent_id, 6);
  tc.head_only_updates = 3;
  AccentIdModel<float> model(tiny_model());
  const auto ctx0 = parameter_hash(model.params(), "context.");
  const auto enc0 = parameter_hash(model.params(), "encoder.");
  const auto head0 = parameter_hash(model.params(), "accent_head.");
  std::uint64_t ctx3 = 0, enc3 = 0, head3 = 0;
  auto log = fit_accent_id(model, tc, tiny_data(), [&](const LogRow& r) {
    if (r.step != 3) return;
    ctx3 = parameter_hash(model.params(), "context.");
    enc3 = parameter_hash(model.params(), "encoder.");
    head3 = parameter_hash(model.params(), "accent_head.");
  });
  ASSERT_EQ(log.size(), 6u);
  EXPECT_EQ(ctx3, ctx0);
  EXPECT_EQ(enc3, enc0);
  EXPECT_NE(head3, head0);
  // After the head-only window the context network trains, the encoder never.
  EXPECT_NE(parameter_hash(model.params(), "context."), ctx0);
  EXPECT_EQ(parameter_hash(model.params(), "encoder."), enc0);
}

TEST(TrainAccentId, UnfrozenEncoderTrainsAfterHeadOnlyWindow) {
  TrainConfig tc = quick(Task::accent_id, 4);
  tc.head_only_updates = 2;
  tc.freeze_encoder = false;
  AccentIdModel<float> model(tiny_model());
  const auto enc0 = parameter_hash(model.params(), "encoder.");
  fit_accent_id(model, tc, tiny_data());
  EXPECT_NE(parameter_hash(model.params(), "encoder."), enc0);
}

TEST(TrainAccentId, UnlabelledUtteranceIsDataError) {
  Dataset d = tiny_data();
  d[2].accent.reset();
  EXPECT_THROW(train_accent_id<float>(quick(Task::accent_id, 1), d, tiny_model()), DataError);
  d = tiny_data();
  d[1].accent = 7;
  EXPECT_THROW(train_accent_id<float>(quick(Task::accent_id, 1), d, tiny_model()), DataError);
}

TEST(TrainAccentId, InitCopiesEncoderAndContextOnly) {
  ModelConfig other = tiny_model();
  other.init_seed = 77;
  AsrModel<float> donor(other);
  Checkpoint ck{run_config(other, TrainConfig{}), {}};
  for (const auto* p : donor.params().all()) ck.tensors.emplace(p->name, p->value);
  TrainConfig tc = quick(Task::accent_id, 1);
  tc.head_only_updates = 1;
  auto run = train_accent_id<float>(tc, tiny_data(), tiny_model(), &ck);
  EXPECT_EQ(parameter_hash(run.model->params(), "encoder."), parameter_hash(donor.params(), "encoder."));
  EXPECT_EQ(parameter_hash(run.model->params(), "context."), parameter_hash(donor.params(), "context."));
}

TEST(TrainAsr, SafeStartFirstStepLossMatchesBaseline) {
  TrainConfig tc = quick(Task::asr, 1);
  const Dataset d = tiny_data();
  tc.accent_mode = AccentMode::none;
  const auto base = train_asr<float>(tc, d, tiny_model());
  tc.accent_mode = AccentMode::true_label;
  const auto with_label = train_asr<float>(tc, d, tiny_model());
  ASSERT_EQ(base.log.size(), 1u);
  EXPECT_EQ(base.log[0].loss, with_label.log[0].loss);
  // The projections have started moving after the shared first step.
  bool moved = false;
  for (float v : with_label.model->params().get("inject.context.proj").value.data()) moved |= v != 0.0f;
  EXPECT_TRUE(moved);
}

TEST(TrainAsr, LossIsFiniteAndFrozenEncoderUnchanged) {
  TrainConfig tc = quick(Task::asr, 8);
  AsrModel<float> model(tiny_model());
  const auto enc0 = parameter_hash(model.params(), "encoder.");
  const auto log = fit_asr(model, tc, tiny_data());
  ASSERT_EQ(log.size(), 8u);
  for (const LogRow& r : log) EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_EQ(parameter_hash(model.params(), "encoder."), enc0);
  EXPECT_EQ(log[0].lr, 5e-4);
  EXPECT_EQ(log[7].lr, 1e-3);
}

TEST(TrainAsr, TrainingReducesLoss) {
  TrainConfig tc = quick(Task::asr, 60);
  tc.learning_rate = 3e-3;
  tc.freeze_encoder = false;
  const Dataset d = tiny_data(4);
  const auto run = train_asr<float>(tc, d, tiny_model());
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += run.log[i].loss;
    last += run.log[run.log.size() - 1 - i].loss;
  }
  EXPECT_LT(last, 0.7 * first);
}

TEST(TrainAsr, ReproducibleForSameSeed) {
  TrainConfig tc = quick(Task::asr, 4);
  const Dataset d = tiny_data();
  const auto a = train_asr<float>(tc, d, tiny_model());
  const auto b = train_asr<float>(tc, d, tiny_model());
  EXPECT_EQ(parameter_hash(a.model->params()), parameter_hash(b.model->params()));
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  tc.seed = 2;
  const auto c = train_asr<float>(tc, d, tiny_model());
  EXPECT_NE(parameter_hash(a.model->params()), parameter_hash(c.model->params()));
}

TEST(TrainAsr, ModeDataPreconditions) {
  TrainConfig tc = quick(Task::asr, 1);
  tc.accent_mode = AccentMode::dynamic;
  EXPECT_THROW(train_asr<float>(tc, tiny_data(), tiny_model()), UsageError);
  tc.accent_mode = AccentMode::true_label;
  EXPECT_THROW(train_asr<float>(tc, tiny_data(4, false), tiny_model()), DataError);
  tc.accent_mode = AccentMode::none;
  EXPECT_NO_THROW(train_asr<float>(tc, tiny_data(4, false), tiny_model()));
}

TEST(TrainAsr, DynamicModeUsesFrozenAccentModel) {
  AccentIdModel<float> aid(tiny_model());
  const auto aid0 = parameter_hash(aid.params());
  TrainConfig tc = quick(Task::asr, 2);
  tc.accent_mode = AccentMode::dynamic;
  const auto run = train_asr<float>(tc, tiny_data(4, false), tiny_model(), &aid);
  EXPECT_EQ(parameter_hash(aid.params()), aid0);
  EXPECT_EQ(run.log.size(), 2u);

  ModelConfig mismatched = tiny_model();
  mismatched.n_accents = 4;
  AccentIdModel<float> wrong(mismatched);
  EXPECT_THROW(train_asr<float>(tc, tiny_data(4, false), tiny_model(), &wrong), ConfigError);
}

TEST(TrainingLog, CsvHeaderAndRows) {
  const fs::path path = fs::temp_directory_path() / "accentctc_log.csv";
  write_training_log(path, {{1, 2.5, 1e-4, 3.0}, {2, 2.0, 2e-4, 6.5}});
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "step,loss,lr,wall_ms");
  EXPECT_EQ(row, "1,2.5,0.0001,3.000");
  fs::remove(path);
}
