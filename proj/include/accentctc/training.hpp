#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "accentctc/config.hpp"
#include "accentctc/ctc.hpp"
#include "accentctc/data_synth.hpp"
#include "accentctc/model.hpp"

namespace accentctc {

enum class Task { accent_id, asr };

inline std::string to_string(Task t) { return t == Task::accent_id ? "accent_id" : "asr"; }

inline Task parse_task(const std::string& s) {
  if (s == "accent_id") return Task::accent_id;
  if (s == "asr") return Task::asr;
  throw ConfigError("unknown task '" + s + "' (expected accent_id or asr)");
}

struct TrainConfig {
  Task task = Task::asr;
  double learning_rate = 2e-5;
  std::size_t warmup_steps = 8000;
  std::size_t max_updates = 40000;
  // Accent ID only: updates during which only the accent FC trains.
  std::size_t head_only_updates = 0;
  // Utterances per update.
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  bool freeze_encoder = true;
  double sdc_weight = 1.0;
  AccentMode accent_mode = AccentMode::none;
  double clip_norm = 5.0;

  static TrainConfig accent_id_defaults() {
    TrainConfig c;
    c.task = Task::accent_id;
    c.warmup_steps = 1600;
    c.max_updates = 3000;
    c.head_only_updates = 2000;
    return c;
  }

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (head_only_updates > max_updates)
      throw ConfigError("train: head_only_updates must not exceed max_updates");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (sdc_weight < 0.0) throw ConfigError("train: sdc_weight must be >= 0");
    if (!(clip_norm > 0.0)) throw ConfigError("train: clip_norm must be > 0");
  }

  void to_config(Config& cfg, const std::string& prefix = "train.") const {
    cfg.set(prefix + "task", to_string(task));
    cfg.set(prefix + "learning_rate", learning_rate);
    cfg.set(prefix + "warmup_steps", warmup_steps);
    cfg.set(prefix + "max_updates", max_updates);
    cfg.set(prefix + "head_only_updates", head_only_updates);
    cfg.set(prefix + "batch_size", batch_size);
    cfg.set(prefix + "seed", seed);
    cfg.set(prefix + "freeze_encoder", freeze_encoder);
    cfg.set(prefix + "sdc_weight", sdc_weight);
    cfg.set(prefix + "accent_mode", to_string(accent_mode));
    cfg.set(prefix + "clip_norm", clip_norm);
  }

  static TrainConfig from_config(const Config& cfg, const TrainConfig& base,
                                 const std::string& prefix = "train.") {
    Config full;
    base.to_config(full, prefix);
    full.merge(cfg);
    TrainConfig c;
    c.task = parse_task(full.get(prefix + "task"));
    c.learning_rate = full.get_double(prefix + "learning_rate");
    c.warmup_steps = full.get_u64(prefix + "warmup_steps");
    c.max_updates = full.get_u64(prefix + "max_updates");
    c.head_only_updates = full.get_u64(prefix + "head_only_updates");
    c.batch_size = full.get_u64(prefix + "batch_size");
    c.seed = full.get_u64(prefix + "seed");
    c.freeze_encoder = full.get_bool(prefix + "freeze_encoder");
    c.sdc_weight = full.get_double(prefix + "sdc_weight");
    c.accent_mode = parse_accent_mode(full.get(prefix + "accent_mode"));
    c.clip_norm = full.get_double(prefix + "clip_norm");
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Optimisation

/// Linear ramp from 0 to `peak` over `warmup` steps, then constant.
inline double lr_schedule(std::size_t step, std::size_t warmup, double peak) {
  if (step >= warmup) return peak;
  return peak * static_cast<double>(step) / static_cast<double>(warmup);
}

struct AdamMoments {
  std::vector<double> m, v;
};

/// Adam state for a set of named parameters.
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::map<std::string, AdamMoments> moments;
};

/// One bias-corrected Adam update of `param` in place, using the already
/// incremented `state.step`.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, AdamMoments& mom,
                 const OptimizerState& state, double lr) {
  if (param.size() != grad.size())
    throw ShapeError("adam: gradient size " + std::to_string(grad.size()) +
                     " does not match parameter size " + std::to_string(param.size()));
  if (mom.m.empty()) {
    mom.m.assign(param.size(), 0.0);
    mom.v.assign(param.size(), 0.0);
  }
  if (mom.m.size() != param.size()) throw ShapeError("adam: moment size does not match parameter");
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
    mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = mom.m[i] / c1, vhat = mom.v[i] / c2;
    param[i] = static_cast<T>(param[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

/// Applies Adam to every trainable parameter from its `grad`.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, OptimizerState& state, double lr) {
  ++state.step;
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    adam_update<T>(p->value.data(), p->grad.data(), state.moments[p->name], state, lr);
  }
}

/// Scales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter<T>* p : params) {
    if (!p->trainable) continue;
    for (T g : p->grad.data()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (Parameter<T>* p : params)
      if (p->trainable)
        for (T& g : p->grad.data()) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  Config config;
  std::map<std::string, Tensor<float>> tensors;
};

namespace ckpt_detail {

inline constexpr char kMagic[] = "NNCKPT1";

inline void put_u(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u(std::istream& in, int bytes, const std::string& what) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == EOF) throw DataError("checkpoint truncated while reading " + what);
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Config& config,
                     const ParameterStore<T>& store) {
  using namespace ckpt_detail;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, 7);
  const std::string text = config.to_text();
  put_u(out, text.size(), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = store.all();
  put_u(out, params.size(), 4);
  for (const Parameter<T>* p : params) {
    if (p->name.size() > 0xffff) throw DataError("parameter name too long: " + p->name);
    put_u(out, p->name.size(), 2);
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_u(out, p->value.rank(), 1);
    for (std::size_t d : p->value.shape()) put_u(out, d, 4);
    for (T v : p->value.data()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u(out, bits, 4);
    }
  }
  if (!out) throw DataError("short write to checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  using namespace ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[7];
  if (!in.read(magic, 7) || std::memcmp(magic, kMagic, 7) != 0)
    throw DataError(path.string() + " is not an NNCKPT1 checkpoint");
  Checkpoint ck;
  const auto text_len = get_u(in, 4, "config length");
  std::string text(text_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(text_len)))
    throw DataError("checkpoint truncated in config block");
  ck.config = Config::parse(text);
  const auto count = get_u(in, 4, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get_u(in, 2, "name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len)))
      throw DataError("checkpoint truncated in tensor name");
    const auto rank = get_u(in, 1, "rank");
    Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(get_u(in, 4, "dims"));
    Tensor<float> t(shape);
    for (float& v : t.data()) {
      const auto bits = static_cast<std::uint32_t>(get_u(in, 4, "payload of " + name));
      std::memcpy(&v, &bits, 4);
    }
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

/// Copies checkpoint tensors into same-named parameters. With `prefixes`
/// empty every parameter must be present; otherwise only parameters whose
/// name starts with one of the prefixes are copied (and must be present).
template <typename T>
void apply_checkpoint(ParameterStore<T>& store, const Checkpoint& ck,
                      const std::vector<std::string>& prefixes = {}) {
  for (Parameter<T>* p : store.all()) {
    if (!prefixes.empty() &&
        std::none_of(prefixes.begin(), prefixes.end(),
                     [&](const std::string& pre) { return p->name.starts_with(pre); }))
      continue;
    auto it = ck.tensors.find(p->name);
    if (it == ck.tensors.end()) throw DataError("checkpoint lacks parameter " + p->name);
    if (it->second.shape() != p->value.shape())
      throw DataError("checkpoint parameter " + p->name + " has shape " +
                      shape_string(it->second.shape()) + ", model expects " +
                      shape_string(p->value.shape()));
    for (std::size_t i = 0; i < p->value.size(); ++i)
      p->value[i] = static_cast<T>(it->second[i]);
  }
}

/// FNV-1a over parameter names and value bytes, for freeze and
/// reproducibility checks.
template <typename T>
std::uint64_t parameter_hash(const ParameterStore<T>& store, std::string_view prefix = "") {
  std::uint64_t h = 1469598103934665603ull;
  for (const Parameter<T>* p : store.all()) {
    if (!std::string_view(p->name).starts_with(prefix)) continue;
    h = fnv1a(p->name, h);
    const auto bytes = std::as_bytes(p->value.data());
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Training loops

struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

inline void write_training_log(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write training log " + path.string());
  out << "step,loss,lr,wall_ms\n";
  char buf[128];
  for (const LogRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.3f\n", r.step, r.loss, r.lr, r.wall_ms);
    out << buf;
  }
}

/// Called after every update with the log row just produced.
using StepCallback = std::function<void(const LogRow&)>;

namespace train_detail {

/// Cycles through a dataset in a fresh seeded permutation each epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(fnv1a("batches", seed)) {
    if (n == 0) throw DataError("training set is empty");
    reshuffle();
  }

  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = order_.size(); i > 1; --i)
      std::swap(order_[i - 1], order_[static_cast<std::size_t>(uniform01(rng_) * i) % i]);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

/// Runs `max_updates` Adam updates. `loss_of(graph, index, ctx)` builds one
/// utterance's loss; the batch loss is the mean over `batch_size` samples.
template <typename T, typename LossFn, typename BeforeStep>
std::vector<LogRow> optimise(ParameterStore<T>& store, const TrainConfig& tc, std::size_t n_items,
                             LossFn&& loss_of, BeforeStep&& before_step,
                             const ModelConfig& mc, const StepCallback& on_step) {
  BatchSampler sampler(n_items, tc.seed);
  Rng dropout_rng(fnv1a("dropout", tc.seed));
  ForwardContext ctx{true, &dropout_rng, mc.dropout, mc.layerdrop};
  OptimizerState opt;
  std::vector<LogRow> log;
  const auto params = store.all();
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 1; step <= tc.max_updates; ++step) {
    before_step(step);
    store.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      Graph<T> g;
      Var<T> loss = scale(loss_of(g, sampler.next(), ctx), static_cast<T>(1.0 / tc.batch_size));
      if (!std::isfinite(static_cast<double>(loss.item())))
        throw NumericError("non-finite training loss at step " + std::to_string(step));
      total += loss.item();
      g.backward(loss);
      g.accumulate_parameter_grads();
    }
    clip_grad_norm(params, tc.clip_norm);
    const double lr = lr_schedule(step, tc.warmup_steps, tc.learning_rate);
    adam_step(params, opt, lr);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    log.push_back({step, total, lr, ms});
    if (on_step) on_step(log.back());
  }
  return log;
}

}  // namespace train_detail

template <typename T>
struct AccentIdRun {
  std::unique_ptr<AccentIdModel<T>> model;
  std::vector<LogRow> log;
};

template <typename T>
struct AsrRun {
  std::unique_ptr<AsrModel<T>> model;
  std::vector<LogRow> log;
};

/// Trains a frame-level accent classifier in place. For the first
/// `head_only_updates` only the accent FC trains; the context network joins
/// afterwards. The conv encoder trains only when `freeze_encoder` is off,
/// and then only after the head-only phase.
template <typename T>
std::vector<LogRow> fit_accent_id(AccentIdModel<T>& model, const TrainConfig& tc,
                                  const Dataset& data, const StepCallback& on_step = nullptr) {
  tc.validate();
  const ModelConfig& mc = model.config();
  for (const Utterance& u : data) {
    if (!u.accent) throw DataError("accent ID training needs labels; utterance " + u.id + " has none");
    if (*u.accent >= mc.n_accents)
      throw DataError("utterance " + u.id + " has accent " + std::to_string(*u.accent) +
                      " outside [0, " + std::to_string(mc.n_accents) + ")");
  }
  ParameterStore<T>& store = model.params();
  std::vector<Tensor<T>> signals;
  signals.reserve(data.size());
  for (const Utterance& u : data) signals.push_back(u.signal.template cast<T>());

  auto set_phase = [&](bool head_only) {
    store.set_trainable("", false);
    store.set_trainable("accent_head.", true);
    if (!head_only) {
      store.set_trainable("context.", true);
      if (!tc.freeze_encoder) store.set_trainable("encoder.", true);
    }
  };
  auto loss_of = [&](Graph<T>& g, std::size_t i, const ForwardContext& ctx) {
    auto out = model.forward(g, signals[i], ctx);
    return accent_final_loss(out, AccentLabel(*data[i].accent, mc.n_accents), tc.sdc_weight);
  };
  auto before = [&](std::size_t step) { set_phase(step <= tc.head_only_updates); };
  auto log = train_detail::optimise(store, tc, data.size(), loss_of, before, mc, on_step);
  store.set_trainable("", true);
  return log;
}

/// Builds and trains an accent classifier. `init`, when given, supplies
/// encoder and context weights.
template <typename T>
AccentIdRun<T> train_accent_id(const TrainConfig& tc, const Dataset& data, ModelConfig mc,
                               const Checkpoint* init = nullptr,
                               const StepCallback& on_step = nullptr) {
  mc.sdc_weight = tc.sdc_weight;
  AccentIdRun<T> run;
  run.model = std::make_unique<AccentIdModel<T>>(mc);
  if (init) apply_checkpoint(run.model->params(), *init, {"encoder.", "context."});
  run.log = fit_accent_id(*run.model, tc, data, on_step);
  return run;
}

/// The accent input the recognizer expects for one utterance.
template <typename T>
AccentInput<T> accent_input_for(const ModelConfig& mc, const Utterance& u,
                                const AccentIdModel<T>* aid, const Tensor<T>& signal) {
  switch (mc.accent_mode) {
    case AccentMode::none:
      return std::monostate{};
    case AccentMode::true_label:
      if (!u.accent) throw DataError("accent_mode=true_label but utterance " + u.id + " has no label");
      return AccentLabel(*u.accent, mc.n_accents);
    case AccentMode::dynamic:
      if (aid == nullptr) throw UsageError("accent_mode=dynamic requires an accent ID model");
      return aid->predict(signal, static_cast<T>(mc.gate_threshold));
  }
  throw UsageError("unknown accent mode");
}

/// Trains a CTC recognizer in place under its configured accent mode. With
/// `dynamic` the frozen `aid` model supplies frame-level accent features.
template <typename T>
std::vector<LogRow> fit_asr(AsrModel<T>& model, const TrainConfig& tc, const Dataset& data,
                            const AccentIdModel<T>* aid = nullptr,
                            const StepCallback& on_step = nullptr) {
  tc.validate();
  const ModelConfig& mc = model.config();
  if (mc.accent_mode == AccentMode::dynamic) {
    if (aid == nullptr) throw UsageError("accent_mode=dynamic requires an accent ID checkpoint");
    const ModelConfig& ac = aid->config();
    if (ac.n_accents != mc.n_accents)
      throw ConfigError("accent ID model has " + std::to_string(ac.n_accents) +
                        " accents, recognizer expects " + std::to_string(mc.n_accents));
    if (ac.conv_layers.size() != mc.conv_layers.size() ||
        !std::equal(ac.conv_layers.begin(), ac.conv_layers.end(), mc.conv_layers.begin(),
                    [](const ConvLayer& a, const ConvLayer& b) {
                      return a.kernel == b.kernel && a.stride == b.stride;
                    }))
      throw ConfigError("accent ID and recognizer conv stacks produce different frame rates");
  }
  const Vocabulary vocab = Vocabulary::english();
  ParameterStore<T>& store = model.params();
  store.set_trainable("", true);
  if (tc.freeze_encoder) store.set_trainable("encoder.", false);

  std::vector<Tensor<T>> signals;
  std::vector<Labels> targets;
  std::vector<AccentInput<T>> accents;
  for (const Utterance& u : data) {
    signals.push_back(u.signal.template cast<T>());
    targets.push_back(vocab.encode(u.transcript));
    const std::size_t frames = mc.frames_for(u.signal.size());
    if (frames < ctc_min_frames(targets.back()))
      throw DataError("utterance " + u.id + " is too short for its transcript (" +
                      std::to_string(frames) + " frames)");
    // The accent ID model is frozen, so its predictions are fixed per utterance.
    accents.push_back(accent_input_for<T>(mc, u, aid, signals.back()));
  }

  auto loss_of = [&](Graph<T>& g, std::size_t i, const ForwardContext& ctx) {
    return ctc_loss(model.asr_forward(g, signals[i], accents[i], ctx), targets[i]).loss;
  };
  auto log = train_detail::optimise(store, tc, data.size(), loss_of, [](std::size_t) {}, mc,
                                    on_step);
  store.set_trainable("", true);
  return log;
}

/// Builds a recognizer for `tc.accent_mode` (injection projections start at
/// zero) and trains it.
template <typename T>
AsrRun<T> train_asr(const TrainConfig& tc, const Dataset& data, ModelConfig mc,
                    const AccentIdModel<T>* aid = nullptr, const StepCallback& on_step = nullptr) {
  mc.accent_mode = tc.accent_mode;
  if (mc.accent_mode == AccentMode::dynamic && aid == nullptr)
    throw UsageError("accent_mode=dynamic requires an accent ID checkpoint");
  AsrRun<T> run;
  run.model = std::make_unique<AsrModel<T>>(mc);
  run.log = fit_asr(*run.model, tc, data, aid, on_step);
  return run;
}

/// Full resolved configuration stored alongside a trained model.
inline Config run_config(const ModelConfig& mc, const TrainConfig& tc) {
  Config cfg;
  mc.to_config(cfg);
  tc.to_config(cfg);
  return cfg;
}

template <typename T>
std::unique_ptr<AccentIdModel<T>> load_accent_id(const Checkpoint& ck) {
  auto m = std::make_unique<AccentIdModel<T>>(ModelConfig::from_config(ck.config));
  apply_checkpoint(m->params(), ck);
  return m;
}

template <typename T>
std::unique_ptr<AsrModel<T>> load_asr(const Checkpoint& ck) {
  auto m = std::make_unique<AsrModel<T>>(ModelConfig::from_config(ck.config));
  apply_checkpoint(m->params(), ck);
  return m;
}

}  // namespace accentctc
