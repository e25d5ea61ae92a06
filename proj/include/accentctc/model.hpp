#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "accentctc/config.hpp"
#include "accentctc/nn.hpp"
#include "accentctc/ops.hpp"

namespace accentctc {

enum class AccentMode { none, true_label, dynamic };
enum class CombineMode { add, concat };
enum class Pooling { frame_mean, stats_pool };

inline std::string to_string(AccentMode m) {
  switch (m) {
    case AccentMode::none: return "none";
    case AccentMode::true_label: return "true_label";
    case AccentMode::dynamic: return "dynamic";
  }
  return "?";
}

inline std::string to_string(CombineMode m) {
  return m == CombineMode::add ? "add" : "concat";
}

inline std::string to_string(Pooling p) {
  return p == Pooling::frame_mean ? "frame_mean" : "stats_pool";
}

inline AccentMode parse_accent_mode(const std::string& s) {
  if (s == "none") return AccentMode::none;
  if (s == "true_label") return AccentMode::true_label;
  if (s == "dynamic") return AccentMode::dynamic;
  throw ConfigError("unknown accent mode '" + s + "' (none|true_label|dynamic)");
}

inline CombineMode parse_combine_mode(const std::string& s) {
  if (s == "add") return CombineMode::add;
  if (s == "concat") return CombineMode::concat;
  throw ConfigError("unknown combine mode '" + s + "' (add|concat)");
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "frame_mean") return Pooling::frame_mean;
  if (s == "stats_pool") return Pooling::stats_pool;
  throw ConfigError("unknown pooling '" + s + "' (frame_mean|stats_pool)");
}

struct ConvLayer {
  std::size_t channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

/// floor((length - kernel) / stride) + 1; throws when length < kernel.
inline std::size_t conv_output_length(std::size_t length, std::size_t kernel,
                                      std::size_t stride) {
  if (stride < 1) throw ConfigError("conv stride must be >= 1");
  if (length < kernel) {
    throw ShapeError("conv input length " + std::to_string(length) +
                     " shorter than kernel " + std::to_string(kernel));
  }
  return (length - kernel) / stride + 1;
}

struct ModelConfig {
  std::vector<ConvLayer> conv_layers;
  std::size_t d_encoder = 512;
  std::size_t d_model = 768;
  std::size_t n_layers = 12;
  std::size_t n_heads = 8;
  std::size_t d_ffn = 3072;
  // CTC outputs including the blank.
  std::size_t vocab_size = 29;
  std::size_t n_accents = 8;
  double gate_threshold = 0.4;
  double dropout = 0.1;
  double layerdrop = 0.1;
  AccentMode accent_mode = AccentMode::none;
  bool inject_encoder = true;
  bool inject_context = true;
  CombineMode combine_mode = CombineMode::add;
  Pooling accent_head_pooling = Pooling::frame_mean;
  double sdc_weight = 1.0;
  bool per_accent_output_heads = false;
  std::uint64_t init_seed = 1;

  /// Feature encoder and context network sizes used in the published setup.
  static ModelConfig paper() {
    ModelConfig c;
    c.conv_layers = {{512, 10, 5}, {512, 3, 2}, {512, 3, 2}, {512, 3, 2},
                     {512, 3, 2},  {512, 2, 2}, {512, 2, 2}};
    return c;
  }

  /// Small CPU configuration exercising every mechanism.
  static ModelConfig toy() {
    ModelConfig c;
    c.conv_layers = {{64, 4, 2}, {64, 4, 2}};
    c.d_encoder = 64;
    c.d_model = 64;
    c.n_layers = 2;
    c.n_heads = 4;
    c.d_ffn = 256;
    c.vocab_size = 29;
    c.n_accents = 4;
    return c;
  }

  void validate() const {
    if (conv_layers.empty()) throw ConfigError("model: at least one conv layer required");
    for (const ConvLayer& l : conv_layers) {
      if (l.channels == 0 || l.kernel == 0) throw ConfigError("model: empty conv layer");
      if (l.stride < 1) throw ConfigError("model: conv stride must be >= 1");
    }
    if (conv_layers.back().channels != d_encoder)
      throw ConfigError("model: d_encoder must equal the last conv layer's channels");
    if (n_accents < 2) throw ConfigError("model: n_accents must be >= 2");
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (!(gate_threshold >= 0.0 && gate_threshold <= 1.0))
      throw ConfigError("model: gate_threshold must lie in [0, 1]");
    if (n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("model: d_model must be divisible by n_heads");
    if (dropout < 0.0 || dropout >= 1.0 || layerdrop < 0.0 || layerdrop >= 1.0)
      throw ConfigError("model: dropout rates must lie in [0, 1)");
    if (sdc_weight < 0.0) throw ConfigError("model: sdc_weight must be >= 0");
  }

  /// Frame count produced by the conv stack for `samples` inputs.
  std::size_t frames_for(std::size_t samples) const {
    if (samples < min_samples()) {
      throw ShapeError("signal of " + std::to_string(samples) +
                       " samples is shorter than the encoder's minimum of " +
                       std::to_string(min_samples()));
    }
    std::size_t len = samples;
    for (const ConvLayer& l : conv_layers) len = conv_output_length(len, l.kernel, l.stride);
    return len;
  }

  /// Receptive field of one output frame.
  std::size_t min_samples() const {
    std::size_t len = 1;
    for (auto it = conv_layers.rbegin(); it != conv_layers.rend(); ++it)
      len = (len - 1) * it->stride + it->kernel;
    return len;
  }

  void to_config(Config& cfg, const std::string& prefix = "model.") const {
    std::string layers;
    for (std::size_t i = 0; i < conv_layers.size(); ++i) {
      if (i) layers += ',';
      layers += std::to_string(conv_layers[i].channels) + ':' +
                std::to_string(conv_layers[i].kernel) + ':' +
                std::to_string(conv_layers[i].stride);
    }
    cfg.set(prefix + "conv_layers", layers);
    cfg.set(prefix + "d_encoder", d_encoder);
    cfg.set(prefix + "d_model", d_model);
    cfg.set(prefix + "n_layers", n_layers);
    cfg.set(prefix + "n_heads", n_heads);
    cfg.set(prefix + "d_ffn", d_ffn);
    cfg.set(prefix + "vocab_size", vocab_size);
    cfg.set(prefix + "n_accents", n_accents);
    cfg.set(prefix + "gate_threshold", gate_threshold);
    cfg.set(prefix + "dropout", dropout);
    cfg.set(prefix + "layerdrop", layerdrop);
    cfg.set(prefix + "accent_mode", to_string(accent_mode));
    std::string sites;
    if (inject_encoder) sites = "encoder_output";
    if (inject_context) sites += std::string(sites.empty() ? "" : ",") + "context_output";
    cfg.set(prefix + "injection_sites", sites.empty() ? std::string("none") : sites);
    cfg.set(prefix + "combine_mode", to_string(combine_mode));
    cfg.set(prefix + "accent_head_pooling", to_string(accent_head_pooling));
    cfg.set(prefix + "sdc_weight", sdc_weight);
    cfg.set(prefix + "per_accent_output_heads", per_accent_output_heads);
    cfg.set(prefix + "init_seed", init_seed);
  }

  /// Reads keys under `prefix`, falling back to `base` for absent ones.
  static ModelConfig from_config(const Config& cfg, const ModelConfig& base = toy(),
                                 const std::string& prefix = "model.") {
    Config full;
    base.to_config(full, prefix);
    full.merge(cfg);
    ModelConfig c;
    c.conv_layers.clear();
    for (const std::string& item : split(full.get(prefix + "conv_layers"), ',')) {
      auto parts = split(trim(item), ':');
      if (parts.size() != 3)
        throw ConfigError("model.conv_layers: expected channels:kernel:stride, got '" + item + "'");
      Config tmp;
      tmp.set("c", parts[0]);
      tmp.set("k", parts[1]);
      tmp.set("s", parts[2]);
      c.conv_layers.push_back({static_cast<std::size_t>(tmp.get_u64("c")),
                               static_cast<std::size_t>(tmp.get_u64("k")),
                               static_cast<std::size_t>(tmp.get_u64("s"))});
    }
    c.d_encoder = full.get_u64(prefix + "d_encoder");
    c.d_model = full.get_u64(prefix + "d_model");
    c.n_layers = full.get_u64(prefix + "n_layers");
    c.n_heads = full.get_u64(prefix + "n_heads");
    c.d_ffn = full.get_u64(prefix + "d_ffn");
    c.vocab_size = full.get_u64(prefix + "vocab_size");
    c.n_accents = full.get_u64(prefix + "n_accents");
    c.gate_threshold = full.get_double(prefix + "gate_threshold");
    c.dropout = full.get_double(prefix + "dropout");
    c.layerdrop = full.get_double(prefix + "layerdrop");
    c.accent_mode = parse_accent_mode(full.get(prefix + "accent_mode"));
    c.inject_encoder = c.inject_context = false;
    const std::string sites = full.get(prefix + "injection_sites");
    if (sites != "none" && !sites.empty()) {
      for (const std::string& s : split(sites, ',')) {
        const std::string_view site = trim(s);
        if (site == "encoder_output") c.inject_encoder = true;
        else if (site == "context_output") c.inject_context = true;
        else throw ConfigError("unknown injection site '" + std::string(site) + "'");
      }
    }
    c.combine_mode = parse_combine_mode(full.get(prefix + "combine_mode"));
    c.accent_head_pooling = parse_pooling(full.get(prefix + "accent_head_pooling"));
    c.sdc_weight = full.get_double(prefix + "sdc_weight");
    c.per_accent_output_heads = full.get_bool(prefix + "per_accent_output_heads");
    c.init_seed = full.get_u64(prefix + "init_seed");
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Accent labels and predictions

struct AccentLabel {
  std::size_t index = 0;
  std::size_t n_classes = 2;

  AccentLabel(std::size_t idx, std::size_t classes) : index(idx), n_classes(classes) {
    if (classes < 2) throw ConfigError("accent label: need at least 2 classes");
    if (idx >= classes) throw DataError("accent label index out of range");
  }

  template <typename T>
  Tensor<T> one_hot() const {
    Tensor<T> v(Shape{n_classes});
    v[index] = T(1);
    return v;
  }
};

template <typename T>
std::size_t argmax(std::span<const T> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Graph-free accent identification output for one utterance.
template <typename T>
struct AccentPrediction {
  Tensor<T> a;       // [T x C] frame logits
  Tensor<T> a_mean;  // [C]
  Tensor<T> a_std;   // [C]
  std::optional<Tensor<T>> gates;  // [T]

  std::size_t predicted() const { return argmax<T>(a_mean.data()); }
  std::size_t frames() const { return a.dim(0); }

  /// Mean over classes of a_std (the per-utterance SDC term).
  double mean_std() const {
    double s = 0.0;
    for (T v : a_std.data()) s += v;
    return s / static_cast<double>(a_std.size());
  }
};

/// Accent head output inside a graph.
template <typename T>
struct AccentHeadOutput {
  Pooling pooling = Pooling::frame_mean;
  Var<T> a;
  Var<T> a_mean;
  Var<T> a_std;

  AccentPrediction<T> detach() const {
    return AccentPrediction<T>{a.value(), a_mean.value(), a_std.value(), std::nullopt};
  }
};

/// (1/C) * sum_j a_std_j.
template <typename T>
Var<T> sdc_loss(const AccentHeadOutput<T>& p) {
  if (p.pooling != Pooling::frame_mean) {
    throw UsageError("sdc_loss requires frame_mean pooling (stats_pool has no frame predictions)");
  }
  return mean(p.a_std);
}

/// Cross entropy of softmax(a_mean) against the label.
template <typename T>
Var<T> accent_ce_loss(const Var<T>& a_mean, const AccentLabel& label) {
  if (a_mean.size() != label.n_classes)
    throw ShapeError("accent_ce_loss: logits do not match label class count");
  return scale(pick(log_softmax(a_mean), label.index), T(-1));
}

/// CE + sdc_weight * SDC. The SDC term is omitted entirely when the weight
/// is zero or pooling is stats_pool.
template <typename T>
Var<T> accent_final_loss(const AccentHeadOutput<T>& p, const AccentLabel& label,
                         double sdc_weight) {
  Var<T> ce = accent_ce_loss(p.a_mean, label);
  if (sdc_weight == 0.0 || p.pooling == Pooling::stats_pool) return ce;
  return add(ce, scale(sdc_loss(p), static_cast<T>(sdc_weight)));
}

/// w_i = sigmoid(a_i . a_mean), zeroed unless strictly above k.
template <typename T>
Var<T> frame_gates(const Var<T>& a, const Var<T>& a_mean, T k) {
  return threshold(sigmoid(rows_dot(a, a_mean)), k);
}

template <typename T>
Tensor<T> frame_gates(const Tensor<T>& a, const Tensor<T>& a_mean, T k) {
  Graph<T> g;
  return frame_gates(g.constant(a), g.constant(a_mean), k).value();
}

/// Bias-free projection of an accent vector onto one injection site. With
/// concat, [x | accent_proj] is mapped back to the site width by `back`,
/// initialised to [I; 0].
template <typename T>
struct AccentInjection {
  Parameter<T>* proj = nullptr;
  Parameter<T>* back = nullptr;
  CombineMode mode = CombineMode::add;

  static AccentInjection create(ParameterStore<T>& store, const std::string& name,
                                std::size_t n_accents, std::size_t width,
                                CombineMode mode) {
    AccentInjection inj;
    inj.mode = mode;
    inj.proj = &store.add(name + ".proj", Tensor<T>(Shape{n_accents, width}));
    if (mode == CombineMode::concat) {
      Tensor<T> b(Shape{2 * width, width});
      for (std::size_t i = 0; i < width; ++i) b.at(i, i) = T(1);
      inj.back = &store.add(name + ".back", std::move(b));
    }
    return inj;
  }

  std::size_t n_accents() const { return proj->value.dim(0); }
  std::size_t width() const { return proj->value.dim(1); }

  /// x[T x D] combined with accent_rows[T x C] * proj.
  Var<T> apply(Graph<T>& g, const Var<T>& x, const Var<T>& accent_rows) const {
    if (x.value().rank() != 2 || x.dim(1) != width())
      throw ConfigError("accent injection: site width " + std::to_string(width()) +
                        " does not match input " + shape_string(x.shape()));
    if (accent_rows.dim(1) != n_accents() || accent_rows.dim(0) != x.dim(0))
      throw ConfigError("accent injection: accent vector does not match projection");
    Var<T> bias = matmul(accent_rows, g.param(*proj));
    if (mode == CombineMode::add) return add(x, bias);
    return matmul(concat_cols(x, bias), g.param(*back));
  }
};

/// x_i + proj(g_true) on every frame.
template <typename T>
Var<T> inject_true(const Var<T>& x, const AccentLabel& label, const AccentInjection<T>& inj) {
  Graph<T>& g = x.graph();
  if (label.n_classes != inj.n_accents())
    throw ConfigError("inject_true: label has " + std::to_string(label.n_classes) +
                      " classes, projection expects " + std::to_string(inj.n_accents()));
  Var<T> rows = broadcast_rows(g.constant(label.one_hot<T>()), x.dim(0));
  return inj.apply(g, x, rows);
}

/// x_i + proj(w_i * softmax(a_mean)) per frame.
template <typename T>
Var<T> inject_dynamic(const Var<T>& x, const Var<T>& w, const Var<T>& a_mean,
                      const AccentInjection<T>& inj) {
  if (w.size() != x.dim(0))
    throw ConfigError("inject_dynamic: gate count does not match frame count");
  if (a_mean.size() != inj.n_accents())
    throw ConfigError("inject_dynamic: accent logits do not match projection");
  return inj.apply(x.graph(), x, outer(w, softmax(a_mean)));
}

// ---------------------------------------------------------------------------
// Network components

/// Conv stack over a raw waveform: each conv followed by GELU, then a layer
/// norm over channels and dropout. Output rows are frames.
template <typename T>
struct FeatureEncoder {
  std::vector<ConvLayer> layers;
  std::vector<Parameter<T>*> kernels;
  LayerNorm<T> norm;

  static FeatureEncoder create(ParameterStore<T>& store, const ModelConfig& cfg) {
    FeatureEncoder e;
    e.layers = cfg.conv_layers;
    std::size_t in = 1;
    for (std::size_t i = 0; i < cfg.conv_layers.size(); ++i) {
      const ConvLayer& l = cfg.conv_layers[i];
      const double bound = std::sqrt(6.0 / static_cast<double>(in * l.kernel));
      e.kernels.push_back(&store.add_uniform("encoder.conv" + std::to_string(i) + ".weight",
                                             Shape{l.channels, in, l.kernel}, bound,
                                             cfg.init_seed));
      in = l.channels;
    }
    e.norm = LayerNorm<T>::create(store, "encoder.norm", in);
    return e;
  }

  Var<T> operator()(Graph<T>& g, const Tensor<T>& signal, const ForwardContext& ctx) const {
    if (signal.rank() != 1) throw ShapeError("encode: signal must be a vector");
    // Zero-mean, unit-variance waveform.
    Tensor<T> x(Shape{1, signal.size()});
    double mu = 0.0, var = 0.0;
    for (T v : signal.data()) mu += v;
    mu /= static_cast<double>(signal.size());
    for (T v : signal.data()) var += (v - mu) * (v - mu);
    var /= static_cast<double>(signal.size());
    const double inv = var > 0.0 ? 1.0 / std::sqrt(var + 1e-7) : 1.0;
    for (std::size_t i = 0; i < signal.size(); ++i)
      x[i] = static_cast<T>((signal[i] - mu) * inv);

    std::size_t min_len = 1;
    for (auto it = layers.rbegin(); it != layers.rend(); ++it)
      min_len = (min_len - 1) * it->stride + it->kernel;
    if (signal.size() < min_len) {
      throw ShapeError("encode: signal of " + std::to_string(signal.size()) +
                       " samples is shorter than the minimum length " +
                       std::to_string(min_len));
    }
    Var<T> h = g.constant(std::move(x));
    for (std::size_t i = 0; i < layers.size(); ++i)
      h = gelu(conv1d(h, g.param(*kernels[i]), layers[i].stride));
    return maybe_dropout(norm(g, transpose(h)), ctx);
  }
};

/// Input projection, sinusoidal positions, pre-norm transformer stack and a
/// final layer norm.
template <typename T>
struct ContextNetwork {
  Linear<T> proj;
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> final_norm;

  static ContextNetwork create(ParameterStore<T>& store, const ModelConfig& cfg) {
    ContextNetwork c;
    c.proj = Linear<T>::create(store, "context.proj", cfg.d_encoder, cfg.d_model, cfg.init_seed);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      c.blocks.push_back(TransformerBlock<T>::create(store, "context.layer" + std::to_string(i),
                                                     cfg.d_model, cfg.n_heads, cfg.d_ffn,
                                                     cfg.init_seed));
    }
    c.final_norm = LayerNorm<T>::create(store, "context.final_norm", cfg.d_model);
    return c;
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& c, const ForwardContext& ctx) const {
    Var<T> x = proj(g, c);
    x = add(x, g.constant(sinusoidal_positions<T>(x.dim(0), x.dim(1))));
    x = maybe_dropout(x, ctx);
    for (const auto& block : blocks) {
      if (ctx.training && ctx.layerdrop > 0.0 && uniform01(*ctx.rng) < ctx.layerdrop) continue;
      x = block(g, x, ctx);
    }
    return final_norm(g, x);
  }
};

template <typename T>
struct AccentHead {
  Pooling pooling = Pooling::frame_mean;
  Linear<T> fc;

  static AccentHead create(ParameterStore<T>& store, const ModelConfig& cfg) {
    AccentHead h;
    h.pooling = cfg.accent_head_pooling;
    const std::size_t in = h.pooling == Pooling::frame_mean ? cfg.d_model : 2 * cfg.d_model;
    h.fc = Linear<T>::create(store, "accent_head.fc", in, cfg.n_accents, cfg.init_seed);
    return h;
  }

  AccentHeadOutput<T> operator()(Graph<T>& g, const Var<T>& h) const {
    AccentHeadOutput<T> out;
    out.pooling = pooling;
    if (pooling == Pooling::frame_mean) {
      out.a = fc(g, h);
      std::tie(out.a_mean, out.a_std) = reduce_mean_std(out.a);
    } else {
      auto [m, s] = reduce_mean_std(h);
      Var<T> pooled = reshape(concat(m, s), Shape{1, 2 * h.dim(1)});
      out.a_mean = reshape(fc(g, pooled), Shape{fc.out_features()});
      out.a = broadcast_rows(out.a_mean, h.dim(0));
      out.a_std = g.constant(Tensor<T>(Shape{fc.out_features()}));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Models

/// Frame-level accent identification: encoder -> context -> per-frame FC,
/// prediction is the mean of frame logits.
template <typename T>
class AccentIdModel {
 public:
  explicit AccentIdModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    encoder_ = FeatureEncoder<T>::create(params_, cfg_);
    context_ = ContextNetwork<T>::create(params_, cfg_);
    head_ = AccentHead<T>::create(params_, cfg_);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  Var<T> encode(Graph<T>& g, const Tensor<T>& signal, const ForwardContext& ctx) const {
    return encoder_(g, signal, ctx);
  }

  Var<T> contextualize(Graph<T>& g, const Var<T>& c, const ForwardContext& ctx) const {
    return context_(g, c, ctx);
  }

  AccentHeadOutput<T> accent_forward(Graph<T>& g, const Var<T>& h) const { return head_(g, h); }

  AccentHeadOutput<T> forward(Graph<T>& g, const Tensor<T>& signal,
                              const ForwardContext& ctx) const {
    return accent_forward(g, contextualize(g, encode(g, signal, ctx), ctx));
  }

  /// Inference-mode prediction with frame gates at threshold k.
  AccentPrediction<T> predict(const Tensor<T>& signal, T k) const {
    Graph<T> g;
    AccentPrediction<T> p = forward(g, signal, ForwardContext{}).detach();
    p.gates = frame_gates(p.a, p.a_mean, k);
    return p;
  }

 private:
  ModelConfig cfg_;
  ParameterStore<T> params_;
  FeatureEncoder<T> encoder_;
  ContextNetwork<T> context_;
  AccentHead<T> head_;
};

template <typename T>
using AccentInput = std::variant<std::monostate, AccentLabel, AccentPrediction<T>>;

template <typename T>
struct AsrTrace {
  Var<T> encoder_raw;  // before any encoder-site injection
  Var<T> encoder_out;
  Var<T> context_out;
  Var<T> log_probs;    // [T x vocab]
};

/// CTC recognizer with optional accent bias at the encoder and/or context
/// outputs.
template <typename T>
class AsrModel {
 public:
  explicit AsrModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    encoder_ = FeatureEncoder<T>::create(params_, cfg_);
    context_ = ContextNetwork<T>::create(params_, cfg_);
    if (cfg_.accent_mode != AccentMode::none) {
      if (cfg_.inject_encoder)
        inject_encoder_ = AccentInjection<T>::create(params_, "inject.encoder", cfg_.n_accents,
                                                     cfg_.d_encoder, cfg_.combine_mode);
      if (cfg_.inject_context)
        inject_context_ = AccentInjection<T>::create(params_, "inject.context", cfg_.n_accents,
                                                     cfg_.d_model, cfg_.combine_mode);
    }
    if (cfg_.per_accent_output_heads) {
      for (std::size_t j = 0; j < cfg_.n_accents; ++j)
        heads_.push_back(Linear<T>::create(params_, "output.accent" + std::to_string(j),
                                           cfg_.d_model, cfg_.vocab_size, cfg_.init_seed));
    } else {
      heads_.push_back(
          Linear<T>::create(params_, "output", cfg_.d_model, cfg_.vocab_size, cfg_.init_seed));
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  AsrTrace<T> forward(Graph<T>& g, const Tensor<T>& signal, const AccentInput<T>& accent,
                      const ForwardContext& ctx) const {
    const AccentLabel* label = std::get_if<AccentLabel>(&accent);
    const AccentPrediction<T>* pred = std::get_if<AccentPrediction<T>>(&accent);
    if (cfg_.accent_mode == AccentMode::true_label && label == nullptr)
      throw UsageError("accent_mode=true_label requires an accent label");
    if (cfg_.accent_mode == AccentMode::dynamic && pred == nullptr)
      throw UsageError("accent_mode=dynamic requires an accent prediction");

    AsrTrace<T> trace;
    trace.encoder_raw = encoder_(g, signal, ctx);
    const std::size_t frames = trace.encoder_raw.dim(0);

    // Accent rows [T x C] shared by both sites.
    std::optional<Var<T>> rows;
    if (cfg_.accent_mode == AccentMode::true_label) {
      if (label->n_classes != cfg_.n_accents)
        throw ConfigError("accent label class count does not match model");
      rows = broadcast_rows(g.constant(label->one_hot<T>()), frames);
    } else if (cfg_.accent_mode == AccentMode::dynamic) {
      if (pred->frames() != frames)
        throw ConfigError("accent prediction has " + std::to_string(pred->frames()) +
                          " frames, recognizer produced " + std::to_string(frames));
      Var<T> a_mean = g.constant(pred->a_mean);
      Var<T> w = pred->gates ? g.constant(*pred->gates)
                             : frame_gates(g.constant(pred->a), a_mean,
                                           static_cast<T>(cfg_.gate_threshold));
      rows = outer(w, softmax(a_mean));
    }

    trace.encoder_out = trace.encoder_raw;
    if (rows && inject_encoder_) trace.encoder_out = inject_encoder_->apply(g, trace.encoder_raw, *rows);
    trace.context_out = context_(g, trace.encoder_out, ctx);
    Var<T> h = trace.context_out;
    if (rows && inject_context_) h = inject_context_->apply(g, h, *rows);
    trace.context_out = h;

    const Linear<T>& head = heads_[head_index(label, pred)];
    trace.log_probs = log_softmax(head(g, h));
    return trace;
  }

  Var<T> asr_forward(Graph<T>& g, const Tensor<T>& signal, const AccentInput<T>& accent,
                     const ForwardContext& ctx = {}) const {
    return forward(g, signal, accent, ctx).log_probs;
  }

  /// Inference-mode log-probabilities.
  Tensor<T> log_probs(const Tensor<T>& signal, const AccentInput<T>& accent) const {
    Graph<T> g;
    return asr_forward(g, signal, accent).value();
  }

  const std::optional<AccentInjection<T>>& encoder_injection() const { return inject_encoder_; }
  const std::optional<AccentInjection<T>>& context_injection() const { return inject_context_; }

 private:
  std::size_t head_index(const AccentLabel* label, const AccentPrediction<T>* pred) const {
    if (!cfg_.per_accent_output_heads) return 0;
    if (label) return label->index;
    if (pred) return pred->predicted();
    throw UsageError("per-accent output heads need an accent label or prediction");
  }

  ModelConfig cfg_;
  ParameterStore<T> params_;
  FeatureEncoder<T> encoder_;
  ContextNetwork<T> context_;
  std::optional<AccentInjection<T>> inject_encoder_;
  std::optional<AccentInjection<T>> inject_context_;
  std::vector<Linear<T>> heads_;
};

}  // namespace accentctc
