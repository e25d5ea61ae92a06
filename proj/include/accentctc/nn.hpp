#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "accentctc/autodiff.hpp"
#include "accentctc/ops.hpp"

namespace accentctc {

/// Per-call switches for stochastic layers. Dropout and LayerDrop are active
/// only when `training` is set; `rng` must then be non-null.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
  double dropout = 0.0;
  double layerdrop = 0.0;
};

template <typename T>
Var<T> maybe_dropout(const Var<T>& x, const ForwardContext& ctx) {
  if (!ctx.training || ctx.dropout <= 0.0) return x;
  return dropout(x, ctx.dropout, *ctx.rng);
}

inline std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Named parameters with stable addresses, iterated in name order.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter<T>& add(const std::string& name, Tensor<T> init) {
    auto [it, inserted] =
        params_.emplace(name, std::make_unique<Parameter<T>>(name, std::move(init)));
    if (!inserted) throw ConfigError("duplicate parameter name: " + name);
    return *it->second;
  }

  /// Uniform(-bound, bound) initialisation from an RNG keyed on (seed, name),
  /// so a parameter's initial value does not depend on which others exist.
  Parameter<T>& add_uniform(const std::string& name, Shape shape, double bound,
                            std::uint64_t seed) {
    Rng rng(fnv1a(name, seed ^ 0x9e3779b97f4a7c15ull));
    Tensor<T> init(std::move(shape));
    for (T& v : init.data()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
    return add(name, std::move(init));
  }

  Parameter<T>* find(const std::string& name) {
    auto it = params_.find(name);
    return it == params_.end() ? nullptr : it->second.get();
  }

  Parameter<T>& get(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw ConfigError("unknown parameter: " + name);
  }

  std::vector<Parameter<T>*> all() const {
    std::vector<Parameter<T>*> out;
    out.reserve(params_.size());
    for (const auto& [name, p] : params_) out.push_back(p.get());
    return out;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p->zero_grad();
  }

  /// Sets `trainable` on every parameter whose name starts with `prefix`.
  void set_trainable(std::string_view prefix, bool trainable) {
    for (auto& [name, p] : params_)
      if (std::string_view(name).starts_with(prefix)) p->trainable = trainable;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p->value.size();
    return n;
  }

 private:
  std::map<std::string, std::unique_ptr<Parameter<T>>> params_;
};

/// y = x W (+ b), W stored [in x out].
template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  static Linear create(ParameterStore<T>& store, const std::string& name,
                       std::size_t in, std::size_t out, std::uint64_t seed,
                       bool with_bias = true) {
    Linear l;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    l.weight = &store.add_uniform(name + ".weight", Shape{in, out}, bound, seed);
    if (with_bias) l.bias = &store.add(name + ".bias", Tensor<T>(Shape{out}));
    return l;
  }

  static Linear zeros(ParameterStore<T>& store, const std::string& name,
                      std::size_t in, std::size_t out) {
    Linear l;
    l.weight = &store.add(name + ".weight", Tensor<T>(Shape{in, out}));
    return l;
  }

  std::size_t in_features() const { return weight->value.dim(0); }
  std::size_t out_features() const { return weight->value.dim(1); }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const {
    Var<T> y = matmul(x, g.param(*weight));
    return bias ? add_row(y, g.param(*bias)) : y;
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  static LayerNorm create(ParameterStore<T>& store, const std::string& name,
                          std::size_t width) {
    LayerNorm n;
    n.gamma = &store.add(name + ".gamma", Tensor<T>(Shape{width}, T(1)));
    n.beta = &store.add(name + ".beta", Tensor<T>(Shape{width}));
    return n;
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const {
    return layer_norm(x, g.param(*gamma), g.param(*beta));
  }
};

/// Pre-norm transformer layer:
///   y = x + Drop(Wo * MHA(LN1(x)))
///   z = y + Drop(W2 * GELU(W1 * LN2(y)))
template <typename T>
struct TransformerBlock {
  std::size_t heads = 1;
  LayerNorm<T> ln_attn, ln_ffn;
  Linear<T> wq, wk, wv, wo, ff_in, ff_out;

  static TransformerBlock create(ParameterStore<T>& store, const std::string& name,
                                 std::size_t width, std::size_t heads,
                                 std::size_t ffn, std::uint64_t seed) {
    if (heads == 0 || width % heads != 0) {
      throw ConfigError("model width " + std::to_string(width) +
                        " is not divisible by " + std::to_string(heads) + " heads");
    }
    TransformerBlock b;
    b.heads = heads;
    b.ln_attn = LayerNorm<T>::create(store, name + ".ln_attn", width);
    b.ln_ffn = LayerNorm<T>::create(store, name + ".ln_ffn", width);
    b.wq = Linear<T>::create(store, name + ".attn.q", width, width, seed);
    b.wk = Linear<T>::create(store, name + ".attn.k", width, width, seed);
    b.wv = Linear<T>::create(store, name + ".attn.v", width, width, seed);
    b.wo = Linear<T>::create(store, name + ".attn.out", width, width, seed);
    b.ff_in = Linear<T>::create(store, name + ".ffn.in", width, ffn, seed);
    b.ff_out = Linear<T>::create(store, name + ".ffn.out", ffn, width, seed);
    return b;
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x, const ForwardContext& ctx) const {
    Var<T> n1 = ln_attn(g, x);
    Var<T> att = attention(wq(g, n1), wk(g, n1), wv(g, n1), heads);
    Var<T> y = add(x, maybe_dropout(wo(g, att), ctx));
    Var<T> n2 = ln_ffn(g, y);
    Var<T> f = ff_out(g, gelu(ff_in(g, n2)));
    return add(y, maybe_dropout(f, ctx));
  }
};

/// Fixed sinusoidal position table [steps x width].
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t steps, std::size_t width) {
  Tensor<T> pe(Shape{steps, width});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < width; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / width);
      pe.at(t, i) = static_cast<T>(std::sin(t * freq));
      if (i + 1 < width) pe.at(t, i + 1) = static_cast<T>(std::cos(t * freq));
    }
  }
  return pe;
}

}  // namespace accentctc
