// Random-instance gradient cases shared by the unit tests and the acceptance
// binary. Each case builds a scalar from one input tensor; tensor-valued ops
// are reduced with a fixed random weighting so every output coordinate
// matters.
#pragma once

#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "accentctc/accentctc.hpp"

namespace accentctc::testing {

using Rng = accentctc::Rng;

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

/// Values bounded away from `kink` so finite differences do not straddle it.
inline Tensor<double> away_from(Rng& rng, Shape shape, double kink, double gap = 0.05) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) {
    const double m = uniform(rng, gap, 1.0);
    v = kink + (uniform01(rng) < 0.5 ? -m : m);
  }
  return t;
}

/// sum(y * r) with r drawn from `seed`.
inline Var<double> project(const Var<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, y.graph().constant(random_tensor(rng, y.shape()))));
}

inline Tensor<double> random_log_probs(Rng& rng, std::size_t frames, std::size_t vocab) {
  Tensor<double> t(Shape{frames, vocab});
  for (std::size_t r = 0; r < frames; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) total += (t.at(r, c) = uniform(rng, 0.05, 1.0));
    for (std::size_t c = 0; c < vocab; ++c) t.at(r, c) = std::log(t.at(r, c) / total);
  }
  return t;
}

/// Exhaustive best string: sums path probabilities per collapsed string,
/// adds the fusion score, and takes the maximum (ties to the smaller labels).
inline std::pair<Labels, double> exhaustive_best(const Tensor<double>& lp, const Vocabulary& vocab,
                                          const BeamOptions& opts) {
  const std::size_t frames = lp.dim(0), width = lp.dim(1);
  std::map<Labels, double> mass;
  Labels path(frames, 0);
  while (true) {
    double s = 0;
    for (std::size_t t = 0; t < frames; ++t) s += lp.at(t, path[t]);
    Labels key = collapse(path);
    auto it = mass.find(key);
    mass[key] = it == mass.end() ? s : log_add(it->second, s);
    std::size_t t = 0;
    while (t < frames && ++path[t] == width) path[t++] = 0;
    if (t == frames) break;
  }
  std::pair<Labels, double> best{{}, -std::numeric_limits<double>::infinity()};
  for (const auto& [labels, m] : mass) {
    const double s = m + fusion_score(labels, vocab, opts);
    if (s > best.second) best = {labels, s};
  }
  return best;
}

struct GradCase {
  std::string name;
  ScalarFn fn;
  Tensor<double> point;
};

/// One case per differentiable op plus the accent-loss and gated-injection
/// composites, drawn from `rng`.
inline std::vector<GradCase> make_grad_cases(Rng& rng) {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, Tensor<double> point, ScalarFn fn) {
    cases.push_back({std::move(name), std::move(fn), std::move(point)});
  };
  const std::uint64_t s = static_cast<std::uint64_t>(uniform(rng, 0, 1e9));
  const std::size_t rows = 2 + static_cast<std::size_t>(uniform(rng, 0, 3));
  const std::size_t cols = 2 + static_cast<std::size_t>(uniform(rng, 0, 3));
  Tensor<double> other = random_tensor(rng, Shape{rows, cols});
  Tensor<double> vec = random_tensor(rng, Shape{cols});
  Tensor<double> right = random_tensor(rng, Shape{cols, 3});

  add_case("add", random_tensor(rng, {rows, cols}), [=](Graph<double>& g, const Var<double>& x) {
    return project(add(x, g.constant(other)), s);
  });
  add_case("sub", random_tensor(rng, {rows, cols}), [=](Graph<double>& g, const Var<double>& x) {
    return project(sub(g.constant(other), x), s);
  });
  add_case("mul", random_tensor(rng, {rows, cols}), [=](Graph<double>&, const Var<double>& x) {
    return project(mul(x, x), s);
  });
  add_case("scale", random_tensor(rng, {rows, cols}), [=](Graph<double>&, const Var<double>& x) {
    return project(scale(x, -2.5), s);
  });
  add_case("add_row", random_tensor(rng, {cols}), [=](Graph<double>& g, const Var<double>& b) {
    return project(add_row(g.constant(other), b), s);
  });
  add_case("matmul", random_tensor(rng, {rows, cols}), [=](Graph<double>& g, const Var<double>& x) {
    return project(matmul(x, g.constant(right)), s);
  });
  add_case("matmul_rhs", random_tensor(rng, {cols, 3}), [=](Graph<double>& g, const Var<double>& w) {
    return project(matmul(g.constant(other), w), s);
  });
  add_case("linear", random_tensor(rng, {rows, cols}), [=](Graph<double>& g, const Var<double>& x) {
    return project(linear(x, g.constant(right), g.constant(Tensor<double>(Shape{3}, 0.3))), s);
  });
  add_case("transpose", random_tensor(rng, {rows, cols}), [=](Graph<double>&, const Var<double>& x) {
    return project(transpose(x), s);
  });
  add_case("reshape", random_tensor(rng, {rows, cols}), [=](Graph<double>&, const Var<double>& x) {
    return project(reshape(x, Shape{rows * cols}), s);
  });
  add_case("gelu", random_tensor(rng, {rows, cols}, -3, 3), [=](Graph<double>&, const Var<double>& x) {
    return project(gelu(x), s);
  });
  add_case("relu", away_from(rng, {rows, cols}, 0.0), [=](Graph<double>&, const Var<double>& x) {
    return project(relu(x), s);
  });
  add_case("sigmoid", random_tensor(rng, {rows, cols}, -4, 4), [=](Graph<double>&, const Var<double>& x) {
    return project(sigmoid(x), s);
  });
  add_case("exp", random_tensor(rng, {rows, cols}), [=](Graph<double>&, const Var<double>& x) {
    return project(exp(x), s);
  });
  add_case("log", random_tensor(rng, {rows, cols}, 0.2, 3), [=](Graph<double>&, const Var<double>& x) {
    return project(log(x), s);
  });
  add_case("threshold", away_from(rng, {rows, cols}, 0.4), [=](Graph<double>&, const Var<double>& x) {
    return project(threshold(x, 0.4), s);
  });
  add_case("sum", random_tensor(rng, {rows, cols}), [](Graph<double>&, const Var<double>& x) {
    return sum(x);
  });
  add_case("mean", random_tensor(rng, {rows, cols}), [](Graph<double>&, const Var<double>& x) {
    return mean(x);
  });
  add_case("reduce_mean_std", random_tensor(rng, {rows + 1, cols}), [=](Graph<double>&, const Var<double>& x) {
    auto [m, sd] = reduce_mean_std(x);
    return add(project(m, s), project(sd, s + 1));
  });
  add_case("rows_dot", random_tensor(rng, {rows, cols}), [=](Graph<double>& g, const Var<double>& x) {
    return project(rows_dot(x, g.constant(vec)), s);
  });
  add_case("rows_dot_vec", random_tensor(rng, {cols}), [=](Graph<double>& g, const Var<double>& v) {
    return project(rows_dot(g.constant(other), v), s);
  });
  add_case("outer", random_tensor(rng, {rows}), [=](Graph<double>& g, const Var<double>& w) {
    return project(outer(w, g.constant(vec)), s);
  });
  add_case("broadcast_rows", random_tensor(rng, {cols}), [=](Graph<double>&, const Var<double>& v) {
    return project(broadcast_rows(v, rows), s);
  });
  add_case("concat_cols", random_tensor(rng, {rows, cols}), [=](Graph<double>& g, const Var<double>& x) {
    return project(concat_cols(g.constant(other), x), s);
  });
  add_case("concat", random_tensor(rng, {cols}), [=](Graph<double>& g, const Var<double>& v) {
    return project(concat(v, g.constant(vec)), s);
  });
  add_case("pick", random_tensor(rng, {rows, cols}), [=](Graph<double>&, const Var<double>& x) {
    return mul(pick(x, 1), pick(x, rows * cols - 1));
  });
  add_case("row", random_tensor(rng, {rows, cols}), [=](Graph<double>&, const Var<double>& x) {
    return project(row(x, rows - 1), s);
  });
  add_case("gather_cols", random_tensor(rng, {rows, cols}), [=](Graph<double>&, const Var<double>& x) {
    return project(gather_cols(x, {0, cols - 1, 0, 1}), s);
  });
  add_case("shift_right", random_tensor(rng, {cols + 2}), [=](Graph<double>&, const Var<double>& v) {
    std::vector<bool> keep(cols + 2, true);
    keep[2] = false;
    return project(shift_right(v, 1, keep, -5.0), s);
  });
  add_case("logaddexp", random_tensor(rng, {rows, cols}, -3, 3), [=](Graph<double>& g, const Var<double>& x) {
    return project(logaddexp(x, g.constant(other)), s);
  });
  add_case("logsumexp", random_tensor(rng, {rows, cols}, -3, 3), [](Graph<double>&, const Var<double>& x) {
    return logsumexp(x);
  });
  add_case("softmax", random_tensor(rng, {rows, cols}, -3, 3), [=](Graph<double>&, const Var<double>& x) {
    return project(softmax(x), s);
  });
  add_case("log_softmax", random_tensor(rng, {rows, cols}, -3, 3), [=](Graph<double>&, const Var<double>& x) {
    return project(log_softmax(x), s);
  });
  {
    Tensor<double> gamma = random_tensor(rng, {cols}, 0.5, 1.5);
    Tensor<double> beta = random_tensor(rng, {cols});
    add_case("layer_norm", random_tensor(rng, {rows, cols}, -2, 2), [=](Graph<double>& g, const Var<double>& x) {
      return project(layer_norm(x, g.constant(gamma), g.constant(beta)), s);
    });
    add_case("layer_norm_gamma", gamma, [=](Graph<double>& g, const Var<double>& gm) {
      return project(layer_norm(g.constant(other), gm, g.constant(beta)), s);
    });
  }
  {
    Tensor<double> kernel = random_tensor(rng, {3, 2, 3});
    Tensor<double> signal = random_tensor(rng, {2, 11});
    add_case("conv1d", signal, [=](Graph<double>& g, const Var<double>& x) {
      return project(conv1d(x, g.constant(kernel), 2), s);
    });
    add_case("conv1d_weight", kernel, [=](Graph<double>& g, const Var<double>& w) {
      return project(conv1d(g.constant(signal), w, 2), s);
    });
  }
  {
    Tensor<double> k = random_tensor(rng, {rows + 1, 4});
    Tensor<double> v = random_tensor(rng, {rows + 1, 4});
    add_case("attention", random_tensor(rng, {rows + 1, 4}), [=](Graph<double>& g, const Var<double>& q) {
      return project(attention(q, g.constant(k), g.constant(v), 2), s);
    });
    add_case("attention_kv", random_tensor(rng, {rows + 1, 4}), [=](Graph<double>& g, const Var<double>& x) {
      return project(attention(g.constant(k), x, x, 2), s);
    });
  }
  add_case("dropout", random_tensor(rng, {rows, cols}), [=](Graph<double>&, const Var<double>& x) {
    Rng drop_rng(s);
    return project(dropout(x, 0.3, drop_rng), s);
  });
  {
    auto store = std::make_shared<ParameterStore<double>>();
    auto block = TransformerBlock<double>::create(*store, "b", 4, 2, 8, s);
    add_case("transformer_block", random_tensor(rng, {3, 4}), [=, keep = store](Graph<double>&, const Var<double>& x) {
      return project(block(x.graph(), x, ForwardContext{}), s);
    });
  }
  {
    const std::size_t frames = 4, vocab = 3;
    Labels target{1, 2};
    add_case("ctc_loss", random_log_probs(rng, frames, vocab), [=](Graph<double>&, const Var<double>& lp) {
      return ctc_loss(lp, target).loss;
    });
    // Through the normalisation as well as the recursion.
    add_case("ctc_loss_logits", random_tensor(rng, {5, 4}, -2, 2), [=](Graph<double>&, const Var<double>& z) {
      return ctc_loss(log_softmax(z), Labels{1, 1, 3}).loss;
    });
  }

  // Accent identification loss: CE(mean) + SDC over frame logits.
  const std::size_t classes = 3;
  const AccentLabel label(static_cast<std::size_t>(uniform(rng, 0, classes)) % classes, classes);
  auto head = [](const Var<double>& a) {
    AccentHeadOutput<double> out;
    out.a = a;
    std::tie(out.a_mean, out.a_std) = reduce_mean_std(a);
    return out;
  };
  add_case("sdc_loss", random_tensor(rng, {5, classes}, -2, 2), [=](Graph<double>&, const Var<double>& a) {
    return sdc_loss(head(a));
  });
  add_case("accent_ce_loss", random_tensor(rng, {classes}, -2, 2), [=](Graph<double>&, const Var<double>& m) {
    return accent_ce_loss(m, label);
  });
  add_case("accent_final_loss", random_tensor(rng, {5, classes}, -2, 2), [=](Graph<double>&, const Var<double>& a) {
    return accent_final_loss(head(a), label, 1.0);
  });

  // Gated dynamic injection through the frame logits, with gates bounded
  // away from the threshold.
  {
    Tensor<double> x = random_tensor(rng, {4, 5});
    Tensor<double> proj = random_tensor(rng, {classes, 5});
    Tensor<double> a(Shape{4, classes});
    for (int attempt = 0; attempt < 1000; ++attempt) {
      a = random_tensor(rng, {4, classes}, -1.5, 1.5);
      Tensor<double> mu(Shape{classes});
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t c = 0; c < classes; ++c) mu[c] += a.at(t, c) / 4.0;
      Tensor<double> w = frame_gates(a, mu, 0.4);
      Graph<double> gg;
      Tensor<double> raw = sigmoid(rows_dot(gg.constant(a), gg.constant(mu))).value();
      bool clear = true;
      for (double v : raw.data()) clear = clear && std::abs(v - 0.4) > 0.02;
      if (clear) break;
    }
    auto store = std::make_shared<ParameterStore<double>>();
    auto inj = AccentInjection<double>::create(*store, "inj", classes, 5, CombineMode::add);
    inj.proj->value = proj;
    add_case("gated_injection", a, [=, keep = store](Graph<double>& g, const Var<double>& logits) {
      auto [a_mean, a_std] = reduce_mean_std(logits);
      Var<double> w = frame_gates(logits, a_mean, 0.4);
      return project(inject_dynamic(g.constant(x), w, a_mean, inj), s);
    });
  }
  return cases;
}

}  // namespace accentctc::testing
