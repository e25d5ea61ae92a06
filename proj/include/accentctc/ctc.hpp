#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "accentctc/autodiff.hpp"
#include "accentctc/ngram_lm.hpp"
#include "accentctc/ops.hpp"

namespace accentctc {

using Labels = std::vector<std::size_t>;

/// Character inventory for CTC outputs. Index 0 is the blank; text symbols
/// follow in order.
class Vocabulary {
 public:
  static constexpr std::size_t kBlank = 0;

  explicit Vocabulary(std::string symbols, char word_boundary = ' ')
      : symbols_(std::move(symbols)), boundary_(word_boundary) {
    std::string sorted = symbols_;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ConfigError("vocabulary symbols must be unique");
    if (symbols_.empty()) throw ConfigError("vocabulary needs at least one symbol");
  }

  /// 26 lower-case letters plus apostrophe and space (28 text symbols).
  static Vocabulary english() { return Vocabulary(" 'abcdefghijklmnopqrstuvwxyz"); }

  /// Number of CTC outputs, blank included.
  std::size_t size() const { return symbols_.size() + 1; }
  std::size_t text_symbols() const { return symbols_.size(); }
  const std::string& symbols() const { return symbols_; }
  char word_boundary() const { return boundary_; }

  std::optional<std::size_t> index_of(char c) const {
    const auto pos = symbols_.find(c);
    if (pos == std::string::npos) return std::nullopt;
    return pos + 1;
  }

  std::optional<std::size_t> boundary_index() const { return index_of(boundary_); }

  char symbol(std::size_t index) const {
    if (index == kBlank || index > symbols_.size())
      throw ShapeError("vocabulary index " + std::to_string(index) + " has no symbol");
    return symbols_[index - 1];
  }

  /// Lower-cases then maps each character; unknown characters are an error.
  Labels encode(std::string_view text) const {
    Labels out;
    out.reserve(text.size());
    for (char ch : text) {
      const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      auto idx = index_of(c);
      if (!idx) throw DataError(std::string("character '") + ch + "' not in vocabulary");
      out.push_back(*idx);
    }
    return out;
  }

  std::string decode(const Labels& labels) const {
    std::string out;
    out.reserve(labels.size());
    for (std::size_t l : labels)
      if (l != kBlank) out.push_back(symbol(l));
    return out;
  }

 private:
  std::string symbols_;
  char boundary_;
};

/// Merge adjacent repeats, then drop blanks.
inline Labels collapse(const Labels& path, std::size_t blank = Vocabulary::kBlank) {
  Labels out;
  std::optional<std::size_t> prev;
  for (std::size_t l : path) {
    if (prev && *prev == l) continue;
    prev = l;
    if (l != blank) out.push_back(l);
  }
  return out;
}

/// Minimum frames needed to emit `target`: one per label plus a blank
/// between each adjacent repeat.
inline std::size_t ctc_min_frames(const Labels& target) {
  std::size_t need = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) need += target[i] == target[i - 1] ? 1 : 0;
  return need;
}

template <typename T>
struct CtcLoss {
  Var<T> loss;
  bool feasible = true;
};

/// Negative log of the total probability of all alignments of `target`,
/// from the log-space forward recursion over the blank-extended label
/// sequence. Built from graph ops, so it is differentiable end to end.
/// Infeasible targets give +inf with `feasible == false`.
template <typename T>
CtcLoss<T> ctc_loss(const Var<T>& log_probs, const Labels& target,
                    std::size_t blank = Vocabulary::kBlank) {
  detail::require_rank(log_probs, 2, "ctc_loss");
  Graph<T>& g = log_probs.graph();
  const std::size_t frames = log_probs.dim(0), vocab = log_probs.dim(1);
  for (std::size_t l : target) {
    if (l >= vocab || l == blank) throw ShapeError("ctc_loss: target label out of range");
  }
  if (frames < ctc_min_frames(target)) {
    return {g.constant(Tensor<T>::scalar(std::numeric_limits<T>::infinity())), false};
  }

  Labels ext;
  ext.reserve(2 * target.size() + 1);
  ext.push_back(blank);
  for (std::size_t l : target) {
    ext.push_back(l);
    ext.push_back(blank);
  }
  const std::size_t states = ext.size();
  std::vector<bool> start(states, false);
  start[0] = true;
  if (states > 1) start[1] = true;
  std::vector<bool> skip(states, false);
  for (std::size_t s = 2; s < states; ++s) skip[s] = ext[s] != blank && ext[s] != ext[s - 2];

  Var<T> emit = gather_cols(log_probs, ext);
  Var<T> alpha = shift_right(row(emit, 0), 0, start, neg_inf<T>());
  for (std::size_t t = 1; t < frames; ++t) {
    Var<T> acc = alpha;
    if (states > 1) acc = logaddexp(acc, shift_right(alpha, 1, {}, neg_inf<T>()));
    if (states > 2) acc = logaddexp(acc, shift_right(alpha, 2, skip, neg_inf<T>()));
    alpha = add(acc, row(emit, t));
  }
  Var<T> total = pick(alpha, states - 1);
  if (states > 1) total = logaddexp(total, pick(alpha, states - 2));
  return {scale(total, T(-1)), true};
}

template <typename T>
T ctc_loss_value(const Tensor<T>& log_probs, const Labels& target,
                 std::size_t blank = Vocabulary::kBlank) {
  Graph<T> g;
  return ctc_loss(g.constant(log_probs), target, blank).loss.item();
}

/// Exact loss by enumerating all V^T paths. Refuses instances with more
/// than one million paths.
inline double ctc_brute_force(const Tensor<double>& log_probs, const Labels& target,
                              std::size_t blank = Vocabulary::kBlank) {
  const std::size_t frames = log_probs.dim(0), vocab = log_probs.dim(1);
  double paths = 1.0;
  for (std::size_t t = 0; t < frames; ++t) paths *= static_cast<double>(vocab);
  if (paths > 1e6) throw UsageError("ctc_brute_force: too many paths to enumerate");
  double total = neg_inf<double>();
  Labels path(frames, 0);
  while (true) {
    if (collapse(path, blank) == target) {
      double lp = 0.0;
      for (std::size_t t = 0; t < frames; ++t) lp += log_probs.at(t, path[t]);
      total = log_add(total, lp);
    }
    std::size_t t = 0;
    while (t < frames && ++path[t] == vocab) path[t++] = 0;
    if (t == frames) break;
  }
  return -total;
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& m, std::size_t r) {
  auto row = m.row(r);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Per-frame argmax then collapse.
template <typename T>
Labels greedy_decode(const Tensor<T>& log_probs, std::size_t blank = Vocabulary::kBlank) {
  Labels path;
  for (std::size_t t = 0; t < log_probs.dim(0); ++t) path.push_back(argmax_row(log_probs, t));
  return collapse(path, blank);
}

struct BeamOptions {
  std::size_t beam_size = 500;
  const NGramLM* lm = nullptr;
  double lm_weight = 1.74;
  double word_insertion_penalty = -0.52;
  // Skip symbols whose frame log-probability is more than this below the
  // frame maximum. Infinite means no pruning.
  double token_prune = std::numeric_limits<double>::infinity();
};

struct BeamResult {
  Labels labels;
  std::string text;
  double score = 0.0;
};

namespace detail {

/// Word-level fusion bookkeeping for a decoded prefix.
struct FusionState {
  double score = 0.0;
  std::string word;
  NGramLM::State lm_state;
  std::size_t words = 0;
};

/// Closes the current word: adds lm_weight * log P(word | history) + wip.
inline void close_word(FusionState& f, const BeamOptions& opts) {
  if (f.word.empty()) return;
  if (opts.lm != nullptr)
    f.score += opts.lm_weight * opts.lm->advance(f.lm_state, opts.lm->word_id(f.word));
  f.score += opts.word_insertion_penalty;
  ++f.words;
  f.word.clear();
}

inline FusionState extend_fusion(const FusionState& base, std::size_t label,
                                 const Vocabulary& vocab, const BeamOptions& opts) {
  FusionState f = base;
  const char c = vocab.symbol(label);
  if (c == vocab.word_boundary()) close_word(f, opts);
  else f.word.push_back(c);
  return f;
}

}  // namespace detail

/// Fusion score of a complete transcript: every non-empty word contributes
/// lm_weight * log P_LM + wip.
inline double fusion_score(const Labels& labels, const Vocabulary& vocab, const BeamOptions& opts) {
  detail::FusionState f;
  if (opts.lm) f.lm_state = opts.lm->begin_state();
  for (std::size_t l : labels) f = detail::extend_fusion(f, l, vocab, opts);
  detail::close_word(f, opts);
  return f.score;
}

/// Prefix beam search over CTC outputs with word-level shallow fusion.
/// Each prefix tracks blank-ending and symbol-ending log probabilities; a
/// completed word adds lm_weight * log P_LM(word | history) + wip. After
/// every frame the best `beam_size` prefixes by total score survive, ties
/// going to the lexicographically smaller label sequence.
template <typename T>
BeamResult beam_decode(const Tensor<T>& log_probs, const Vocabulary& vocab,
                       const BeamOptions& opts) {
  if (opts.beam_size < 1) throw ConfigError("beam_decode: beam size must be >= 1");
  if (opts.lm_weight < 0.0) throw ConfigError("beam_decode: lm weight must be >= 0");
  if (opts.lm && !vocab.boundary_index())
    throw ConfigError("beam_decode: language model fusion needs a word-boundary symbol");
  if (log_probs.dim(1) != vocab.size())
    throw ShapeError("beam_decode: log-prob width does not match vocabulary");

  const std::size_t frames = log_probs.dim(0), width = log_probs.dim(1);
  constexpr std::size_t kBlank = Vocabulary::kBlank;
  const double ninf = neg_inf<double>();

  struct Node {
    std::int64_t parent;
    std::size_t label;
    std::size_t depth;
    detail::FusionState fusion;
  };
  std::vector<Node> trie;
  std::unordered_map<std::uint64_t, std::int64_t> children;
  auto child_key = [width](std::int64_t parent, std::size_t label) {
    return static_cast<std::uint64_t>(parent) * width + label;
  };
  auto labels_of = [&trie](std::int64_t node) {
    Labels out(node >= 0 ? trie[node].depth : 0);
    for (std::int64_t n = node; n > 0; n = trie[n].parent) out[trie[n].depth - 1] = trie[n].label;
    return out;
  };
  {
    detail::FusionState root;
    if (opts.lm) root.lm_state = opts.lm->begin_state();
    trie.push_back(Node{-1, kBlank, 0, std::move(root)});
  }

  struct Hyp {
    std::int64_t node;    // trie node, or -1 while pending
    std::int64_t parent;  // pending prefix = parent + label
    std::size_t label;
    double pb = neg_inf<double>();
    double pnb = neg_inf<double>();
    double score = 0.0;
  };
  std::vector<Hyp> beam{Hyp{0, -1, kBlank, 0.0, ninf, 0.0}};

  std::vector<Hyp> next;
  std::unordered_map<std::uint64_t, std::size_t> slot;
  // Tagged identity: existing nodes and pending (parent, label) pairs.
  auto find_or_add = [&](std::int64_t parent, std::size_t label) -> Hyp& {
    std::int64_t node = -1;
    if (label == kBlank) {
      node = parent;
    } else if (auto it = children.find(child_key(parent, label)); it != children.end()) {
      node = it->second;
    }
    const std::uint64_t key = node >= 0 ? (static_cast<std::uint64_t>(node) << 1)
                                        : ((child_key(parent, label) << 1) | 1u);
    auto [it, inserted] = slot.emplace(key, next.size());
    if (inserted) next.push_back(Hyp{node, parent, label});
    return next[it->second];
  };

  for (std::size_t t = 0; t < frames; ++t) {
    next.clear();
    slot.clear();
    auto lp = log_probs.row(t);
    const double frame_max = static_cast<double>(*std::max_element(lp.begin(), lp.end()));
    for (const Hyp& h : beam) {
      const double total = log_add(h.pb, h.pnb);
      const std::size_t last = h.node > 0 ? trie[h.node].label : kBlank;
      {
        Hyp& stay = find_or_add(h.node, kBlank);
        stay.pb = log_add(stay.pb, total + static_cast<double>(lp[kBlank]));
      }
      for (std::size_t c = 1; c < width; ++c) {
        const double p = static_cast<double>(lp[c]);
        if (p < frame_max - opts.token_prune) continue;
        if (c == last) {
          Hyp& stay = find_or_add(h.node, kBlank);
          stay.pnb = log_add(stay.pnb, h.pnb + p);
          Hyp& ext = find_or_add(h.node, c);
          ext.pnb = log_add(ext.pnb, h.pb + p);
        } else {
          Hyp& ext = find_or_add(h.node, c);
          ext.pnb = log_add(ext.pnb, total + p);
        }
      }
    }

    // Fusion for pending extensions is computed once per candidate.
    std::vector<detail::FusionState> pending_fusion(next.size());
    for (std::size_t i = 0; i < next.size(); ++i) {
      Hyp& h = next[i];
      double fusion;
      if (h.node >= 0) {
        fusion = trie[h.node].fusion.score;
      } else {
        pending_fusion[i] = detail::extend_fusion(trie[h.parent].fusion, h.label, vocab, opts);
        fusion = pending_fusion[i].score;
      }
      h.score = log_add(h.pb, h.pnb) + fusion;
    }

    std::vector<std::size_t> order(next.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto prefix_of = [&](const Hyp& h) {
      if (h.node >= 0) return labels_of(h.node);
      Labels l = labels_of(h.parent);
      l.push_back(h.label);
      return l;
    };
    auto better = [&](std::size_t a, std::size_t b) {
      if (next[a].score != next[b].score) return next[a].score > next[b].score;
      return prefix_of(next[a]) < prefix_of(next[b]);
    };
    const std::size_t keep = std::min(opts.beam_size, order.size());
    std::partial_sort(order.begin(), order.begin() + keep, order.end(), better);

    std::vector<Hyp> survivors;
    survivors.reserve(keep);
    for (std::size_t r = 0; r < keep; ++r) {
      Hyp h = next[order[r]];
      if (h.node < 0) {
        const std::int64_t id = static_cast<std::int64_t>(trie.size());
        trie.push_back(Node{h.parent, h.label, trie[h.parent].depth + 1,
                            std::move(pending_fusion[order[r]])});
        children.emplace(child_key(h.parent, h.label), id);
        h.node = id;
      }
      survivors.push_back(h);
    }
    beam = std::move(survivors);
  }

  // Close the trailing word of each surviving prefix.
  BeamResult best;
  best.score = ninf;
  bool have = false;
  for (const Hyp& h : beam) {
    detail::FusionState f = trie[h.node].fusion;
    detail::close_word(f, opts);
    const double s = log_add(h.pb, h.pnb) + f.score;
    Labels labels = labels_of(h.node);
    if (!have || s > best.score || (s == best.score && labels < best.labels)) {
      best.score = s;
      best.labels = std::move(labels);
      have = true;
    }
  }
  best.text = vocab.decode(best.labels);
  return best;
}

}  // namespace accentctc
