#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "accentctc/config.hpp"
#include "accentctc/tensor.hpp"

namespace accentctc {

enum class Smoothing { add_k, katz };

inline Smoothing parse_smoothing(const std::string& s) {
  if (s == "katz") return Smoothing::katz;
  if (s == "add_k") return Smoothing::add_k;
  throw ConfigError("unknown smoothing '" + s + "' (katz|add_k)");
}

inline std::string to_string(Smoothing s) { return s == Smoothing::katz ? "katz" : "add_k"; }

struct LmTrainOptions {
  std::size_t order = 4;
  Smoothing smoothing = Smoothing::katz;
  double k = 1.0;         // add_k pseudo-count
  double discount = 0.5;  // katz absolute discount
};

/// Lower-cased words separated by `boundary`; empty words are dropped.
inline std::vector<std::string> split_words(std::string_view text, char boundary = ' ') {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (ch == boundary) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Back-off word n-gram model. Probabilities are kept as natural logs; the
/// text format stores base-10 logs.
class NGramLM {
 public:
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kBos = "<s>";
  static constexpr int kUnkId = 0;
  static constexpr int kBosId = 1;

  using State = std::vector<int>;

  /// Trains on whitespace-tokenised sentences.
  static NGramLM train(const std::vector<std::vector<std::string>>& corpus,
                       const LmTrainOptions& opts) {
    if (opts.order < 1) throw ConfigError("n-gram order must be >= 1");
    std::size_t tokens = 0;
    for (const auto& s : corpus) tokens += s.size();
    if (tokens == 0) throw DataError("cannot train a language model on an empty corpus");
    if (opts.smoothing == Smoothing::add_k && opts.k < 0.0)
      throw ConfigError("add_k: k must be >= 0");
    if (opts.smoothing == Smoothing::katz && !(opts.discount > 0.0 && opts.discount < 1.0))
      throw ConfigError("katz: discount must lie in (0, 1)");

    NGramLM lm;
    lm.order_ = opts.order;
    std::set<std::string> words;
    for (const auto& s : corpus)
      for (const auto& w : s) words.insert(w);
    words.erase(kUnk);
    words.erase(kBos);
    for (const auto& w : words) lm.intern(w);

    // counts[n-1][ngram] over id sequences, history starting at a single <s>.
    std::vector<std::map<std::vector<int>, double>> counts(opts.order);
    for (const auto& s : corpus) {
      std::vector<int> seq{kBosId};
      for (const auto& w : s) seq.push_back(lm.word_id(w));
      for (std::size_t i = 1; i < seq.size(); ++i) {
        for (std::size_t n = 1; n <= opts.order && n <= i + 1; ++n) {
          std::vector<int> gram(seq.begin() + (i + 1 - n), seq.begin() + i + 1);
          counts[n - 1][gram] += 1.0;
        }
      }
    }

    const std::vector<int> vocab = lm.predictable_ids();
    const double vsize = static_cast<double>(vocab.size());

    // Unigrams.
    {
      double total = 0.0;
      for (const auto& [g, c] : counts[0]) total += c;
      std::map<int, double> c1;
      for (const auto& [g, c] : counts[0]) c1[g[0]] = c;
      if (opts.smoothing == Smoothing::add_k) {
        for (int w : vocab) {
          const double p = (c1[w] + opts.k) / (total + opts.k * vsize);
          lm.set_prob({w}, std::log(p));
        }
      } else {
        const std::size_t seen = c1.size();
        const std::size_t unseen = vocab.size() - seen;
        const double d = unseen > 0 ? opts.discount : 0.0;
        const double left = d * static_cast<double>(seen) / total;
        for (int w : vocab) {
          auto it = c1.find(w);
          const double c = it == c1.end() ? 0.0 : it->second;
          const double p = c > 0.0 ? (c - d) / total : left / static_cast<double>(unseen);
          lm.set_prob({w}, std::log(p));
        }
      }
      lm.set_prob({kBosId}, -std::numeric_limits<double>::infinity());
    }

    // Higher orders, grouped by context.
    for (std::size_t n = 2; n <= opts.order; ++n) {
      std::map<std::vector<int>, std::vector<std::pair<int, double>>> by_context;
      for (const auto& [g, c] : counts[n - 1]) {
        std::vector<int> ctx(g.begin(), g.end() - 1);
        by_context[ctx].emplace_back(g.back(), c);
      }
      for (const auto& [ctx, followers] : by_context) {
        double ctx_total = 0.0;
        for (const auto& [w, c] : followers) ctx_total += c;
        if (opts.smoothing == Smoothing::add_k) {
          std::map<int, double> cw(followers.begin(), followers.end());
          for (int w : vocab) {
            std::vector<int> g = ctx;
            g.push_back(w);
            const double p = (cw[w] + opts.k) / (ctx_total + opts.k * vsize);
            lm.set_prob(g, std::log(p));
          }
          lm.set_backoff(ctx, 0.0);
          continue;
        }
        const std::vector<int> lower_ctx(ctx.begin() + 1, ctx.end());
        double lower_seen = 0.0;
        for (const auto& [w, c] : followers) lower_seen += std::exp(lm.log_prob(lower_ctx, w));
        const bool discount = lower_seen < 1.0 - 1e-12;
        const double d = discount ? opts.discount : 0.0;
        for (const auto& [w, c] : followers) {
          std::vector<int> g = ctx;
          g.push_back(w);
          lm.set_prob(g, std::log((c - d) / ctx_total));
        }
        const double left = d * static_cast<double>(followers.size()) / ctx_total;
        lm.set_backoff(ctx, discount ? std::log(left / (1.0 - lower_seen)) : 0.0);
      }
    }
    return lm;
  }

  std::size_t order() const { return order_; }

  /// Id of `word`, or the unknown-word id.
  int word_id(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    return it == ids_.end() ? kUnkId : it->second;
  }

  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  /// Words that can be predicted (everything but <s>), in id order.
  std::vector<int> predictable_ids() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(words_.size()); ++i)
      if (i != kBosId) out.push_back(i);
    return out;
  }

  /// Natural-log P(word | context) with back-off; only the last order-1
  /// context words are used.
  double log_prob(std::span<const int> context, int word) const {
    if (context.size() + 1 > order_) context = context.subspan(context.size() + 1 - order_);
    std::vector<int> key(context.begin(), context.end());
    key.push_back(word);
    double backoff = 0.0;
    while (true) {
      auto it = probs_.find(pack(key));
      if (it != probs_.end()) return backoff + it->second;
      if (key.size() == 1) return -std::numeric_limits<double>::infinity();
      std::vector<int> ctx(key.begin(), key.end() - 1);
      auto bo = backoffs_.find(pack(ctx));
      if (bo != backoffs_.end()) backoff += bo->second;
      key.erase(key.begin());
    }
  }

  State begin_state() const { return State{kBosId}; }

  /// Log-probability of `word` after `state`; advances the state.
  double advance(State& state, int word) const {
    const double lp = log_prob(state, word);
    state.push_back(word);
    if (order_ > 1 && state.size() > order_ - 1) state.erase(state.begin());
    if (order_ == 1) state.clear();
    return lp;
  }

  /// Sum of log P(token | history); history starts at <s> unless `context`
  /// words are given.
  double score(const std::vector<std::string>& tokens,
               const std::vector<std::string>& context = {}) const {
    State st = begin_state();
    for (const auto& w : context) advance(st, word_id(w));
    double total = 0.0;
    for (const auto& w : tokens) total += advance(st, word_id(w));
    return total;
  }

  double perplexity(const std::vector<std::vector<std::string>>& corpus) const {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& s : corpus) {
      total += score(s);
      n += s.size();
    }
    if (n == 0) throw DataError("perplexity: empty corpus");
    return std::exp(-total / static_cast<double>(n));
  }

  // ---- text format ---------------------------------------------------------

  std::string to_text() const {
    std::vector<std::vector<std::pair<std::string, std::string>>> lines(order_);
    for (const auto& [key, lp] : probs_) {
      const std::vector<int> ids = unpack(key);
      std::string gram;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) gram += ' ';
        gram += words_[static_cast<std::size_t>(ids[i])];
      }
      std::string line = format_log10(lp) + '\t' + gram;
      if (ids.size() < order_) {
        auto bo = backoffs_.find(key);
        line += '\t' + format_log10(bo == backoffs_.end() ? 0.0 : bo->second);
      }
      lines[ids.size() - 1].emplace_back(gram, std::move(line));
    }
    std::ostringstream out;
    out << "NGLM " << order_ << '\n';
    for (std::size_t n = 0; n < order_; ++n) {
      std::sort(lines[n].begin(), lines[n].end());
      out << (n + 1) << "-grams\t" << lines[n].size() << '\n';
      for (const auto& [gram, line] : lines[n]) out << line << '\n';
    }
    return out.str();
  }

  static NGramLM from_text(std::string_view text) {
    const auto rows = split(text, '\n');
    std::size_t line_no = 0;
    auto next = [&]() -> std::string_view {
      while (line_no < rows.size()) {
        std::string_view l = trim(rows[line_no++]);
        if (!l.empty()) return l;
      }
      throw ParseError("language model: unexpected end of file", line_no);
    };
    std::string_view header = next();
    if (!header.starts_with("NGLM ")) throw ParseError("language model: missing NGLM header", line_no);
    NGramLM lm;
    lm.order_ = parse_count(header.substr(5), line_no);
    if (lm.order_ < 1) throw ParseError("language model: order must be >= 1", line_no);
    lm.words_.clear();
    lm.ids_.clear();
    lm.intern(kUnk);
    lm.intern(kBos);
    for (std::size_t n = 1; n <= lm.order_; ++n) {
      const auto sec = split(next(), '\t');
      if (sec.size() != 2 || sec[0] != std::to_string(n) + "-grams")
        throw ParseError("language model: expected section header '" + std::to_string(n) + "-grams'", line_no);
      const std::size_t count = parse_count(sec[1], line_no);
      for (std::size_t i = 0; i < count; ++i) {
        const auto fields = split(next(), '\t');
        const std::size_t want = n < lm.order_ ? 3 : 2;
        if (fields.size() != want)
          throw ParseError("language model: expected " + std::to_string(want) + " fields", line_no);
        const auto gram_words = split(fields[1], ' ');
        if (gram_words.size() != n) throw ParseError("language model: n-gram length mismatch", line_no);
        std::vector<int> ids;
        for (const auto& w : gram_words) ids.push_back(lm.intern(w));
        lm.set_prob(ids, parse_log10(fields[0], line_no));
        if (n < lm.order_) {
          const double bo = parse_log10(fields[2], line_no);
          if (bo != 0.0) lm.set_backoff(ids, bo);
        }
      }
    }
    return lm;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write language model " + path.string());
    out << to_text();
  }

  static NGramLM load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open language model " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return from_text(text.str());
  }

 private:
  NGramLM() {
    intern(kUnk);
    intern(kBos);
  }

  int intern(const std::string& w) {
    auto [it, inserted] = ids_.emplace(w, static_cast<int>(words_.size()));
    if (inserted) words_.push_back(w);
    return it->second;
  }

  static std::string pack(std::span<const int> ids) {
    std::string key(ids.size() * sizeof(int), '\0');
    std::memcpy(key.data(), ids.data(), key.size());
    return key;
  }

  static std::vector<int> unpack(const std::string& key) {
    std::vector<int> ids(key.size() / sizeof(int));
    std::memcpy(ids.data(), key.data(), key.size());
    return ids;
  }

  void set_prob(const std::vector<int>& gram, double lp) { probs_[pack(gram)] = lp; }
  void set_backoff(const std::vector<int>& ctx, double lb) { backoffs_[pack(ctx)] = lb; }

  static std::string format_log10(double ln) {
    if (ln == -std::numeric_limits<double>::infinity()) return "-inf";
    std::ostringstream s;
    s.precision(10);
    s << ln / std::numbers::ln10;
    return s.str();
  }

  static double parse_log10(std::string_view field, std::size_t line) {
    const std::string f(trim(field));
    if (f == "-inf") return -std::numeric_limits<double>::infinity();
    try {
      std::size_t used = 0;
      const double v = std::stod(f, &used);
      if (used != f.size()) throw std::invalid_argument(f);
      return v * std::numbers::ln10;
    } catch (const std::exception&) {
      throw ParseError("language model: bad log probability '" + f + "'", line);
    }
  }

  static std::size_t parse_count(std::string_view field, std::size_t line) {
    const std::string f(trim(field));
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
    if (ec != std::errc() || ptr != f.data() + f.size())
      throw ParseError("language model: bad count '" + f + "'", line);
    return v;
  }

  std::size_t order_ = 1;
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  std::unordered_map<std::string, double> probs_;
  std::unordered_map<std::string, double> backoffs_;
};

inline NGramLM train_lm(const std::vector<std::vector<std::string>>& corpus,
                        const LmTrainOptions& opts) {
  return NGramLM::train(corpus, opts);
}

inline double score(const NGramLM& lm, const std::vector<std::string>& tokens) {
  if (tokens.empty()) throw UsageError("score: empty token sequence");
  return lm.score(tokens);
}

inline double perplexity(const NGramLM& lm, const std::vector<std::vector<std::string>>& corpus) {
  return lm.perplexity(corpus);
}

}  // namespace accentctc
