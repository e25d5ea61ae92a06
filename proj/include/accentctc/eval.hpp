#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "accentctc/ctc.hpp"
#include "accentctc/ngram_lm.hpp"
#include "accentctc/training.hpp"

namespace accentctc {

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;

  std::size_t total() const { return substitutions + deletions + insertions; }
  friend bool operator==(const EditCounts&, const EditCounts&) = default;
};

/// Minimal unit-cost alignment of hyp against ref. Among optimal alignments
/// the one with the most substitutions (fewest insertions plus deletions) is
/// chosen, which makes the counts symmetric under swapping ref and hyp.
inline EditCounts edit_distance(const std::vector<std::string>& ref,
                                const std::vector<std::string>& hyp) {
  if (ref.empty()) throw DataError("edit_distance: empty reference");
  const std::size_t n = ref.size(), m = hyp.size();
  // (total edits, insertions + deletions), compared lexicographically.
  using Cost = std::pair<std::size_t, std::size_t>;
  std::vector<Cost> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> Cost& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = {i, i};
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = {j, j};
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const Cost diag = at(i - 1, j - 1), up = at(i - 1, j), left = at(i, j - 1);
      const std::size_t sub = ref[i - 1] == hyp[j - 1] ? 0 : 1;
      at(i, j) = std::min({Cost{diag.first + sub, diag.second}, Cost{up.first + 1, up.second + 1},
                           Cost{left.first + 1, left.second + 1}});
    }
  }
  const auto [total, indels] = at(n, m);
  // deletions - insertions = n - m.
  EditCounts c;
  c.substitutions = total - indels;
  c.deletions = (indels + n - m) / 2;
  c.insertions = indels - c.deletions;
  return c;
}

struct WerBreakdown {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_words = 0;

  double wer() const {
    if (reference_words == 0) return std::numeric_limits<double>::quiet_NaN();
    return 100.0 * static_cast<double>(substitutions + deletions + insertions) /
           static_cast<double>(reference_words);
  }

  void add(const EditCounts& e, std::size_t n) {
    substitutions += e.substitutions;
    deletions += e.deletions;
    insertions += e.insertions;
    reference_words += n;
  }
};

/// Case-folded words of `text` split on `boundary`.
inline std::vector<std::string> words_of(const std::string& text, char boundary = ' ') {
  std::vector<std::string> out;
  for (std::string w : split(text, boundary)) {
    if (w.empty()) continue;
    for (char& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.push_back(std::move(w));
  }
  return out;
}

/// Error counts pooled over all pairs, divided by total reference words.
inline WerBreakdown wer_corpus(const std::vector<std::string>& refs,
                               const std::vector<std::string>& hyps, char boundary = ' ') {
  if (refs.size() != hyps.size())
    throw UsageError("wer_corpus: " + std::to_string(refs.size()) + " references but " +
                     std::to_string(hyps.size()) + " hypotheses");
  WerBreakdown w;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto r = words_of(refs[i], boundary);
    w.add(edit_distance(r, words_of(hyps[i], boundary)), r.size());
  }
  return w;
}

/// Percentage by which `system` lowers `baseline`.
inline double relative_reduction(double baseline, double system) {
  if (baseline == 0.0) throw UsageError("relative_reduction: baseline is zero");
  return 100.0 * (baseline - system) / baseline;
}

struct AccentReport {
  std::vector<std::size_t> support;            // utterances per true class
  std::vector<double> per_class_accuracy;      // percent; NaN without support
  double overall = 0.0;                        // percent
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

inline AccentReport accent_eval(const std::vector<std::size_t>& predictions,
                                const std::vector<std::size_t>& labels, std::size_t n_classes) {
  if (predictions.size() != labels.size())
    throw UsageError("accent_eval: " + std::to_string(predictions.size()) + " predictions but " +
                     std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw DataError("accent_eval: no labelled utterances");
  AccentReport r;
  r.support.assign(n_classes, 0);
  r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes || predictions[i] >= n_classes)
      throw DataError("accent_eval: class index out of range at item " + std::to_string(i));
    ++r.support[labels[i]];
    ++r.confusion[labels[i]][predictions[i]];
    if (labels[i] == predictions[i]) ++correct;
  }
  for (std::size_t c = 0; c < n_classes; ++c)
    r.per_class_accuracy.push_back(
        r.support[c] ? 100.0 * r.confusion[c][c] / static_cast<double>(r.support[c])
                     : std::numeric_limits<double>::quiet_NaN());
  r.overall = 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
  return r;
}

// ---------------------------------------------------------------------------
// Reports

namespace report_detail {

inline std::string cell(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) out << "  ";
      if (c == 0) out << r[c] << std::string(width[c] - r[c].size(), ' ');
      else out << std::string(width[c] - r[c].size(), ' ') << r[c];
    }
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out.str();
}

inline std::string csv(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream out;
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << '\n';
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "," : "") << r[c];
    out << '\n';
  }
  return out.str();
}

inline std::vector<std::string> accent_header(std::size_t n, const std::string& first) {
  std::vector<std::string> h{first};
  for (std::size_t c = 0; c < n; ++c) h.push_back("A" + std::to_string(c));
  h.push_back("All");
  return h;
}

}  // namespace report_detail

/// Per-accent and pooled WER for one system.
struct WerReport {
  std::vector<WerBreakdown> per_accent;
  WerBreakdown all;
};

inline WerReport wer_by_accent(const Dataset& data, const std::vector<std::string>& hyps,
                               std::size_t n_accents) {
  if (data.size() != hyps.size()) throw UsageError("wer_by_accent: size mismatch");
  WerReport r;
  r.per_accent.resize(n_accents);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto ref = words_of(data[i].transcript);
    const EditCounts e = edit_distance(ref, words_of(hyps[i]));
    r.all.add(e, ref.size());
    if (data[i].accent && *data[i].accent < n_accents) r.per_accent[*data[i].accent].add(e, ref.size());
  }
  return r;
}

inline std::vector<std::string> wer_row(const std::string& name, const WerReport& r) {
  std::vector<std::string> row{name};
  for (const auto& w : r.per_accent) row.push_back(report_detail::cell(w.wer()));
  row.push_back(report_detail::cell(r.all.wer()));
  return row;
}

/// Plain-text and CSV tables with one row per system, columns per accent
/// plus All.
inline std::string wer_table_text(const std::vector<std::pair<std::string, WerReport>>& systems) {
  if (systems.empty()) return "";
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, r] : systems) rows.push_back(wer_row(name, r));
  return report_detail::table(
      report_detail::accent_header(systems.front().second.per_accent.size(), "WER%"), rows);
}

inline std::string wer_table_csv(const std::vector<std::pair<std::string, WerReport>>& systems) {
  if (systems.empty()) return "";
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, r] : systems) rows.push_back(wer_row(name, r));
  return report_detail::csv(
      report_detail::accent_header(systems.front().second.per_accent.size(), "system"), rows);
}

inline std::vector<std::string> accent_row(const std::string& name, const AccentReport& r) {
  std::vector<std::string> row{name};
  for (double a : r.per_class_accuracy) row.push_back(report_detail::cell(a));
  row.push_back(report_detail::cell(r.overall));
  return row;
}

inline std::string accent_table_text(const std::vector<std::pair<std::string, AccentReport>>& systems) {
  if (systems.empty()) return "";
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, r] : systems) rows.push_back(accent_row(name, r));
  std::string out = report_detail::table(
      report_detail::accent_header(systems.front().second.support.size(), "Acc%"), rows);
  for (const auto& [name, r] : systems) {
    out += "\nconfusion " + name + " (rows true, columns predicted)\n";
    std::vector<std::vector<std::string>> crow;
    std::vector<std::string> header{""};
    for (std::size_t c = 0; c < r.confusion.size(); ++c) header.push_back("A" + std::to_string(c));
    for (std::size_t t = 0; t < r.confusion.size(); ++t) {
      std::vector<std::string> row{"A" + std::to_string(t)};
      for (std::size_t v : r.confusion[t]) row.push_back(std::to_string(v));
      crow.push_back(row);
    }
    out += report_detail::table(header, crow);
  }
  return out;
}

inline std::string accent_table_csv(const std::vector<std::pair<std::string, AccentReport>>& systems) {
  if (systems.empty()) return "";
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, r] : systems) rows.push_back(accent_row(name, r));
  return report_detail::csv(
      report_detail::accent_header(systems.front().second.support.size(), "system"), rows);
}

// ---------------------------------------------------------------------------
// Inference over datasets

struct DecodeOptions {
  // 0 selects greedy decoding.
  std::size_t beam_size = 500;
  double lm_weight = 1.74;
  double word_insertion_penalty = -0.52;
  double token_prune = std::numeric_limits<double>::infinity();
};

template <typename T>
std::vector<std::string> transcribe(const AsrModel<T>& asr, const Dataset& data,
                                    const DecodeOptions& opts, const NGramLM* lm = nullptr,
                                    const AccentIdModel<T>* aid = nullptr) {
  const Vocabulary vocab = Vocabulary::english();
  std::vector<std::string> out;
  out.reserve(data.size());
  for (const Utterance& u : data) {
    const Tensor<T> signal = u.signal.template cast<T>();
    const Tensor<T> lp = asr.log_probs(signal, accent_input_for<T>(asr.config(), u, aid, signal));
    if (opts.beam_size == 0) {
      out.push_back(vocab.decode(greedy_decode(lp)));
    } else {
      BeamOptions b;
      b.beam_size = opts.beam_size;
      b.lm = lm;
      b.lm_weight = lm ? opts.lm_weight : 0.0;
      b.word_insertion_penalty = opts.word_insertion_penalty;
      b.token_prune = opts.token_prune;
      out.push_back(beam_decode(lp, vocab, b).text);
    }
  }
  return out;
}

struct AccentPredictions {
  std::vector<std::size_t> predicted;
  std::vector<std::size_t> labels;
  // Mean over utterances of the per-utterance SDC term.
  double mean_frame_std = 0.0;
};

/// Predictions for every labelled utterance of `data`.
template <typename T>
AccentPredictions predict_accents(const AccentIdModel<T>& aid, const Dataset& data) {
  AccentPredictions p;
  double total = 0.0;
  for (const Utterance& u : data) {
    if (!u.accent) continue;
    const auto pred = aid.predict(u.signal.template cast<T>(), static_cast<T>(aid.config().gate_threshold));
    p.predicted.push_back(pred.predicted());
    p.labels.push_back(*u.accent);
    total += pred.mean_std();
  }
  if (!p.labels.empty()) p.mean_frame_std = total / static_cast<double>(p.labels.size());
  return p;
}

}  // namespace accentctc
