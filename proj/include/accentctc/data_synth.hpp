#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "accentctc/config.hpp"
#include "accentctc/nn.hpp"
#include "accentctc/ops.hpp"

namespace accentctc {

/// Parameters of the synthetic accented corpus.
struct SynthSpec {
  std::size_t n_accents = 4;
  std::size_t n_utterances = 2000;
  // Letters used in transcripts; the word boundary is always a space.
  std::string alphabet = "abcdefgh";
  std::size_t samples_per_symbol = 24;
  double separation = 1.0;
  double noise_std = 0.01;
  double accent_tone = 0.3;  // amplitude of the accent tone at separation >= 1
  std::uint64_t seed = 1;
  double test_fraction = 0.1;
  // Fraction of utterances written without an accent label.
  double unlabeled_fraction = 0.0;
  std::size_t min_words = 2;
  std::size_t max_words = 4;
  std::size_t max_word_length = 4;

  void validate() const {
    if (n_accents < 2) throw ConfigError("synth: n_accents must be >= 2");
    if (separation < 0.0) throw ConfigError("synth: separation must be >= 0");
    if (noise_std < 0.0) throw ConfigError("synth: noise_std must be >= 0");
    if (accent_tone < 0.0) throw ConfigError("synth: accent_tone must be >= 0");
    if (alphabet.empty()) throw ConfigError("synth: alphabet must not be empty");
    if (alphabet.find(' ') != std::string::npos)
      throw ConfigError("synth: alphabet must not contain the word boundary");
    if (samples_per_symbol < 4) throw ConfigError("synth: samples_per_symbol must be >= 4");
    if (!(test_fraction >= 0.0 && test_fraction <= 1.0))
      throw ConfigError("synth: test_fraction must lie in [0, 1]");
    if (!(unlabeled_fraction >= 0.0 && unlabeled_fraction <= 1.0))
      throw ConfigError("synth: unlabeled_fraction must lie in [0, 1]");
    if (min_words < 1 || max_words < min_words || max_word_length < 1)
      throw ConfigError("synth: bad word count or length limits");
  }

  void to_config(Config& cfg, const std::string& prefix = "data.") const {
    cfg.set(prefix + "n_accents", n_accents);
    cfg.set(prefix + "n_utterances", n_utterances);
    cfg.set(prefix + "alphabet", alphabet);
    cfg.set(prefix + "samples_per_symbol", samples_per_symbol);
    cfg.set(prefix + "separation", separation);
    cfg.set(prefix + "noise_std", noise_std);
    cfg.set(prefix + "accent_tone", accent_tone);
    cfg.set(prefix + "seed", seed);
    cfg.set(prefix + "test_fraction", test_fraction);
    cfg.set(prefix + "unlabeled_fraction", unlabeled_fraction);
    cfg.set(prefix + "min_words", min_words);
    cfg.set(prefix + "max_words", max_words);
    cfg.set(prefix + "max_word_length", max_word_length);
  }

  static SynthSpec from_config(const Config& cfg) { return from_config(cfg, SynthSpec()); }

  /// Reads keys under `prefix`, falling back to `base` for absent ones.
  static SynthSpec from_config(const Config& cfg, const SynthSpec& base,
                               const std::string& prefix = "data.") {
    Config full;
    base.to_config(full, prefix);
    full.merge(cfg);
    SynthSpec s;
    s.n_accents = full.get_u64(prefix + "n_accents");
    s.n_utterances = full.get_u64(prefix + "n_utterances");
    s.alphabet = full.get(prefix + "alphabet");
    s.samples_per_symbol = full.get_u64(prefix + "samples_per_symbol");
    s.separation = full.get_double(prefix + "separation");
    s.noise_std = full.get_double(prefix + "noise_std");
    s.accent_tone = full.get_double(prefix + "accent_tone");
    s.seed = full.get_u64(prefix + "seed");
    s.test_fraction = full.get_double(prefix + "test_fraction");
    s.unlabeled_fraction = full.get_double(prefix + "unlabeled_fraction");
    s.min_words = full.get_u64(prefix + "min_words");
    s.max_words = full.get_u64(prefix + "max_words");
    s.max_word_length = full.get_u64(prefix + "max_word_length");
    s.validate();
    return s;
  }
};

struct Utterance {
  std::string id;
  std::string path;  // relative to the manifest directory
  Tensor<float> signal;
  std::string transcript;
  std::optional<std::size_t> accent;
  std::string split = "train";
};

using Dataset = std::vector<Utterance>;

namespace synth {

inline double normal(Rng& rng) {
  // Box-Muller on the portable uniform source.
  const double u1 = std::max(uniform01(rng), 1e-300);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sparse character trigram process over alphabet + space. Each context
/// allows three successors with fixed unequal weights.
class CharTrigram {
 public:
  CharTrigram(const std::string& alphabet, std::uint64_t seed) : symbols_(alphabet + " ") {
    Rng rng(fnv1a("char-trigram", seed));
    const std::size_t n = symbols_.size();
    next_.resize(n * n);
    for (auto& options : next_) {
      for (auto& o : options) o = static_cast<std::size_t>(uniform01(rng) * n) % n;
    }
  }

  /// Samples one transcript of `words` words, each 1..max_len letters.
  std::string sample(Rng& rng, std::size_t words, std::size_t max_len) const {
    const std::size_t n = symbols_.size(), space = n - 1;
    std::string out;
    std::size_t p2 = space, p1 = space, written = 0, len = 0;
    while (written < words) {
      std::size_t c = pick(rng, p2, p1);
      if (len == 0 && c == space) c = fallback(rng);
      if (len >= max_len) c = space;
      if (c == space) {
        ++written;
        len = 0;
        if (written < words) out.push_back(' ');
      } else {
        out.push_back(symbols_[c]);
        ++len;
      }
      p2 = p1;
      p1 = c;
    }
    return out;
  }

 private:
  std::size_t pick(Rng& rng, std::size_t p2, std::size_t p1) const {
    static constexpr double kWeights[3] = {0.6, 0.3, 0.1};
    const auto& options = next_[p2 * symbols_.size() + p1];
    double u = uniform01(rng);
    for (std::size_t i = 0; i < 3; ++i) {
      if (u < kWeights[i]) return options[i];
      u -= kWeights[i];
    }
    return options[2];
  }

  std::size_t fallback(Rng& rng) const {
    return static_cast<std::size_t>(uniform01(rng) * (symbols_.size() - 1)) % (symbols_.size() - 1);
  }

  std::string symbols_;
  std::vector<std::array<std::size_t, 3>> next_;
};

/// Two-tone template of one letter under an accent. Both tones sit at
/// letter * step and move up by accent * separation * step, so at
/// separation 1 a letter under accent j sounds like the letter j places
/// further on under accent 0.
inline void render_symbol(std::vector<float>& out, std::size_t letter, std::size_t n_letters,
                          std::size_t accent, const SynthSpec& spec) {
  const std::size_t n = spec.samples_per_symbol;
  const double step = 0.3 / static_cast<double>(n_letters + spec.n_accents);
  const double f1 = 0.06 + step * (static_cast<double>(letter) +
                                   static_cast<double>(accent) * spec.separation);
  const double f2 = f1 + 0.1;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i);
    const double env = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (t + 0.5) / static_cast<double>(n));
    const double v = std::sin(2.0 * std::numbers::pi * f1 * t) +
                     0.6 * std::sin(2.0 * std::numbers::pi * f2 * t);
    out.push_back(static_cast<float>(env * v));
  }
}

/// Letters rendered back to back (the word boundary is silence), plus a
/// steady accent tone above the letter band whose amplitude grows with
/// separation up to 1, plus Gaussian noise.
inline Tensor<float> render(const std::string& transcript, std::size_t accent,
                            const SynthSpec& spec, Rng& noise) {
  std::vector<float> samples;
  samples.reserve(transcript.size() * spec.samples_per_symbol);
  for (char c : transcript) {
    const auto pos = spec.alphabet.find(c);
    if (pos == std::string::npos) {
      samples.insert(samples.end(), spec.samples_per_symbol, 0.0f);
    } else {
      render_symbol(samples, pos, spec.alphabet.size(), accent, spec);
    }
  }
  const double tone_amp = spec.accent_tone * std::min(spec.separation, 1.0);
  const double tone_f =
      0.44 + 0.05 * static_cast<double>(accent) / static_cast<double>(spec.n_accents);
  for (std::size_t i = 0; i < samples.size(); ++i)
    samples[i] += static_cast<float>(
        tone_amp * std::sin(2.0 * std::numbers::pi * tone_f * static_cast<double>(i)));
  for (float& v : samples) v += static_cast<float>(spec.noise_std * normal(noise));
  const std::size_t n = samples.size();
  return Tensor<float>(Shape{n}, std::move(samples));
}

inline void write_f32(const std::filesystem::path& path, const Tensor<float>& signal) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write signal " + path.string());
  for (float v : signal.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                static_cast<unsigned char>(bits >> 16),
                                static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  if (!out) throw DataError("short write to " + path.string());
}

inline Tensor<float> read_f32(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open signal " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % 4 != 0)
    throw DataError("signal file " + path.string() + " is empty or not a whole number of samples");
  std::vector<float> samples(bytes.size() / 4);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::uint32_t bits = std::uint32_t(bytes[4 * i]) | std::uint32_t(bytes[4 * i + 1]) << 8 |
                               std::uint32_t(bytes[4 * i + 2]) << 16 |
                               std::uint32_t(bytes[4 * i + 3]) << 24;
    std::memcpy(&samples[i], &bits, sizeof bits);
  }
  const std::size_t n = samples.size();
  return Tensor<float>(Shape{n}, std::move(samples));
}

}  // namespace synth

/// Marks the ceil(n * test_fraction) utterances with the smallest id hash as
/// test, the rest as train.
inline void assign_split(Dataset& data, double test_fraction, std::uint64_t seed) {
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t i = 0; i < data.size(); ++i) order.emplace_back(fnv1a(data[i].id, seed), i);
  std::sort(order.begin(), order.end());
  const auto n_test = static_cast<std::size_t>(
      std::ceil(test_fraction * static_cast<double>(data.size()) - 1e-9));
  for (std::size_t r = 0; r < order.size(); ++r)
    data[order[r].second].split = r < n_test ? "test" : "train";
}

inline std::string manifest_line(const Utterance& u) {
  return u.id + '\t' + u.path + '\t' + u.transcript + '\t' +
         (u.accent ? std::to_string(*u.accent) : std::string("-")) + '\t' + u.split;
}

inline void save_manifest(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const Utterance& u : data) out << manifest_line(u) << '\n';
}

/// Writes `out_dir/manifest.tsv` and `out_dir/signals/<id>.f32`.
inline Dataset generate_corpus(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "signals");
  synth::CharTrigram text(spec.alphabet, spec.seed);
  Dataset data;
  data.reserve(spec.n_utterances);
  for (std::size_t i = 0; i < spec.n_utterances; ++i) {
    Rng rng(fnv1a("utterance", spec.seed * 1000003ull + i));
    Utterance u;
    char id[32];
    std::snprintf(id, sizeof id, "utt%06zu", i);
    u.id = id;
    u.path = "signals/" + u.id + ".f32";
    const std::size_t words =
        spec.min_words + static_cast<std::size_t>(uniform01(rng) * (spec.max_words - spec.min_words + 1));
    u.transcript = text.sample(rng, std::min(words, spec.max_words), spec.max_word_length);
    const std::size_t accent = i % spec.n_accents;
    u.signal = synth::render(u.transcript, accent, spec, rng);
    if (uniform01(rng) >= spec.unlabeled_fraction) u.accent = accent;
    data.push_back(std::move(u));
  }
  assign_split(data, spec.test_fraction, spec.seed);
  for (const Utterance& u : data) synth::write_f32(out_dir / u.path, u.signal);
  save_manifest(out_dir / "manifest.tsv", data);
  return data;
}

/// Reads a manifest and the signals it references. Blank lines are skipped.
/// Signal files are read by up to `threads` workers; the result does not
/// depend on the thread count.
inline Dataset load_manifest(const std::filesystem::path& path, bool load_signals = true,
                             std::size_t threads = 1) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path();
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto f = split(line, '\t');
    if (f.size() != 5) throw ParseError("manifest: expected 5 tab-separated fields", line_no);
    Utterance u;
    u.id = f[0];
    u.path = f[1];
    u.transcript = f[2];
    if (u.id.empty() || u.path.empty()) throw ParseError("manifest: empty id or path", line_no);
    if (u.transcript.empty()) throw ParseError("manifest: empty transcript", line_no);
    if (f[3] != "-") {
      std::size_t accent = 0;
      auto [ptr, ec] = std::from_chars(f[3].data(), f[3].data() + f[3].size(), accent);
      if (ec != std::errc() || ptr != f[3].data() + f[3].size())
        throw ParseError("manifest: accent must be an index or '-'", line_no);
      u.accent = accent;
    }
    if (f[4] != "train" && f[4] != "test") throw ParseError("manifest: split must be train or test", line_no);
    u.split = f[4];
    data.push_back(std::move(u));
  }
  if (!load_signals) return data;
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(data.size(), 1));
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < data.size(); i += workers)
        data[i].signal = synth::read_f32(base / data[i].path);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return data;
}

inline Dataset select_split(const Dataset& data, const std::string& split_name) {
  Dataset out;
  for (const Utterance& u : data)
    if (u.split == split_name) out.push_back(u);
  return out;
}

}  // namespace accentctc
