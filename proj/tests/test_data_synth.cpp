#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "accentctc/data_synth.hpp"

using namespace accentctc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("accentctc_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

SynthSpec small_spec() {
  SynthSpec s;
  s.n_utterances = 40;
  s.seed = 5;
  return s;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

}  // namespace

TEST(DataSynth, SameSpecGivesIdenticalFiles) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  generate_corpus(small_spec(), a);
  generate_corpus(small_spec(), b);
  EXPECT_EQ(slurp(a / "manifest.tsv"), slurp(b / "manifest.tsv"));
  for (const auto& entry : fs::directory_iterator(a / "signals"))
    EXPECT_EQ(slurp(entry.path()), slurp(b / "signals" / entry.path().filename()));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(DataSynth, UtteranceInvariantsHold) {
  SynthSpec spec = small_spec();
  spec.n_utterances = 200;
  const auto dir = scratch("inv");
  const Dataset data = generate_corpus(spec, dir);
  ASSERT_EQ(data.size(), 200u);
  for (const Utterance& u : data) {
    ASSERT_FALSE(u.transcript.empty());
    EXPECT_EQ(u.signal.size(), u.transcript.size() * spec.samples_per_symbol);
    ASSERT_TRUE(u.accent.has_value());
    EXPECT_LT(*u.accent, spec.n_accents);
    EXPECT_NE(u.transcript.front(), ' ');
    EXPECT_NE(u.transcript.back(), ' ');
    EXPECT_EQ(u.transcript.find("  "), std::string::npos);
    for (char c : u.transcript) EXPECT_TRUE(c == ' ' || spec.alphabet.find(c) != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(DataSynth, ZeroSeparationMakesAccentsIdentical) {
  SynthSpec spec = small_spec();
  spec.separation = 0.0;
  spec.noise_std = 0.0;
  Rng r0(1), r3(1);
  const auto a = synth::render("abc de", 0, spec, r0);
  const auto b = synth::render("abc de", 3, spec, r3);
  EXPECT_EQ(a.data().size(), b.data().size());
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  spec.separation = 1.0;
  Rng r1(1);
  const auto c = synth::render("abc de", 3, spec, r1);
  EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST(DataSynth, SplitIsDisjointSizedAndStable) {
  SynthSpec spec = small_spec();
  spec.n_utterances = 250;
  spec.test_fraction = 0.2;
  const auto dir = scratch("split");
  const Dataset a = generate_corpus(spec, dir);
  const Dataset train = select_split(a, "train"), test = select_split(a, "test");
  EXPECT_EQ(train.size(), 200u);
  EXPECT_EQ(test.size(), 50u);
  std::set<std::string> ids;
  for (const auto& u : train) ids.insert(u.id);
  for (const auto& u : test) EXPECT_EQ(ids.count(u.id), 0u);

  // The split depends only on ids and seed, not on the acoustics.
  spec.separation = 0.3;
  const Dataset b = generate_corpus(spec, dir);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].split, b[i].split);
  fs::remove_all(dir);
}

TEST(DataSynth, DefaultSplitIsNinetyTen) {
  Dataset d(1000);
  for (std::size_t i = 0; i < d.size(); ++i) d[i].id = "u" + std::to_string(i);
  assign_split(d, SynthSpec{}.test_fraction, 1);
  EXPECT_EQ(select_split(d, "test").size(), 100u);
}

TEST(DataSynth, GenerateLoadRoundTrip) {
  SynthSpec spec = small_spec();
  spec.unlabeled_fraction = 0.5;
  const auto dir = scratch("rt");
  const Dataset written = generate_corpus(spec, dir);
  const Dataset read = load_manifest(dir / "manifest.tsv");
  ASSERT_EQ(read.size(), written.size());
  bool saw_unlabeled = false;
  for (std::size_t i = 0; i < read.size(); ++i) {
    EXPECT_EQ(read[i].id, written[i].id);
    EXPECT_EQ(read[i].path, written[i].path);
    EXPECT_EQ(read[i].transcript, written[i].transcript);
    EXPECT_EQ(read[i].accent, written[i].accent);
    EXPECT_EQ(read[i].split, written[i].split);
    EXPECT_TRUE(std::equal(read[i].signal.data().begin(), read[i].signal.data().end(),
                           written[i].signal.data().begin(), written[i].signal.data().end()));
    saw_unlabeled = saw_unlabeled || !read[i].accent;
  }
  EXPECT_TRUE(saw_unlabeled);
  fs::remove_all(dir);
}

TEST(DataSynth, DashAccentIsAbsent) {
  const auto dir = scratch("dash");
  write_text(dir / "s.f32", std::string("\0\0\x80\x3f", 4));
  write_text(dir / "m.tsv", "u1\ts.f32\tab c\t-\ttrain\nu2\ts.f32\tab\t2\ttest\n");
  const Dataset d = load_manifest(dir / "m.tsv");
  ASSERT_EQ(d.size(), 2u);
  EXPECT_FALSE(d[0].accent.has_value());
  EXPECT_EQ(d[1].accent, std::optional<std::size_t>(2));
  EXPECT_EQ(d[0].signal.size(), 1u);
  EXPECT_EQ(d[0].signal[0], 1.0f);
  fs::remove_all(dir);
}

TEST(DataSynth, EmptyManifestIsEmptyDataset) {
  const auto dir = scratch("empty");
  write_text(dir / "m.tsv", "");
  EXPECT_TRUE(load_manifest(dir / "m.tsv").empty());
  fs::remove_all(dir);
}

TEST(DataSynth, MalformedLineCitesLineNumber) {
  const auto dir = scratch("bad");
  write_text(dir / "m.tsv", "u1\ts.f32\tab\t0\ttrain\nu2\ts.f32\tab\n");
  try {
    load_manifest(dir / "m.tsv", false);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  write_text(dir / "m.tsv", "u1\ts.f32\tab\tx\ttrain\n");
  EXPECT_THROW(load_manifest(dir / "m.tsv", false), ParseError);
  write_text(dir / "m.tsv", "u1\ts.f32\tab\t0\tdev\n");
  EXPECT_THROW(load_manifest(dir / "m.tsv", false), ParseError);
  fs::remove_all(dir);
}

TEST(DataSynth, MissingSignalIsDataError) {
  const auto dir = scratch("missing");
  write_text(dir / "m.tsv", "u1\tnope.f32\tab\t0\ttrain\n");
  EXPECT_THROW(load_manifest(dir / "m.tsv"), DataError);
  fs::remove_all(dir);
}

TEST(DataSynth, SignalFilesAreLittleEndianFloat) {
  const auto dir = scratch("f32");
  fs::create_directories(dir);
  synth::write_f32(dir / "x.f32", Tensor<float>(Shape{2}, {1.0f, -2.0f}));
  EXPECT_EQ(slurp(dir / "x.f32"), std::string("\0\0\x80\x3f\0\0\0\xc0", 8));
  fs::remove_all(dir);
}

TEST(DataSynth, SpecValidation) {
  SynthSpec s;
  s.n_accents = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SynthSpec{};
  s.separation = -0.1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SynthSpec{};
  s.alphabet = "ab c";
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(DataSynth, SpecConfigRoundTrip) {
  SynthSpec s;
  s.n_accents = 6;
  s.separation = 0.25;
  s.seed = 99;
  Config cfg;
  s.to_config(cfg);
  const SynthSpec back = SynthSpec::from_config(cfg);
  EXPECT_EQ(back.n_accents, 6u);
  EXPECT_EQ(back.separation, 0.25);
  EXPECT_EQ(back.seed, 99u);
}

TEST(DataSynth, TranscriptsHaveSkewedWordDistribution) {
  // The sparse trigram process reuses a small set of words.
  synth::CharTrigram text("abcdefgh", 3);
  Rng rng(1);
  std::map<std::string, int> counts;
  int total = 0;
  for (int i = 0; i < 500; ++i)
    for (const std::string& w : split(text.sample(rng, 3, 4), ' ')) {
      ++counts[w];
      ++total;
    }
  int top = 0;
  for (const auto& [w, c] : counts) top = std::max(top, c);
  EXPECT_GT(static_cast<double>(top) / total, 0.05);
  EXPECT_LT(counts.size(), 300u);
}
