#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "orderlab/data.hpp"
#include "orderlab/rng.hpp"

using namespace orderlab;
using namespace orderlab::data;
namespace fs = std::filesystem;

TEST(Tokenize, Rules) {
  EXPECT_EQ(tokenize_text("I like Tea."), (std::vector<std::string>{"i", "like", "tea", "."}));
  EXPECT_EQ(tokenize_text(""), std::vector<std::string>{});
  EXPECT_EQ(tokenize_text("don't stop"), (std::vector<std::string>{"don", "'", "t", "stop"}));
  EXPECT_EQ(detokenize_text({"i", "like", "tea", "."}), "i like tea .");
}

TEST(Vocabulary, SpecialsAndBijection) {
  Vocabulary v;
  EXPECT_EQ(v.size(), 8);
  EXPECT_EQ(v.token_of(kPad), "<pad>");
  EXPECT_EQ(v.token_of(kBos), "<bos>");
  EXPECT_EQ(v.token_of(kEos), "<eos>");
  EXPECT_EQ(v.token_of(kPersonaSep), "<p>");
  EXPECT_EQ(v.token_of(kContextStart), "<ctx>");
  EXPECT_EQ(v.token_of(kUtteranceSep), "<utt>");
  EXPECT_EQ(v.token_of(kResponseStart), "<res>");
  EXPECT_EQ(v.token_of(kUnk), "<unk>");
  const int id = v.add("tea");
  EXPECT_EQ(v.add("tea"), id);  // idempotent
  EXPECT_EQ(v.id_of("tea"), id);
  EXPECT_EQ(v.id_of("nonexistent"), kUnk);
  EXPECT_THROW(v.token_of(v.size()), std::out_of_range);
}

TEST(Vocabulary, SaveLoadRoundTrip) {
  Vocabulary v;
  v.add("alpha");
  v.add("beta");
  const fs::path path = fs::temp_directory_path() / "orderlab_vocab_test.json";
  v.save(path);
  auto loaded = Vocabulary::load(path);
  EXPECT_EQ(loaded.tokens(), v.tokens());
  fs::remove(path);
}

TEST(ShufflePersona, IdentityBijectivityUniformity) {
  Rng rng(42);
  EXPECT_EQ(shuffle_persona(1, rng).map, std::vector<int>{0});
  EXPECT_THROW(shuffle_persona(0, rng), std::invalid_argument);

  for (int n = 2; n <= 6; ++n) {
    for (int trial = 0; trial < 50; ++trial) {
      EXPECT_TRUE(shuffle_persona(n, rng).is_bijection());
    }
  }

  // Chi-square over the 6 permutations of n=3, 6000 draws; the 0.999
  // quantile of chi-square with 5 dof is 20.515.
  std::map<std::vector<int>, int> counts;
  const int draws = 6000;
  for (int i = 0; i < draws; ++i) counts[shuffle_persona(3, rng).map]++;
  ASSERT_EQ(counts.size(), 6u);
  const double expected = draws / 6.0;
  double chi2 = 0;
  for (const auto& [perm, c] : counts) {
    chi2 += (c - expected) * (c - expected) / expected;
  }
  EXPECT_LT(chi2, 20.515);
}

namespace {

DialogueSample example_sample(Vocabulary& v) {
  RawSample raw{{"i like tea", "i ski"}, {"hi"}, "hello"};
  for (const auto& text : {std::string("i like tea"), std::string("i ski"), std::string("hi"),
                           std::string("hello")}) {
    for (const auto& t : tokenize_text(text)) v.add(t);
  }
  return to_dialogue_sample(raw, v);
}

}  // namespace

TEST(SerializeDecoder, SpecExample) {
  Vocabulary v;
  auto sample = example_sample(v);
  const auto pi = Permutation::identity(2);
  const auto ser = serialize_decoder_input(sample, pi, 64);

  std::vector<int> want = {kBos, kPersonaSep, v.id_of("i"), v.id_of("like"), v.id_of("tea"),
                           kPersonaSep, v.id_of("i"), v.id_of("ski"), kContextStart, v.id_of("hi"),
                           kResponseStart, v.id_of("hello"), kEos};
  EXPECT_EQ(ser.ids, want);
  std::vector<std::uint8_t> mask(want.size(), 0);
  mask[11] = 1;  // hello
  mask[12] = 1;  // <eos>
  EXPECT_EQ(ser.response_mask, mask);
}

TEST(SerializeDecoder, PermutationInvariants) {
  Vocabulary v;
  auto sample = example_sample(v);
  const auto id_pi = Permutation::identity(2);
  Permutation swap;
  swap.map = {1, 0};
  const auto a = serialize_decoder_input(sample, id_pi, 64);
  const auto b = serialize_decoder_input(sample, swap, 64);
  EXPECT_EQ(a.ids.size(), b.ids.size());
  EXPECT_EQ(a.response_mask, b.response_mask);
  // Persona segments exchanged; everything from <ctx> on is unchanged.
  std::vector<int> want = {kBos, kPersonaSep, v.id_of("i"), v.id_of("ski"), kPersonaSep,
                           v.id_of("i"), v.id_of("like"), v.id_of("tea"), kContextStart, v.id_of("hi"),
                           kResponseStart, v.id_of("hello"), kEos};
  EXPECT_EQ(b.ids, want);

  Permutation bad;
  bad.map = {0, 0};
  EXPECT_THROW(serialize_decoder_input(sample, bad, 64), std::invalid_argument);
  EXPECT_THROW(serialize_decoder_input(sample, id_pi, 5, 3), std::length_error);
  try {
    serialize_decoder_input(sample, id_pi, 5, 3);
  } catch (const std::length_error& e) {
    EXPECT_NE(std::string(e.what()).find("sample 3"), std::string::npos);
  }
}

TEST(SerializeEncDec, SpecExample) {
  Vocabulary v;
  auto sample = example_sample(v);
  const auto ser = serialize_encdec_input(sample, Permutation::identity(2), 64);
  std::vector<int> source = {kPersonaSep, v.id_of("i"), v.id_of("like"), v.id_of("tea"),
                             kPersonaSep, v.id_of("i"), v.id_of("ski"), kContextStart, v.id_of("hi")};
  std::vector<int> target = {kBos, v.id_of("hello"), kEos};
  EXPECT_EQ(ser.source_ids, source);
  EXPECT_EQ(ser.target_ids, target);
  EXPECT_EQ(ser.target_mask, (std::vector<std::uint8_t>{0, 1, 1}));

  Permutation swap;
  swap.map = {1, 0};
  const auto swapped = serialize_encdec_input(sample, swap, 64);
  EXPECT_EQ(swapped.target_ids, target);  // target independent of ordering
  EXPECT_EQ(swapped.source_ids.size(), source.size());
}

TEST(SerializeDecoder, MultiUtteranceContext) {
  Vocabulary v;
  RawSample raw{{"i ski"}, {"hi", "how are you"}, "fine"};
  for (const auto& text : {std::string("i ski"), std::string("hi"), std::string("how are you"),
                           std::string("fine")}) {
    for (const auto& t : tokenize_text(text)) v.add(t);
  }
  auto sample = to_dialogue_sample(raw, v);
  const auto ser = serialize_decoder_input(sample, Permutation::identity(1), 64);
  std::vector<int> want = {kBos, kPersonaSep, v.id_of("i"), v.id_of("ski"), kContextStart,
                           v.id_of("hi"), kUtteranceSep, v.id_of("how"), v.id_of("are"),
                           v.id_of("you"), kResponseStart, v.id_of("fine"), kEos};
  EXPECT_EQ(ser.ids, want);
}

TEST(SyntheticCorpus, DeterministicAndWellFormed) {
  GenConfig cfg;
  cfg.n_train = 40;
  cfg.n_test = 10;
  cfg.seed = 42;
  const auto c1 = generate_synthetic_corpus(cfg);
  const auto c2 = generate_synthetic_corpus(cfg);

  // Byte-identical JSONL on the same seed.
  std::ostringstream s1, s2;
  for (const auto& r : c1.train) s1 << to_jsonl_line(r) << "\n";
  for (const auto& r : c2.train) s2 << to_jsonl_line(r) << "\n";
  EXPECT_EQ(s1.str(), s2.str());

  GenConfig other = cfg;
  other.seed = 43;
  const auto c3 = generate_synthetic_corpus(other);
  std::ostringstream s3;
  for (const auto& r : c3.train) s3 << to_jsonl_line(r) << "\n";
  EXPECT_NE(s1.str(), s3.str());

  // The asked category's persona sentence IS the gold response, for every
  // sample: the label is a function of (context, persona-as-set) only.
  auto check = [&](const RawSample& r) {
    const auto q = tokenize_text(r.context.back());
    ASSERT_GE(q.size(), 4u);
    const std::string category = q.back();
    bool found = false;
    for (const auto& p : r.persona) {
      const auto toks = tokenize_text(p);
      ASSERT_EQ(toks.size(), 4u);
      if (toks[1] == category) {
        EXPECT_EQ(r.response, p);
        found = true;
      }
    }
    EXPECT_TRUE(found) << "asked category " << category << " not in persona";
  };
  for (const auto& r : c1.train) check(r);
  for (const auto& r : c1.test) check(r);

  EXPECT_THROW(generate_synthetic_corpus(GenConfig{9, 10, 2, 8, 1}), std::invalid_argument);
}

TEST(SyntheticCorpus, DefaultVocabularySize) {
  GenConfig cfg;  // defaults: 4 personas, 2000 train, 200 test, 8 categories
  cfg.n_train = 2;
  cfg.n_test = 1;  // vocabulary is closed over the pools, so counts stay put
  const auto corpus = generate_synthetic_corpus(cfg);
  EXPECT_GE(corpus.vocab.size(), 200);
  EXPECT_LE(corpus.vocab.size(), 600);
  // Frozen exact value: 8 specials + 4 template words + 8 categories + 8x32
  // values + 7 greeting words.
  EXPECT_EQ(corpus.vocab.size(), 283);
}

TEST(Jsonl, LoadErrorsNameLines) {
  const fs::path dir = fs::temp_directory_path() / "orderlab_jsonl_test";
  fs::create_directories(dir);
  const fs::path good = dir / "good.jsonl";
  {
    std::ofstream f(good);
    f << R"({"persona":["i ski"],"context":["hi"],"response":"hello"})" << "\n";
  }
  Vocabulary v;
  for (const auto& t : {"i", "ski", "hi", "hello"}) v.add(t);
  auto ds = load_jsonl(good, v, Split::test);
  EXPECT_EQ(ds.samples.size(), 1u);

  auto expect_error_with = [&](const std::string& line, const std::string& needle) {
    const fs::path bad = dir / "bad.jsonl";
    std::ofstream f(bad);
    f << line << "\n";
    f.close();
    try {
      load_jsonl(bad, v, Split::test);
      FAIL() << "expected failure for: " << line;
    } catch (const std::runtime_error& e) {
      EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error_with(R"({"persona":["i ski"],"context":["hi"]})", "response");
  expect_error_with(R"({"persona":"i ski","context":["hi"],"response":"x"})", "persona");
  expect_error_with(R"({"persona":["i ski"],"context":["hi"],"response":""})", "response");
  expect_error_with(R"(not json)", "malformed");
  fs::remove_all(dir);
}

TEST(Jsonl, CanonicalRoundTrip) {
  GenConfig cfg;
  cfg.n_train = 25;
  cfg.n_test = 5;
  const auto corpus = generate_synthetic_corpus(cfg);
  const fs::path dir = fs::temp_directory_path() / "orderlab_roundtrip_test";
  fs::create_directories(dir);
  const fs::path f1 = dir / "a.jsonl";
  const fs::path f2 = dir / "b.jsonl";
  save_raw_jsonl(corpus.train, f1);
  // load -> save must byte-equal the canonical serialization.
  auto ds = load_jsonl(f1, corpus.vocab, Split::train);
  save_jsonl(ds, corpus.vocab, f2);
  std::ifstream a(f1, std::ios::binary), b(f2, std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
  fs::remove_all(dir);
}

TEST(Jsonl, TokenizeRoundTripOverCorpus) {
  GenConfig cfg;
  cfg.n_train = 30;
  cfg.n_test = 5;
  const auto corpus = generate_synthetic_corpus(cfg);
  // detokenize(tokenize(x)) == x for every normalized corpus text.
  auto round = [&](const std::string& text) {
    const auto ids = tokenize_ids(text, corpus.vocab);
    for (int id : ids) EXPECT_NE(id, kUnk) << text;
    EXPECT_EQ(detokenize_ids(ids, corpus.vocab), text);
  };
  for (const auto& r : corpus.train) {
    for (const auto& p : r.persona) round(p);
    for (const auto& c : r.context) round(c);
    round(r.response);
  }
}
