#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "orderlab/rng.hpp"

namespace orderlab::data {

// ---- vocabulary -------------------------------------------------------------

// Special ids, fixed order, always the lowest ids.
enum SpecialToken : int {
  kPad = 0,
  kBos = 1,
  kEos = 2,
  kPersonaSep = 3,  // <p>
  kContextStart = 4,  // <ctx>
  kUtteranceSep = 5,  // <utt>
  kResponseStart = 6,  // <res>
  kUnk = 7,
};

inline const std::vector<std::string>& special_token_strings() {
  static const std::vector<std::string> s = {"<pad>", "<bos>", "<eos>", "<p>",
                                             "<ctx>", "<utt>", "<res>", "<unk>"};
  return s;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& t : special_token_strings()) push(t);
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    const auto& specials = special_token_strings();
    if (tokens.size() < specials.size()) throw std::invalid_argument("vocabulary: missing special tokens");
    for (std::size_t i = 0; i < specials.size(); ++i) {
      if (tokens[i] != specials[i]) {
        throw std::invalid_argument("vocabulary: token " + std::to_string(i) + " must be " + specials[i] +
                                    ", got '" + tokens[i] + "'");
      }
    }
    for (std::size_t i = specials.size(); i < tokens.size(); ++i) v.push(tokens[i]);
    return v;
  }

  int add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    return push(token);
  }

  int id_of(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= static_cast<int>(tokens_.size())) {
      throw std::out_of_range("vocabulary: id " + std::to_string(id) + " outside size " +
                              std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("vocabulary: cannot open '" + path.string() + "' for writing");
    f << nlohmann::json(tokens_).dump() << "\n";
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("vocabulary: cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("vocabulary: bad JSON in '" + path.string() + "': " + e.what());
    }
    return from_tokens(j.get<std::vector<std::string>>());
  }

 private:
  int push(const std::string& token) {
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// ---- tokenizer --------------------------------------------------------------

// Lowercase, whitespace-split, punctuation characters split off as their own
// tokens.
inline std::vector<std::string> tokenize_text(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

inline std::string detokenize_text(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += " ";
    out += tokens[i];
  }
  return out;
}

inline std::vector<int> tokenize_ids(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& t : tokenize_text(text)) ids.push_back(vocab.id_of(t));
  return ids;
}

inline std::string detokenize_ids(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (int id : ids) tokens.push_back(vocab.token_of(id));
  return detokenize_text(tokens);
}

// ---- dialogue types ----------------------------------------------------------

struct PersonaSet {
  std::vector<std::vector<int>> sentences;  // presentation order is canonical

  void validate() const {
    if (sentences.empty()) throw std::invalid_argument("persona: need at least one sentence");
    for (const auto& s : sentences) {
      if (s.empty()) throw std::invalid_argument("persona: empty sentence");
    }
  }
};

struct DialogueSample {
  PersonaSet persona;
  std::vector<std::vector<int>> context;  // utterances, oldest first
  std::vector<int> response;

  void validate() const {
    persona.validate();
    if (context.empty()) throw std::invalid_argument("sample: need at least one context utterance");
    if (response.empty()) throw std::invalid_argument("sample: empty response");
  }
};

struct Permutation {
  std::vector<int> map;  // position i in the shuffled order takes sentence map[i]

  static Permutation identity(int n) {
    Permutation p;
    p.map.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p.map[static_cast<std::size_t>(i)] = i;
    return p;
  }

  int size() const { return static_cast<int>(map.size()); }

  bool is_bijection() const {
    std::vector<bool> seen(map.size(), false);
    for (int v : map) {
      if (v < 0 || v >= static_cast<int>(map.size()) || seen[static_cast<std::size_t>(v)]) return false;
      seen[static_cast<std::size_t>(v)] = true;
    }
    return true;
  }
};

enum class Split { train, valid, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    default: return "test";
  }
}

struct Dataset {
  std::vector<DialogueSample> samples;
  Split split = Split::train;
};

// ---- shuffle operator ----------------------------------------------------------

// Fisher-Yates; every permutation of S_n has probability 1/n!.
inline Permutation shuffle_persona(int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("shuffle_persona: n must be >= 1");
  Permutation p = Permutation::identity(n);
  for (int i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(i + 1);
    std::swap(p.map[static_cast<std::size_t>(i)], p.map[static_cast<std::size_t>(j)]);
  }
  return p;
}

// ---- serialization ---------------------------------------------------------------

struct SerializedSample {
  std::vector<int> ids;
  std::vector<std::uint8_t> response_mask;  // marks the response tokens and <eos>
};

struct EncDecSample {
  std::vector<int> source_ids;
  std::vector<int> target_ids;
  std::vector<std::uint8_t> target_mask;  // marks response tokens and <eos> within target
};

namespace detail {

inline void check_permutation(const DialogueSample& sample, const Permutation& pi) {
  if (pi.size() != static_cast<int>(sample.persona.sentences.size()) || !pi.is_bijection()) {
    throw std::invalid_argument("serialize: permutation is not a bijection on the persona sentences");
  }
}

inline void append_persona_context(const DialogueSample& sample, const Permutation& pi,
                                   std::vector<int>& ids) {
  for (int src : pi.map) {
    ids.push_back(kPersonaSep);
    const auto& s = sample.persona.sentences[static_cast<std::size_t>(src)];
    ids.insert(ids.end(), s.begin(), s.end());
  }
  ids.push_back(kContextStart);
  for (std::size_t u = 0; u < sample.context.size(); ++u) {
    if (u) ids.push_back(kUtteranceSep);
    ids.insert(ids.end(), sample.context[u].begin(), sample.context[u].end());
  }
}

}  // namespace detail

// `<bos> <p> s_pi(1) ... <p> s_pi(n) <ctx> u_1 <utt> ... u_m <res>`; the
// prompt used for decoding, also the prefix of the training serialization.
inline std::vector<int> serialize_decoder_prompt(const DialogueSample& sample, const Permutation& pi) {
  sample.validate();
  detail::check_permutation(sample, pi);
  std::vector<int> ids{kBos};
  detail::append_persona_context(sample, pi, ids);
  ids.push_back(kResponseStart);
  return ids;
}

inline SerializedSample serialize_decoder_input(const DialogueSample& sample, const Permutation& pi,
                                                int max_seq_len, int sample_index = -1) {
  SerializedSample out;
  out.ids = serialize_decoder_prompt(sample, pi);
  out.response_mask.assign(out.ids.size(), 0);
  for (int id : sample.response) {
    out.ids.push_back(id);
    out.response_mask.push_back(1);
  }
  out.ids.push_back(kEos);
  out.response_mask.push_back(1);
  if (static_cast<int>(out.ids.size()) > max_seq_len) {
    throw std::length_error("serialize: sample " + std::to_string(sample_index) + " serializes to " +
                            std::to_string(out.ids.size()) + " tokens, max_seq_len is " +
                            std::to_string(max_seq_len));
  }
  return out;
}

// Encoder side gets persona+context, decoder side gets `<bos> r <eos>`; the
// target is independent of the persona ordering.
inline EncDecSample serialize_encdec_input(const DialogueSample& sample, const Permutation& pi,
                                           int max_seq_len, int sample_index = -1) {
  sample.validate();
  detail::check_permutation(sample, pi);
  EncDecSample out;
  detail::append_persona_context(sample, pi, out.source_ids);
  out.target_ids.push_back(kBos);
  out.target_mask.push_back(0);
  for (int id : sample.response) {
    out.target_ids.push_back(id);
    out.target_mask.push_back(1);
  }
  out.target_ids.push_back(kEos);
  out.target_mask.push_back(1);
  if (static_cast<int>(out.source_ids.size()) > max_seq_len ||
      static_cast<int>(out.target_ids.size()) > max_seq_len) {
    throw std::length_error("serialize: sample " + std::to_string(sample_index) + " exceeds max_seq_len " +
                            std::to_string(max_seq_len));
  }
  return out;
}

// ---- JSONL ingestion ---------------------------------------------------------------

struct RawSample {
  std::vector<std::string> persona;
  std::vector<std::string> context;
  std::string response;
};

inline DialogueSample to_dialogue_sample(const RawSample& raw, const Vocabulary& vocab) {
  DialogueSample s;
  for (const auto& p : raw.persona) s.persona.sentences.push_back(tokenize_ids(p, vocab));
  for (const auto& c : raw.context) s.context.push_back(tokenize_ids(c, vocab));
  s.response = tokenize_ids(raw.response, vocab);
  s.validate();
  return s;
}

inline std::vector<RawSample> load_raw_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("jsonl: cannot open '" + path.string() + "'");
  std::vector<RawSample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "jsonl: " + path.string() + " line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error(where + ": expected an object");
    for (const char* field : {"persona", "context", "response"}) {
      if (!j.contains(field)) throw std::runtime_error(where + ": missing field '" + field + "'");
    }
    if (!j["persona"].is_array() || j["persona"].empty()) {
      throw std::runtime_error(where + ": 'persona' must be a non-empty array of strings");
    }
    if (!j["context"].is_array() || j["context"].empty()) {
      throw std::runtime_error(where + ": 'context' must be a non-empty array of strings");
    }
    if (!j["response"].is_string() || j["response"].get<std::string>().empty()) {
      throw std::runtime_error(where + ": 'response' must be a non-empty string");
    }
    RawSample raw;
    try {
      raw.persona = j["persona"].get<std::vector<std::string>>();
      raw.context = j["context"].get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception&) {
      throw std::runtime_error(where + ": 'persona'/'context' entries must be strings");
    }
    raw.response = j["response"].get<std::string>();
    out.push_back(std::move(raw));
  }
  return out;
}

inline Dataset load_jsonl(const std::filesystem::path& path, const Vocabulary& vocab, Split split) {
  Dataset d;
  d.split = split;
  for (const auto& raw : load_raw_jsonl(path)) d.samples.push_back(to_dialogue_sample(raw, vocab));
  return d;
}

inline std::string to_jsonl_line(const RawSample& raw) {
  nlohmann::json j;
  j["context"] = raw.context;
  j["persona"] = raw.persona;
  j["response"] = raw.response;
  return j.dump();
}

inline void save_raw_jsonl(const std::vector<RawSample>& samples, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("jsonl: cannot open '" + path.string() + "' for writing");
  for (const auto& s : samples) f << to_jsonl_line(s) << "\n";
}

inline void save_jsonl(const Dataset& dataset, const Vocabulary& vocab, const std::filesystem::path& path) {
  std::vector<RawSample> raws;
  raws.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) {
    RawSample raw;
    for (const auto& p : s.persona.sentences) raw.persona.push_back(detokenize_ids(p, vocab));
    for (const auto& c : s.context) raw.context.push_back(detokenize_ids(c, vocab));
    raw.response = detokenize_ids(s.response, vocab);
    raws.push_back(std::move(raw));
  }
  save_raw_jsonl(raws, path);
}

// ---- synthetic corpus ---------------------------------------------------------------

struct GenConfig {
  int n_personas = 4;
  int n_train = 2000;
  int n_test = 200;
  int n_categories = 8;
  std::uint64_t seed = 42;

  void validate() const {
    if (n_personas < 1 || n_train < 1 || n_test < 0) {
      throw std::invalid_argument("gen config: counts must be positive");
    }
    if (n_categories < n_personas) {
      throw std::invalid_argument("gen config: n_categories " + std::to_string(n_categories) +
                                  " < n_personas " + std::to_string(n_personas));
    }
  }
};

struct SyntheticCorpus {
  std::vector<RawSample> train;
  std::vector<RawSample> test;
  Vocabulary vocab;
};

namespace detail {

struct Category {
  std::string name;
  std::vector<std::string> values;
};

// Fixed attribute pools; the vocabulary is closed over them by construction.
inline const std::vector<Category>& categories() {
  static const std::vector<Category> cats = {
      {"hobby",
       {"chess", "painting", "reading", "hiking", "fishing", "knitting", "gardening", "cooking", "dancing",
        "singing", "photography", "camping", "surfing", "skiing", "cycling", "climbing", "pottery",
        "origami", "juggling", "birdwatching", "astronomy", "calligraphy", "woodworking", "baking",
        "writing", "sculpting", "skating", "rowing", "archery", "magic", "puzzles", "coding"}},
      {"job",
       {"doctor", "teacher", "engineer", "nurse", "lawyer", "chef", "pilot", "farmer", "artist", "writer",
        "plumber", "electrician", "banker", "barista", "librarian", "dentist", "vet", "architect",
        "scientist", "actor", "mechanic", "tailor", "baker", "butcher", "firefighter", "police", "soldier",
        "judge", "clerk", "cashier", "gardener", "translator"}},
      {"pet",
       {"dog", "cat", "hamster", "parrot", "rabbit", "turtle", "goldfish", "snake", "lizard", "ferret",
        "canary", "pony", "donkey", "goat", "duck", "chicken", "pigeon", "mouse", "rat", "gecko", "iguana",
        "spider", "ant", "frog", "toad", "newt", "crab", "owl", "raven", "falcon", "hedgehog", "otter"}},
      {"food",
       {"pizza", "pasta", "sushi", "curry", "tacos", "salad", "soup", "steak", "burger", "rice", "noodles",
        "bread", "cheese", "pancakes", "waffles", "dumplings", "stew", "chili", "lasagna", "risotto",
        "paella", "falafel", "hummus", "kebab", "ramen", "pho", "gnocchi", "quiche", "omelette", "porridge",
        "granola", "tofu"}},
      {"color",
       {"red", "blue", "green", "yellow", "purple", "orange", "pink", "brown", "black", "white", "gray",
        "teal", "maroon", "navy", "olive", "lime", "aqua", "coral", "violet", "indigo", "magenta",
        "turquoise", "beige", "crimson", "scarlet", "emerald", "amber", "ivory", "gold", "silver", "bronze",
        "copper"}},
      {"sport",
       {"soccer", "tennis", "basketball", "baseball", "golf", "hockey", "rugby", "cricket", "volleyball",
        "badminton", "boxing", "wrestling", "judo", "karate", "fencing", "swimming", "diving", "sailing",
        "bowling", "darts", "snooker", "squash", "handball", "softball", "lacrosse", "curling", "luge",
        "biathlon", "triathlon", "marathon", "sprinting", "polo"}},
      {"drink",
       {"coffee", "tea", "juice", "milk", "water", "soda", "lemonade", "cocoa", "cider", "wine", "beer",
        "whiskey", "vodka", "rum", "gin", "brandy", "sake", "mead", "kombucha", "smoothie", "latte",
        "espresso", "cappuccino", "mocha", "matcha", "chai", "horchata", "punch", "nectar", "tonic",
        "julep", "seltzer"}},
      {"city",
       {"paris", "london", "tokyo", "berlin", "madrid", "rome", "vienna", "prague", "oslo", "dublin",
        "boston", "denver", "seattle", "chicago", "austin", "miami", "toronto", "sydney", "cairo", "athens",
        "lisbon", "warsaw", "budapest", "helsinki", "stockholm", "copenhagen", "amsterdam", "brussels",
        "geneva", "zurich", "munich", "hamburg"}},
  };
  return cats;
}

inline const std::vector<std::string>& greetings() {
  static const std::vector<std::string> g = {"hi", "hello", "hey there", "good day", "hi friend"};
  return g;
}

}  // namespace detail

// Each sample instantiates n distinct attribute categories; the last context
// utterance asks about one of them and the gold response restates its value,
// so the true response distribution is independent of the persona ordering.
inline SyntheticCorpus generate_synthetic_corpus(const GenConfig& cfg) {
  cfg.validate();
  const auto& cats = detail::categories();
  if (cfg.n_categories > static_cast<int>(cats.size())) {
    throw std::invalid_argument("gen config: n_categories " + std::to_string(cfg.n_categories) +
                                " exceeds the " + std::to_string(cats.size()) + " shipped categories");
  }
  SyntheticCorpus corpus;
  std::set<std::string> words;
  for (int c = 0; c < cfg.n_categories; ++c) {
    words.insert(cats[static_cast<std::size_t>(c)].name);
    for (const auto& v : cats[static_cast<std::size_t>(c)].values) words.insert(v);
  }
  for (const auto& g : detail::greetings()) {
    for (const auto& t : tokenize_text(g)) words.insert(t);
  }
  for (const char* w : {"my", "is", "what", "your"}) words.insert(w);
  for (const auto& w : words) corpus.vocab.add(w);

  Rng rng(cfg.seed, /*stream=*/7);
  auto make_sample = [&]() {
    RawSample s;
    std::vector<int> picks(static_cast<std::size_t>(cfg.n_categories));
    for (int i = 0; i < cfg.n_categories; ++i) picks[static_cast<std::size_t>(i)] = i;
    for (int i = cfg.n_categories - 1; i > 0; --i) {
      std::swap(picks[static_cast<std::size_t>(i)], picks[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
    }
    picks.resize(static_cast<std::size_t>(cfg.n_personas));
    std::vector<std::string> values;
    for (int c : picks) {
      const auto& cat = cats[static_cast<std::size_t>(c)];
      const auto& value = cat.values[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cat.values.size())))];
      values.push_back(value);
      s.persona.push_back("my " + cat.name + " is " + value);
    }
    const int asked = rng.uniform_int(cfg.n_personas);
    if (rng.uniform01() < 0.5) {
      s.context.push_back(detail::greetings()[static_cast<std::size_t>(
          rng.uniform_int(static_cast<int>(detail::greetings().size())))]);
    }
    const auto& asked_cat = cats[static_cast<std::size_t>(picks[static_cast<std::size_t>(asked)])].name;
    s.context.push_back("what is your " + asked_cat);
    s.response = "my " + asked_cat + " is " + values[static_cast<std::size_t>(asked)];
    return s;
  };
  for (int i = 0; i < cfg.n_train; ++i) corpus.train.push_back(make_sample());
  for (int i = 0; i < cfg.n_test; ++i) corpus.test.push_back(make_sample());
  return corpus;
}

}  // namespace orderlab::data
