#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "orderlab/data.hpp"
#include "orderlab/decoding.hpp"
#include "orderlab/model.hpp"
#include "orderlab/training.hpp"

namespace orderlab::cli {

// Config schema violation; the CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Missing input artifact; the CLI maps this to exit code 3.
struct ArtifactError : std::runtime_error {
  explicit ArtifactError(const std::string& what) : std::runtime_error(what) {}
};

// The unified run document. Every field has a default; any field can be
// overridden with --set dotted.path=value.
inline nlohmann::json default_config() {
  return nlohmann::json{
      {"version", 1},
      {"output_dir", "runs/default"},
      {"data",
       {{"n_personas", 4},
        {"n_train", 2000},
        {"n_test", 200},
        {"n_categories", 8},
        {"seed", 42},
        {"train_path", ""},
        {"test_path", ""},
        {"vocab_path", ""}}},
      {"model",
       {{"arch", "decoder_only"},
        {"vocab_size", 0},
        {"d_model", 64},
        {"n_heads", 4},
        {"n_layers", 2},
        {"d_ff", 256},
        {"max_seq_len", 64},
        {"dropout_rate", 0.0},
        {"tie_embeddings", true},
        {"checkpoint", ""}}},
      {"train",
       {{"objective", "mle"},
        {"gamma", 1.0},
        {"kl_direction", "forward"},
        {"lr", 3e-4},
        {"batch_size", 32},
        {"epochs", 10},
        {"seed", 42},
        {"beta1", 0.9},
        {"beta2", 0.999},
        {"adam_eps", 1e-8},
        {"grad_clip_norm", 1.0},
        {"shuffle_at_eval", false}}},
      {"decode",
       {{"strategy", "topk_topp"},
        {"k", 50},
        {"p", 0.9},
        {"max_new_tokens", 32},
        {"temperature", 1.0},
        {"seed", 42}}},
      {"metrics",
       {{"list", {"bleu1", "bleu2", "rougeL", "cider", "entropy", "consistency"}},
        {"entropy_k", 4},
        {"external_scorer", ""}}},
      {"analysis",
       {{"perm_cap", 120},
        {"runs", 20},
        {"pairs_per_sample", 4},
        {"master_seed", 42},
        {"sweep_metrics", {"bleu1", "bleu2", "rougeL"}},
        {"sweep_decode", "greedy"},
        {"samples_cap", 0},
        {"threads", 1},
        {"deterministic", false}}}};
}

namespace detail {

// Rejects keys that the defaults document does not know; reports the full
// dotted path of the offender.
inline void check_known_keys(const nlohmann::json& doc, const nlohmann::json& schema,
                             const std::string& prefix) {
  if (!doc.is_object()) return;
  for (const auto& [key, value] : doc.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.is_object() || !schema.contains(key)) {
      throw ConfigError("config: unknown key '" + path + "'");
    }
    if (value.is_object()) check_known_keys(value, schema.at(key), path);
  }
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& overlay) {
  for (const auto& [key, value] : overlay.items()) {
    if (value.is_object() && base.contains(key) && base.at(key).is_object()) {
      merge_into(base.at(key), value);
    } else {
      base[key] = value;
    }
  }
}

template <typename T>
T fetch(const nlohmann::json& doc, const std::string& dotted) {
  const nlohmann::json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!cur->contains(key)) throw ConfigError("config: missing key '" + dotted + "'");
    cur = &cur->at(key);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return cur->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: wrong type for key '" + dotted + "'");
  }
}

}  // namespace detail

struct RunConfig {
  nlohmann::json doc;  // effective document, defaults + file + overrides

  std::string output_dir;

  data::GenConfig gen;
  std::string data_train_path, data_test_path, data_vocab_path;

  model::ModelConfig model_cfg;
  std::string model_checkpoint;

  train::TrainConfig train_cfg;
  decode::DecodeConfig decode_cfg;

  std::vector<std::string> metric_list;
  int entropy_k = 4;
  std::string external_scorer;

  int perm_cap = 120;
  int runs = 20;
  int pairs_per_sample = 4;
  std::uint64_t master_seed = 42;
  std::vector<std::string> sweep_metrics;
  std::string sweep_decode = "greedy";
  int samples_cap = 0;
  int threads = 1;
  bool deterministic = false;

  // Effective paths: empty config values resolve to conventional names under
  // output_dir.
  std::filesystem::path train_path() const { return resolved(data_train_path, "dataset_train.jsonl"); }
  std::filesystem::path test_path() const { return resolved(data_test_path, "dataset_test.jsonl"); }
  std::filesystem::path vocab_path() const { return resolved(data_vocab_path, "vocab.json"); }
  std::filesystem::path checkpoint_path() const {
    return resolved(model_checkpoint, "checkpoint_final.orgc");
  }
  int effective_threads() const { return deterministic ? 1 : threads; }

 private:
  std::filesystem::path resolved(const std::string& value, const char* fallback) const {
    if (!value.empty()) return value;
    return std::filesystem::path(output_dir) / fallback;
  }
};

inline RunConfig parse_run_config(const nlohmann::json& document) {
  const nlohmann::json defaults = default_config();
  detail::check_known_keys(document, defaults, "");
  if (!document.is_object()) throw ConfigError("config: top level must be an object");
  if (!document.contains("version")) throw ConfigError("config: missing key 'version'");

  nlohmann::json doc = defaults;
  detail::merge_into(doc, document);

  RunConfig rc;
  rc.doc = doc;
  if (detail::fetch<int>(doc, "version") != 1) throw ConfigError("config: unsupported version");
  rc.output_dir = detail::fetch<std::string>(doc, "output_dir");

  rc.gen.n_personas = detail::fetch<int>(doc, "data.n_personas");
  rc.gen.n_train = detail::fetch<int>(doc, "data.n_train");
  rc.gen.n_test = detail::fetch<int>(doc, "data.n_test");
  rc.gen.n_categories = detail::fetch<int>(doc, "data.n_categories");
  rc.gen.seed = detail::fetch<std::uint64_t>(doc, "data.seed");
  rc.data_train_path = detail::fetch<std::string>(doc, "data.train_path");
  rc.data_test_path = detail::fetch<std::string>(doc, "data.test_path");
  rc.data_vocab_path = detail::fetch<std::string>(doc, "data.vocab_path");

  const std::string arch = detail::fetch<std::string>(doc, "model.arch");
  if (arch == "decoder_only") {
    rc.model_cfg.arch = model::Arch::decoder_only;
  } else if (arch == "encoder_decoder") {
    rc.model_cfg.arch = model::Arch::encoder_decoder;
  } else {
    throw ConfigError("config: model.arch must be decoder_only or encoder_decoder");
  }
  rc.model_cfg.vocab_size = detail::fetch<int>(doc, "model.vocab_size");
  rc.model_cfg.d_model = detail::fetch<int>(doc, "model.d_model");
  rc.model_cfg.n_heads = detail::fetch<int>(doc, "model.n_heads");
  rc.model_cfg.n_layers = detail::fetch<int>(doc, "model.n_layers");
  rc.model_cfg.d_ff = detail::fetch<int>(doc, "model.d_ff");
  rc.model_cfg.max_seq_len = detail::fetch<int>(doc, "model.max_seq_len");
  rc.model_cfg.dropout_rate = detail::fetch<double>(doc, "model.dropout_rate");
  rc.model_cfg.tie_embeddings = detail::fetch<bool>(doc, "model.tie_embeddings");
  rc.model_checkpoint = detail::fetch<std::string>(doc, "model.checkpoint");

  const std::string objective = detail::fetch<std::string>(doc, "train.objective");
  if (objective == "mle") {
    rc.train_cfg.objective = train::Objective::mle;
  } else if (objective == "orig") {
    rc.train_cfg.objective = train::Objective::orig;
  } else {
    throw ConfigError("config: train.objective must be mle or orig");
  }
  rc.train_cfg.gamma = detail::fetch<double>(doc, "train.gamma");
  const std::string kl_dir = detail::fetch<std::string>(doc, "train.kl_direction");
  if (kl_dir == "forward") {
    rc.train_cfg.kl_direction = train::KlDirection::forward;
  } else if (kl_dir == "reverse") {
    rc.train_cfg.kl_direction = train::KlDirection::reverse;
  } else if (kl_dir == "symmetric") {
    rc.train_cfg.kl_direction = train::KlDirection::symmetric;
  } else {
    throw ConfigError("config: train.kl_direction must be forward, reverse, or symmetric");
  }
  rc.train_cfg.lr = detail::fetch<double>(doc, "train.lr");
  rc.train_cfg.batch_size = detail::fetch<int>(doc, "train.batch_size");
  rc.train_cfg.epochs = detail::fetch<int>(doc, "train.epochs");
  rc.train_cfg.seed = detail::fetch<std::uint64_t>(doc, "train.seed");
  rc.train_cfg.beta1 = detail::fetch<double>(doc, "train.beta1");
  rc.train_cfg.beta2 = detail::fetch<double>(doc, "train.beta2");
  rc.train_cfg.adam_eps = detail::fetch<double>(doc, "train.adam_eps");
  const double clip = detail::fetch<double>(doc, "train.grad_clip_norm");
  rc.train_cfg.grad_clip_norm = clip > 0.0 ? std::optional<double>(clip) : std::nullopt;
  rc.train_cfg.shuffle_at_eval = detail::fetch<bool>(doc, "train.shuffle_at_eval");

  const std::string strategy = detail::fetch<std::string>(doc, "decode.strategy");
  if (strategy == "greedy") {
    rc.decode_cfg.strategy = decode::Strategy::greedy;
  } else if (strategy == "topk_topp") {
    rc.decode_cfg.strategy = decode::Strategy::topk_topp;
  } else {
    throw ConfigError("config: decode.strategy must be greedy or topk_topp");
  }
  rc.decode_cfg.k = detail::fetch<int>(doc, "decode.k");
  rc.decode_cfg.p = detail::fetch<double>(doc, "decode.p");
  rc.decode_cfg.max_new_tokens = detail::fetch<int>(doc, "decode.max_new_tokens");
  rc.decode_cfg.temperature = detail::fetch<double>(doc, "decode.temperature");
  rc.decode_cfg.seed = detail::fetch<std::uint64_t>(doc, "decode.seed");

  rc.metric_list = detail::fetch<std::vector<std::string>>(doc, "metrics.list");
  rc.entropy_k = detail::fetch<int>(doc, "metrics.entropy_k");
  rc.external_scorer = detail::fetch<std::string>(doc, "metrics.external_scorer");

  rc.perm_cap = detail::fetch<int>(doc, "analysis.perm_cap");
  rc.runs = detail::fetch<int>(doc, "analysis.runs");
  rc.pairs_per_sample = detail::fetch<int>(doc, "analysis.pairs_per_sample");
  rc.master_seed = detail::fetch<std::uint64_t>(doc, "analysis.master_seed");
  rc.sweep_metrics = detail::fetch<std::vector<std::string>>(doc, "analysis.sweep_metrics");
  rc.sweep_decode = detail::fetch<std::string>(doc, "analysis.sweep_decode");
  if (rc.sweep_decode != "greedy" && rc.sweep_decode != "sampling") {
    throw ConfigError("config: analysis.sweep_decode must be greedy or sampling");
  }
  rc.samples_cap = detail::fetch<int>(doc, "analysis.samples_cap");
  rc.threads = detail::fetch<int>(doc, "analysis.threads");
  rc.deterministic = detail::fetch<bool>(doc, "analysis.deterministic");

  try {
    rc.gen.validate();
    rc.train_cfg.validate();
    rc.decode_cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

// Applies one `--set dotted.path=value` override onto the document. The value
// is parsed as JSON when possible, else taken as a string.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("config: override '" + assignment + "' is not of the form key=value");
  }
  const std::string dotted = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("config: bad override path '" + dotted + "'");
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      break;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

inline nlohmann::json load_config_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("config: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad JSON in '" + path.string() + "': " + e.what());
  }
  return j;
}

}  // namespace orderlab::cli
