#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "orderlab/analysis.hpp"
#include "orderlab/checkpoint.hpp"
#include "orderlab/data.hpp"
#include "orderlab/decoding.hpp"
#include "orderlab/ext_scorer.hpp"
#include "orderlab/manifest.hpp"
#include "orderlab/metrics.hpp"
#include "orderlab/model.hpp"
#include "orderlab/report_io.hpp"
#include "orderlab/run_config.hpp"
#include "orderlab/sha256.hpp"
#include "orderlab/training.hpp"

namespace {

namespace fs = std::filesystem;
using orderlab::Rng;
using orderlab::cli::ArtifactError;
using orderlab::cli::ConfigError;
using orderlab::cli::Manifest;
using orderlab::cli::RunConfig;

int log_level() {
  const char* v = std::getenv("ORDERLAB_LOG");
  if (!v) return 1;
  const std::string s = v;
  if (s == "quiet" || s == "0") return 0;
  if (s == "debug" || s == "2") return 2;
  return 1;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[orderlab] " << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[orderlab] " << msg << "\n";
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const CommonArgs& args) {
  nlohmann::json doc = args.config_path.empty() ? orderlab::cli::default_config()
                                                : orderlab::cli::load_config_file(args.config_path);
  if (!doc.contains("version")) doc["version"] = 1;  // only injected for the built-in defaults path
  for (const auto& o : args.overrides) orderlab::cli::apply_override(doc, o);
  return orderlab::cli::parse_run_config(doc);
}

void require_artifact(const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) {
    throw ArtifactError("missing input artifact '" + path.string() + "' (" + hint + ")");
  }
}

orderlab::data::Vocabulary load_vocab(const RunConfig& rc) {
  require_artifact(rc.vocab_path(), "run gen-data first");
  return orderlab::data::Vocabulary::load(rc.vocab_path());
}

orderlab::model::ModelConfig effective_model_config(const RunConfig& rc,
                                                    const orderlab::data::Vocabulary& vocab) {
  auto cfg = rc.model_cfg;
  if (cfg.vocab_size == 0) cfg.vocab_size = vocab.size();
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

orderlab::model::Parameters<float> load_params(const RunConfig& rc,
                                               const orderlab::model::ModelConfig& cfg) {
  require_artifact(rc.checkpoint_path(), "run train first");
  auto params = orderlab::model::load_checkpoint(rc.checkpoint_path());
  orderlab::model::validate_parameters(params, cfg);
  return params;
}

orderlab::data::Dataset load_split(const RunConfig& rc, const orderlab::data::Vocabulary& vocab,
                                   orderlab::data::Split split) {
  const fs::path path = split == orderlab::data::Split::train ? rc.train_path() : rc.test_path();
  require_artifact(path, "run gen-data first");
  return orderlab::data::load_jsonl(path, vocab, split);
}

orderlab::data::Dataset capped(orderlab::data::Dataset d, int cap) {
  if (cap > 0 && static_cast<int>(d.samples.size()) > cap) d.samples.resize(static_cast<std::size_t>(cap));
  return d;
}

Manifest make_manifest(const std::string& subcommand, const RunConfig& rc, std::uint64_t seed) {
  Manifest m;
  m.subcommand = subcommand;
  m.config_sha256 = orderlab::cli::config_digest(rc.doc);
  m.seed = seed;
  return m;
}

void finish_manifest(Manifest& m, const RunConfig& rc) {
  const fs::path out = fs::path(rc.output_dir) / ("manifest_" + m.subcommand + ".json");
  m.save(out);
  log_info("wrote " + out.string());
}

// ---- subcommands ------------------------------------------------------------

int cmd_gen_data(const RunConfig& rc) {
  fs::create_directories(rc.output_dir);
  const auto corpus = orderlab::data::generate_synthetic_corpus(rc.gen);
  orderlab::data::save_raw_jsonl(corpus.train, rc.train_path());
  orderlab::data::save_raw_jsonl(corpus.test, rc.test_path());
  corpus.vocab.save(rc.vocab_path());
  log_info("generated " + std::to_string(corpus.train.size()) + " train / " +
           std::to_string(corpus.test.size()) + " test samples, vocabulary " +
           std::to_string(corpus.vocab.size()));
  Manifest m = make_manifest("gen-data", rc, rc.gen.seed);
  m.add_output(rc.output_dir, rc.train_path());
  m.add_output(rc.output_dir, rc.test_path());
  m.add_output(rc.output_dir, rc.vocab_path());
  finish_manifest(m, rc);
  return 0;
}

int cmd_train(const RunConfig& rc) {
  const auto vocab = load_vocab(rc);
  const auto mcfg = effective_model_config(rc, vocab);
  const auto dataset = load_split(rc, vocab, orderlab::data::Split::train);
  fs::create_directories(rc.output_dir);
  log_info("training " + std::string(orderlab::train::objective_name(rc.train_cfg.objective)) + " " +
           std::string(orderlab::model::arch_name(mcfg.arch)) + " on " +
           std::to_string(dataset.samples.size()) + " samples");
  const auto result = orderlab::train::train<float>(
      mcfg, dataset, rc.train_cfg, rc.output_dir, [&](int epoch, const orderlab::train::EpochStats& s) {
        log_debug("epoch " + std::to_string(epoch) + " nll " + std::to_string(s.mean_nll) + " kl " +
                  std::to_string(s.mean_kl));
      });

  nlohmann::json log_json;
  log_json["epochs"] = nlohmann::json::array();
  for (const auto& e : result.log.epochs) {
    log_json["epochs"].push_back(
        {{"mean_nll", e.mean_nll}, {"mean_kl", e.mean_kl}, {"wall_clock_sec", e.wall_clock_sec}});
  }
  const fs::path log_path = fs::path(rc.output_dir) / "trainlog.json";
  std::ofstream lf(log_path, std::ios::binary | std::ios::trunc);
  lf << log_json.dump(2) << "\n";
  lf.close();

  Manifest m = make_manifest("train", rc, rc.train_cfg.seed);
  m.add_input(rc.output_dir, rc.vocab_path());
  m.add_input(rc.output_dir, rc.train_path());
  m.add_output(rc.output_dir, fs::path(rc.output_dir) / "checkpoint_final.orgc");
  m.add_output(rc.output_dir, fs::path(rc.output_dir) / "checkpoint_last.orgc");
  m.add_volatile_output(rc.output_dir, log_path);  // contains wall-clock timings
  finish_manifest(m, rc);
  return 0;
}

int cmd_decode(const RunConfig& rc) {
  const auto vocab = load_vocab(rc);
  const auto mcfg = effective_model_config(rc, vocab);
  const auto params = load_params(rc, mcfg);
  const auto dataset = capped(load_split(rc, vocab, orderlab::data::Split::test), rc.samples_cap);
  fs::create_directories(rc.output_dir);

  const fs::path out_path = fs::path(rc.output_dir) / "decodes.jsonl";
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("decode: cannot open '" + out_path.string() + "'");
  for (std::size_t si = 0; si < dataset.samples.size(); ++si) {
    const auto& sample = dataset.samples[si];
    Rng rng(rc.decode_cfg.seed, si);
    const int n = static_cast<int>(sample.persona.sentences.size());
    const auto pi = rc.train_cfg.shuffle_at_eval ? orderlab::data::shuffle_persona(n, rng)
                                                 : orderlab::data::Permutation::identity(n);
    const auto ids = orderlab::decode::decode_response(params, mcfg, sample, pi, rc.decode_cfg, rng);
    nlohmann::json j;
    std::vector<std::string> persona, context;
    for (const auto& p : sample.persona.sentences) persona.push_back(orderlab::data::detokenize_ids(p, vocab));
    for (const auto& c : sample.context) context.push_back(orderlab::data::detokenize_ids(c, vocab));
    j["persona"] = persona;
    j["context"] = context;
    j["response"] = orderlab::data::detokenize_ids(sample.response, vocab);
    j["generated"] = orderlab::data::detokenize_ids(ids, vocab);
    out << j.dump() << "\n";
  }
  out.close();
  log_info("wrote " + out_path.string());

  Manifest m = make_manifest("decode", rc, rc.decode_cfg.seed);
  m.add_input(rc.output_dir, rc.vocab_path());
  m.add_input(rc.output_dir, rc.test_path());
  m.add_input(rc.output_dir, rc.checkpoint_path());
  m.add_output(rc.output_dir, out_path);
  finish_manifest(m, rc);
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  const fs::path decode_path = fs::path(rc.output_dir) / "decodes.jsonl";
  require_artifact(decode_path, "run decode first");
  std::ifstream f(decode_path, std::ios::binary);
  std::vector<orderlab::metrics::Tokens> cands, refs;
  std::vector<std::vector<orderlab::metrics::Tokens>> personas;
  std::vector<orderlab::metrics::ScorerRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("eval: bad JSON at " + decode_path.string() + " line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    cands.push_back(orderlab::data::tokenize_text(j.at("generated").get<std::string>()));
    refs.push_back(orderlab::data::tokenize_text(j.at("response").get<std::string>()));
    std::vector<orderlab::metrics::Tokens> persona;
    for (const auto& p : j.at("persona").get<std::vector<std::string>>()) {
      persona.push_back(orderlab::data::tokenize_text(p));
    }
    personas.push_back(persona);
    records.push_back({j.at("generated").get<std::string>(), j.at("persona").get<std::vector<std::string>>()});
  }
  if (cands.empty()) throw ArtifactError("eval: no decodes in '" + decode_path.string() + "'");

  nlohmann::json values = nlohmann::json::array();
  auto add_value = [&](const std::string& name, double corpus, const std::string& scale,
                       const std::vector<double>& per_sample) {
    nlohmann::json v{{"name", name}, {"corpus", corpus}, {"scale", scale}};
    if (!per_sample.empty()) v["per_sample"] = per_sample;
    values.push_back(v);
  };
  for (const auto& name : rc.metric_list) {
    if (name == "bleu1" || name == "bleu2") {
      const int order = name == "bleu1" ? 1 : 2;
      std::vector<double> per;
      for (std::size_t i = 0; i < cands.size(); ++i) {
        per.push_back(100.0 * orderlab::metrics::bleu_n(cands[i], refs[i], order));
      }
      add_value(name, 100.0 * orderlab::metrics::corpus_bleu_n(cands, refs, order),
                "x100; corpus = pooled counts, per_sample = epsilon-smoothed sentence scores", per);
    } else if (name == "rougeL") {
      std::vector<double> per;
      double sum = 0.0;
      for (std::size_t i = 0; i < cands.size(); ++i) {
        per.push_back(100.0 * orderlab::metrics::rouge_l_f1(cands[i], refs[i]));
        sum += per.back();
      }
      add_value(name, sum / static_cast<double>(per.size()), "x100", per);
    } else if (name == "cider") {
      const auto c = orderlab::metrics::cider(cands, refs);
      add_value(name, c.mean, "x10 mean n-gram cosine", c.per_sample);
    } else if (name == "entropy") {
      add_value(name, orderlab::metrics::entropy_k(cands, rc.entropy_k),
                "nats, " + std::to_string(rc.entropy_k) + "-grams", {});
    } else if (name == "consistency") {
      std::vector<double> per;
      double sum = 0.0;
      if (!rc.external_scorer.empty()) {
        orderlab::metrics::ExternalConsistencyScorer scorer(rc.external_scorer);
        for (double s : scorer.score(records)) {
          per.push_back(100.0 * s);
          sum += per.back();
        }
        add_value(name, sum / static_cast<double>(per.size()), "x100; external scorer", per);
      } else {
        for (std::size_t i = 0; i < cands.size(); ++i) {
          per.push_back(100.0 * orderlab::metrics::persona_consistency_proxy(cands[i], personas[i]));
          sum += per.back();
        }
        add_value(name, sum / static_cast<double>(per.size()), "x100; lexical overlap proxy", per);
      }
    } else {
      throw ConfigError("config: unknown metric '" + name + "' in metrics.list");
    }
  }

  const fs::path out_path = fs::path(rc.output_dir) / "metrics.json";
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  out << nlohmann::json{{"schema_version", 1}, {"values", values}}.dump(2) << "\n";
  out.close();
  log_info("wrote " + out_path.string());

  Manifest m = make_manifest("eval", rc, rc.decode_cfg.seed);
  m.add_input(rc.output_dir, decode_path);
  m.add_output(rc.output_dir, out_path);
  finish_manifest(m, rc);
  return 0;
}

orderlab::decode::DecodeConfig sweep_decode_config(const RunConfig& rc) {
  auto dcfg = rc.decode_cfg;
  if (rc.sweep_decode == "greedy") dcfg.strategy = orderlab::decode::Strategy::greedy;
  return dcfg;
}

int cmd_sweep(const RunConfig& rc) {
  const auto vocab = load_vocab(rc);
  const auto mcfg = effective_model_config(rc, vocab);
  const auto params = load_params(rc, mcfg);
  const auto dataset = capped(load_split(rc, vocab, orderlab::data::Split::test), rc.samples_cap);
  fs::create_directories(rc.output_dir);

  orderlab::analysis::TransformerScorer<float> scorer(params, mcfg);
  orderlab::analysis::SweepOptions opts;
  opts.perm_cap = rc.perm_cap;
  opts.master_seed = rc.master_seed;
  opts.threads = rc.effective_threads();
  opts.checkpoint_id = orderlab::sha256_file_hex(rc.checkpoint_path()).substr(0, 16);
  const auto report = orderlab::analysis::permutation_sweep(scorer, dataset, vocab, sweep_decode_config(rc),
                                                            rc.sweep_metrics, opts);
  const fs::path out_path = fs::path(rc.output_dir) / "sweep_report.json";
  orderlab::analysis::emit_report(report, out_path, orderlab::analysis::ReportFormat::json);
  log_info("wrote " + out_path.string());

  Manifest m = make_manifest("sweep", rc, rc.master_seed);
  m.add_input(rc.output_dir, rc.vocab_path());
  m.add_input(rc.output_dir, rc.test_path());
  m.add_input(rc.output_dir, rc.checkpoint_path());
  m.add_output(rc.output_dir, out_path);
  finish_manifest(m, rc);
  return 0;
}

int cmd_variance(const RunConfig& rc) {
  const auto vocab = load_vocab(rc);
  const auto mcfg = effective_model_config(rc, vocab);
  const auto params = load_params(rc, mcfg);
  const auto dataset = load_split(rc, vocab, orderlab::data::Split::test);
  fs::create_directories(rc.output_dir);

  orderlab::analysis::TransformerScorer<float> scorer(params, mcfg);
  orderlab::analysis::VarianceOptions opts;
  opts.runs = rc.runs;
  opts.master_seed = rc.master_seed;
  opts.threads = rc.effective_threads();
  opts.checkpoint_id = orderlab::sha256_file_hex(rc.checkpoint_path()).substr(0, 16);
  const auto report =
      orderlab::analysis::variance_study(scorer, dataset, vocab, rc.decode_cfg, rc.metric_list, opts);
  const fs::path out_path = fs::path(rc.output_dir) / "variance_report.json";
  orderlab::analysis::emit_report(report, out_path, orderlab::analysis::ReportFormat::json);
  const fs::path svg_path = fs::path(rc.output_dir) / "variance_box.svg";
  orderlab::analysis::emit_boxplot_svg(report, svg_path);
  log_info("wrote " + out_path.string() + " and " + svg_path.string());

  Manifest m = make_manifest("variance", rc, rc.master_seed);
  m.add_input(rc.output_dir, rc.vocab_path());
  m.add_input(rc.output_dir, rc.test_path());
  m.add_input(rc.output_dir, rc.checkpoint_path());
  m.add_output(rc.output_dir, out_path);
  m.add_output(rc.output_dir, svg_path);
  finish_manifest(m, rc);
  return 0;
}

int cmd_divergence(const RunConfig& rc) {
  const auto vocab = load_vocab(rc);
  const auto mcfg = effective_model_config(rc, vocab);
  const auto params = load_params(rc, mcfg);
  const auto dataset = capped(load_split(rc, vocab, orderlab::data::Split::test), rc.samples_cap);
  fs::create_directories(rc.output_dir);

  orderlab::analysis::TransformerScorer<float> scorer(params, mcfg);
  orderlab::analysis::DivergenceOptions opts;
  opts.pairs_per_sample = rc.pairs_per_sample;
  opts.seed = rc.master_seed;
  opts.threads = rc.effective_threads();
  opts.checkpoint_id = orderlab::sha256_file_hex(rc.checkpoint_path()).substr(0, 16);
  const auto report = orderlab::analysis::representation_divergence(scorer, dataset, vocab, opts);
  const fs::path out_path = fs::path(rc.output_dir) / "divergence_report.json";
  orderlab::analysis::emit_report(report, out_path, orderlab::analysis::ReportFormat::json);
  log_info("wrote " + out_path.string() + " (corpus mean " + std::to_string(report.corpus_mean) + ")");

  Manifest m = make_manifest("divergence", rc, rc.master_seed);
  m.add_input(rc.output_dir, rc.vocab_path());
  m.add_input(rc.output_dir, rc.test_path());
  m.add_input(rc.output_dir, rc.checkpoint_path());
  m.add_output(rc.output_dir, out_path);
  finish_manifest(m, rc);
  return 0;
}

int cmd_report(const RunConfig& rc, const std::vector<std::string>& inputs, const std::string& format,
               const std::string& out) {
  if (inputs.empty()) throw ConfigError("report: need at least one --in file");
  if (out.empty()) throw ConfigError("report: need --out");
  fs::create_directories(fs::path(out).parent_path().empty() ? "." : fs::path(out).parent_path());

  if (format == "svg") {
    std::vector<orderlab::analysis::BoxSeries> series;
    for (const auto& in : inputs) {
      require_artifact(in, "report input");
      const auto j = orderlab::analysis::io_detail::read_json(in);
      const auto vr = orderlab::analysis::variance_report_from_json(j);
      for (std::size_t mi = 0; mi < vr.metrics.size(); ++mi) {
        orderlab::analysis::BoxSeries s;
        s.label = vr.metrics[mi] + (vr.checkpoint_id.empty() ? "" : " (" + vr.checkpoint_id + ")");
        for (const auto& run : vr.run_scores) s.values.push_back(run[mi]);
        series.push_back(std::move(s));
      }
    }
    orderlab::analysis::emit_boxplot_svg(series, out);
  } else {
    const auto fmt = orderlab::analysis::report_format_from_string(format);
    if (inputs.size() != 1) throw ConfigError("report: json/csv conversion takes exactly one --in file");
    require_artifact(inputs[0], "report input");
    const auto j = orderlab::analysis::io_detail::read_json(inputs[0]);
    const std::string kind = j.value("kind", "");
    if (kind == "sweep_report") {
      orderlab::analysis::emit_report(orderlab::analysis::sweep_report_from_json(j), out, fmt);
    } else if (kind == "variance_report") {
      orderlab::analysis::emit_report(orderlab::analysis::variance_report_from_json(j), out, fmt);
    } else if (kind == "divergence_report") {
      orderlab::analysis::emit_report(orderlab::analysis::divergence_report_from_json(j), out, fmt);
    } else {
      throw ConfigError("report: unrecognized report kind '" + kind + "' in " + inputs[0]);
    }
  }
  log_info("wrote " + out);
  (void)rc;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"orderlab: persona-ordering robustness toolkit for toy dialogue transformers"};
  app.require_subcommand(1);

  CommonArgs common;
  std::vector<std::string> report_inputs;
  std::string report_format = "csv";
  std::string report_out;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON run config (defaults used when omitted)");
    sub->add_option("--set", common.overrides, "Override a config field: dotted.path=value")
        ->take_all();
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic persona corpus");
  auto* tr = app.add_subcommand("train", "Train a model (mle or orig objective)");
  auto* dec = app.add_subcommand("decode", "Decode the test split with a trained checkpoint");
  auto* ev = app.add_subcommand("eval", "Score decodes.jsonl with the metric suite");
  auto* sw = app.add_subcommand("sweep", "Best/worst permutation sweep over persona orderings");
  auto* va = app.add_subcommand("variance", "R-run shuffled-order variance study");
  auto* dv = app.add_subcommand("divergence", "Per-token representation divergence probe");
  auto* rp = app.add_subcommand("report", "Convert a report JSON to csv or an svg box plot");
  for (auto* sub : {gen, tr, dec, ev, sw, va, dv, rp}) add_common(sub);
  rp->add_option("--in", report_inputs, "Input report JSON (repeatable for svg)")->take_all();
  rp->add_option("--format", report_format, "Output format: csv, json, or svg");
  rp->add_option("--out", report_out, "Output file");

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig rc = resolve_config(common);
    if (gen->parsed()) return cmd_gen_data(rc);
    if (tr->parsed()) return cmd_train(rc);
    if (dec->parsed()) return cmd_decode(rc);
    if (ev->parsed()) return cmd_eval(rc);
    if (sw->parsed()) return cmd_sweep(rc);
    if (va->parsed()) return cmd_variance(rc);
    if (dv->parsed()) return cmd_divergence(rc);
    if (rp->parsed()) return cmd_report(rc, report_inputs, report_format, report_out);
    std::cerr << "error: no subcommand\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ArtifactError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
