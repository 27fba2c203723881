#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "orderlab/data.hpp"
#include "orderlab/decoding.hpp"
#include "orderlab/metrics.hpp"
#include "orderlab/model.hpp"
#include "orderlab/rng.hpp"
#include "orderlab/tape.hpp"

namespace orderlab::analysis {

// ---- reports -------------------------------------------------------------------

struct SweepCell {
  double best = 0.0;
  double worst = 0.0;
  std::vector<int> argbest;
  std::vector<int> argworst;

  bool operator==(const SweepCell&) const = default;
};

struct SweepReport {
  int schema_version = 1;
  std::string checkpoint_id;
  std::string decode_strategy;
  int perm_cap = 0;
  std::vector<std::string> metrics;
  std::vector<std::vector<SweepCell>> cells;  // [sample][metric]
  // Mean of per-sample best/worst scores, and the corpus-level metric of the
  // per-sample argbest/argworst decodes; both aggregations are emitted since
  // they answer slightly different questions.
  std::vector<double> mean_best, mean_worst;
  std::vector<double> corpus_best, corpus_worst;

  bool operator==(const SweepReport&) const = default;
};

struct VarianceReport {
  int schema_version = 1;
  std::string checkpoint_id;
  std::vector<std::string> metrics;
  std::vector<std::uint64_t> run_seeds;
  std::vector<std::vector<double>> run_scores;  // [run][metric]
  std::vector<double> mean, variance, stddev, min, max;  // per metric; unbiased variance

  bool operator==(const VarianceReport&) const = default;
};

struct DivergenceSample {
  std::vector<std::string> tokens;
  std::vector<double> kl;  // bidirectional KL per response token, mean over pairs
  double mean = 0.0;

  bool operator==(const DivergenceSample&) const = default;
};

struct DivergenceReport {
  int schema_version = 1;
  std::string checkpoint_id;
  int pairs_per_sample = 0;
  std::uint64_t seed = 0;
  std::vector<DivergenceSample> samples;
  double corpus_mean = 0.0;

  bool operator==(const DivergenceReport&) const = default;
};

// ---- metric plumbing --------------------------------------------------------------

// Reported scale: unit-interval metrics go out x100 (matching the usual
// tables); cider carries its own x10; entropy stays in nats.
inline double reported_scale(const std::string& metric) {
  if (metric == "cider" || metric == "entropy") return 1.0;
  return 100.0;
}

// Scores decodes against the dataset's gold responses. Corpus-level state
// (the CIDEr IDF table) is computed once at construction.
class MetricSuite {
 public:
  MetricSuite(std::vector<std::string> names, const data::Dataset& dataset, const data::Vocabulary& vocab,
              bool for_sweep)
      : names_(std::move(names)) {
    if (names_.empty()) throw std::invalid_argument("metrics: empty metric list");
    for (const auto& n : names_) {
      if (n != "bleu1" && n != "bleu2" && n != "rougeL" && n != "cider" && n != "entropy" &&
          n != "consistency") {
        throw std::invalid_argument("metrics: unknown metric '" + n + "'");
      }
      if (for_sweep && n == "entropy") {
        throw std::invalid_argument("metrics: entropy is corpus-level and has no per-sample score");
      }
    }
    refs_.reserve(dataset.samples.size());
    personas_.reserve(dataset.samples.size());
    for (const auto& s : dataset.samples) {
      refs_.push_back(tokens_of(s.response, vocab));
      std::vector<metrics::Tokens> persona;
      for (const auto& p : s.persona.sentences) persona.push_back(tokens_of(p, vocab));
      personas_.push_back(std::move(persona));
    }
    if (std::find(names_.begin(), names_.end(), "cider") != names_.end()) {
      cider_idf_ = std::make_shared<metrics::CiderIdf>(refs_);
    }
  }

  static metrics::Tokens tokens_of(const std::vector<int>& ids, const data::Vocabulary& vocab) {
    metrics::Tokens out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(vocab.token_of(id));
    return out;
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t n_samples() const { return refs_.size(); }
  const metrics::Tokens& reference(std::size_t i) const { return refs_[i]; }

  double sample_score(const std::string& name, const metrics::Tokens& cand, std::size_t sample_idx) const {
    const double s = reported_scale(name);
    if (name == "bleu1") return s * metrics::bleu_n(cand, refs_[sample_idx], 1);
    if (name == "bleu2") return s * metrics::bleu_n(cand, refs_[sample_idx], 2);
    if (name == "rougeL") return s * metrics::rouge_l_f1(cand, refs_[sample_idx]);
    if (name == "cider") return cider_idf_->score(cand, refs_[sample_idx]);
    if (name == "consistency") {
      return s * metrics::persona_consistency_proxy(cand, personas_[sample_idx]);
    }
    throw std::invalid_argument("metrics: no per-sample score for '" + name + "'");
  }

  double corpus_score(const std::string& name, const std::vector<metrics::Tokens>& cands) const {
    const double s = reported_scale(name);
    if (name == "bleu1") return s * metrics::corpus_bleu_n(cands, refs_, 1);
    if (name == "bleu2") return s * metrics::corpus_bleu_n(cands, refs_, 2);
    if (name == "entropy") return metrics::entropy_k(cands, 4);
    double sum = 0.0;
    for (std::size_t i = 0; i < cands.size(); ++i) sum += sample_score(name, cands[i], i);
    return sum / static_cast<double>(cands.size());
  }

 private:
  std::vector<std::string> names_;
  std::vector<metrics::Tokens> refs_;
  std::vector<std::vector<metrics::Tokens>> personas_;
  std::shared_ptr<metrics::CiderIdf> cider_idf_;
};

// ---- model adapter -------------------------------------------------------------------

// The analysis procedures are generic over a scorer with
//   decode_response(sample, pi, decode_cfg, rng) -> response token ids
//   response_token_logits(sample, pi) -> one logits row per response token
// so tests can plug in constructed models (e.g. a persona-blind stub).
template <typename Real>
class TransformerScorer {
 public:
  TransformerScorer(const model::Parameters<Real>& params, const model::ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    for (const auto& [name, t] : params.named) {
      params_.named.emplace(name,
                            ad::Tensor<Real>::from(t.shape(), {t.values().begin(), t.values().end()}));
    }
    model::validate_parameters(params_, cfg_);
  }

  std::vector<int> decode_response(const data::DialogueSample& sample, const data::Permutation& pi,
                                   const decode::DecodeConfig& dcfg, Rng& rng) const {
    return decode::decode_response(params_, cfg_, sample, pi, dcfg, rng);
  }

  std::vector<std::vector<Real>> response_token_logits(const data::DialogueSample& sample,
                                                       const data::Permutation& pi) const {
    ad::Tape<Real> tape;
    model::TeacherForced<Real> tf;
    if (cfg_.arch == model::Arch::decoder_only) {
      auto ser = data::serialize_decoder_input(sample, pi, cfg_.max_seq_len);
      tf = model::teacher_forced_decoder(tape, params_, cfg_, ser.ids, ser.response_mask);
    } else {
      auto ser = data::serialize_encdec_input(sample, pi, cfg_.max_seq_len);
      tf = model::teacher_forced_encdec(tape, params_, cfg_, ser.source_ids, ser.target_ids,
                                        ser.target_mask);
    }
    const int vocab = tf.logits.shape()[1];
    std::vector<std::vector<Real>> rows;
    rows.reserve(sample.response.size());
    for (std::size_t t = 0; t < tf.mask.size() && rows.size() < sample.response.size(); ++t) {
      if (!tf.mask[t]) continue;
      const Real* row = tf.logits.data() + t * static_cast<std::size_t>(vocab);
      rows.emplace_back(row, row + vocab);
    }
    return rows;
  }

  const model::Parameters<Real>& params() const { return params_; }
  const model::ModelConfig& config() const { return cfg_; }

 private:
  model::Parameters<Real> params_;  // detached copy, no grad tracking
  model::ModelConfig cfg_;
};

// ---- shared helpers ---------------------------------------------------------------------

namespace detail {

inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  const int workers = std::min(threads, n);
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline long factorial_capped(int n, long cap) {
  long f = 1;
  for (int i = 2; i <= n; ++i) {
    f *= i;
    if (f > cap) return cap + 1;
  }
  return f;
}

// Mean of the two directed KLs between softmax distributions, in double.
template <typename Real>
double bidirectional_kl(const std::vector<Real>& a, const std::vector<Real>& b) {
  const std::size_t n = a.size();
  std::vector<double> p(n), q(n);
  auto softmax = [](const std::vector<Real>& x, std::vector<double>& out) {
    double mx = static_cast<double>(x[0]);
    for (Real v : x) mx = std::max(mx, static_cast<double>(v));
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      out[i] = std::exp(static_cast<double>(x[i]) - mx);
      sum += out[i];
    }
    for (auto& v : out) v /= sum;
  };
  softmax(a, p);
  softmax(b, q);
  const double floor = 1e-12;
  double kl_pq = 0.0, kl_qp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lp = std::log(std::max(p[i], floor));
    const double lq = std::log(std::max(q[i], floor));
    kl_pq += p[i] * (lp - lq);
    kl_qp += q[i] * (lq - lp);
  }
  return 0.5 * (kl_pq + kl_qp);
}

}  // namespace detail

// ---- permutation sweep ----------------------------------------------------------------------

struct SweepOptions {
  int perm_cap = 120;
  std::uint64_t master_seed = 42;
  int threads = 1;
  std::string checkpoint_id;
};

// Enumerates all n! persona orderings when n! <= perm_cap, else samples
// perm_cap distinct orderings uniformly. Greedy decoding by default; with a
// sampling config the decode RNG is re-seeded identically per ordering so
// orderings that serialize identically decode identically.
template <typename Scorer>
SweepReport permutation_sweep(const Scorer& scorer, const data::Dataset& dataset,
                              const data::Vocabulary& vocab, const decode::DecodeConfig& dcfg,
                              const std::vector<std::string>& metric_names, const SweepOptions& opts = {}) {
  if (opts.perm_cap < 1) throw std::invalid_argument("permutation_sweep: perm_cap must be >= 1");
  dcfg.validate();
  const MetricSuite suite(metric_names, dataset, vocab, /*for_sweep=*/true);
  const int n_samples = static_cast<int>(dataset.samples.size());
  const int n_metrics = static_cast<int>(suite.names().size());

  SweepReport report;
  report.checkpoint_id = opts.checkpoint_id;
  report.decode_strategy = decode::strategy_name(dcfg.strategy);
  report.perm_cap = opts.perm_cap;
  report.metrics = suite.names();
  report.cells.assign(static_cast<std::size_t>(n_samples), {});
  std::vector<std::vector<std::vector<int>>> best_decodes(static_cast<std::size_t>(n_samples));
  std::vector<std::vector<std::vector<int>>> worst_decodes(static_cast<std::size_t>(n_samples));

  detail::parallel_for(n_samples, opts.threads, [&](int si) {
    const auto& sample = dataset.samples[static_cast<std::size_t>(si)];
    const int n = static_cast<int>(sample.persona.sentences.size());
    std::vector<data::Permutation> perms;
    if (detail::factorial_capped(n, opts.perm_cap) <= opts.perm_cap) {
      data::Permutation pi = data::Permutation::identity(n);
      do {
        perms.push_back(pi);
      } while (std::next_permutation(pi.map.begin(), pi.map.end()));
    } else {
      Rng rng(opts.master_seed, 0x9e00 + static_cast<std::uint64_t>(si));
      std::set<std::vector<int>> seen;
      while (static_cast<int>(perms.size()) < opts.perm_cap) {
        auto pi = data::shuffle_persona(n, rng);
        if (seen.insert(pi.map).second) perms.push_back(std::move(pi));
      }
    }

    auto& cells = report.cells[static_cast<std::size_t>(si)];
    cells.assign(static_cast<std::size_t>(n_metrics), {});
    auto& bests = best_decodes[static_cast<std::size_t>(si)];
    auto& worsts = worst_decodes[static_cast<std::size_t>(si)];
    bests.assign(static_cast<std::size_t>(n_metrics), {});
    worsts.assign(static_cast<std::size_t>(n_metrics), {});
    bool first = true;
    for (const auto& pi : perms) {
      // Fresh identically-seeded RNG per ordering: sampling noise is equal
      // across orderings, so score differences are pure ordering effects.
      Rng decode_rng(opts.master_seed, 0xdec0 + static_cast<std::uint64_t>(si));
      const auto ids = scorer.decode_response(sample, pi, dcfg, decode_rng);
      const auto cand = MetricSuite::tokens_of(ids, vocab);
      for (int mi = 0; mi < n_metrics; ++mi) {
        const double score = suite.sample_score(suite.names()[static_cast<std::size_t>(mi)], cand,
                                                static_cast<std::size_t>(si));
        auto& cell = cells[static_cast<std::size_t>(mi)];
        if (first || score > cell.best) {
          cell.best = score;
          cell.argbest = pi.map;
          bests[static_cast<std::size_t>(mi)] = ids;
        }
        if (first || score < cell.worst) {
          cell.worst = score;
          cell.argworst = pi.map;
          worsts[static_cast<std::size_t>(mi)] = ids;
        }
      }
      first = false;
    }
  });

  report.mean_best.assign(static_cast<std::size_t>(n_metrics), 0.0);
  report.mean_worst.assign(static_cast<std::size_t>(n_metrics), 0.0);
  for (int si = 0; si < n_samples; ++si) {
    for (int mi = 0; mi < n_metrics; ++mi) {
      report.mean_best[static_cast<std::size_t>(mi)] +=
          report.cells[static_cast<std::size_t>(si)][static_cast<std::size_t>(mi)].best;
      report.mean_worst[static_cast<std::size_t>(mi)] +=
          report.cells[static_cast<std::size_t>(si)][static_cast<std::size_t>(mi)].worst;
    }
  }
  for (int mi = 0; mi < n_metrics; ++mi) {
    report.mean_best[static_cast<std::size_t>(mi)] /= n_samples;
    report.mean_worst[static_cast<std::size_t>(mi)] /= n_samples;
  }
  for (int mi = 0; mi < n_metrics; ++mi) {
    std::vector<metrics::Tokens> best_cands, worst_cands;
    for (int si = 0; si < n_samples; ++si) {
      best_cands.push_back(
          MetricSuite::tokens_of(best_decodes[static_cast<std::size_t>(si)][static_cast<std::size_t>(mi)], vocab));
      worst_cands.push_back(
          MetricSuite::tokens_of(worst_decodes[static_cast<std::size_t>(si)][static_cast<std::size_t>(mi)], vocab));
    }
    report.corpus_best.push_back(suite.corpus_score(suite.names()[static_cast<std::size_t>(mi)], best_cands));
    report.corpus_worst.push_back(
        suite.corpus_score(suite.names()[static_cast<std::size_t>(mi)], worst_cands));
  }
  return report;
}

// ---- variance study ----------------------------------------------------------------------------

struct VarianceOptions {
  int runs = 20;
  std::uint64_t master_seed = 42;
  int threads = 1;
  std::string checkpoint_id;
};

// R evaluation runs, each with fresh uniform persona orderings per sample;
// corpus metrics per run, mean/variance across runs.
template <typename Scorer>
VarianceReport variance_study(const Scorer& scorer, const data::Dataset& dataset,
                              const data::Vocabulary& vocab, const decode::DecodeConfig& dcfg,
                              const std::vector<std::string>& metric_names,
                              const VarianceOptions& opts = {}) {
  if (opts.runs < 2) throw std::invalid_argument("variance_study: need at least 2 runs");
  dcfg.validate();
  const MetricSuite suite(metric_names, dataset, vocab, /*for_sweep=*/false);
  const int n_samples = static_cast<int>(dataset.samples.size());
  const int n_metrics = static_cast<int>(suite.names().size());

  VarianceReport report;
  report.checkpoint_id = opts.checkpoint_id;
  report.metrics = suite.names();
  report.run_seeds.resize(static_cast<std::size_t>(opts.runs));
  report.run_scores.assign(static_cast<std::size_t>(opts.runs), {});
  for (int r = 0; r < opts.runs; ++r) {
    report.run_seeds[static_cast<std::size_t>(r)] = Rng::derive(opts.master_seed, 0xa100 + static_cast<std::uint64_t>(r));
  }

  detail::parallel_for(opts.runs, opts.threads, [&](int r) {
    const std::uint64_t run_seed = report.run_seeds[static_cast<std::size_t>(r)];
    std::vector<metrics::Tokens> cands;
    cands.reserve(static_cast<std::size_t>(n_samples));
    for (int si = 0; si < n_samples; ++si) {
      const auto& sample = dataset.samples[static_cast<std::size_t>(si)];
      Rng unit(run_seed, static_cast<std::uint64_t>(si));
      const auto pi = data::shuffle_persona(static_cast<int>(sample.persona.sentences.size()), unit);
      const auto ids = scorer.decode_response(sample, pi, dcfg, unit);
      cands.push_back(MetricSuite::tokens_of(ids, vocab));
    }
    auto& row = report.run_scores[static_cast<std::size_t>(r)];
    row.reserve(static_cast<std::size_t>(n_metrics));
    for (const auto& name : suite.names()) row.push_back(suite.corpus_score(name, cands));
  });

  for (int mi = 0; mi < n_metrics; ++mi) {
    double sum = 0.0, vmin = report.run_scores[0][static_cast<std::size_t>(mi)], vmax = vmin;
    for (int r = 0; r < opts.runs; ++r) {
      const double v = report.run_scores[static_cast<std::size_t>(r)][static_cast<std::size_t>(mi)];
      sum += v;
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
    const double mean = sum / opts.runs;
    double var = 0.0;
    for (int r = 0; r < opts.runs; ++r) {
      const double d = report.run_scores[static_cast<std::size_t>(r)][static_cast<std::size_t>(mi)] - mean;
      var += d * d;
    }
    var /= static_cast<double>(opts.runs - 1);
    report.mean.push_back(mean);
    report.variance.push_back(var);
    report.stddev.push_back(std::sqrt(var));
    report.min.push_back(vmin);
    report.max.push_back(vmax);
  }
  return report;
}

// ---- representation divergence --------------------------------------------------------------------

struct DivergenceOptions {
  int pairs_per_sample = 4;
  std::uint64_t seed = 42;
  int threads = 1;
  std::string checkpoint_id;
};

// Teacher-forces the gold response under pairs of independent uniform
// orderings and reports the per-token bidirectional KL between the two
// predictive distributions, averaged over pairs.
template <typename Scorer>
DivergenceReport representation_divergence(const Scorer& scorer, const data::Dataset& dataset,
                                           const data::Vocabulary& vocab, const DivergenceOptions& opts = {}) {
  if (opts.pairs_per_sample < 1) {
    throw std::invalid_argument("representation_divergence: pairs_per_sample must be >= 1");
  }
  const int n_samples = static_cast<int>(dataset.samples.size());
  DivergenceReport report;
  report.checkpoint_id = opts.checkpoint_id;
  report.pairs_per_sample = opts.pairs_per_sample;
  report.seed = opts.seed;
  report.samples.assign(static_cast<std::size_t>(n_samples), {});

  detail::parallel_for(n_samples, opts.threads, [&](int si) {
    const auto& sample = dataset.samples[static_cast<std::size_t>(si)];
    const int n = static_cast<int>(sample.persona.sentences.size());
    Rng rng(opts.seed, static_cast<std::uint64_t>(si));
    auto& entry = report.samples[static_cast<std::size_t>(si)];
    entry.tokens.reserve(sample.response.size());
    for (int id : sample.response) entry.tokens.push_back(vocab.token_of(id));
    entry.kl.assign(sample.response.size(), 0.0);
    for (int pair = 0; pair < opts.pairs_per_sample; ++pair) {
      const auto pi1 = data::shuffle_persona(n, rng);
      const auto pi2 = data::shuffle_persona(n, rng);
      const auto rows1 = scorer.response_token_logits(sample, pi1);
      const auto rows2 = scorer.response_token_logits(sample, pi2);
      if (rows1.size() != entry.kl.size() || rows2.size() != entry.kl.size()) {
        throw std::logic_error("representation_divergence: logits rows do not align with response length");
      }
      for (std::size_t t = 0; t < entry.kl.size(); ++t) {
        entry.kl[t] += detail::bidirectional_kl(rows1[t], rows2[t]);
      }
    }
    double sum = 0.0;
    for (auto& v : entry.kl) {
      v /= static_cast<double>(opts.pairs_per_sample);
      sum += v;
    }
    entry.mean = sum / static_cast<double>(entry.kl.size());
  });

  double corpus = 0.0;
  for (const auto& s : report.samples) corpus += s.mean;
  report.corpus_mean = n_samples > 0 ? corpus / n_samples : 0.0;
  return report;
}

}  // namespace orderlab::analysis
