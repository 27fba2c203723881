#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "orderlab/checkpoint.hpp"
#include "orderlab/data.hpp"
#include "orderlab/model.hpp"
#include "orderlab/rng.hpp"
#include "orderlab/tape.hpp"

namespace orderlab::train {

enum class Objective { mle, orig };
enum class KlDirection { forward, reverse, symmetric };

struct TrainConfig {
  Objective objective = Objective::mle;
  double gamma = 1.0;
  KlDirection kl_direction = KlDirection::forward;
  double lr = 3e-4;  // from-scratch default; 2e-5 is the usual fine-tuning value
  int batch_size = 32;
  int epochs = 10;
  std::uint64_t seed = 42;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> grad_clip_norm = 1.0;
  bool shuffle_at_eval = false;

  void validate() const {
    if (gamma < 0.0) throw std::invalid_argument("train config: gamma must be >= 0");
    if (lr <= 0.0) throw std::invalid_argument("train config: lr must be > 0");
    if (batch_size < 1 || epochs < 1) {
      throw std::invalid_argument("train config: batch_size and epochs must be positive");
    }
    if (grad_clip_norm && *grad_clip_norm <= 0.0) {
      throw std::invalid_argument("train config: grad_clip_norm must be positive when set");
    }
  }
};

struct EpochStats {
  double mean_nll = 0.0;
  double mean_kl = 0.0;
  double wall_clock_sec = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
};

template <typename Real>
struct OptimizerState {
  std::map<std::string, std::vector<Real>> m;
  std::map<std::string, std::vector<Real>> v;
  long step = 0;
};

namespace detail {

template <typename Real>
struct SampleForward {
  model::TeacherForced<Real> tf;
  int masked = 0;
};

template <typename Real>
SampleForward<Real> forward_sample(ad::Tape<Real>& tape, const model::Parameters<Real>& params,
                                   const model::ModelConfig& cfg, const data::DialogueSample& sample,
                                   const data::Permutation& pi, Rng* dropout_rng) {
  SampleForward<Real> out;
  if (cfg.arch == model::Arch::decoder_only) {
    auto ser = data::serialize_decoder_input(sample, pi, cfg.max_seq_len);
    out.tf = model::teacher_forced_decoder(tape, params, cfg, ser.ids, ser.response_mask, dropout_rng);
  } else {
    auto ser = data::serialize_encdec_input(sample, pi, cfg.max_seq_len);
    out.tf = model::teacher_forced_encdec(tape, params, cfg, ser.source_ids, ser.target_ids,
                                          ser.target_mask, dropout_rng);
  }
  for (auto m : out.tf.mask) out.masked += m;
  return out;
}

}  // namespace detail

// Token-pooled mean NLL over the batch under the canonical persona ordering.
template <typename Real>
ad::Tensor<Real> nll_batch(ad::Tape<Real>& tape, const model::Parameters<Real>& params,
                           const model::ModelConfig& cfg, std::span<const data::DialogueSample> batch,
                           Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw std::invalid_argument("nll_batch: empty batch");
  std::vector<detail::SampleForward<Real>> fwd;
  fwd.reserve(batch.size());
  long total = 0;
  for (const auto& sample : batch) {
    const auto pi = data::Permutation::identity(static_cast<int>(sample.persona.sentences.size()));
    fwd.push_back(detail::forward_sample(tape, params, cfg, sample, pi, dropout_rng));
    total += fwd.back().masked;
  }
  ad::Tensor<Real> loss;
  bool first = true;
  for (auto& f : fwd) {
    auto ce = tape.cross_entropy_nll(f.tf.logits, f.tf.targets, f.tf.mask);
    auto weighted = tape.scale(ce, static_cast<Real>(static_cast<double>(f.masked) / total));
    loss = first ? weighted : tape.add(loss, weighted);
    first = false;
  }
  return loss;
}

template <typename Real>
struct OrigLoss {
  ad::Tensor<Real> total;
  ad::Tensor<Real> nll_part;
  ad::Tensor<Real> kl_part;  // detached scalar 0 when gamma == 0
};

// Eq.-7-style Lagrangian: total = nll(canonical) + gamma * KL(canonical vs
// freshly shuffled), pooled over masked response positions. Both forward
// passes share parameters, so gradients flow through both. The permutation is
// sampled (and discarded) even at gamma == 0 to keep the RNG schedule aligned
// with gamma > 0 runs.
template <typename Real>
OrigLoss<Real> orig_batch_loss(ad::Tape<Real>& tape, const model::Parameters<Real>& params,
                               const model::ModelConfig& cfg, std::span<const data::DialogueSample> batch,
                               Rng& perm_rng, const TrainConfig& tcfg, Rng* dropout_rng = nullptr,
                               const data::Permutation* forced_pi = nullptr) {
  if (batch.empty()) throw std::invalid_argument("orig_batch_loss: empty batch");
  tcfg.validate();
  struct Pair {
    detail::SampleForward<Real> canon;
    detail::SampleForward<Real> shuffled;
  };
  std::vector<Pair> fwd;
  fwd.reserve(batch.size());
  long total_masked = 0;
  const bool want_kl = tcfg.gamma != 0.0 || forced_pi != nullptr;
  for (const auto& sample : batch) {
    const int n = static_cast<int>(sample.persona.sentences.size());
    Pair pair;
    pair.canon = detail::forward_sample(tape, params, cfg, sample, data::Permutation::identity(n),
                                        dropout_rng);
    data::Permutation pi = forced_pi ? *forced_pi : data::shuffle_persona(n, perm_rng);
    if (want_kl) {
      pair.shuffled = detail::forward_sample(tape, params, cfg, sample, pi, dropout_rng);
    }
    total_masked += pair.canon.masked;
    fwd.push_back(std::move(pair));
  }

  OrigLoss<Real> out;
  bool first = true;
  for (auto& f : fwd) {
    auto ce = tape.cross_entropy_nll(f.canon.tf.logits, f.canon.tf.targets, f.canon.tf.mask);
    auto weighted = tape.scale(ce, static_cast<Real>(static_cast<double>(f.canon.masked) / total_masked));
    out.nll_part = first ? weighted : tape.add(out.nll_part, weighted);
    if (want_kl) {
      ad::Tensor<Real> rows;
      switch (tcfg.kl_direction) {
        case KlDirection::forward:
          rows = tape.kl_divergence(f.canon.tf.logits, f.shuffled.tf.logits, 1);
          break;
        case KlDirection::reverse:
          rows = tape.kl_divergence(f.shuffled.tf.logits, f.canon.tf.logits, 1);
          break;
        case KlDirection::symmetric:
          rows = tape.scale(tape.add(tape.kl_divergence(f.canon.tf.logits, f.shuffled.tf.logits, 1),
                                     tape.kl_divergence(f.shuffled.tf.logits, f.canon.tf.logits, 1)),
                            Real(0.5));
          break;
      }
      auto sample_kl = tape.masked_mean(rows, f.canon.tf.mask);
      auto wkl = tape.scale(sample_kl, static_cast<Real>(static_cast<double>(f.canon.masked) / total_masked));
      out.kl_part = first ? wkl : tape.add(out.kl_part, wkl);
    }
    first = false;
  }
  if (!want_kl) out.kl_part = ad::Tensor<Real>::scalar_of(Real(0));
  out.total = tcfg.gamma != 0.0 ? tape.add(out.nll_part, tape.scale(out.kl_part, static_cast<Real>(tcfg.gamma)))
                                : out.nll_part;
  return out;
}

// Standard bias-corrected Adam over the named parameter map.
template <typename Real>
void adam_step(model::Parameters<Real>& params, OptimizerState<Real>& state, const TrainConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const Real b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);
  const Real lr = static_cast<Real>(cfg.lr), eps = static_cast<Real>(cfg.adam_eps);
  for (auto& [name, t] : params.named) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(t.numel(), Real(0));
    if (v.empty()) v.assign(t.numel(), Real(0));
    const bool has = t.has_grad();
    const Real* g = has ? t.grad().data() : nullptr;
    Real* w = t.data_mut();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const Real gi = has ? g[i] : Real(0);
      if (std::isnan(gi)) {
        throw std::runtime_error("adam: NaN gradient in parameter '" + name + "' at element " +
                                 std::to_string(i));
      }
      m[i] = b1 * m[i] + (Real(1) - b1) * gi;
      v[i] = b2 * v[i] + (Real(1) - b2) * gi * gi;
      const Real mhat = m[i] / static_cast<Real>(bc1);
      const Real vhat = v[i] / static_cast<Real>(bc2);
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// Scales all gradients by clip/norm when the global L2 norm exceeds clip.
template <typename Real>
double clip_grad_norm(model::Parameters<Real>& params, double clip) {
  double sq = 0.0;
  for (const auto& [name, t] : params.named) {
    if (!t.has_grad()) continue;
    for (Real g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > clip && norm > 0.0) {
    const Real f = static_cast<Real>(clip / norm);
    for (auto& [name, t] : params.named) {
      if (!t.has_grad()) continue;
      for (Real& g : t.grad_mut()) g *= f;
    }
  }
  return norm;
}

template <typename Real>
struct TrainResult {
  model::Parameters<Real> params;
  TrainLog log;
};

// Seeded epoch loop. Independent RNG streams for init / batch order /
// permutations / dropout keep MLE and gamma=0 ORIG on identical parameter
// trajectories. When checkpoint_dir is non-empty, checkpoint_last.orgc is
// refreshed (atomically) after every epoch and checkpoint_final.orgc at the
// end.
template <typename Real>
TrainResult<Real> train(const model::ModelConfig& mcfg, const data::Dataset& dataset,
                        const TrainConfig& tcfg, const std::filesystem::path& checkpoint_dir = {},
                        const std::function<void(int, const EpochStats&)>& on_epoch = {}) {
  mcfg.validate();
  tcfg.validate();
  if (dataset.samples.empty()) throw std::invalid_argument("train: empty dataset");

  Rng rng_init(tcfg.seed, 0);
  Rng rng_data(tcfg.seed, 1);
  Rng rng_perm(tcfg.seed, 2);
  Rng rng_dropout(tcfg.seed, 3);
  Rng* dropout = mcfg.dropout_rate > 0.0 ? &rng_dropout : nullptr;

  TrainResult<Real> result;
  result.params = model::init_params<Real>(mcfg, rng_init);
  OptimizerState<Real> opt;

  const int n = static_cast<int>(dataset.samples.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng_data.uniform_int(i + 1))]);
    }
    double nll_sum = 0.0, kl_sum = 0.0;
    long token_sum = 0;
    for (int start = 0; start < n; start += tcfg.batch_size) {
      const int stop = std::min(n, start + tcfg.batch_size);
      std::vector<data::DialogueSample> batch;
      batch.reserve(static_cast<std::size_t>(stop - start));
      long batch_tokens = 0;
      for (int i = start; i < stop; ++i) {
        batch.push_back(dataset.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
      }
      for (const auto& s : batch) batch_tokens += static_cast<long>(s.response.size()) + 1;  // + <eos>

      ad::Tape<Real> tape;
      ad::Tensor<Real> total;
      double nll_v = 0.0, kl_v = 0.0;
      if (tcfg.objective == Objective::mle) {
        total = nll_batch(tape, result.params, mcfg, batch, dropout);
        nll_v = static_cast<double>(total.scalar());
      } else {
        auto loss = orig_batch_loss(tape, result.params, mcfg, batch, rng_perm, tcfg, dropout);
        total = loss.total;
        nll_v = static_cast<double>(loss.nll_part.scalar());
        kl_v = static_cast<double>(loss.kl_part.scalar());
      }
      result.params.clear_grads();
      tape.backward(total);
      if (tcfg.grad_clip_norm) clip_grad_norm(result.params, *tcfg.grad_clip_norm);
      adam_step(result.params, opt, tcfg);

      nll_sum += nll_v * static_cast<double>(batch_tokens);
      kl_sum += kl_v * static_cast<double>(batch_tokens);
      token_sum += batch_tokens;
    }
    EpochStats stats;
    stats.mean_nll = nll_sum / static_cast<double>(token_sum);
    stats.mean_kl = kl_sum / static_cast<double>(token_sum);
    stats.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(stats);
    if (!checkpoint_dir.empty()) {
      model::save_checkpoint(checkpoint_dir / "checkpoint_last.orgc", result.params);
    }
    if (on_epoch) on_epoch(epoch, stats);
  }
  if (!checkpoint_dir.empty()) {
    model::save_checkpoint(checkpoint_dir / "checkpoint_final.orgc", result.params);
  }
  return result;
}

inline const char* objective_name(Objective o) { return o == Objective::mle ? "mle" : "orig"; }
inline const char* kl_direction_name(KlDirection k) {
  switch (k) {
    case KlDirection::forward: return "forward";
    case KlDirection::reverse: return "reverse";
    default: return "symmetric";
  }
}

}  // namespace orderlab::train
