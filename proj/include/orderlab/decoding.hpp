#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "orderlab/data.hpp"
#include "orderlab/infer.hpp"
#include "orderlab/model.hpp"
#include "orderlab/rng.hpp"

namespace orderlab::decode {

enum class Strategy { greedy, topk_topp };

struct DecodeConfig {
  Strategy strategy = Strategy::topk_topp;
  int k = 50;
  double p = 0.9;
  int max_new_tokens = 32;
  double temperature = 1.0;
  std::uint64_t seed = 42;

  void validate() const {
    if (k < 1) throw std::invalid_argument("decode config: k must be >= 1");
    if (p <= 0.0 || p > 1.0) throw std::invalid_argument("decode config: p must be in (0,1]");
    if (max_new_tokens < 1) throw std::invalid_argument("decode config: max_new_tokens must be >= 1");
    if (temperature <= 0.0) throw std::invalid_argument("decode config: temperature must be > 0");
  }
};

inline const char* strategy_name(Strategy s) { return s == Strategy::greedy ? "greedy" : "topk_topp"; }

// Top-k, then the smallest high-probability prefix reaching cumulative
// probability >= p (the crossing token is kept; ties break toward the lower
// token id). Returns a full-vocabulary probability vector that sums to 1.
template <typename Real>
std::vector<double> filter_logits_topk_topp(std::span<const Real> logits, int k, double p) {
  const int v = static_cast<int>(logits.size());
  if (v == 0) throw std::invalid_argument("filter_logits_topk_topp: empty logits");
  std::vector<int> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)]) {
      return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  const int kept = std::min(k, v);
  // Softmax over the kept set only.
  double mx = static_cast<double>(logits[static_cast<std::size_t>(order[0])]);
  std::vector<double> probs(static_cast<std::size_t>(kept));
  double sum = 0.0;
  for (int i = 0; i < kept; ++i) {
    probs[static_cast<std::size_t>(i)] =
        std::exp(static_cast<double>(logits[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]) - mx);
    sum += probs[static_cast<std::size_t>(i)];
  }
  for (auto& q : probs) q /= sum;
  // Nucleus prefix over the kept set (already in descending-probability,
  // lowest-id-first order).
  int take = kept;
  double cum = 0.0;
  for (int i = 0; i < kept; ++i) {
    cum += probs[static_cast<std::size_t>(i)];
    if (cum >= p) {
      take = i + 1;
      break;
    }
  }
  double kept_mass = 0.0;
  for (int i = 0; i < take; ++i) kept_mass += probs[static_cast<std::size_t>(i)];
  std::vector<double> out(static_cast<std::size_t>(v), 0.0);
  for (int i = 0; i < take; ++i) {
    out[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
        probs[static_cast<std::size_t>(i)] / kept_mass;
  }
  return out;
}

namespace detail {

template <typename Real>
int argmax_low_id(const std::vector<Real>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

// One uniform draw per emitted token; cumulative walk in token-id order.
inline int sample_index(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform01();
  double cum = 0.0;
  int last_nonzero = 0;
  for (int i = 0; i < static_cast<int>(probs.size()); ++i) {
    const double q = probs[static_cast<std::size_t>(i)];
    if (q <= 0.0) continue;
    last_nonzero = i;
    cum += q;
    if (u < cum) return i;
  }
  return last_nonzero;
}

template <typename Real>
int pick_token(const std::vector<Real>& logits, const DecodeConfig& cfg, Rng& rng) {
  if (cfg.strategy == Strategy::greedy) return argmax_low_id(logits);
  std::vector<Real> scaled;
  const std::vector<Real>* src = &logits;
  if (cfg.temperature != 1.0) {
    scaled.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      scaled[i] = static_cast<Real>(static_cast<double>(logits[i]) / cfg.temperature);
    }
    src = &scaled;
  }
  const auto probs = filter_logits_topk_topp<Real>(std::span<const Real>(src->data(), src->size()), cfg.k,
                                                   cfg.p);
  return sample_index(probs, rng);
}

// Shared autoregressive loop; Session is DecoderSession or EncDecSession.
template <typename Real, typename Session>
std::vector<int> generate(Session& session, const std::vector<Real>* prefill_logits,
                          const model::ModelConfig& mcfg, const DecodeConfig& cfg, Rng& rng) {
  std::vector<int> out;
  const std::vector<Real>* logits = prefill_logits;
  for (int i = 0; i < cfg.max_new_tokens; ++i) {
    const int tok = pick_token(*logits, cfg, rng);
    if (tok == data::kEos) break;
    out.push_back(tok);
    if (session.length() >= mcfg.max_seq_len) break;  // model capacity reached
    logits = &session.step(tok);
  }
  return out;
}

}  // namespace detail

// Autoregressive decode from a serialized `<bos> ... <res>` prompt. Greedy is
// RNG-free; sampling consumes exactly one draw per emitted token. Stops at
// <eos>, max_new_tokens, or the model's max_seq_len.
template <typename Real>
std::vector<int> decode_decoder_only(const model::Parameters<Real>& params, const model::ModelConfig& mcfg,
                                     const std::vector<int>& prompt_ids, const DecodeConfig& cfg, Rng& rng) {
  cfg.validate();
  if (prompt_ids.empty()) throw std::invalid_argument("decode: empty prompt");
  model::DecoderSession<Real> session(params, mcfg);
  const std::vector<Real>* logits = nullptr;
  for (int id : prompt_ids) logits = &session.step(id);
  return detail::generate(session, logits, mcfg, cfg, rng);
}

// Encoder-decoder decode conditioned on the source; the decoder starts from
// <bos>.
template <typename Real>
std::vector<int> decode_encoder_decoder(const model::Parameters<Real>& params,
                                        const model::ModelConfig& mcfg, const std::vector<int>& source_ids,
                                        const DecodeConfig& cfg, Rng& rng) {
  cfg.validate();
  model::EncDecSession<Real> session(params, mcfg, source_ids);
  const std::vector<Real>* logits = &session.step(data::kBos);
  return detail::generate(session, logits, mcfg, cfg, rng);
}

// Dispatches on the architecture; `sample` supplies conditioning, `pi` the
// persona ordering.
template <typename Real>
std::vector<int> decode_response(const model::Parameters<Real>& params, const model::ModelConfig& mcfg,
                                 const data::DialogueSample& sample, const data::Permutation& pi,
                                 const DecodeConfig& cfg, Rng& rng) {
  if (mcfg.arch == model::Arch::decoder_only) {
    return decode_decoder_only(params, mcfg, data::serialize_decoder_prompt(sample, pi), cfg, rng);
  }
  auto ser = data::serialize_encdec_input(sample, pi, mcfg.max_seq_len);
  return decode_encoder_decoder(params, mcfg, ser.source_ids, cfg, rng);
}

}  // namespace orderlab::decode
