#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "orderlab/rng.hpp"
#include "orderlab/tape.hpp"
#include "orderlab/tensor.hpp"

namespace orderlab::model {

enum class Arch { decoder_only, encoder_decoder };

inline const char* arch_name(Arch a) {
  return a == Arch::decoder_only ? "decoder_only" : "encoder_decoder";
}

struct ModelConfig {
  Arch arch = Arch::decoder_only;
  int vocab_size = 0;
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 256;
  int max_seq_len = 64;
  double dropout_rate = 0.0;
  bool tie_embeddings = true;

  void validate() const {
    if (vocab_size <= 0) throw std::invalid_argument("model config: vocab_size must be positive");
    if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || d_ff <= 0 || max_seq_len <= 0) {
      throw std::invalid_argument("model config: dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      throw std::invalid_argument("model config: dropout_rate must be in [0,1)");
    }
  }
};

// Named parameter map. std::map keeps iteration in sorted-name order, which
// fixes the init draw order and the checkpoint payload layout.
template <typename Real>
struct Parameters {
  std::map<std::string, ad::Tensor<Real>> named;

  ad::Tensor<Real>& at(const std::string& name) {
    auto it = named.find(name);
    if (it == named.end()) throw std::out_of_range("parameters: missing tensor '" + name + "'");
    return it->second;
  }
  const ad::Tensor<Real>& at(const std::string& name) const {
    auto it = named.find(name);
    if (it == named.end()) throw std::out_of_range("parameters: missing tensor '" + name + "'");
    return it->second;
  }

  void set_requires_grad(bool b) {
    for (auto& [k, v] : named) v.set_requires_grad(b);
  }
  void clear_grads() {
    for (auto& [k, v] : named) v.clear_grad();
  }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [k, v] : named) n += v.numel();
    return n;
  }
};

namespace detail {

inline void add_attn_shapes(std::map<std::string, std::vector<int>>& m, const std::string& prefix, int d) {
  for (const char* w : {".wq", ".wk", ".wv", ".wo"}) m[prefix + w] = {d, d};
  for (const char* b : {".bq", ".bk", ".bv", ".bo"}) m[prefix + b] = {d};
}

inline void add_block_shapes(std::map<std::string, std::vector<int>>& m, const std::string& prefix, int d,
                             int f, bool cross) {
  m[prefix + ".ln1.gain"] = {d};
  m[prefix + ".ln1.bias"] = {d};
  add_attn_shapes(m, prefix + ".attn", d);
  m[prefix + ".ln2.gain"] = {d};
  m[prefix + ".ln2.bias"] = {d};
  if (cross) {
    add_attn_shapes(m, prefix + ".xattn", d);
    m[prefix + ".ln3.gain"] = {d};
    m[prefix + ".ln3.bias"] = {d};
  }
  m[prefix + ".mlp.w1"] = {d, f};
  m[prefix + ".mlp.b1"] = {f};
  m[prefix + ".mlp.w2"] = {f, d};
  m[prefix + ".mlp.b2"] = {d};
}

}  // namespace detail

// The full name -> shape contract for a config; init and checkpoint loading
// both validate against it.
inline std::map<std::string, std::vector<int>> declared_shapes(const ModelConfig& cfg) {
  cfg.validate();
  std::map<std::string, std::vector<int>> m;
  const int d = cfg.d_model, f = cfg.d_ff;
  m["tok_emb"] = {cfg.vocab_size, d};
  if (cfg.arch == Arch::decoder_only) {
    m["pos_emb"] = {cfg.max_seq_len, d};
    for (int i = 0; i < cfg.n_layers; ++i) {
      detail::add_block_shapes(m, "dec." + std::to_string(i), d, f, false);
    }
    m["ln_f.gain"] = {d};
    m["ln_f.bias"] = {d};
  } else {
    m["enc_pos_emb"] = {cfg.max_seq_len, d};
    m["dec_pos_emb"] = {cfg.max_seq_len, d};
    for (int i = 0; i < cfg.n_layers; ++i) {
      detail::add_block_shapes(m, "enc." + std::to_string(i), d, f, false);
      detail::add_block_shapes(m, "dec." + std::to_string(i), d, f, true);
    }
    m["enc_ln_f.gain"] = {d};
    m["enc_ln_f.bias"] = {d};
    m["dec_ln_f.gain"] = {d};
    m["dec_ln_f.bias"] = {d};
  }
  if (!cfg.tie_embeddings) m["out_proj"] = {cfg.vocab_size, d};
  return m;
}

// Closed-form parameter count.
//   decoder_only:     V*D + S*D + L*(4D^2 + 4D + 4D + 2DF + F + D) + 2D [+ V*D untied]
//   encoder_decoder:  V*D + 2*S*D + L*(4D^2 + 8D + 2DF + F + D)
//                          + L*(8D^2 + 8D + 6D + 2DF + F + D) + 4D [+ V*D untied]
// where the per-block pieces are attention (4D^2 + 4D per attention), two or
// three layer norms (2D each), and the MLP (2DF + F + D).
inline std::size_t param_count(const ModelConfig& cfg) {
  const std::size_t V = cfg.vocab_size, D = cfg.d_model, F = cfg.d_ff, S = cfg.max_seq_len,
                    L = cfg.n_layers;
  const std::size_t attn = 4 * D * D + 4 * D;
  const std::size_t mlp = 2 * D * F + F + D;
  const std::size_t ln = 2 * D;
  std::size_t total;
  if (cfg.arch == Arch::decoder_only) {
    total = V * D + S * D + L * (attn + mlp + 2 * ln) + ln;
  } else {
    const std::size_t enc_block = attn + mlp + 2 * ln;
    const std::size_t dec_block = 2 * attn + mlp + 3 * ln;
    total = V * D + 2 * S * D + L * (enc_block + dec_block) + 2 * ln;
  }
  if (!cfg.tie_embeddings) total += V * D;
  return total;
}

// Weights ~ Normal(0, 0.02), layer-norm gains 1, all biases 0.
template <typename Real>
Parameters<Real> init_params(const ModelConfig& cfg, Rng& rng) {
  Parameters<Real> p;
  for (const auto& [name, shape] : declared_shapes(cfg)) {
    if (shape.size() == 1) {
      const Real fill = name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0 ? Real(1) : Real(0);
      p.named.emplace(name, ad::Tensor<Real>::filled(shape, fill, true));
    } else {
      p.named.emplace(name, ad::Tensor<Real>::randn(shape, rng, Real(0), Real(0.02), true));
    }
  }
  return p;
}

template <typename Real>
void validate_parameters(const Parameters<Real>& p, const ModelConfig& cfg) {
  const auto decl = declared_shapes(cfg);
  for (const auto& [name, shape] : decl) {
    auto it = p.named.find(name);
    if (it == p.named.end()) throw std::invalid_argument("parameters: missing '" + name + "'");
    if (it->second.shape() != shape) {
      throw std::invalid_argument("parameters: '" + name + "' has shape " + ad::shape_str(it->second.shape()) +
                                  ", declared " + ad::shape_str(shape));
    }
  }
  for (const auto& [name, t] : p.named) {
    if (!decl.count(name)) throw std::invalid_argument("parameters: undeclared extra tensor '" + name + "'");
  }
}

namespace detail {

constexpr double kMaskValue = -1e9;

template <typename Real>
ad::Tensor<Real> causal_mask(int t) {
  ad::Tensor<Real> m = ad::Tensor<Real>::zeros({t, t});
  Real* v = m.data_mut();
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) v[static_cast<std::size_t>(i) * t + j] = Real(kMaskValue);
  return m;
}

template <typename Real>
ad::Tensor<Real> dropout(ad::Tape<Real>& tape, const ad::Tensor<Real>& x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  const Real keep = Real(1.0 - rate);
  ad::Tensor<Real> mask = ad::Tensor<Real>::zeros(x.shape());
  Real* mv = mask.data_mut();
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    mv[i] = rng->uniform01() < 1.0 - rate ? Real(1) / keep : Real(0);
  }
  return tape.mul(x, mask);
}

// q from `x`, k/v from `kv`; causal masks only make sense when x == kv.
template <typename Real>
ad::Tensor<Real> attention(ad::Tape<Real>& tape, const Parameters<Real>& p, const std::string& prefix,
                           const ad::Tensor<Real>& x, const ad::Tensor<Real>& kv, const ModelConfig& cfg,
                           bool causal) {
  const int tq = x.shape()[0];
  const int tk = kv.shape()[0];
  const int d = cfg.d_model, h = cfg.n_heads, dh = d / h;
  auto q = tape.add(tape.matmul(x, p.at(prefix + ".wq")), p.at(prefix + ".bq"));
  auto k = tape.add(tape.matmul(kv, p.at(prefix + ".wk")), p.at(prefix + ".bk"));
  auto v = tape.add(tape.matmul(kv, p.at(prefix + ".wv")), p.at(prefix + ".bv"));
  auto qh = tape.transpose_01(tape.reshape(q, {tq, h, dh}));  // [h, tq, dh]
  auto kh = tape.transpose_01(tape.reshape(k, {tk, h, dh}));
  auto vh = tape.transpose_01(tape.reshape(v, {tk, h, dh}));
  auto scores = tape.scale(tape.matmul(qh, kh, true), Real(1) / std::sqrt(Real(dh)));  // [h, tq, tk]
  if (causal) scores = tape.add(scores, causal_mask<Real>(tq));
  auto attnw = tape.softmax(scores, 2);
  auto ctx = tape.reshape(tape.transpose_01(tape.matmul(attnw, vh)), {tq, d});
  return tape.add(tape.matmul(ctx, p.at(prefix + ".wo")), p.at(prefix + ".bo"));
}

template <typename Real>
ad::Tensor<Real> mlp(ad::Tape<Real>& tape, const Parameters<Real>& p, const std::string& prefix,
                     const ad::Tensor<Real>& x) {
  auto u = tape.gelu(tape.add(tape.matmul(x, p.at(prefix + ".w1")), p.at(prefix + ".b1")));
  return tape.add(tape.matmul(u, p.at(prefix + ".w2")), p.at(prefix + ".b2"));
}

template <typename Real>
ad::Tensor<Real> norm(ad::Tape<Real>& tape, const Parameters<Real>& p, const std::string& prefix,
                      const ad::Tensor<Real>& x) {
  return tape.layer_norm(x, p.at(prefix + ".gain"), p.at(prefix + ".bias"), Real(1e-5));
}

template <typename Real>
ad::Tensor<Real> output_logits(ad::Tape<Real>& tape, const Parameters<Real>& p, const ModelConfig& cfg,
                               const ad::Tensor<Real>& x) {
  return tape.matmul(x, cfg.tie_embeddings ? p.at("tok_emb") : p.at("out_proj"), true);
}

inline std::vector<int> iota_ids(int t) {
  std::vector<int> ids(static_cast<std::size_t>(t));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

inline void check_len(std::size_t t, const ModelConfig& cfg, const char* what) {
  if (t == 0) throw std::invalid_argument(std::string(what) + ": empty sequence");
  if (static_cast<int>(t) > cfg.max_seq_len) {
    throw std::length_error(std::string(what) + ": sequence length " + std::to_string(t) +
                            " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
}

}  // namespace detail

// Pre-norm causal transformer; logits at position t depend only on tokens <= t.
template <typename Real>
ad::Tensor<Real> forward_decoder_only(ad::Tape<Real>& tape, const Parameters<Real>& p, const ModelConfig& cfg,
                                      const std::vector<int>& token_ids, Rng* dropout_rng = nullptr) {
  detail::check_len(token_ids.size(), cfg, "forward_decoder_only");
  const int t = static_cast<int>(token_ids.size());
  auto x = tape.add(tape.embedding_lookup(p.at("tok_emb"), token_ids),
                    tape.embedding_lookup(p.at("pos_emb"), detail::iota_ids(t)));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string pre = "dec." + std::to_string(i);
    auto h = detail::norm(tape, p, pre + ".ln1", x);
    auto a = detail::attention(tape, p, pre + ".attn", h, h, cfg, true);
    x = tape.add(x, detail::dropout(tape, a, cfg.dropout_rate, dropout_rng));
    auto m = detail::mlp(tape, p, pre + ".mlp", detail::norm(tape, p, pre + ".ln2", x));
    x = tape.add(x, detail::dropout(tape, m, cfg.dropout_rate, dropout_rng));
  }
  return detail::output_logits(tape, p, cfg, detail::norm(tape, p, "ln_f", x));
}

// Bidirectional encoder over the source, causal decoder with cross-attention.
template <typename Real>
ad::Tensor<Real> forward_encoder_decoder(ad::Tape<Real>& tape, const Parameters<Real>& p,
                                         const ModelConfig& cfg, const std::vector<int>& source_ids,
                                         const std::vector<int>& target_ids, Rng* dropout_rng = nullptr) {
  detail::check_len(source_ids.size(), cfg, "forward_encoder_decoder(source)");
  detail::check_len(target_ids.size(), cfg, "forward_encoder_decoder(target)");
  const int s = static_cast<int>(source_ids.size());
  const int t = static_cast<int>(target_ids.size());

  auto xs = tape.add(tape.embedding_lookup(p.at("tok_emb"), source_ids),
                     tape.embedding_lookup(p.at("enc_pos_emb"), detail::iota_ids(s)));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string pre = "enc." + std::to_string(i);
    auto h = detail::norm(tape, p, pre + ".ln1", xs);
    auto a = detail::attention(tape, p, pre + ".attn", h, h, cfg, false);
    xs = tape.add(xs, detail::dropout(tape, a, cfg.dropout_rate, dropout_rng));
    auto m = detail::mlp(tape, p, pre + ".mlp", detail::norm(tape, p, pre + ".ln2", xs));
    xs = tape.add(xs, detail::dropout(tape, m, cfg.dropout_rate, dropout_rng));
  }
  auto memory = detail::norm(tape, p, "enc_ln_f", xs);

  auto xt = tape.add(tape.embedding_lookup(p.at("tok_emb"), target_ids),
                     tape.embedding_lookup(p.at("dec_pos_emb"), detail::iota_ids(t)));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string pre = "dec." + std::to_string(i);
    auto h = detail::norm(tape, p, pre + ".ln1", xt);
    auto a = detail::attention(tape, p, pre + ".attn", h, h, cfg, true);
    xt = tape.add(xt, detail::dropout(tape, a, cfg.dropout_rate, dropout_rng));
    auto c = detail::attention(tape, p, pre + ".xattn", detail::norm(tape, p, pre + ".ln2", xt), memory,
                               cfg, false);
    xt = tape.add(xt, detail::dropout(tape, c, cfg.dropout_rate, dropout_rng));
    auto m = detail::mlp(tape, p, pre + ".mlp", detail::norm(tape, p, pre + ".ln3", xt));
    xt = tape.add(xt, detail::dropout(tape, m, cfg.dropout_rate, dropout_rng));
  }
  return detail::output_logits(tape, p, cfg, detail::norm(tape, p, "dec_ln_f", xt));
}

// Logits aligned so row i predicts targets[i]; shared by the NLL and KL terms.
template <typename Real>
struct TeacherForced {
  ad::Tensor<Real> logits;         // [T-1, V]
  std::vector<int> targets;        // length T-1
  std::vector<std::uint8_t> mask;  // length T-1, marks supervised positions
};

template <typename Real>
TeacherForced<Real> teacher_forced_decoder(ad::Tape<Real>& tape, const Parameters<Real>& p,
                                           const ModelConfig& cfg, const std::vector<int>& ids,
                                           const std::vector<std::uint8_t>& response_mask,
                                           Rng* dropout_rng = nullptr) {
  if (ids.size() != response_mask.size() || ids.size() < 2) {
    throw std::invalid_argument("teacher_forced_decoder: ids/mask length mismatch or sequence too short");
  }
  auto logits = forward_decoder_only(tape, p, cfg, ids, dropout_rng);
  const int t = static_cast<int>(ids.size());
  TeacherForced<Real> out{tape.slice_rows(logits, 0, t - 1),
                          {ids.begin() + 1, ids.end()},
                          {response_mask.begin() + 1, response_mask.end()}};
  return out;
}

template <typename Real>
TeacherForced<Real> teacher_forced_encdec(ad::Tape<Real>& tape, const Parameters<Real>& p,
                                          const ModelConfig& cfg, const std::vector<int>& source_ids,
                                          const std::vector<int>& target_ids,
                                          const std::vector<std::uint8_t>& target_mask,
                                          Rng* dropout_rng = nullptr) {
  if (target_ids.size() != target_mask.size() || target_ids.size() < 2) {
    throw std::invalid_argument("teacher_forced_encdec: target/mask length mismatch or target too short");
  }
  auto logits = forward_encoder_decoder(tape, p, cfg, source_ids, target_ids, dropout_rng);
  const int t = static_cast<int>(target_ids.size());
  TeacherForced<Real> out{tape.slice_rows(logits, 0, t - 1),
                          {target_ids.begin() + 1, target_ids.end()},
                          {target_mask.begin() + 1, target_mask.end()}};
  return out;
}

template <typename Real>
struct SequenceLogProbs {
  std::vector<Real> per_position;  // log P(target_i | ...) for masked rows, 0 elsewhere
  Real masked_mean;
};

// Log-space view of the chain-rule product over response tokens; the masked
// mean is exactly the negated cross_entropy_nll of the same inputs.
template <typename Real>
SequenceLogProbs<Real> sequence_log_probs(const ad::Tensor<Real>& logits, const std::vector<int>& targets,
                                          const std::vector<std::uint8_t>& mask) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw std::invalid_argument("sequence_log_probs: logits must be 2-D");
  const int rows = s[0], vocab = s[1];
  if (static_cast<int>(targets.size()) != rows || static_cast<int>(mask.size()) != rows) {
    throw std::invalid_argument("sequence_log_probs: targets/mask length must match logits rows");
  }
  SequenceLogProbs<Real> out;
  out.per_position.assign(static_cast<std::size_t>(rows), Real(0));
  Real sum = Real(0);
  int count = 0;
  for (int t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || targets[t] >= vocab) {
      throw std::out_of_range("sequence_log_probs: target outside vocabulary at row " + std::to_string(t));
    }
    const Real* row = logits.data() + static_cast<std::size_t>(t) * vocab;
    const Real lp = row[targets[t]] - ad::kernels::log_sum_exp_row(row, vocab);
    out.per_position[static_cast<std::size_t>(t)] = lp;
    sum += lp;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("sequence_log_probs: mask selects no positions");
  out.masked_mean = sum / static_cast<Real>(count);
  return out;
}

}  // namespace orderlab::model
