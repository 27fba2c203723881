#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "orderlab/kernels.hpp"
#include "orderlab/model.hpp"

namespace orderlab::model {

// No-grad incremental forward passes for decoding. These run the same
// kernels in the same loop order as the tape forward, so step() logits are
// bitwise identical to the corresponding row of forward_decoder_only /
// forward_encoder_decoder (checked in tests).
namespace infer_detail {

template <typename Real>
void linear_row(const ad::Tensor<Real>& w, const ad::Tensor<Real>& b, const Real* x, Real* y, int d_in,
                int d_out) {
  for (int j = 0; j < d_out; ++j) y[j] = Real(0);
  ad::kernels::matmul_acc(x, w.data(), y, 1, d_in, d_out);
  const Real* bias = b.data();
  for (int j = 0; j < d_out; ++j) y[j] += bias[j];
}

// Attention of one query row against cached keys/values laid out [t, d]
// with head h in columns [h*dh, (h+1)*dh).
template <typename Real>
void attend_row(const Real* q, const std::vector<Real>& kcache, const std::vector<Real>& vcache, int t,
                int n_heads, int dh, Real inv_sqrt_dh, Real* ctx, std::vector<Real>& scores) {
  const int d = n_heads * dh;
  scores.resize(static_cast<std::size_t>(t));
  for (int h = 0; h < n_heads; ++h) {
    const int base = h * dh;
    for (int s = 0; s < t; ++s) {
      const Real* krow = kcache.data() + static_cast<std::size_t>(s) * d + base;
      Real acc = Real(0);
      for (int j = 0; j < dh; ++j) acc += q[base + j] * krow[j];
      scores[static_cast<std::size_t>(s)] = inv_sqrt_dh * acc;
    }
    ad::kernels::softmax_row(scores.data(), t);
    for (int j = 0; j < dh; ++j) ctx[base + j] = Real(0);
    for (int s = 0; s < t; ++s) {
      const Real w = scores[static_cast<std::size_t>(s)];
      const Real* vrow = vcache.data() + static_cast<std::size_t>(s) * d + base;
      for (int j = 0; j < dh; ++j) ctx[base + j] += w * vrow[j];
    }
  }
}

}  // namespace infer_detail

template <typename Real>
class DecoderSession {
 public:
  DecoderSession(const Parameters<Real>& params, const ModelConfig& cfg) : p_(&params), cfg_(cfg) {
    if (cfg_.arch != Arch::decoder_only) {
      throw std::invalid_argument("DecoderSession: config is not decoder_only");
    }
    cfg_.validate();
    layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
    logits_.resize(static_cast<std::size_t>(cfg_.vocab_size));
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    x_.resize(d);
    h_.resize(d);
    q_.resize(d);
    ctx_.resize(d);
    u_.resize(static_cast<std::size_t>(cfg_.d_ff));
    m_.resize(d);
  }

  void reset() {
    t_ = 0;
    for (auto& l : layers_) {
      l.k.clear();
      l.v.clear();
    }
  }

  int length() const { return t_; }

  // Feeds one token; returns the logits that predict the following token.
  const std::vector<Real>& step(int token_id) {
    if (t_ >= cfg_.max_seq_len) {
      throw std::length_error("DecoderSession: sequence length " + std::to_string(t_ + 1) +
                              " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    const int d = cfg_.d_model;
    const int dh = d / cfg_.n_heads;
    const Real inv_sqrt_dh = Real(1) / std::sqrt(Real(dh));
    const Real* tok = row(p_->at("tok_emb"), token_id, "token id");
    const Real* pos = p_->at("pos_emb").data() + static_cast<std::size_t>(t_) * d;
    for (int j = 0; j < d; ++j) x_[j] = tok[j] + pos[j];

    for (int li = 0; li < cfg_.n_layers; ++li) {
      const std::string pre = "dec." + std::to_string(li);
      auto& cache = layers_[static_cast<std::size_t>(li)];
      ad::kernels::layer_norm_row(x_.data(), p_->at(pre + ".ln1.gain").data(), p_->at(pre + ".ln1.bias").data(),
                              Real(1e-5), h_.data(), static_cast<Real*>(nullptr), d);
      infer_detail::linear_row(p_->at(pre + ".attn.wq"), p_->at(pre + ".attn.bq"), h_.data(), q_.data(), d, d);
      const std::size_t old = cache.k.size();
      cache.k.resize(old + d);
      cache.v.resize(old + d);
      infer_detail::linear_row(p_->at(pre + ".attn.wk"), p_->at(pre + ".attn.bk"), h_.data(),
                               cache.k.data() + old, d, d);
      infer_detail::linear_row(p_->at(pre + ".attn.wv"), p_->at(pre + ".attn.bv"), h_.data(),
                               cache.v.data() + old, d, d);
      infer_detail::attend_row(q_.data(), cache.k, cache.v, t_ + 1, cfg_.n_heads, dh, inv_sqrt_dh,
                               ctx_.data(), scores_);
      infer_detail::linear_row(p_->at(pre + ".attn.wo"), p_->at(pre + ".attn.bo"), ctx_.data(), m_.data(), d, d);
      for (int j = 0; j < d; ++j) x_[j] += m_[j];

      ad::kernels::layer_norm_row(x_.data(), p_->at(pre + ".ln2.gain").data(), p_->at(pre + ".ln2.bias").data(),
                              Real(1e-5), h_.data(), static_cast<Real*>(nullptr), d);
      infer_detail::linear_row(p_->at(pre + ".mlp.w1"), p_->at(pre + ".mlp.b1"), h_.data(), u_.data(), d,
                               cfg_.d_ff);
      for (int j = 0; j < cfg_.d_ff; ++j) u_[j] = ad::kernels::gelu_scalar(u_[j]);
      infer_detail::linear_row(p_->at(pre + ".mlp.w2"), p_->at(pre + ".mlp.b2"), u_.data(), m_.data(),
                               cfg_.d_ff, d);
      for (int j = 0; j < d; ++j) x_[j] += m_[j];
    }

    ad::kernels::layer_norm_row(x_.data(), p_->at("ln_f.gain").data(), p_->at("ln_f.bias").data(), Real(1e-5),
                            h_.data(), static_cast<Real*>(nullptr), d);
    const auto& out_w = cfg_.tie_embeddings ? p_->at("tok_emb") : p_->at("out_proj");
    ad::kernels::matmul_bt(h_.data(), out_w.data(), logits_.data(), 1, d, cfg_.vocab_size);
    ++t_;
    return logits_;
  }

 private:
  struct LayerCache {
    std::vector<Real> k, v;  // [t, d_model]
  };

  const Real* row(const ad::Tensor<Real>& t, int r, const char* what) const {
    if (r < 0 || r >= t.shape()[0]) {
      throw std::out_of_range(std::string("DecoderSession: ") + what + " " + std::to_string(r) +
                              " outside " + ad::shape_str(t.shape()));
    }
    return t.data() + static_cast<std::size_t>(r) * t.shape()[1];
  }

  const Parameters<Real>* p_;
  ModelConfig cfg_;
  std::vector<LayerCache> layers_;
  std::vector<Real> logits_, x_, h_, q_, ctx_, u_, m_, scores_;
  int t_ = 0;
};

template <typename Real>
class EncDecSession {
 public:
  EncDecSession(const Parameters<Real>& params, const ModelConfig& cfg, const std::vector<int>& source_ids)
      : p_(&params), cfg_(cfg), src_len_(static_cast<int>(source_ids.size())) {
    if (cfg_.arch != Arch::encoder_decoder) {
      throw std::invalid_argument("EncDecSession: config is not encoder_decoder");
    }
    cfg_.validate();
    if (src_len_ == 0) throw std::invalid_argument("EncDecSession: empty source");
    if (src_len_ > cfg_.max_seq_len) {
      throw std::length_error("EncDecSession: source length " + std::to_string(src_len_) +
                              " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
    logits_.resize(static_cast<std::size_t>(cfg_.vocab_size));
    x_.resize(d);
    h_.resize(d);
    q_.resize(d);
    ctx_.resize(d);
    u_.resize(static_cast<std::size_t>(cfg_.d_ff));
    m_.resize(d);
    run_encoder(source_ids);
  }

  void reset_decoder() {
    t_ = 0;
    for (auto& l : layers_) {
      l.k.clear();
      l.v.clear();
    }
  }

  int length() const { return t_; }

  const std::vector<Real>& step(int token_id) {
    if (t_ >= cfg_.max_seq_len) {
      throw std::length_error("EncDecSession: target length " + std::to_string(t_ + 1) +
                              " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    const int d = cfg_.d_model;
    const int dh = d / cfg_.n_heads;
    const Real inv_sqrt_dh = Real(1) / std::sqrt(Real(dh));
    if (token_id < 0 || token_id >= cfg_.vocab_size) {
      throw std::out_of_range("EncDecSession: token id " + std::to_string(token_id) + " outside vocabulary");
    }
    const Real* tok = p_->at("tok_emb").data() + static_cast<std::size_t>(token_id) * d;
    const Real* pos = p_->at("dec_pos_emb").data() + static_cast<std::size_t>(t_) * d;
    for (int j = 0; j < d; ++j) x_[j] = tok[j] + pos[j];

    for (int li = 0; li < cfg_.n_layers; ++li) {
      const std::string pre = "dec." + std::to_string(li);
      auto& cache = layers_[static_cast<std::size_t>(li)];
      ad::kernels::layer_norm_row(x_.data(), p_->at(pre + ".ln1.gain").data(), p_->at(pre + ".ln1.bias").data(),
                              Real(1e-5), h_.data(), static_cast<Real*>(nullptr), d);
      infer_detail::linear_row(p_->at(pre + ".attn.wq"), p_->at(pre + ".attn.bq"), h_.data(), q_.data(), d, d);
      const std::size_t old = cache.k.size();
      cache.k.resize(old + d);
      cache.v.resize(old + d);
      infer_detail::linear_row(p_->at(pre + ".attn.wk"), p_->at(pre + ".attn.bk"), h_.data(),
                               cache.k.data() + old, d, d);
      infer_detail::linear_row(p_->at(pre + ".attn.wv"), p_->at(pre + ".attn.bv"), h_.data(),
                               cache.v.data() + old, d, d);
      infer_detail::attend_row(q_.data(), cache.k, cache.v, t_ + 1, cfg_.n_heads, dh, inv_sqrt_dh,
                               ctx_.data(), scores_);
      infer_detail::linear_row(p_->at(pre + ".attn.wo"), p_->at(pre + ".attn.bo"), ctx_.data(), m_.data(), d, d);
      for (int j = 0; j < d; ++j) x_[j] += m_[j];

      ad::kernels::layer_norm_row(x_.data(), p_->at(pre + ".ln2.gain").data(), p_->at(pre + ".ln2.bias").data(),
                              Real(1e-5), h_.data(), static_cast<Real*>(nullptr), d);
      infer_detail::linear_row(p_->at(pre + ".xattn.wq"), p_->at(pre + ".xattn.bq"), h_.data(), q_.data(), d,
                               d);
      infer_detail::attend_row(q_.data(), cache.cross_k, cache.cross_v, src_len_, cfg_.n_heads, dh,
                               inv_sqrt_dh, ctx_.data(), scores_);
      infer_detail::linear_row(p_->at(pre + ".xattn.wo"), p_->at(pre + ".xattn.bo"), ctx_.data(), m_.data(),
                               d, d);
      for (int j = 0; j < d; ++j) x_[j] += m_[j];

      ad::kernels::layer_norm_row(x_.data(), p_->at(pre + ".ln3.gain").data(), p_->at(pre + ".ln3.bias").data(),
                              Real(1e-5), h_.data(), static_cast<Real*>(nullptr), d);
      infer_detail::linear_row(p_->at(pre + ".mlp.w1"), p_->at(pre + ".mlp.b1"), h_.data(), u_.data(), d,
                               cfg_.d_ff);
      for (int j = 0; j < cfg_.d_ff; ++j) u_[j] = ad::kernels::gelu_scalar(u_[j]);
      infer_detail::linear_row(p_->at(pre + ".mlp.w2"), p_->at(pre + ".mlp.b2"), u_.data(), m_.data(),
                               cfg_.d_ff, d);
      for (int j = 0; j < d; ++j) x_[j] += m_[j];
    }

    ad::kernels::layer_norm_row(x_.data(), p_->at("dec_ln_f.gain").data(), p_->at("dec_ln_f.bias").data(),
                            Real(1e-5), h_.data(), static_cast<Real*>(nullptr), d);
    const auto& out_w = cfg_.tie_embeddings ? p_->at("tok_emb") : p_->at("out_proj");
    ad::kernels::matmul_bt(h_.data(), out_w.data(), logits_.data(), 1, d, cfg_.vocab_size);
    ++t_;
    return logits_;
  }

 private:
  struct LayerCache {
    std::vector<Real> k, v;                // decoder self-attention, [t, d]
    std::vector<Real> cross_k, cross_v;    // precomputed from encoder memory, [src_len, d]
  };

  // Full-sequence encoder pass, same op order as the tape forward.
  void run_encoder(const std::vector<int>& source_ids) {
    const int d = cfg_.d_model;
    const int s = src_len_;
    const int dh = d / cfg_.n_heads;
    const Real inv_sqrt_dh = Real(1) / std::sqrt(Real(dh));
    const int vocab = cfg_.vocab_size;
    std::vector<Real> xs(static_cast<std::size_t>(s) * d);
    for (int i = 0; i < s; ++i) {
      const int id = source_ids[static_cast<std::size_t>(i)];
      if (id < 0 || id >= vocab) {
        throw std::out_of_range("EncDecSession: source id " + std::to_string(id) + " outside vocabulary");
      }
      const Real* tok = p_->at("tok_emb").data() + static_cast<std::size_t>(id) * d;
      const Real* pos = p_->at("enc_pos_emb").data() + static_cast<std::size_t>(i) * d;
      Real* dst = xs.data() + static_cast<std::size_t>(i) * d;
      for (int j = 0; j < d; ++j) dst[j] = tok[j] + pos[j];
    }
    std::vector<Real> hs(xs.size()), qs(xs.size()), ks(xs.size()), vs(xs.size()), cs(xs.size()),
        ps(xs.size());
    std::vector<Real> us(static_cast<std::size_t>(s) * cfg_.d_ff);
    std::vector<Real> row_scores;
    for (int li = 0; li < cfg_.n_layers; ++li) {
      const std::string pre = "enc." + std::to_string(li);
      for (int i = 0; i < s; ++i) {
        ad::kernels::layer_norm_row(xs.data() + static_cast<std::size_t>(i) * d,
                                p_->at(pre + ".ln1.gain").data(), p_->at(pre + ".ln1.bias").data(),
                                Real(1e-5), hs.data() + static_cast<std::size_t>(i) * d,
                                static_cast<Real*>(nullptr), d);
      }
      linear_all(p_->at(pre + ".attn.wq"), p_->at(pre + ".attn.bq"), hs, qs, s, d, d);
      linear_all(p_->at(pre + ".attn.wk"), p_->at(pre + ".attn.bk"), hs, ks, s, d, d);
      linear_all(p_->at(pre + ".attn.wv"), p_->at(pre + ".attn.bv"), hs, vs, s, d, d);
      for (int i = 0; i < s; ++i) {
        infer_detail::attend_row(qs.data() + static_cast<std::size_t>(i) * d, ks, vs, s, cfg_.n_heads, dh,
                                 inv_sqrt_dh, cs.data() + static_cast<std::size_t>(i) * d, row_scores);
      }
      linear_all(p_->at(pre + ".attn.wo"), p_->at(pre + ".attn.bo"), cs, ps, s, d, d);
      for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += ps[i];
      for (int i = 0; i < s; ++i) {
        ad::kernels::layer_norm_row(xs.data() + static_cast<std::size_t>(i) * d,
                                p_->at(pre + ".ln2.gain").data(), p_->at(pre + ".ln2.bias").data(),
                                Real(1e-5), hs.data() + static_cast<std::size_t>(i) * d,
                                static_cast<Real*>(nullptr), d);
      }
      linear_all(p_->at(pre + ".mlp.w1"), p_->at(pre + ".mlp.b1"), hs, us, s, d, cfg_.d_ff);
      for (Real& uv : us) uv = ad::kernels::gelu_scalar(uv);
      linear_all(p_->at(pre + ".mlp.w2"), p_->at(pre + ".mlp.b2"), us, ps, s, cfg_.d_ff, d);
      for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += ps[i];
    }
    std::vector<Real> memory(xs.size());
    for (int i = 0; i < s; ++i) {
      ad::kernels::layer_norm_row(xs.data() + static_cast<std::size_t>(i) * d, p_->at("enc_ln_f.gain").data(),
                              p_->at("enc_ln_f.bias").data(), Real(1e-5),
                              memory.data() + static_cast<std::size_t>(i) * d, static_cast<Real*>(nullptr),
                              d);
    }
    for (int li = 0; li < cfg_.n_layers; ++li) {
      const std::string pre = "dec." + std::to_string(li);
      auto& cache = layers_[static_cast<std::size_t>(li)];
      cache.cross_k.resize(memory.size());
      cache.cross_v.resize(memory.size());
      linear_all(p_->at(pre + ".xattn.wk"), p_->at(pre + ".xattn.bk"), memory, cache.cross_k, s, d, d);
      linear_all(p_->at(pre + ".xattn.wv"), p_->at(pre + ".xattn.bv"), memory, cache.cross_v, s, d, d);
    }
  }

  void linear_all(const ad::Tensor<Real>& w, const ad::Tensor<Real>& b, const std::vector<Real>& x,
                  std::vector<Real>& y, int rows, int d_in, int d_out) {
    y.assign(static_cast<std::size_t>(rows) * d_out, Real(0));
    ad::kernels::matmul_acc(x.data(), w.data(), y.data(), rows, d_in, d_out);
    const Real* bias = b.data();
    for (int i = 0; i < rows; ++i) {
      Real* yr = y.data() + static_cast<std::size_t>(i) * d_out;
      for (int j = 0; j < d_out; ++j) yr[j] += bias[j];
    }
  }

  const Parameters<Real>* p_;
  ModelConfig cfg_;
  int src_len_;
  std::vector<LayerCache> layers_;
  std::vector<Real> logits_, x_, h_, q_, ctx_, u_, m_, scores_;
  int t_ = 0;
};

}  // namespace orderlab::model
