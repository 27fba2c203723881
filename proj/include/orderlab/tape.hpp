#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "orderlab/kernels.hpp"
#include "orderlab/tensor.hpp"

namespace orderlab::ad {

// Reverse-mode tape. Operations append one node each, so the node list is
// topologically ordered by construction and backward() is a single reverse
// sweep that visits every node exactly once. A tape and its tensors belong
// to one logical thread.
template <typename Real>
class Tape {
 public:
  using T = Tensor<Real>;

  // ---- elementwise / linear -------------------------------------------------

  // b's shape must equal a's or be a suffix of it (broadcast over leading axes).
  T add(const T& a, const T& b) { return binary_ew(a, b, "add", Ew::Add); }
  T sub(const T& a, const T& b) { return binary_ew(a, b, "sub", Ew::Sub); }
  T mul(const T& a, const T& b) { return binary_ew(a, b, "mul", Ew::Mul); }

  T scale(const T& a, Real c) {
    T out = T::zeros(a.shape());
    const Real* x = a.data();
    Real* y = out.data_mut();
    for (std::size_t i = 0; i < a.numel(); ++i) y[i] = c * x[i];
    if (a.requires_grad()) {
      out.set_requires_grad(true);
      record([a, out, c]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        auto da = a.grad_mut();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += c * g[i];
      });
    }
    return out;
  }

  // 2-D [m,k]x[k,n] or batched 3-D [B,m,k]x[B,k,n]; transpose_b flips b's
  // trailing two axes.
  T matmul(const T& a, const T& b, bool transpose_b = false) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3)) {
      throw std::invalid_argument("matmul: rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    }
    const bool batched = sa.size() == 3;
    const int batch = batched ? sa[0] : 1;
    if (batched && sb[0] != batch) {
      throw std::invalid_argument("matmul: batch mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    }
    const int m = sa[batched ? 1 : 0];
    const int k = sa[batched ? 2 : 1];
    const int bk = transpose_b ? sb[batched ? 2 : 1] : sb[batched ? 1 : 0];
    const int n = transpose_b ? sb[batched ? 1 : 0] : sb[batched ? 2 : 1];
    if (bk != k) {
      throw std::invalid_argument("matmul: inner dims differ " + shape_str(sa) + " vs " + shape_str(sb) +
                                  (transpose_b ? " (b transposed)" : ""));
    }
    std::vector<int> oshape = batched ? std::vector<int>{batch, m, n} : std::vector<int>{m, n};
    T out = T::zeros(std::move(oshape));
    const std::size_t a_step = static_cast<std::size_t>(m) * k;
    const std::size_t b_step = static_cast<std::size_t>(k) * n;
    const std::size_t o_step = static_cast<std::size_t>(m) * n;
    for (int bi = 0; bi < batch; ++bi) {
      const Real* pa = a.data() + bi * a_step;
      const Real* pb = b.data() + bi * b_step;
      Real* pc = out.data_mut() + bi * o_step;
      if (transpose_b) {
        kernels::matmul_bt(pa, pb, pc, m, k, n);
      } else {
        kernels::matmul_acc(pa, pb, pc, m, k, n);
      }
    }
    if (a.requires_grad() || b.requires_grad()) {
      out.set_requires_grad(true);
      record([a, b, out, transpose_b, batch, m, k, n, a_step, b_step, o_step]() mutable {
        if (!out.has_grad()) return;
        const Real* g = out.grad().data();
        for (int bi = 0; bi < batch; ++bi) {
          const Real* gg = g + bi * o_step;
          const Real* pa = a.data() + bi * a_step;
          const Real* pb = b.data() + bi * b_step;
          if (a.requires_grad()) {
            Real* da = a.grad_mut().data() + bi * a_step;
            if (transpose_b) {
              kernels::matmul_acc(gg, pb, da, m, n, k);  // dA += G * B
            } else {
              // dA += G * B^T
              for (int i = 0; i < m; ++i) {
                const Real* grow = gg + static_cast<std::size_t>(i) * n;
                Real* darow = da + static_cast<std::size_t>(i) * k;
                for (int j = 0; j < n; ++j) {
                  const Real gv = grow[j];
                  for (int kk = 0; kk < k; ++kk) darow[kk] += gv * pb[static_cast<std::size_t>(kk) * n + j];
                }
              }
            }
          }
          if (b.requires_grad()) {
            Real* db = b.grad_mut().data() + bi * b_step;
            if (transpose_b) {
              // dB[n,k] += G^T * A
              for (int i = 0; i < m; ++i) {
                const Real* grow = gg + static_cast<std::size_t>(i) * n;
                const Real* arow = pa + static_cast<std::size_t>(i) * k;
                for (int j = 0; j < n; ++j) {
                  const Real gv = grow[j];
                  Real* dbrow = db + static_cast<std::size_t>(j) * k;
                  for (int kk = 0; kk < k; ++kk) dbrow[kk] += gv * arow[kk];
                }
              }
            } else {
              // dB[k,n] += A^T * G
              for (int i = 0; i < m; ++i) {
                const Real* arow = pa + static_cast<std::size_t>(i) * k;
                const Real* grow = gg + static_cast<std::size_t>(i) * n;
                for (int kk = 0; kk < k; ++kk) {
                  const Real av = arow[kk];
                  Real* dbrow = db + static_cast<std::size_t>(kk) * n;
                  for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                }
              }
            }
          }
        }
      });
    }
    return out;
  }

  T embedding_lookup(const T& table, const std::vector<int>& ids) {
    const auto& st = table.shape();
    if (st.size() != 2) {
      throw std::invalid_argument("embedding_lookup: table must be 2-D, got " + shape_str(st));
    }
    const int rows = st[0], dim = st[1];
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] < 0 || ids[t] >= rows) {
        throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[t]) + " at position " +
                                std::to_string(t) + " outside table rows " + std::to_string(rows));
      }
    }
    T out = T::zeros({static_cast<int>(ids.size()), dim});
    Real* y = out.data_mut();
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const Real* row = table.data() + static_cast<std::size_t>(ids[t]) * dim;
      Real* orow = y + t * dim;
      for (int j = 0; j < dim; ++j) orow[j] = row[j];
    }
    if (table.requires_grad()) {
      out.set_requires_grad(true);
      record([table, out, ids, dim]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        auto dt = table.grad_mut();
        for (std::size_t t = 0; t < ids.size(); ++t) {
          Real* drow = dt.data() + static_cast<std::size_t>(ids[t]) * dim;
          const Real* grow = g.data() + t * dim;
          for (int j = 0; j < dim; ++j) drow[j] += grow[j];
        }
      });
    }
    return out;
  }

  // ---- shape ops ------------------------------------------------------------

  T reshape(const T& a, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
      throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape) +
                                  " changes element count");
    }
    T out = T::from(std::move(new_shape), {a.values().begin(), a.values().end()});
    if (a.requires_grad()) {
      out.set_requires_grad(true);
      record([a, out]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        auto da = a.grad_mut();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
      });
    }
    return out;
  }

  // [A,B,C] -> [B,A,C]
  T transpose_01(const T& a) {
    const auto& s = a.shape();
    if (s.size() != 3) throw std::invalid_argument("transpose_01: need 3-D, got " + shape_str(s));
    const int A = s[0], B = s[1], C = s[2];
    T out = T::zeros({B, A, C});
    const Real* x = a.data();
    Real* y = out.data_mut();
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < B; ++j) {
        const Real* src = x + (static_cast<std::size_t>(i) * B + j) * C;
        Real* dst = y + (static_cast<std::size_t>(j) * A + i) * C;
        for (int c = 0; c < C; ++c) dst[c] = src[c];
      }
    if (a.requires_grad()) {
      out.set_requires_grad(true);
      record([a, out, A, B, C]() mutable {
        if (!out.has_grad()) return;
        const Real* g = out.grad().data();
        Real* da = a.grad_mut().data();
        for (int i = 0; i < A; ++i)
          for (int j = 0; j < B; ++j) {
            const Real* src = g + (static_cast<std::size_t>(j) * A + i) * C;
            Real* dst = da + (static_cast<std::size_t>(i) * B + j) * C;
            for (int c = 0; c < C; ++c) dst[c] += src[c];
          }
      });
    }
    return out;
  }

  T slice_rows(const T& a, int start, int count) {
    const auto& s = a.shape();
    if (s.size() != 2) throw std::invalid_argument("slice_rows: need 2-D, got " + shape_str(s));
    if (start < 0 || count < 1 || start + count > s[0]) {
      throw std::out_of_range("slice_rows: rows [" + std::to_string(start) + "," +
                              std::to_string(start + count) + ") outside " + shape_str(s));
    }
    const int cols = s[1];
    T out = T::zeros({count, cols});
    const Real* x = a.data() + static_cast<std::size_t>(start) * cols;
    Real* y = out.data_mut();
    for (std::size_t i = 0; i < static_cast<std::size_t>(count) * cols; ++i) y[i] = x[i];
    if (a.requires_grad()) {
      out.set_requires_grad(true);
      record([a, out, start, count, cols]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        Real* da = a.grad_mut().data() + static_cast<std::size_t>(start) * cols;
        for (std::size_t i = 0; i < static_cast<std::size_t>(count) * cols; ++i) da[i] += g[i];
      });
    }
    return out;
  }

  // ---- nonlinearities ---------------------------------------------------------

  T softmax(const T& a, int axis) {
    const auto [outer, len, inner] = axis_split(a.shape(), axis, "softmax");
    T out = T::zeros(a.shape());
    const Real* x = a.data();
    Real* y = out.data_mut();
    std::vector<Real> row(static_cast<std::size_t>(len));
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        for (std::size_t i = 0; i < static_cast<std::size_t>(len); ++i) row[i] = x[base + i * inner];
        kernels::softmax_row(row.data(), len);
        for (std::size_t i = 0; i < static_cast<std::size_t>(len); ++i) y[base + i * inner] = row[i];
      }
    }
    if (a.requires_grad()) {
      out.set_requires_grad(true);
      record([a, out, outer, len, inner]() mutable {
        if (!out.has_grad()) return;
        const Real* yv = out.data();
        const Real* g = out.grad().data();
        Real* da = a.grad_mut().data();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            Real dot = Real(0);
            for (std::size_t i = 0; i < static_cast<std::size_t>(len); ++i) {
              const std::size_t idx = base + i * inner;
              dot += g[idx] * yv[idx];
            }
            for (std::size_t i = 0; i < static_cast<std::size_t>(len); ++i) {
              const std::size_t idx = base + i * inner;
              da[idx] += yv[idx] * (g[idx] - dot);
            }
          }
        }
      });
    }
    return out;
  }

  // Normalizes over the last axis; gain/bias are 1-D of that length.
  T layer_norm(const T& a, const T& gain, const T& bias, Real eps) {
    const auto& s = a.shape();
    if (s.empty()) throw std::invalid_argument("layer_norm: scalar input");
    const int dim = s.back();
    if (dim < 1) throw std::invalid_argument("layer_norm: empty last axis in " + shape_str(s));
    if (gain.shape() != std::vector<int>{dim} || bias.shape() != std::vector<int>{dim}) {
      throw std::invalid_argument("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                                  shape_str(bias.shape()) + " do not match last axis of " + shape_str(s));
    }
    const std::size_t rows = a.numel() / dim;
    T out = T::zeros(s);
    auto xhat = std::make_shared<std::vector<Real>>(a.numel());
    auto inv_std = std::make_shared<std::vector<Real>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      kernels::layer_norm_row(a.data() + r * dim, gain.data(), bias.data(), eps,
                              out.data_mut() + r * dim, xhat->data() + r * dim, dim,
                              inv_std->data() + r);
    }
    if (a.requires_grad() || gain.requires_grad() || bias.requires_grad()) {
      out.set_requires_grad(true);
      record([a, gain, bias, out, xhat, inv_std, rows, dim]() mutable {
        if (!out.has_grad()) return;
        const Real* g = out.grad().data();
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* grow = g + r * dim;
          const Real* hrow = xhat->data() + r * dim;
          if (gain.requires_grad()) {
            Real* dg = gain.grad_mut().data();
            for (int i = 0; i < dim; ++i) dg[i] += grow[i] * hrow[i];
          }
          if (bias.requires_grad()) {
            Real* db = bias.grad_mut().data();
            for (int i = 0; i < dim; ++i) db[i] += grow[i];
          }
          if (a.requires_grad()) {
            Real* da = a.grad_mut().data() + r * dim;
            const Real* gn = gain.data();
            Real mean_dh = Real(0), mean_dh_h = Real(0);
            for (int i = 0; i < dim; ++i) {
              const Real dh = grow[i] * gn[i];
              mean_dh += dh;
              mean_dh_h += dh * hrow[i];
            }
            mean_dh /= static_cast<Real>(dim);
            mean_dh_h /= static_cast<Real>(dim);
            const Real is = (*inv_std)[r];
            for (int i = 0; i < dim; ++i) {
              const Real dh = grow[i] * gn[i];
              da[i] += is * (dh - mean_dh - hrow[i] * mean_dh_h);
            }
          }
        }
      });
    }
    return out;
  }

  T gelu(const T& a) {
    T out = T::zeros(a.shape());
    const Real* x = a.data();
    Real* y = out.data_mut();
    for (std::size_t i = 0; i < a.numel(); ++i) y[i] = kernels::gelu_scalar(x[i]);
    if (a.requires_grad()) {
      out.set_requires_grad(true);
      record([a, out]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        const Real* x2 = a.data();
        auto da = a.grad_mut();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * kernels::gelu_grad_scalar(x2[i]);
      });
    }
    return out;
  }

  // ---- losses -----------------------------------------------------------------

  // Mean of -log softmax(logits)[t, target_t] over masked positions.
  T cross_entropy_nll(const T& logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
    const auto& s = logits.shape();
    if (s.size() != 2) throw std::invalid_argument("cross_entropy_nll: logits must be 2-D, got " + shape_str(s));
    const int rows = s[0], vocab = s[1];
    if (static_cast<int>(targets.size()) != rows || static_cast<int>(mask.size()) != rows) {
      throw std::invalid_argument("cross_entropy_nll: targets/mask length " + std::to_string(targets.size()) +
                                  "/" + std::to_string(mask.size()) + " vs " + std::to_string(rows) + " rows");
    }
    int count = 0;
    for (int t = 0; t < rows; ++t) {
      if (!mask[t]) continue;
      ++count;
      if (targets[t] < 0 || targets[t] >= vocab) {
        throw std::out_of_range("cross_entropy_nll: target " + std::to_string(targets[t]) + " at row " +
                                std::to_string(t) + " outside vocabulary " + std::to_string(vocab));
      }
    }
    if (count == 0) throw std::invalid_argument("cross_entropy_nll: mask selects no positions");
    Real loss = Real(0);
    for (int t = 0; t < rows; ++t) {
      if (!mask[t]) continue;
      const Real* row = logits.data() + static_cast<std::size_t>(t) * vocab;
      loss += kernels::log_sum_exp_row(row, vocab) - row[targets[t]];
    }
    loss /= static_cast<Real>(count);
    T out = T::scalar_of(loss);
    if (logits.requires_grad()) {
      out.set_requires_grad(true);
      record([logits, out, targets, mask, rows, vocab, count]() mutable {
        if (!out.has_grad()) return;
        const Real g = out.grad()[0] / static_cast<Real>(count);
        Real* dl = logits.grad_mut().data();
        std::vector<Real> p(static_cast<std::size_t>(vocab));
        for (int t = 0; t < rows; ++t) {
          if (!mask[t]) continue;
          const Real* row = logits.data() + static_cast<std::size_t>(t) * vocab;
          for (int j = 0; j < vocab; ++j) p[j] = row[j];
          kernels::softmax_row(p.data(), vocab);
          Real* drow = dl + static_cast<std::size_t>(t) * vocab;
          for (int j = 0; j < vocab; ++j) drow[j] += g * p[j];
          drow[targets[t]] -= g;
        }
      });
    }
    return out;
  }

  // Row-wise KL(softmax(p_logits) || softmax(q_logits)) along `axis`; result
  // drops that axis. Gradients flow into both operands. Probabilities are
  // floored at 1e-12 inside the logs.
  T kl_divergence(const T& p_logits, const T& q_logits, int axis) {
    if (p_logits.shape() != q_logits.shape()) {
      throw std::invalid_argument("kl_divergence: shape mismatch " + shape_str(p_logits.shape()) + " vs " +
                                  shape_str(q_logits.shape()));
    }
    const auto [outer, len, inner] = axis_split(p_logits.shape(), axis, "kl_divergence");
    std::vector<int> oshape;
    for (std::size_t i = 0; i < p_logits.shape().size(); ++i) {
      if (static_cast<int>(i) != axis) oshape.push_back(p_logits.shape()[i]);
    }
    if (oshape.empty()) oshape.push_back(1);
    T out = T::zeros(oshape);
    Real* y = out.data_mut();
    const Real* pv = p_logits.data();
    const Real* qv = q_logits.data();
    std::vector<Real> p(static_cast<std::size_t>(len)), q(static_cast<std::size_t>(len));
    std::size_t slice = 0;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in, ++slice) {
        const std::size_t base = o * len * inner + in;
        for (std::size_t i = 0; i < static_cast<std::size_t>(len); ++i) {
          p[i] = pv[base + i * inner];
          q[i] = qv[base + i * inner];
        }
        kernels::softmax_row(p.data(), len);
        kernels::softmax_row(q.data(), len);
        y[slice] = kl_floored(p.data(), q.data(), len);
      }
    }
    if (p_logits.requires_grad() || q_logits.requires_grad()) {
      out.set_requires_grad(true);
      record([p_logits, q_logits, out, outer, len, inner]() mutable {
        if (!out.has_grad()) return;
        const Real* g = out.grad().data();
        const Real* pv = p_logits.data();
        const Real* qv = q_logits.data();
        std::vector<Real> p(static_cast<std::size_t>(len)), q(static_cast<std::size_t>(len));
        std::size_t slice = 0;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in, ++slice) {
            const std::size_t base = o * len * inner + in;
            for (std::size_t i = 0; i < static_cast<std::size_t>(len); ++i) {
              p[i] = pv[base + i * inner];
              q[i] = qv[base + i * inner];
            }
            kernels::softmax_row(p.data(), len);
            kernels::softmax_row(q.data(), len);
            const Real kl = kl_floored(p.data(), q.data(), len);
            const Real gv = g[slice];
            if (p_logits.requires_grad()) {
              Real* dp = p_logits.grad_mut().data();
              for (std::size_t i = 0; i < static_cast<std::size_t>(len); ++i) {
                const Real li = std::log(flo(p[i])) - std::log(flo(q[i]));
                dp[base + i * inner] += gv * p[i] * (li - kl);
              }
            }
            if (q_logits.requires_grad()) {
              Real* dq = q_logits.grad_mut().data();
              for (std::size_t i = 0; i < static_cast<std::size_t>(len); ++i) {
                dq[base + i * inner] += gv * (q[i] - p[i]);
              }
            }
          }
        }
      });
    }
    return out;
  }

  // Mean of masked entries of a 1-D tensor.
  T masked_mean(const T& a, const std::vector<std::uint8_t>& mask) {
    const auto& s = a.shape();
    if (s.size() != 1) throw std::invalid_argument("masked_mean: need 1-D, got " + shape_str(s));
    if (mask.size() != a.numel()) {
      throw std::invalid_argument("masked_mean: mask length " + std::to_string(mask.size()) + " vs " +
                                  std::to_string(a.numel()) + " entries");
    }
    int count = 0;
    Real sum = Real(0);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) {
        ++count;
        sum += a.values()[i];
      }
    }
    if (count == 0) throw std::invalid_argument("masked_mean: mask selects no positions");
    T out = T::scalar_of(sum / static_cast<Real>(count));
    if (a.requires_grad()) {
      out.set_requires_grad(true);
      record([a, out, mask, count]() mutable {
        if (!out.has_grad()) return;
        const Real g = out.grad()[0] / static_cast<Real>(count);
        auto da = a.grad_mut();
        for (std::size_t i = 0; i < mask.size(); ++i) {
          if (mask[i]) da[i] += g;
        }
      });
    }
    return out;
  }

  T sum_all(const T& a) {
    Real s = Real(0);
    for (Real v : a.values()) s += v;
    T out = T::scalar_of(s);
    if (a.requires_grad()) {
      out.set_requires_grad(true);
      record([a, out]() mutable {
        if (!out.has_grad()) return;
        const Real g = out.grad()[0];
        auto da = a.grad_mut();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g;
      });
    }
    return out;
  }

  // ---- backward -----------------------------------------------------------------

  void backward(const T& loss) {
    if (loss.numel() != 1) {
      throw std::logic_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    T seed = loss;
    seed.grad_mut()[0] += Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backprop();
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::function<void()> backprop;
  };
  std::vector<Node> nodes_;

  static constexpr Real kProbFloor = Real(1e-12);
  static Real flo(Real v) { return v < kProbFloor ? kProbFloor : v; }

  static Real kl_floored(const Real* p, const Real* q, int n) {
    Real kl = Real(0);
    for (int i = 0; i < n; ++i) kl += p[i] * (std::log(flo(p[i])) - std::log(flo(q[i])));
    return kl < Real(0) ? Real(0) : kl;  // rounding can land a hair below zero
  }

  void record(std::function<void()> fn) { nodes_.push_back(Node{std::move(fn)}); }

  static std::tuple<std::size_t, int, std::size_t> axis_split(const std::vector<int>& s, int axis,
                                                              const char* op) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
      throw std::out_of_range(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                              shape_str(s));
    }
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= static_cast<std::size_t>(s[i]);
    return {outer, s[axis], inner};
  }

  enum class Ew { Add, Sub, Mul };

  T binary_ew(const T& a, const T& b, const char* name, Ew kind) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const bool same = sa == sb;
    bool suffix = sb.size() <= sa.size();
    if (suffix) {
      for (std::size_t i = 0; i < sb.size(); ++i) {
        if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i]) {
          suffix = false;
          break;
        }
      }
    }
    if (!same && !suffix) {
      throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(sa) + " vs " +
                                  shape_str(sb));
    }
    const std::size_t bn = b.numel();
    T out = T::zeros(sa);
    const Real* x = a.data();
    const Real* z = b.data();
    Real* y = out.data_mut();
    for (std::size_t i = 0; i < a.numel(); ++i) {
      const Real bv = z[i % bn];
      switch (kind) {
        case Ew::Add: y[i] = x[i] + bv; break;
        case Ew::Sub: y[i] = x[i] - bv; break;
        case Ew::Mul: y[i] = x[i] * bv; break;
      }
    }
    if (a.requires_grad() || b.requires_grad()) {
      out.set_requires_grad(true);
      record([a, b, out, kind, bn]() mutable {
        if (!out.has_grad()) return;
        auto g = out.grad();
        if (a.requires_grad()) {
          auto da = a.grad_mut();
          const Real* z2 = b.data();
          for (std::size_t i = 0; i < da.size(); ++i) {
            switch (kind) {
              case Ew::Add:
              case Ew::Sub: da[i] += g[i]; break;
              case Ew::Mul: da[i] += g[i] * z2[i % bn]; break;
            }
          }
        }
        if (b.requires_grad()) {
          auto db = b.grad_mut();
          const Real* x2 = a.data();
          for (std::size_t i = 0; i < g.size(); ++i) {
            switch (kind) {
              case Ew::Add: db[i % bn] += g[i]; break;
              case Ew::Sub: db[i % bn] -= g[i]; break;
              case Ew::Mul: db[i % bn] += g[i] * x2[i]; break;
            }
          }
        }
      });
    }
    return out;
  }
};

}  // namespace orderlab::ad
