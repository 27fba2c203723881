#pragma once

#include <cmath>
#include <cstddef>

// Raw numeric kernels shared by the tape forward pass and the no-grad
// inference sessions. Keeping both paths on the same loops makes tape
// and incremental-decode outputs bitwise identical.
namespace orderlab::ad::kernels {

// c[m,n] = a[m,k] * b[k,n]; c must be zero-filled by the caller.
template <typename Real>
void matmul_acc(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + static_cast<std::size_t>(i) * k;
    Real* crow = c + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const Real av = arow[kk];
      const Real* brow = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] = a[m,k] * b[n,k]^T; c is overwritten.
template <typename Real>
void matmul_bt(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + static_cast<std::size_t>(i) * k;
    Real* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const Real* brow = b + static_cast<std::size_t>(j) * k;
      Real acc = Real(0);
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = acc;
    }
  }
}

// In-place softmax of one contiguous row, max-subtracted.
template <typename Real>
void softmax_row(Real* x, int n) {
  Real mx = x[0];
  for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
  Real sum = Real(0);
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const Real inv = Real(1) / sum;
  for (int i = 0; i < n; ++i) x[i] *= inv;
}

// Log-sum-exp of one contiguous row, max-subtracted.
template <typename Real>
Real log_sum_exp_row(const Real* x, int n) {
  Real mx = x[0];
  for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
  Real sum = Real(0);
  for (int i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  return mx + std::log(sum);
}

// y = gain * (x - mean) / sqrt(var + eps) + bias over one row of length n.
// Writes the normalized pre-affine row into xhat when xhat != nullptr
// (backward needs it).
template <typename Real>
void layer_norm_row(const Real* x, const Real* gain, const Real* bias, Real eps,
                    Real* y, Real* xhat, int n, Real* inv_std_out = nullptr) {
  Real mean = Real(0);
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<Real>(n);
  Real var = Real(0);
  for (int i = 0; i < n; ++i) {
    const Real d = x[i] - mean;
    var += d * d;
  }
  var /= static_cast<Real>(n);
  const Real inv_std = Real(1) / std::sqrt(var + eps);
  for (int i = 0; i < n; ++i) {
    const Real h = (x[i] - mean) * inv_std;
    if (xhat) xhat[i] = h;
    y[i] = gain[i] * h + bias[i];
  }
  if (inv_std_out) *inv_std_out = inv_std;
}

// GPT-2 style tanh-approximation GELU.
template <typename Real>
Real gelu_scalar(Real x) {
  const Real c = Real(0.7978845608028654);  // sqrt(2/pi)
  const Real u = c * (x + Real(0.044715) * x * x * x);
  return Real(0.5) * x * (Real(1) + std::tanh(u));
}

template <typename Real>
Real gelu_grad_scalar(Real x) {
  const Real c = Real(0.7978845608028654);
  const Real u = c * (x + Real(0.044715) * x * x * x);
  const Real t = std::tanh(u);
  const Real du = c * (Real(1) + Real(3) * Real(0.044715) * x * x);
  return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * du;
}

}  // namespace orderlab::ad::kernels
