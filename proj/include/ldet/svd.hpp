#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ldet/matrix.hpp"

namespace ldet {

// Full decomposition W = U * diag(sigma) * V^T with orthogonal U (d x d),
// V (k x k) and descending non-negative sigma of length min(d, k).
struct SvdResult {
  Matrix u;
  std::vector<double> sigma;
  Matrix v;
};

enum class ErrorMetric { kFrobenius, kSpectral };

namespace detail {

// Completes the first `given` orthonormal columns of q (n x n) to a full
// orthonormal basis by Gram-Schmidt against the standard basis.
inline void complete_orthonormal_basis(Matrix& q, std::size_t given) {
  const std::size_t n = q.rows();
  std::size_t next = given;
  for (std::size_t e = 0; e < n && next < n; ++e) {
    std::vector<double> cand(n, 0.0);
    cand[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < next; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += cand[i] * q(i, j);
        for (std::size_t i = 0; i < n; ++i) cand[i] -= dot * q(i, j);
      }
    }
    double norm = 0.0;
    for (double v : cand) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;  // e nearly in the current span, try next basis vector
    for (std::size_t i = 0; i < n; ++i) q(i, next) = cand[i] / norm;
    ++next;
  }
}

// One-sided Jacobi on the columns of a (rows >= cols assumed by caller):
// rotates column pairs until mutually orthogonal, accumulating rotations
// into v (cols x cols). Returns the final worst off-diagonal ratio.
inline double one_sided_jacobi(Matrix& a, Matrix& v, double tol, int max_sweeps,
                               bool& converged) {
  const std::size_t n = a.rows(), k = a.cols();
  v = Matrix::identity(k);
  double worst = 0.0;
  converged = false;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    worst = 0.0;
    for (std::size_t p = 0; p + 1 < k; ++p) {
      for (std::size_t q = p + 1; q < k; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = a(i, p), y = a(i, q);
          app += x * x;
          aqq += y * y;
          apq += x * y;
        }
        const double denom = std::sqrt(app * aqq);
        const double ratio = denom > 0.0 ? std::abs(apq) / denom : 0.0;
        worst = std::max(worst, ratio);
        if (ratio <= tol) continue;
        // Jacobi rotation zeroing the (p,q) Gram entry
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = a(i, p), y = a(i, q);
          a(i, p) = c * x - s * y;
          a(i, q) = s * x + c * y;
        }
        for (std::size_t i = 0; i < k; ++i) {
          const double x = v(i, p), y = v(i, q);
          v(i, p) = c * x - s * y;
          v(i, q) = s * x + c * y;
        }
      }
    }
    if (worst <= tol) {
      converged = true;
      return worst;
    }
  }
  return worst;
}

}  // namespace detail

// One-sided Jacobi SVD applied on the thinner side; sweep tolerance 1e-12,
// at most 60 sweeps.
inline SvdResult svd(const Matrix& w) {
  const bool transposed = w.rows() < w.cols();
  Matrix a = transposed ? transpose(w) : w;  // rows >= cols
  const std::size_t d = a.rows(), k = a.cols();

  Matrix rot(1, 1);
  bool converged = false;
  const double off = detail::one_sided_jacobi(a, rot, 1e-12, 60, converged);
  if (!converged)
    throw NumericError("svd: Jacobi sweeps did not converge, off-diagonal " +
                       std::to_string(off));

  std::vector<double> sigma(k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) norm += a(i, j) * a(i, j);
    sigma[j] = std::sqrt(norm);
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  Matrix u_full(d, d);
  Matrix v_full(k, k);
  std::vector<double> sigma_sorted(k);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t src = order[j];
    sigma_sorted[j] = sigma[src];
    if (sigma[src] > 0.0) {
      for (std::size_t i = 0; i < d; ++i) u_full(i, j) = a(i, src) / sigma[src];
    }
    for (std::size_t i = 0; i < k; ++i) v_full(i, j) = rot(i, src);
  }
  std::size_t nonzero = 0;
  while (nonzero < k && sigma_sorted[nonzero] > 0.0) ++nonzero;
  detail::complete_orthonormal_basis(u_full, nonzero);

  SvdResult out;
  out.sigma = std::move(sigma_sorted);
  if (transposed) {
    out.u = std::move(v_full);
    out.v = std::move(u_full);
  } else {
    out.u = std::move(u_full);
    out.v = std::move(v_full);
  }
  return out;
}

struct TruncatedSvd {
  Matrix u_r;      // d x r
  Matrix sigma_r;  // r x r diagonal
  Matrix vt_r;     // r x k
};

// Keeps the top-r singular triples of a decomposition of a d x k matrix.
inline TruncatedSvd truncate_svd(const SvdResult& s, std::size_t r) {
  const std::size_t d = s.u.rows(), k = s.v.rows();
  const std::size_t rank_max = std::min(d, k);
  if (r < 1 || r > rank_max)
    throw ArgumentError("truncate_svd: rank " + std::to_string(r) +
                        " outside [1, " + std::to_string(rank_max) + "]");
  TruncatedSvd t{Matrix(d, r), Matrix(r, r), Matrix(r, k)};
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < r; ++j) t.u_r(i, j) = s.u(i, j);
  for (std::size_t j = 0; j < r; ++j) t.sigma_r(j, j) = s.sigma[j];
  for (std::size_t j = 0; j < r; ++j)
    for (std::size_t i = 0; i < k; ++i) t.vt_r(j, i) = s.v(i, j);
  return t;
}

inline Matrix reconstruct(const TruncatedSvd& t) {
  return matmul(matmul(t.u_r, t.sigma_r), t.vt_r);
}

inline Matrix reconstruct(const SvdResult& s) {
  const std::size_t d = s.u.rows(), k = s.v.rows();
  return reconstruct(truncate_svd(s, std::min(d, k)));
}

// Distance between a matrix and its approximation. Frobenius is the default
// metric; spectral is the largest singular value of the difference.
inline double approx_error(const Matrix& w, const Matrix& w_bar,
                           ErrorMetric metric = ErrorMetric::kFrobenius) {
  if (!w.same_shape(w_bar))
    throw ShapeError("approx_error: " + w.shape_str() + " vs " + w_bar.shape_str());
  const Matrix diff = sub(w, w_bar);
  if (metric == ErrorMetric::kFrobenius) return frobenius_norm(diff);
  const SvdResult s = svd(diff);
  return s.sigma.empty() ? 0.0 : s.sigma.front();
}

}  // namespace ldet
