#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "ldet/matrix.hpp"
#include "ldet/svd.hpp"

namespace ldet {

// Trainable parameter accounting for one LoRA module: dense d x k weight
// versus the r x (d + k) adapter pair, and the ratio p = r(d+k)/(dk).
struct ParamBudget {
  std::uint64_t dense_count;
  std::uint64_t lora_count;
  double compressed_ratio;
};

inline ParamBudget param_budget(std::size_t d, std::size_t k, std::size_t rank) {
  if (d == 0 || k == 0) throw ArgumentError("param_budget: dims must be positive");
  if (rank < 1 || rank > std::min(d, k))
    throw ArgumentError("param_budget: rank out of range");
  ParamBudget b;
  b.dense_count = static_cast<std::uint64_t>(d) * k;
  b.lora_count = static_cast<std::uint64_t>(rank) * (d + k);
  b.compressed_ratio = static_cast<double>(b.lora_count) / static_cast<double>(b.dense_count);
  return b;
}

// Frozen dense weight W (d x k) plus the trainable low-rank pair:
// B (d x r, zero at init) and A (r x k, Gaussian at init), so that the
// adapted layer computes W x + B (A x) and starts exactly equal to the base.
class LoraLinear {
 public:
  LoraLinear(Matrix w, std::size_t rank, double stddev, Rng& rng,
             std::optional<std::vector<double>> bias = std::nullopt)
      : w_(std::move(w)), rank_(rank), merged_(false), bias_(std::move(bias)) {
    if (rank < 1 || rank > std::min(w_.rows(), w_.cols()))
      throw ArgumentError("LoraLinear: rank out of range for " + w_.shape_str());
    if (bias_ && bias_->size() != w_.rows())
      throw ShapeError("LoraLinear: bias length mismatch");
    a_ = gaussian_matrix(rank, w_.cols(), stddev, rng);
    b_ = Matrix(w_.rows(), rank);  // zero: the adapter starts neutral
  }

  std::size_t d() const { return w_.rows(); }
  std::size_t k() const { return w_.cols(); }
  std::size_t rank() const { return rank_; }
  bool merged() const { return merged_; }

  const Matrix& w() const { return w_; }
  // Direct weight access for full fine-tuning policies and checkpoint loads;
  // LoRA policies never touch it.
  Matrix& mutable_w() { return w_; }
  std::optional<std::vector<double>>& mutable_bias() { return bias_; }
  Matrix& a() { return a_; }
  const Matrix& a() const { return a_; }
  Matrix& b() { return b_; }
  const Matrix& b() const { return b_; }
  const std::optional<std::vector<double>>& bias() const { return bias_; }

  ParamBudget budget() const { return param_budget(d(), k(), rank_); }

  // W x + B (A x) + bias; the adapter path is skipped once merged.
  Matrix forward(const Matrix& x) const {
    if (x.rows() != k())
      throw ShapeError("LoraLinear::forward: input " + x.shape_str() +
                       " vs weight " + w_.shape_str());
    Matrix out = matmul(w_, x);
    if (!merged_) out = add(out, matmul(b_, matmul(a_, x)));
    if (bias_) {
      for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += (*bias_)[i];
    }
    return out;
  }

  struct Gradients {
    Matrix grad_a;
    Matrix grad_b;
    Matrix grad_x;
  };

  // Reverse pass of the adapted layer; W is frozen and gets no gradient.
  Gradients backward(const Matrix& x, const Matrix& upstream) const {
    if (x.rows() != k() || upstream.rows() != d() || upstream.cols() != x.cols())
      throw ShapeError("LoraLinear::backward: inconsistent shapes");
    const Matrix ax = matmul(a_, x);                      // r x n
    Gradients g{Matrix(rank_, k()), Matrix(d(), rank_), Matrix(k(), x.cols())};
    g.grad_b = matmul(upstream, transpose(ax));           // d x r
    g.grad_a = matmul(transpose(b_), matmul(upstream, transpose(x)));  // r x k
    const Matrix bt_up = matmul(transpose(b_), upstream); // r x n
    g.grad_x = add(matmul(transpose(w_), upstream), matmul(transpose(a_), bt_up));
    return g;
  }

  // Folds B A into W and stops using the adapter path. Returns the merged
  // weight. Reversible via unmerge().
  Matrix merge() {
    if (merged_) throw StateError("LoraLinear::merge: already merged");
    w_ = add(w_, matmul(b_, a_));
    merged_ = true;
    return w_;
  }

  void unmerge() {
    if (!merged_) throw StateError("LoraLinear::unmerge: not merged");
    w_ = sub(w_, matmul(b_, a_));
    merged_ = false;
  }

 private:
  Matrix w_;
  Matrix a_;  // r x k, trainable
  Matrix b_;  // d x r, trainable
  std::size_t rank_;
  bool merged_;
  std::optional<std::vector<double>> bias_;
};

// SVD seeding of an adapter pair from a known delta: B = U_r sqrt(S_r),
// A = sqrt(S_r) V_r^T, so B A is the best rank-r approximation of delta_w.
inline std::pair<Matrix, Matrix> lora_from_svd(const Matrix& delta_w, std::size_t rank) {
  const std::size_t rank_max = std::min(delta_w.rows(), delta_w.cols());
  if (rank < 1 || rank > rank_max)
    throw ArgumentError("lora_from_svd: rank out of range");
  const SvdResult s = svd(delta_w);
  const TruncatedSvd t = truncate_svd(s, rank);
  Matrix sqrt_sigma(rank, rank);
  for (std::size_t i = 0; i < rank; ++i) sqrt_sigma(i, i) = std::sqrt(t.sigma_r(i, i));
  Matrix b_bar = matmul(t.u_r, sqrt_sigma);
  Matrix a_bar = matmul(sqrt_sigma, t.vt_r);
  return {std::move(b_bar), std::move(a_bar)};
}

}  // namespace ldet
