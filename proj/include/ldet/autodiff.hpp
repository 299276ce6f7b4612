#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ldet/matrix.hpp"

namespace ldet {

// Minimal reverse-mode tape over Matrix values. Activations follow the
// token-major convention (rows = tokens / cells, cols = channels).
// Values are computed eagerly on node creation; backward() walks the tape
// in reverse and accumulates gradients, including into registered
// parameter tensors (looked up afterwards via grad_of).
class Tape {
 public:
  using NodeId = std::size_t;

  NodeId constant(Matrix v) { return push(std::move(v), {}, nullptr); }

  NodeId param(const Matrix* storage) {
    auto it = param_nodes_.find(storage);
    if (it != param_nodes_.end()) return it->second;
    const NodeId id = push(*storage, {}, nullptr);
    nodes_[id].param = storage;
    param_nodes_[storage] = id;
    return id;
  }

  const Matrix& value(NodeId id) const { return nodes_[id].value; }

  NodeId matmul(NodeId a, NodeId b) {
    NodeId id = push(ldet::matmul(value(a), value(b)), {a, b}, nullptr);
    nodes_[id].back = [a, b](Tape& t, const Matrix& g) {
      t.accumulate(a, ldet::matmul(g, transpose(t.value(b))));
      t.accumulate(b, ldet::matmul(transpose(t.value(a)), g));
    };
    return id;
  }

  NodeId add(NodeId a, NodeId b) {
    NodeId id = push(ldet::add(value(a), value(b)), {a, b}, nullptr);
    nodes_[id].back = [a, b](Tape& t, const Matrix& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    };
    return id;
  }

  NodeId scale(NodeId a, double s) {
    NodeId id = push(ldet::scale(value(a), s), {a}, nullptr);
    nodes_[id].back = [a, s](Tape& t, const Matrix& g) {
      t.accumulate(a, ldet::scale(g, s));
    };
    return id;
  }

  NodeId transpose_node(NodeId a) {
    NodeId id = push(transpose(value(a)), {a}, nullptr);
    nodes_[id].back = [a](Tape& t, const Matrix& g) {
      t.accumulate(a, transpose(g));
    };
    return id;
  }

  // out[i] = src.data[idx[i]]; idx entry -1 reads an implicit zero (used for
  // zero padding). Backward scatter-adds.
  NodeId gather(NodeId a, std::vector<std::int64_t> idx, std::size_t rows,
                std::size_t cols) {
    if (idx.size() != rows * cols)
      throw ShapeError("Tape::gather: index map length mismatch");
    const Matrix& src = value(a);
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.vec()[i] = idx[i] < 0 ? 0.0 : src.vec()[static_cast<std::size_t>(idx[i])];
    NodeId id = push(std::move(out), {a}, nullptr);
    auto map = std::make_shared<std::vector<std::int64_t>>(std::move(idx));
    nodes_[id].back = [a, map](Tape& t, const Matrix& g) {
      Matrix gp(t.value(a).rows(), t.value(a).cols());
      for (std::size_t i = 0; i < map->size(); ++i)
        if ((*map)[i] >= 0) gp.vec()[static_cast<std::size_t>((*map)[i])] += g.vec()[i];
      t.accumulate(a, std::move(gp));
    };
    return id;
  }

  NodeId concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ArgumentError("Tape::concat_cols: empty");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    for (NodeId p : parts) {
      if (value(p).rows() != rows) throw ShapeError("Tape::concat_cols: row mismatch");
      cols += value(p).cols();
    }
    Matrix out(rows, cols);
    std::size_t off = 0;
    for (NodeId p : parts) {
      const Matrix& m = value(p);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(i, off + j) = m(i, j);
      off += m.cols();
    }
    NodeId id = push(std::move(out), parts, nullptr);
    auto copy = parts;
    nodes_[id].back = [copy](Tape& t, const Matrix& g) {
      std::size_t o = 0;
      for (NodeId p : copy) {
        const std::size_t pc = t.value(p).cols();
        Matrix gp(g.rows(), pc);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < pc; ++j) gp(i, j) = g(i, o + j);
        t.accumulate(p, std::move(gp));
        o += pc;
      }
    };
    return id;
  }

  NodeId concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ArgumentError("Tape::concat_rows: empty");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    for (NodeId p : parts) {
      if (value(p).cols() != cols) throw ShapeError("Tape::concat_rows: col mismatch");
      rows += value(p).rows();
    }
    Matrix out(rows, cols);
    std::size_t off = 0;
    for (NodeId p : parts) {
      const Matrix& m = value(p);
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < cols; ++j) out(off + i, j) = m(i, j);
      off += m.rows();
    }
    NodeId id = push(std::move(out), parts, nullptr);
    auto copy = parts;
    nodes_[id].back = [copy](Tape& t, const Matrix& g) {
      std::size_t o = 0;
      for (NodeId p : copy) {
        const std::size_t pr = t.value(p).rows();
        Matrix gp(pr, g.cols());
        for (std::size_t i = 0; i < pr; ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gp(i, j) = g(o + i, j);
        t.accumulate(p, std::move(gp));
        o += pr;
      }
    };
    return id;
  }

  // Adds a 1 x C bias row to every row of a (n x C).
  NodeId add_bias(NodeId a, NodeId bias) {
    const Matrix& x = value(a);
    const Matrix& b = value(bias);
    if (b.rows() != 1 || b.cols() != x.cols())
      throw ShapeError("Tape::add_bias: bias must be 1 x cols");
    Matrix out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) += b(0, j);
    NodeId id = push(std::move(out), {a, bias}, nullptr);
    nodes_[id].back = [a, bias](Tape& t, const Matrix& g) {
      t.accumulate(a, g);
      Matrix gb(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
      t.accumulate(bias, std::move(gb));
    };
    return id;
  }

  // Per-row layer normalization over channels with learnable 1 x C gain/shift.
  NodeId layernorm(NodeId a, NodeId gamma, NodeId beta, double eps = 1e-5) {
    const Matrix& x = value(a);
    const Matrix& gm = value(gamma);
    const Matrix& bt = value(beta);
    const std::size_t n = x.rows(), c = x.cols();
    if (gm.rows() != 1 || gm.cols() != c || bt.rows() != 1 || bt.cols() != c)
      throw ShapeError("Tape::layernorm: gain/shift must be 1 x cols");
    Matrix xhat(n, c), out(n, c);
    std::vector<double> inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) mean += x(i, j);
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = x(i, j) - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      inv_std[i] = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < c; ++j) {
        xhat(i, j) = (x(i, j) - mean) * inv_std[i];
        out(i, j) = gm(0, j) * xhat(i, j) + bt(0, j);
      }
    }
    NodeId id = push(std::move(out), {a, gamma, beta}, nullptr);
    auto xh = std::make_shared<Matrix>(std::move(xhat));
    auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
    nodes_[id].back = [a, gamma, beta, xh, is](Tape& t, const Matrix& g) {
      const Matrix& gm2 = t.value(gamma);
      const std::size_t n2 = g.rows(), c2 = g.cols();
      Matrix ggamma(1, c2), gbeta(1, c2), gx(n2, c2);
      for (std::size_t i = 0; i < n2; ++i) {
        double sum_gg = 0.0, sum_ggx = 0.0;
        for (std::size_t j = 0; j < c2; ++j) {
          ggamma(0, j) += g(i, j) * (*xh)(i, j);
          gbeta(0, j) += g(i, j);
          const double gg = g(i, j) * gm2(0, j);
          sum_gg += gg;
          sum_ggx += gg * (*xh)(i, j);
        }
        const double inv_c = 1.0 / static_cast<double>(c2);
        for (std::size_t j = 0; j < c2; ++j) {
          const double gg = g(i, j) * gm2(0, j);
          gx(i, j) = (*is)[i] *
                     (gg - inv_c * sum_gg - (*xh)(i, j) * inv_c * sum_ggx);
        }
      }
      t.accumulate(a, std::move(gx));
      t.accumulate(gamma, std::move(ggamma));
      t.accumulate(beta, std::move(gbeta));
    };
    return id;
  }

  NodeId gelu(NodeId a) {
    const Matrix& x = value(a);
    Matrix out = x;
    for (double& v : out.vec()) v = v * phi(v);
    NodeId id = push(std::move(out), {a}, nullptr);
    nodes_[id].back = [a](Tape& t, const Matrix& g) {
      const Matrix& x2 = t.value(a);
      Matrix gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double v = x2.vec()[i];
        gx.vec()[i] *= phi(v) + v * dphi(v);
      }
      t.accumulate(a, std::move(gx));
    };
    return id;
  }

  NodeId relu(NodeId a) {
    Matrix out = value(a);
    for (double& v : out.vec()) v = v > 0.0 ? v : 0.0;
    NodeId id = push(std::move(out), {a}, nullptr);
    nodes_[id].back = [a](Tape& t, const Matrix& g) {
      const Matrix& x2 = t.value(a);
      Matrix gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (x2.vec()[i] <= 0.0) gx.vec()[i] = 0.0;
      t.accumulate(a, std::move(gx));
    };
    return id;
  }

  NodeId softmax_rows(NodeId a) {
    const Matrix& x = value(a);
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double mx = x(i, 0);
      for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) {
        out(i, j) = std::exp(x(i, j) - mx);
        sum += out(i, j);
      }
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) /= sum;
    }
    NodeId id = push(std::move(out), {a}, nullptr);
    nodes_[id].back = [a, id](Tape& t, const Matrix& g) {
      const Matrix& y = t.value(id);
      Matrix gx(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < g.cols(); ++j)
          gx(i, j) = y(i, j) * (g(i, j) - dot);
      }
      t.accumulate(a, std::move(gx));
    };
    return id;
  }

  // Weighted softmax cross-entropy over rows: sum_i w_i * (-log p_{i, l_i}) / norm.
  NodeId softmax_xent(NodeId logits, std::vector<int> labels,
                      std::vector<double> weights, double norm) {
    const Matrix& z = value(logits);
    if (labels.size() != z.rows() || weights.size() != z.rows())
      throw ShapeError("Tape::softmax_xent: label/weight count mismatch");
    if (!(norm > 0.0)) throw ArgumentError("Tape::softmax_xent: norm must be positive");
    Matrix probs(z.rows(), z.cols());
    double loss = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      double mx = z(i, 0);
      for (std::size_t j = 1; j < z.cols(); ++j) mx = std::max(mx, z(i, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < z.cols(); ++j) {
        probs(i, j) = std::exp(z(i, j) - mx);
        sum += probs(i, j);
      }
      for (std::size_t j = 0; j < z.cols(); ++j) probs(i, j) /= sum;
      const int l = labels[i];
      if (l < 0 || static_cast<std::size_t>(l) >= z.cols())
        throw ArgumentError("Tape::softmax_xent: label out of range");
      loss += weights[i] * -std::log(std::max(probs(i, l), 1e-300));
    }
    Matrix out(1, 1);
    out(0, 0) = loss / norm;
    NodeId id = push(std::move(out), {logits}, nullptr);
    auto p = std::make_shared<Matrix>(std::move(probs));
    auto lab = std::make_shared<std::vector<int>>(std::move(labels));
    auto wts = std::make_shared<std::vector<double>>(std::move(weights));
    nodes_[id].back = [logits, p, lab, wts, norm](Tape& t, const Matrix& g) {
      const double s = g(0, 0) / norm;
      Matrix gz = *p;
      for (std::size_t i = 0; i < gz.rows(); ++i) {
        gz(i, static_cast<std::size_t>((*lab)[i])) -= 1.0;
        for (std::size_t j = 0; j < gz.cols(); ++j) gz(i, j) *= s * (*wts)[i];
      }
      t.accumulate(logits, std::move(gz));
    };
    return id;
  }

  // Row-weighted smooth-L1 (transition point 1.0) against a constant target.
  NodeId smooth_l1(NodeId pred, Matrix target, std::vector<double> row_weights,
                   double norm) {
    const Matrix& p = value(pred);
    if (!p.same_shape(target)) throw ShapeError("Tape::smooth_l1: shape mismatch");
    if (row_weights.size() != p.rows())
      throw ShapeError("Tape::smooth_l1: weight count mismatch");
    if (!(norm > 0.0)) throw ArgumentError("Tape::smooth_l1: norm must be positive");
    double loss = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) {
        const double d = p(i, j) - target(i, j);
        const double h = std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
        loss += row_weights[i] * h;
      }
    Matrix out(1, 1);
    out(0, 0) = loss / norm;
    NodeId id = push(std::move(out), {pred}, nullptr);
    auto tgt = std::make_shared<Matrix>(std::move(target));
    auto wts = std::make_shared<std::vector<double>>(std::move(row_weights));
    nodes_[id].back = [pred, tgt, wts, norm](Tape& t, const Matrix& g) {
      const Matrix& p2 = t.value(pred);
      const double s = g(0, 0) / norm;
      Matrix gp(p2.rows(), p2.cols());
      for (std::size_t i = 0; i < p2.rows(); ++i)
        for (std::size_t j = 0; j < p2.cols(); ++j) {
          const double d = p2(i, j) - (*tgt)(i, j);
          const double dd = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
          gp(i, j) = s * (*wts)[i] * dd;
        }
      t.accumulate(pred, std::move(gp));
    };
    return id;
  }

  // Weighted binary cross-entropy with logits (stable form), normalized by norm.
  NodeId bce_logits(NodeId logits, std::vector<double> targets,
                    std::vector<double> weights, double norm) {
    const Matrix& z = value(logits);
    if (z.cols() != 1 || targets.size() != z.rows() || weights.size() != z.rows())
      throw ShapeError("Tape::bce_logits: expects n x 1 logits with matching targets");
    if (!(norm > 0.0)) throw ArgumentError("Tape::bce_logits: norm must be positive");
    double loss = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const double v = z(i, 0), t = targets[i];
      loss += weights[i] *
              (std::max(v, 0.0) - v * t + std::log1p(std::exp(-std::abs(v))));
    }
    Matrix out(1, 1);
    out(0, 0) = loss / norm;
    NodeId id = push(std::move(out), {logits}, nullptr);
    auto tg = std::make_shared<std::vector<double>>(std::move(targets));
    auto wt = std::make_shared<std::vector<double>>(std::move(weights));
    nodes_[id].back = [logits, tg, wt, norm](Tape& t, const Matrix& g) {
      const Matrix& z2 = t.value(logits);
      const double s = g(0, 0) / norm;
      Matrix gz(z2.rows(), 1);
      for (std::size_t i = 0; i < z2.rows(); ++i) {
        const double sig = 1.0 / (1.0 + std::exp(-z2(i, 0)));
        gz(i, 0) = s * (*wt)[i] * (sig - (*tg)[i]);
      }
      t.accumulate(logits, std::move(gz));
    };
    return id;
  }

  NodeId mean_all(NodeId a) {
    const Matrix& x = value(a);
    Matrix out(1, 1);
    double s = 0.0;
    for (double v : x.vec()) s += v;
    out(0, 0) = s / static_cast<double>(x.size());
    NodeId id = push(std::move(out), {a}, nullptr);
    nodes_[id].back = [a](Tape& t, const Matrix& g) {
      const Matrix& x2 = t.value(a);
      Matrix gx(x2.rows(), x2.cols());
      const double s2 = g(0, 0) / static_cast<double>(x2.size());
      for (double& v : gx.vec()) v = s2;
      t.accumulate(a, std::move(gx));
    };
    return id;
  }

  // Seeds d(loss)/d(loss) = 1 and runs the tape in reverse.
  void backward(NodeId loss) {
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1)
      throw ShapeError("Tape::backward: loss must be scalar");
    for (auto& n : nodes_) n.grad = Matrix();
    nodes_[loss].grad = Matrix(1, 1);
    nodes_[loss].grad(0, 0) = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.back) continue;
      n.back(*this, n.grad);
    }
  }

  // Gradient of the last backward() w.r.t. a registered parameter tensor.
  // Returns a zero matrix of matching shape when the parameter was unused.
  Matrix grad_of(const Matrix* storage) const {
    auto it = param_nodes_.find(storage);
    if (it == param_nodes_.end() || nodes_[it->second].grad.empty())
      return Matrix(storage->rows(), storage->cols());
    return nodes_[it->second].grad;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, const Matrix&)> back;
    const Matrix* param = nullptr;
  };

  static double phi(double x) { return 0.5 * (1.0 + std::erf(x * 0.70710678118654752440)); }
  static double dphi(double x) {
    return std::exp(-0.5 * x * x) * 0.39894228040143267794;
  }

  NodeId push(Matrix v, std::vector<NodeId> /*parents*/, const Matrix* p) {
    Node n;
    n.value = std::move(v);
    n.param = p;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  void accumulate(NodeId id, Matrix g) {
    Node& n = nodes_[id];
    if (n.grad.empty()) {
      n.grad = std::move(g);
    } else {
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad.vec()[i] += g.vec()[i];
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Matrix*, NodeId> param_nodes_;
};

}  // namespace ldet
