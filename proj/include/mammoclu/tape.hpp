#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mammoclu::ad {

// Reverse-mode tape over dense matrices. One Tape records one forward pass;
// backward() replays it in reverse. Node ids index into the tape and are
// meaningless across tapes. Scalars are 1x1 matrices. References returned by
// val()/grad_of() are invalidated when a new node is recorded.
template <typename S>
class Tape {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

  int leaf(const Mat& v) { return push(v, true, nullptr); }
  int constant(const Mat& v) { return push(v, false, nullptr); }

  const Mat& val(int id) const { return nodes_[id].val; }
  // Gradient of the last backward() target w.r.t. node id (zero matrix if untouched).
  Mat grad_of(int id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) return Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }
  std::size_t size() const { return nodes_.size(); }

  void backward(int id) {
    if (val(id).rows() != 1 || val(id).cols() != 1)
      throw std::invalid_argument("backward: target must be a 1x1 scalar node");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    gref(id).setConstant(S(1));
    for (int i = id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.grad.size() != 0) n.back(*this, i);
    }
  }

  // ---- elementwise / arithmetic ----

  int add(int a, int b) {
    same_shape(a, b, "add");
    return push(val(a) + val(b), wants(a) || wants(b), [a, b](Tape& t, int id) {
      if (t.wants(a)) t.gref(a) += t.nodes_[id].grad;
      if (t.wants(b)) t.gref(b) += t.nodes_[id].grad;
    });
  }

  int sub(int a, int b) {
    same_shape(a, b, "sub");
    return push(val(a) - val(b), wants(a) || wants(b), [a, b](Tape& t, int id) {
      if (t.wants(a)) t.gref(a) += t.nodes_[id].grad;
      if (t.wants(b)) t.gref(b) -= t.nodes_[id].grad;
    });
  }

  int mul(int a, int b) {
    same_shape(a, b, "mul");
    return push(val(a).cwiseProduct(val(b)), wants(a) || wants(b), [a, b](Tape& t, int id) {
      if (t.wants(a)) t.gref(a) += t.nodes_[id].grad.cwiseProduct(t.val(b));
      if (t.wants(b)) t.gref(b) += t.nodes_[id].grad.cwiseProduct(t.val(a));
    });
  }

  int scale(int a, S c) {
    return push(val(a) * c, wants(a), [a, c](Tape& t, int id) {
      if (t.wants(a)) t.gref(a) += t.nodes_[id].grad * c;
    });
  }

  int add_const(int a, S c) {
    return push((val(a).array() + c).matrix(), wants(a), [a](Tape& t, int id) {
      if (t.wants(a)) t.gref(a) += t.nodes_[id].grad;
    });
  }

  // ---- linear algebra ----

  int matmul(int a, int b) {
    if (val(a).cols() != val(b).rows())
      throw std::invalid_argument("matmul: inner dimensions differ");
    return push(val(a) * val(b), wants(a) || wants(b), [a, b](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      if (t.wants(a)) t.gref(a).noalias() += g * t.val(b).transpose();
      if (t.wants(b)) t.gref(b).noalias() += t.val(a).transpose() * g;
    });
  }

  int transpose(int a) {
    return push(val(a).transpose(), wants(a), [a](Tape& t, int id) {
      if (t.wants(a)) t.gref(a) += t.nodes_[id].grad.transpose();
    });
  }

  // x (N x din) @ W (din x dout) + b (1 x dout), broadcast over rows.
  int linear(int x, int W, int b) { return add_rowvec(matmul(x, W), b); }

  int add_rowvec(int x, int b) {
    if (val(b).rows() != 1 || val(b).cols() != val(x).cols())
      throw std::invalid_argument("add_rowvec: b must be 1 x cols(x)");
    Mat y = val(x);
    y.rowwise() += val(b).row(0);
    return push(std::move(y), wants(x) || wants(b), [x, b](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      if (t.wants(x)) t.gref(x) += g;
      if (t.wants(b)) t.gref(b) += g.colwise().sum();
    });
  }

  // Row-wise scale/divide by a column vector s (N x 1).
  int mul_colvec(int x, int s) {
    colvec_shape(x, s, "mul_colvec");
    Mat y = (val(x).array().colwise() * val(s).col(0).array()).matrix();
    return push(std::move(y), wants(x) || wants(s), [x, s](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      if (t.wants(x)) t.gref(x) += (g.array().colwise() * t.val(s).col(0).array()).matrix();
      if (t.wants(s)) t.gref(s) += g.cwiseProduct(t.val(x)).rowwise().sum();
    });
  }

  int div_colvec(int x, int s) {
    colvec_shape(x, s, "div_colvec");
    Mat y = (val(x).array().colwise() / val(s).col(0).array()).matrix();
    return push(std::move(y), wants(x) || wants(s), [x, s](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      auto sv = t.val(s).col(0).array();
      if (t.wants(x)) t.gref(x) += (g.array().colwise() / sv).matrix();
      if (t.wants(s))
        t.gref(s) -= (g.cwiseProduct(t.val(x)).rowwise().sum().array() / (sv * sv)).matrix();
    });
  }

  int mul_scalarvar(int x, int c) {
    scalar_shape(c, "mul_scalarvar");
    return push(val(x) * val(c)(0, 0), wants(x) || wants(c), [x, c](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      if (t.wants(x)) t.gref(x) += g * t.val(c)(0, 0);
      if (t.wants(c)) t.gref(c)(0, 0) += g.cwiseProduct(t.val(x)).sum();
    });
  }

  int add_scalarvar(int x, int c) {
    scalar_shape(c, "add_scalarvar");
    return push((val(x).array() + val(c)(0, 0)).matrix(), wants(x) || wants(c),
                [x, c](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      if (t.wants(x)) t.gref(x) += g;
      if (t.wants(c)) t.gref(c)(0, 0) += g.sum();
    });
  }

  // ---- reductions ----

  int sum_all(int x) {
    Mat y(1, 1);
    y(0, 0) = val(x).sum();
    return push(std::move(y), wants(x), [x](Tape& t, int id) {
      if (t.wants(x)) t.gref(x).array() += t.nodes_[id].grad(0, 0);
    });
  }

  int mean_all(int x) {
    S inv = S(1) / S(val(x).size());
    Mat y(1, 1);
    y(0, 0) = val(x).sum() * inv;
    return push(std::move(y), wants(x), [x, inv](Tape& t, int id) {
      if (t.wants(x)) t.gref(x).array() += t.nodes_[id].grad(0, 0) * inv;
    });
  }

  int colmean(int x) {
    S inv = S(1) / S(val(x).rows());
    Mat y = val(x).colwise().sum() * inv;
    return push(std::move(y), wants(x), [x, inv](Tape& t, int id) {
      if (t.wants(x)) {
        const Mat& g = t.nodes_[id].grad;
        t.gref(x) += (g * inv).replicate(t.val(x).rows(), 1);
      }
    });
  }

  // Per-column max over rows; ties resolved to the lowest row index.
  int colmax(int x) {
    const Mat& v = val(x);
    Mat y(1, v.cols());
    std::vector<int> arg(static_cast<std::size_t>(v.cols()));
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      int best = 0;
      for (Eigen::Index r = 1; r < v.rows(); ++r)
        if (v(r, c) > v(best, c)) best = static_cast<int>(r);
      arg[static_cast<std::size_t>(c)] = best;
      y(0, c) = v(best, c);
    }
    return push(std::move(y), wants(x), [x, arg](Tape& t, int id) {
      if (!t.wants(x)) return;
      const Mat& g = t.nodes_[id].grad;
      Mat& gx = t.gref(x);
      for (Eigen::Index c = 0; c < gx.cols(); ++c)
        gx(arg[static_cast<std::size_t>(c)], c) += g(0, c);
    });
  }

  int rownorm(int x) {
    Mat y = val(x).rowwise().norm();
    return push(std::move(y), wants(x), [x](Tape& t, int id) {
      if (!t.wants(x)) return;
      const Mat& g = t.nodes_[id].grad;
      const Mat& v = t.val(x);
      const Mat& n = t.val(id);
      Mat& gx = t.gref(x);
      for (Eigen::Index r = 0; r < v.rows(); ++r)
        if (n(r, 0) > S(0)) gx.row(r) += (g(r, 0) / n(r, 0)) * v.row(r);
    });
  }

  // ---- indexing / restructuring ----

  int gather_rows(int x, std::vector<int> idx) {
    const Mat& v = val(x);
    Mat y(static_cast<Eigen::Index>(idx.size()), v.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= v.rows())
        throw std::invalid_argument("gather_rows: index out of range");
      y.row(static_cast<Eigen::Index>(i)) = v.row(idx[i]);
    }
    return push(std::move(y), wants(x), [x, idx = std::move(idx)](Tape& t, int id) {
      if (!t.wants(x)) return;
      const Mat& g = t.nodes_[id].grad;
      Mat& gx = t.gref(x);
      for (std::size_t i = 0; i < idx.size(); ++i)
        gx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }

  // y(j, 0) = x(j, col[j])
  int select_per_row(int x, std::vector<int> col) {
    const Mat& v = val(x);
    if (static_cast<Eigen::Index>(col.size()) != v.rows())
      throw std::invalid_argument("select_per_row: one column index per row required");
    Mat y(v.rows(), 1);
    for (Eigen::Index r = 0; r < v.rows(); ++r) y(r, 0) = v(r, col[static_cast<std::size_t>(r)]);
    return push(std::move(y), wants(x), [x, col = std::move(col)](Tape& t, int id) {
      if (!t.wants(x)) return;
      const Mat& g = t.nodes_[id].grad;
      Mat& gx = t.gref(x);
      for (Eigen::Index r = 0; r < gx.rows(); ++r)
        gx(r, col[static_cast<std::size_t>(r)]) += g(r, 0);
    });
  }

  // out(seg[j], :) = sum of x rows assigned to segment seg[j]; m segments.
  int segment_sum(int x, std::vector<int> seg, int m) {
    const Mat& v = val(x);
    if (static_cast<Eigen::Index>(seg.size()) != v.rows())
      throw std::invalid_argument("segment_sum: one segment per row required");
    Mat y = Mat::Zero(m, v.cols());
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      if (seg[static_cast<std::size_t>(r)] < 0 || seg[static_cast<std::size_t>(r)] >= m)
        throw std::invalid_argument("segment_sum: segment id out of range");
      y.row(seg[static_cast<std::size_t>(r)]) += v.row(r);
    }
    return push(std::move(y), wants(x), [x, seg = std::move(seg)](Tape& t, int id) {
      if (!t.wants(x)) return;
      const Mat& g = t.nodes_[id].grad;
      Mat& gx = t.gref(x);
      for (Eigen::Index r = 0; r < gx.rows(); ++r)
        gx.row(r) += g.row(seg[static_cast<std::size_t>(r)]);
    });
  }

  int concat_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    Eigen::Index rows = 0, cols = val(parts[0]).cols();
    bool ng = false;
    for (int p : parts) {
      if (val(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
      rows += val(p).rows();
      ng = ng || wants(p);
    }
    Mat y(rows, cols);
    Eigen::Index at = 0;
    for (int p : parts) {
      y.middleRows(at, val(p).rows()) = val(p);
      at += val(p).rows();
    }
    return push(std::move(y), ng, [parts](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      Eigen::Index at = 0;
      for (int p : parts) {
        Eigen::Index r = t.val(p).rows();
        if (t.wants(p)) t.gref(p) += g.middleRows(at, r);
        at += r;
      }
    });
  }

  int concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    Eigen::Index cols = 0, rows = val(parts[0]).rows();
    bool ng = false;
    for (int p : parts) {
      if (val(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
      cols += val(p).cols();
      ng = ng || wants(p);
    }
    Mat y(rows, cols);
    Eigen::Index at = 0;
    for (int p : parts) {
      y.middleCols(at, val(p).cols()) = val(p);
      at += val(p).cols();
    }
    return push(std::move(y), ng, [parts](Tape& t, int id) {
      const Mat& g = t.nodes_[id].grad;
      Eigen::Index at = 0;
      for (int p : parts) {
        Eigen::Index c = t.val(p).cols();
        if (t.wants(p)) t.gref(p) += g.middleCols(at, c);
        at += c;
      }
    });
  }

  // ---- nonlinearities ----

  int sigmoid(int x) {
    Mat y = val(x).unaryExpr([](S v) { return sigmoid_scalar(v); });
    return push(std::move(y), wants(x), [x](Tape& t, int id) {
      if (!t.wants(x)) return;
      const Mat& y = t.val(id);
      const Mat& g = t.nodes_[id].grad;
      t.gref(x) += g.cwiseProduct(y.cwiseProduct(Mat::Ones(y.rows(), y.cols()) - y));
    });
  }

  int gelu(int x) {
    Mat y = val(x).unaryExpr([](S v) {
      return S(0.5) * v * (S(1) + S(std::erf(double(v) * 0.7071067811865475)));
    });
    return push(std::move(y), wants(x), [x](Tape& t, int id) {
      if (!t.wants(x)) return;
      const Mat& v = t.val(x);
      const Mat& g = t.nodes_[id].grad;
      Mat d = v.unaryExpr([](S u) {
        double x = double(u);
        double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
        double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
        return S(cdf + x * pdf);
      });
      t.gref(x) += g.cwiseProduct(d);
    });
  }

  int abs(int x) {
    return push(val(x).cwiseAbs(), wants(x), [x](Tape& t, int id) {
      if (!t.wants(x)) return;
      const Mat& g = t.nodes_[id].grad;
      Mat s = t.val(x).unaryExpr([](S v) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
      t.gref(x) += g.cwiseProduct(s);
    });
  }

  // Softmax over the entries of a k x 1 column vector.
  int softmax_col(int x) {
    const Mat& v = val(x);
    if (v.cols() != 1) throw std::invalid_argument("softmax_col: expected a column vector");
    S m = v.maxCoeff();
    Mat e = (v.array() - m).exp().matrix();
    Mat y = e / e.sum();
    return push(std::move(y), wants(x), [x](Tape& t, int id) {
      if (!t.wants(x)) return;
      const Mat& y = t.val(id);
      const Mat& g = t.nodes_[id].grad;
      S dot = y.cwiseProduct(g).sum();
      t.gref(x) += y.cwiseProduct((g.array() - dot).matrix());
    });
  }

  // Per-row layer normalization: gamma, beta are 1 x d.
  int layer_norm(int x, int gamma, int beta, S eps = S(1e-5)) {
    const Mat& v = val(x);
    if (val(gamma).cols() != v.cols() || val(beta).cols() != v.cols())
      throw std::invalid_argument("layer_norm: gamma/beta width mismatch");
    Eigen::Index d = v.cols();
    Mat xhat(v.rows(), d);
    Mat inv_std(v.rows(), 1);
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      S mu = v.row(r).mean();
      S var = (v.row(r).array() - mu).square().sum() / S(d);
      S is = S(1) / std::sqrt(var + eps);
      inv_std(r, 0) = is;
      xhat.row(r) = (v.row(r).array() - mu) * is;
    }
    Mat y = xhat;
    y.array().rowwise() *= val(gamma).row(0).array();
    y.rowwise() += val(beta).row(0);
    return push(std::move(y), wants(x) || wants(gamma) || wants(beta),
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int id) {
                  const Mat& g = t.nodes_[id].grad;
                  if (t.wants(beta)) t.gref(beta) += g.colwise().sum();
                  if (t.wants(gamma)) t.gref(gamma) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.wants(x)) {
                    Eigen::Index d = g.cols();
                    Mat gxh = (g.array().rowwise() * t.val(gamma).row(0).array()).matrix();
                    Mat& gx = t.gref(x);
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      S mean_g = gxh.row(r).mean();
                      S mean_gx = gxh.row(r).cwiseProduct(xhat.row(r)).sum() / S(d);
                      gx.row(r) += (inv_std(r, 0) *
                                    (gxh.row(r).array() - mean_g - xhat.row(r).array() * mean_gx))
                                       .matrix();
                    }
                  }
                });
  }

  // Min-max rescale to [0,1]; a constant input maps to all zeros.
  int minmax_norm01(int x) {
    const Mat& v = val(x);
    int pmin = 0, pmax = 0;
    const S* data = v.data();
    for (int i = 1; i < int(v.size()); ++i) {
      if (data[i] < data[pmin]) pmin = i;
      if (data[i] > data[pmax]) pmax = i;
    }
    S lo = data[pmin], hi = data[pmax];
    Mat y;
    bool degenerate = (hi == lo);
    if (degenerate)
      y = Mat::Zero(v.rows(), v.cols());
    else
      y = ((v.array() - lo) / (hi - lo)).matrix();
    return push(std::move(y), wants(x), [x, pmin, pmax, degenerate](Tape& t, int id) {
      if (!t.wants(x) || degenerate) return;
      const Mat& g = t.nodes_[id].grad;
      const Mat& y = t.val(id);
      const Mat& v = t.val(x);
      S range = v.data()[pmax] - v.data()[pmin];
      S tot = g.sum();
      S q = g.cwiseProduct(y).sum();
      Mat& gx = t.gref(x);
      gx += g / range;
      gx.data()[pmin] += (q - tot) / range;
      gx.data()[pmax] -= q / range;
    });
  }

  // ---- scalar losses ----

  // Binary cross-entropy on a probability, clamped to [clamp, 1-clamp].
  int bce_prob(int p, S target, S clamp = S(1e-7)) {
    scalar_shape(p, "bce_prob");
    S pv = val(p)(0, 0);
    S ph = std::min(std::max(pv, clamp), S(1) - clamp);
    Mat y(1, 1);
    y(0, 0) = -(target * std::log(ph) + (S(1) - target) * std::log(S(1) - ph));
    bool interior = (pv > clamp && pv < S(1) - clamp);
    return push(std::move(y), wants(p), [p, target, ph, interior](Tape& t, int id) {
      if (!t.wants(p) || !interior) return;
      S g = t.nodes_[id].grad(0, 0);
      t.gref(p)(0, 0) += g * (ph - target) / (ph * (S(1) - ph));
    });
  }

  // Numerically stable BCE on a logit; pos_weight scales the positive term.
  int bce_logit(int z, S target, S pos_weight = S(1)) {
    scalar_shape(z, "bce_logit");
    S zv = val(z)(0, 0);
    auto softplus = [](S v) {
      return std::log1p(std::exp(-std::abs(double(v)))) + std::max(v, S(0));
    };
    Mat y(1, 1);
    y(0, 0) = pos_weight * target * softplus(-zv) + (S(1) - target) * softplus(zv);
    return push(std::move(y), wants(z), [z, target, pos_weight](Tape& t, int id) {
      if (!t.wants(z)) return;
      S g = t.nodes_[id].grad(0, 0);
      S sz = sigmoid_scalar(t.val(z)(0, 0));
      t.gref(z)(0, 0) += g * (pos_weight * target * (sz - S(1)) + (S(1) - target) * sz);
    });
  }

  static S sigmoid_scalar(S v) {
    if (v >= S(0)) return S(1) / (S(1) + S(std::exp(double(-v))));
    S e = S(std::exp(double(v)));
    return e / (S(1) + e);
  }

 private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void(Tape&, int)> back;
    bool needs_grad = false;
  };

  bool wants(int id) const { return nodes_[id].needs_grad; }

  Mat& gref(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  template <typename M>
  int push(M&& v, bool needs_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.val = std::forward<M>(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void same_shape(int a, int b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
  void colvec_shape(int x, int s, const char* op) const {
    if (val(s).cols() != 1 || val(s).rows() != val(x).rows())
      throw std::invalid_argument(std::string(op) + ": expected N x 1 scale vector");
  }
  void scalar_shape(int c, const char* op) const {
    if (val(c).rows() != 1 || val(c).cols() != 1)
      throw std::invalid_argument(std::string(op) + ": expected 1x1 scalar");
  }

  std::vector<Node> nodes_;
};

}  // namespace mammoclu::ad
