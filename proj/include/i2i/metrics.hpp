#pragma once

// Accuracy, confusion, mIoU, the logistic domain probe and PCA projection.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "i2i/tensor.hpp"

namespace i2i {

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size())
    throw ContractError("accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                        std::to_string(labels.size()) + " labels");
  if (preds.empty()) throw ContractError("accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return double(hit) / double(preds.size());
}

/// Row = true class, column = predicted class.
inline std::vector<std::vector<std::int64_t>> confusion_matrix(const std::vector<int>& preds,
                                                               const std::vector<int>& labels, int k) {
  if (preds.size() != labels.size()) throw ContractError("confusion_matrix: length mismatch");
  std::vector<std::vector<std::int64_t>> m(static_cast<std::size_t>(k), std::vector<std::int64_t>(static_cast<std::size_t>(k), 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k || preds[i] < 0 || preds[i] >= k)
      throw ContractError("confusion_matrix: class out of range");
    ++m[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
  }
  return m;
}

/// Per-class recall; classes absent from `labels` report NaN.
inline std::vector<double> per_class_accuracy(const std::vector<std::vector<std::int64_t>>& confusion) {
  std::vector<double> out;
  for (std::size_t c = 0; c < confusion.size(); ++c) {
    const auto total = std::accumulate(confusion[c].begin(), confusion[c].end(), std::int64_t{0});
    out.push_back(total ? double(confusion[c][c]) / double(total) : std::nan(""));
  }
  return out;
}

/// Mean over classes present in either mask of |pred ∩ true| / |pred ∪ true|.
inline double miou(const std::vector<int>& pred, const std::vector<int>& truth, int k) {
  if (pred.size() != truth.size()) throw ContractError("miou: mask size mismatch");
  std::vector<std::int64_t> inter(static_cast<std::size_t>(k), 0), uni(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], t = truth[i];
    if (p < 0 || p >= k || t < 0 || t >= k)
      throw ContractError("miou: class value out of range [0," + std::to_string(k) + ")");
    if (p == t) {
      ++inter[static_cast<std::size_t>(p)];
      ++uni[static_cast<std::size_t>(p)];
    } else {
      ++uni[static_cast<std::size_t>(p)];
      ++uni[static_cast<std::size_t>(t)];
    }
  }
  double sum = 0;
  int present = 0;
  for (int c = 0; c < k; ++c)
    if (uni[static_cast<std::size_t>(c)] > 0) {
      sum += double(inter[static_cast<std::size_t>(c)]) / double(uni[static_cast<std::size_t>(c)]);
      ++present;
    }
  if (present == 0) throw ContractError("miou: empty masks");
  return sum / present;
}

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ProbeOptions {
  double train_fraction = 0.8;
  double l2 = 1e-3;
  int max_iterations = 50;
  std::uint64_t seed = 1234;
};

/// Held-out accuracy of a fresh logistic regression separating the rows of
/// `source` (label 0) from `target` (label 1). Features are standardized on
/// the training split; the fit is Newton's method with a small L2 penalty.
inline double domain_probe(const Matrix& source, const Matrix& target, const ProbeOptions& opt = {}) {
  if (source.rows() == 0 || target.rows() == 0) throw ContractError("domain_probe: both domains need samples");
  if (source.cols() != target.cols()) throw ContractError("domain_probe: feature width mismatch");
  const Eigen::Index n = source.rows() + target.rows(), d = source.cols();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(opt.seed);
  for (Eigen::Index i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<Eigen::Index> u(0, i);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(u(rng))]);
  }
  const auto n_train = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::llround(opt.train_fraction * double(n))), 1, n - 1);
  auto row = [&](Eigen::Index i) { return i < source.rows() ? source.row(i) : target.row(i - source.rows()); };
  Matrix xtr(n_train, d + 1), xte(n - n_train, d + 1);
  Eigen::VectorXd ytr(n_train), yte(n - n_train);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto i = order[static_cast<std::size_t>(k)];
    const double y = i < source.rows() ? 0.0 : 1.0;
    if (k < n_train) {
      xtr.row(k).head(d) = row(i);
      ytr(k) = y;
    } else {
      xte.row(k - n_train).head(d) = row(i);
      yte(k - n_train) = y;
    }
  }
  const Eigen::RowVectorXd mu = xtr.leftCols(d).colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.leftCols(d).rowwise() - mu).array().square().colwise().sum() / double(n_train)).sqrt();
  for (Eigen::Index j = 0; j < d; ++j)
    if (sd(j) < 1e-12) sd(j) = 1.0;
  auto standardize = [&](Matrix& x) {
    x.leftCols(d) = ((x.leftCols(d).rowwise() - mu).array().rowwise() / sd.array()).matrix();
    x.col(d).setOnes();
  };
  standardize(xtr);
  standardize(xte);

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d + 1);
  Eigen::VectorXd reg = Eigen::VectorXd::Constant(d + 1, opt.l2 * double(n_train));
  reg(d) = 0.0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    const Eigen::VectorXd p = (1.0 + (-(xtr * w).array()).exp()).inverse().matrix();
    const Eigen::VectorXd g = xtr.transpose() * (p - ytr) + reg.cwiseProduct(w);
    const Eigen::VectorXd s = (p.array() * (1.0 - p.array())).matrix();
    Matrix h = xtr.transpose() * s.asDiagonal() * xtr;
    h.diagonal() += reg;
    h.diagonal().array() += 1e-9 * double(n_train);
    const Eigen::VectorXd step = h.ldlt().solve(g);
    w -= step;
    if (step.norm() < 1e-10 * (1.0 + w.norm())) break;
  }
  const Eigen::VectorXd score = xte * w;
  Eigen::Index hit = 0;
  for (Eigen::Index i = 0; i < score.size(); ++i) hit += (score(i) > 0 ? 1.0 : 0.0) == yte(i);
  return double(hit) / double(score.size());
}

struct Projection {
  Matrix points;                      // N x dims
  Matrix components;                  // dims x D, unit rows
  std::vector<double> variances;      // eigenvalues, descending
  bool degenerate = false;            // rank < dims; trailing columns zero
};

/// Centered projection onto the top principal directions. Each component's
/// largest-magnitude loading is made positive.
inline Projection pca_project(const Matrix& x, int dims = 2) {
  if (dims < 1) throw ContractError("pca_project: dims must be >= 1");
  if (x.rows() < dims) throw ContractError("pca_project: need at least dims rows");
  if (x.cols() < 1) throw ContractError("pca_project: no features");
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Matrix xc = x.rowwise() - mu;
  const Matrix cov = (xc.transpose() * xc) / double(std::max<Eigen::Index>(x.rows() - 1, 1));
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const auto& vals = es.eigenvalues();   // ascending
  const auto& vecs = es.eigenvectors();  // columns
  Projection out;
  out.components = Matrix::Zero(dims, x.cols());
  const double top = vals.size() ? std::max(vals(vals.size() - 1), 0.0) : 0.0;
  const double tol = std::max(top, 1.0) * 1e-12 * double(x.cols());
  for (int k = 0; k < dims; ++k) {
    const Eigen::Index j = vals.size() - 1 - k;
    if (j < 0 || vals(j) <= tol) {
      out.degenerate = true;
      out.variances.push_back(0.0);
      continue;
    }
    Eigen::RowVectorXd v = vecs.col(j).transpose();
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.components.row(k) = v;
    out.variances.push_back(vals(j));
  }
  out.points = xc * out.components.transpose();
  return out;
}

template <class T>
Matrix to_matrix(const Tensor<T>& t) {
  const auto n = t.dim(0);
  const auto f = t.numel() / n;
  Matrix m(n, f);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < f; ++j) m(i, j) = double(t.values()[static_cast<std::size_t>(i * f + j)]);
  return m;
}

}  // namespace i2i
