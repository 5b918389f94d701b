#include "corelab/kernels.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>

#include "corelab/errors.hpp"

namespace corelab {

AdditiveMask::AdditiveMask(std::size_t rows, std::size_t cols, bool kept)
    : rows_(rows), cols_(cols), kept_(rows * cols, kept ? 1 : 0) {}

double AdditiveMask::value(std::size_t r, std::size_t c) const {
  return kept(r, c) ? 0.0 : -std::numeric_limits<double>::infinity();
}

std::size_t AdditiveMask::kept_in_row(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols_; ++c) n += kept_[r * cols_ + c];
  return n;
}

namespace kernels {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

MutMap view(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_string(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out = Tensor::zeros(a.rows(), b.cols());
  if (out.size() == 0 || a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  Tensor out = Tensor::zeros(a.rows(), b.rows());
  if (out.size() == 0 || a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
  }
  Tensor out = Tensor::zeros(a.cols(), b.cols());
  if (out.size() == 0 || a.rows() == 0) return out;
  view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out = Tensor::zeros(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor masked_softmax(const Tensor& logits, const AdditiveMask& mask) {
  require_matrix(logits, "masked_softmax");
  if (mask.rows() != logits.rows() || mask.cols() != logits.cols()) {
    throw DimensionError("masked_softmax: mask shape does not match logits " + shape_string(logits.shape()));
  }
  Tensor out = Tensor::zeros(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      if (!mask.kept(r, c)) continue;
      any = true;
      mx = std::max(mx, logits(r, c));
    }
    if (!any) throw InvariantViolation("masked_softmax: row " + std::to_string(r) + " is fully masked");
    double sum = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      if (!mask.kept(r, c)) continue;
      const double e = std::exp(logits(r, c) - mx);
      out(r, c) = e;
      sum += e;
    }
    for (std::size_t c = 0; c < logits.cols(); ++c) out(r, c) /= sum;
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  return masked_softmax(logits, AdditiveMask(logits.rows(), logits.cols(), true));
}

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu == 0.0 || nv == 0.0) throw DomainError("cosine_similarity: zero vector");
  return dot(u, v) / (nu * nv);
}

double cross_entropy(const Tensor& logits, std::span<const TokenId> targets) {
  require_matrix(logits, "cross_entropy");
  if (targets.size() != logits.rows()) throw DimensionError("cross_entropy: one target per row required");
  if (targets.empty()) throw DimensionError("cross_entropy: no targets");
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols()) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range");
    }
    double mx = logits(r, 0);
    for (std::size_t c = 1; c < logits.cols(); ++c) mx = std::max(mx, logits(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) sum += std::exp(logits(r, c) - mx);
    total += (std::log(sum) + mx) - logits(r, static_cast<std::size_t>(t));
  }
  return total / static_cast<double>(logits.rows());
}

Tensor layer_norm(const Tensor& x, double eps) {
  require_matrix(x, "layer_norm");
  Tensor out = Tensor::zeros(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (double v : x.row(r)) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x.row(r)) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) - mean) * inv;
  }
  return out;
}

// tanh approximation, as in GPT-2.
double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double inner = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(inner);
  const double dinner = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = gelu(v);
  return out;
}

Tensor embedding_lookup(const Tensor& table, std::span<const TokenId> ids) {
  require_matrix(table, "embedding_lookup");
  Tensor out = Tensor::zeros(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " out of range");
    }
    const auto src = table.row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace kernels
}  // namespace corelab
