#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "corelab/tensor.hpp"

namespace corelab {

using TokenId = std::int32_t;

// Additive attention mask: each entry is either 0 (kept) or the -inf
// sentinel (dropped). The sentinel is never exponentiated.
class AdditiveMask {
 public:
  AdditiveMask() = default;
  AdditiveMask(std::size_t rows, std::size_t cols, bool kept = false);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  bool kept(std::size_t r, std::size_t c) const { return kept_[r * cols_ + c] != 0; }
  void set_kept(std::size_t r, std::size_t c, bool k) { kept_[r * cols_ + c] = k ? 1 : 0; }
  // 0.0 or -infinity.
  double value(std::size_t r, std::size_t c) const;
  std::size_t kept_in_row(std::size_t r) const;

  friend bool operator==(const AdditiveMask&, const AdditiveMask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> kept_;
};

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b);
// a [m,k] times b^T where b is [n,k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a^T [k,m]^T times b [k,n] -> [m,n].
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Row-wise softmax over kept entries; dropped entries come out exactly 0.
Tensor masked_softmax(const Tensor& logits, const AdditiveMask& mask);
Tensor softmax_rows(const Tensor& logits);

double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> u);
double cosine_similarity(std::span<const double> u, std::span<const double> v);

// Mean of -log softmax(logits[t])[targets[t]] over rows.
double cross_entropy(const Tensor& logits, std::span<const TokenId> targets);

// Per-row standardization without affine parameters.
Tensor layer_norm(const Tensor& x, double eps = 1e-5);
double gelu(double x);
double gelu_derivative(double x);
Tensor gelu(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, std::span<const TokenId> ids);

}  // namespace kernels
}  // namespace corelab
