#include "corelab/autograd.hpp"

#include <Eigen/Core>
#include <cmath>

#include "corelab/errors.hpp"

namespace corelab {

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

Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw UsageError("operands recorded on different tapes");
  return a.tape();
}

bool needs(const Var& v) { return v.tape().needs_grad(v.index()); }

}  // namespace

Parameter::Parameter(std::string name, Tensor v, bool train)
    : value(std::move(v)), trainable(train), name_(std::move(name)) {
  grad = Tensor(value.shape());
}

Tape& Var::tape() const {
  if (!tape_) throw UsageError("variable is detached from any tape");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(index_); }
const Tensor& Var::grad() const {
  const auto& n = tape().node(index_);
  return n.param ? n.param->grad : n.grad;
}

Var Tape::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Tape::param(Parameter& p) {
  if (auto it = param_index_.find(&p); it != param_index_.end()) return Var(this, it->second);
  if (p.trainable && !p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape());
  auto n = std::make_unique<Node>();
  n->needs_grad = p.trainable;
  n->param = &p;
  nodes_.push_back(std::move(n));
  Var v(this, nodes_.size() - 1);
  param_index_.emplace(&p, v.index());
  return v;
}

Var Tape::record(Tensor value, bool needs_grad, std::function<void(Tape&, std::size_t)> backward) {
  if (!value.all_finite()) throw NumericError("non-finite value produced in forward pass");
  auto n = std::make_unique<Node>();
  n->value = std::move(value);
  n->needs_grad = needs_grad;
  n->backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t i) const {
  const Node& n = *nodes_[i];
  return n.param ? n.param->value : n.value;
}

Tensor& Tape::grad_of(std::size_t i) {
  Node& n = *nodes_[i];
  if (n.param) return n.param->grad;
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (!loss.attached() || &loss.tape() != this) throw UsageError("backward: loss is not recorded on this tape");
  if (loss.value().size() != 1) throw UsageError("backward: loss must be a scalar");
  if (backward_done_) throw UsageError("backward: tape already consumed");
  backward_done_ = true;
  grad_of(loss.index())[0] = 1.0;
  for (std::size_t i = loss.index() + 1; i-- > 0;) {
    Node& n = *nodes_[i];
    if (!n.needs_grad || n.param || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, i);
  }
}

namespace ag {

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const std::size_t ia = a.index(), ib = b.index();
  return tape.record(kernels::matmul(a.value(), b.value()), needs(a) || needs(b), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    if (t.needs_grad(ia)) view(t.grad_of(ia)).noalias() += view(g) * view(t.value(ib)).transpose();
    if (t.needs_grad(ib)) view(t.grad_of(ib)).noalias() += view(t.value(ia)).transpose() * view(g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const std::size_t ia = a.index(), ib = b.index();
  return tape.record(kernels::matmul_nt(a.value(), b.value()), needs(a) || needs(b),
                     [ia, ib](Tape& t, std::size_t self) {
                       const Tensor& g = t.node(self).grad;
                       if (t.needs_grad(ia)) view(t.grad_of(ia)).noalias() += view(g) * view(t.value(ib));
                       if (t.needs_grad(ib))
                         view(t.grad_of(ib)).noalias() += view(g).transpose() * view(t.value(ia));
                     });
}

Var add(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  if (!a.value().same_shape(b.value())) {
    throw DimensionError("add: " + shape_string(a.value().shape()) + " vs " + shape_string(b.value().shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.index(), ib = b.index();
  return tape.record(std::move(out), needs(a) || needs(b), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    for (std::size_t in : {ia, ib}) {
      if (!t.needs_grad(in)) continue;
      Tensor& gi = t.grad_of(in);
      for (std::size_t k = 0; k < g.size(); ++k) gi[k] += g[k];
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  Tape& tape = same_tape(a, row);
  const std::size_t n = a.cols();
  if (row.value().size() != n) throw DimensionError("add_row: bias length does not match columns");
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) += row.value()[c];
  const std::size_t ia = a.index(), ib = row.index();
  return tape.record(std::move(out), needs(a) || needs(row), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_of(ia);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_of(ib);
      const std::size_t cols = gb.size();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g(r, c);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  if (!a.value().same_shape(b.value())) throw DimensionError("mul: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.index(), ib = b.index();
  return tape.record(std::move(out), needs(a) || needs(b), [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_of(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * bv[k];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_of(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * av[k];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  const std::size_t ia = a.index();
  return a.tape().record(std::move(out), needs(a), [ia, s](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    Tensor& ga = t.grad_of(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += s * g[k];
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.index();
  return a.tape().record(Tensor({1}, std::vector<double>{s}), needs(a), [ia](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    Tensor& ga = t.grad_of(ia);
    for (double& v : ga.data()) v += g;
  });
}

Var gelu(const Var& a) {
  const std::size_t ia = a.index();
  return a.tape().record(kernels::gelu(a.value()), needs(a), [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad_of(ia);
    for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * kernels::gelu_derivative(x[k]);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Tape& tape = same_tape(x, gamma);
  same_tape(x, beta);
  const std::size_t n = x.cols();
  if (gamma.value().size() != n || beta.value().size() != n) throw DimensionError("layer_norm: affine size mismatch");
  const Tensor xhat = kernels::layer_norm(x.value(), eps);
  std::vector<double> inv(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (double v : x.value().row(r)) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x.value().row(r)) var += (v - mean) * (v - mean);
    inv[r] = 1.0 / std::sqrt(var / static_cast<double>(n) + eps);
  }
  Tensor out = xhat;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = xhat(r, c) * gamma.value()[c] + beta.value()[c];
  const std::size_t ix = x.index(), ig = gamma.index(), ibeta = beta.index();
  return tape.record(std::move(out), needs(x) || needs(gamma) || needs(beta),
                     [ix, ig, ibeta, xhat, inv, n](Tape& t, std::size_t self) {
                       const Tensor& g = t.node(self).grad;
                       const Tensor& gam = t.value(ig);
                       if (t.needs_grad(ig)) {
                         Tensor& gg = t.grad_of(ig);
                         for (std::size_t r = 0; r < g.rows(); ++r)
                           for (std::size_t c = 0; c < n; ++c) gg[c] += g(r, c) * xhat(r, c);
                       }
                       if (t.needs_grad(ibeta)) {
                         Tensor& gb = t.grad_of(ibeta);
                         for (std::size_t r = 0; r < g.rows(); ++r)
                           for (std::size_t c = 0; c < n; ++c) gb[c] += g(r, c);
                       }
                       if (t.needs_grad(ix)) {
                         Tensor& gx = t.grad_of(ix);
                         const double nn = static_cast<double>(n);
                         for (std::size_t r = 0; r < g.rows(); ++r) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t c = 0; c < n; ++c) {
                             const double d = g(r, c) * gam[c];
                             s1 += d;
                             s2 += d * xhat(r, c);
                           }
                           for (std::size_t c = 0; c < n; ++c) {
                             const double d = g(r, c) * gam[c];
                             gx(r, c) += inv[r] / nn * (nn * d - s1 - xhat(r, c) * s2);
                           }
                         }
                       }
                     });
}

Var gather_rows(const Var& table, std::span<const TokenId> ids) {
  std::vector<TokenId> idx(ids.begin(), ids.end());
  const std::size_t it = table.index();
  return table.tape().record(kernels::embedding_lookup(table.value(), ids), needs(table),
                             [it, idx = std::move(idx)](Tape& t, std::size_t self) {
                               const Tensor& g = t.node(self).grad;
                               Tensor& gt = t.grad_of(it);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 auto dst = gt.row(static_cast<std::size_t>(idx[i]));
                                 auto src = g.row(i);
                                 for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
                               }
                             });
}

Var masked_softmax(const Var& logits, const AdditiveMask& mask) {
  const std::size_t il = logits.index();
  Tensor p = kernels::masked_softmax(logits.value(), mask);
  return logits.tape().record(p, needs(logits), [il, p](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    Tensor& gl = t.grad_of(il);
    // Dropped entries have p == 0, so their gradient is exactly 0.
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) s += g(r, c) * p(r, c);
      for (std::size_t c = 0; c < p.cols(); ++c) {
        if (p(r, c) != 0.0) gl(r, c) += p(r, c) * (g(r, c) - s);
      }
    }
  });
}

Var causal_self_attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads) {
  Tape& tape = same_tape(q, k);
  same_tape(q, v);
  const std::size_t T = q.rows(), d = q.cols();
  if (k.rows() != T || v.rows() != T || k.cols() != d || v.cols() != d) {
    throw DimensionError("causal_self_attention: q/k/v shapes differ");
  }
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("causal_self_attention: heads must divide width");
  const std::size_t hd = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  // probs[h] is [T,T], lower triangular.
  std::vector<Tensor> probs(n_heads, Tensor::zeros(T, T));
  Tensor out = Tensor::zeros(T, d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    Tensor& P = probs[h];
    for (std::size_t i = 0; i < T; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += Q(i, off + c) * K(j, off + c);
        P(i, j) = s * sc;
        mx = std::max(mx, P(i, j));
      }
      double sum = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        P(i, j) = std::exp(P(i, j) - mx);
        sum += P(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) P(i, j) /= sum;
      for (std::size_t j = 0; j <= i; ++j) {
        const double w = P(i, j);
        for (std::size_t c = 0; c < hd; ++c) out(i, off + c) += w * V(j, off + c);
      }
    }
  }
  const std::size_t iq = q.index(), ik = k.index(), iv = v.index();
  return tape.record(std::move(out), needs(q) || needs(k) || needs(v),
                     [iq, ik, iv, probs = std::move(probs), n_heads, hd, sc, T](Tape& t, std::size_t self) {
                       const Tensor& g = t.node(self).grad;
                       const Tensor& Qv = t.value(iq);
                       const Tensor& Kv = t.value(ik);
                       const Tensor& Vv = t.value(iv);
                       const bool gq_on = t.needs_grad(iq);
                       const bool gk_on = t.needs_grad(ik);
                       const bool gv_on = t.needs_grad(iv);
                       Tensor* gq = gq_on ? &t.grad_of(iq) : nullptr;
                       Tensor* gk = gk_on ? &t.grad_of(ik) : nullptr;
                       Tensor* gv = gv_on ? &t.grad_of(iv) : nullptr;
                       std::vector<double> dp(T);
                       for (std::size_t h = 0; h < n_heads; ++h) {
                         const std::size_t off = h * hd;
                         const Tensor& P = probs[h];
                         for (std::size_t i = 0; i < T; ++i) {
                           double s = 0.0;
                           for (std::size_t j = 0; j <= i; ++j) {
                             double acc = 0.0;
                             for (std::size_t c = 0; c < hd; ++c) acc += g(i, off + c) * Vv(j, off + c);
                             dp[j] = acc;
                             s += acc * P(i, j);
                             if (gv) {
                               const double w = P(i, j);
                               for (std::size_t c = 0; c < hd; ++c) (*gv)(j, off + c) += w * g(i, off + c);
                             }
                           }
                           for (std::size_t j = 0; j <= i; ++j) {
                             const double ds = P(i, j) * (dp[j] - s) * sc;
                             if (gq)
                               for (std::size_t c = 0; c < hd; ++c) (*gq)(i, off + c) += ds * Kv(j, off + c);
                             if (gk)
                               for (std::size_t c = 0; c < hd; ++c) (*gk)(j, off + c) += ds * Qv(i, off + c);
                           }
                         }
                       }
                     });
}

Var cross_entropy(const Var& logits, std::span<const TokenId> targets) {
  const double loss = kernels::cross_entropy(logits.value(), targets);
  std::vector<TokenId> tg(targets.begin(), targets.end());
  const std::size_t il = logits.index();
  return logits.tape().record(Tensor({1}, std::vector<double>{loss}), needs(logits),
                              [il, tg = std::move(tg)](Tape& t, std::size_t self) {
                                const double g = t.node(self).grad[0];
                                const Tensor& L = t.value(il);
                                Tensor& gl = t.grad_of(il);
                                const double inv_rows = 1.0 / static_cast<double>(L.rows());
                                for (std::size_t r = 0; r < L.rows(); ++r) {
                                  double mx = L(r, 0);
                                  for (std::size_t c = 1; c < L.cols(); ++c) mx = std::max(mx, L(r, c));
                                  double sum = 0.0;
                                  for (std::size_t c = 0; c < L.cols(); ++c) sum += std::exp(L(r, c) - mx);
                                  for (std::size_t c = 0; c < L.cols(); ++c) {
                                    double p = std::exp(L(r, c) - mx) / sum;
                                    if (static_cast<TokenId>(c) == tg[r]) p -= 1.0;
                                    gl(r, c) += g * p * inv_rows;
                                  }
                                }
                              });
}

}  // namespace ag
}  // namespace corelab
