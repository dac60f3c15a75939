#include "apar/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "apar/error.hpp"

namespace apar::ad {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MatMap<T> as_mat(Tensor<T>& t) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}
template <typename T>
ConstMatMap<T> as_mat(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

template <typename T>
Tape<T>& tape_of(Var<T> a, Var<T> b) {
  require(a.tape == b.tape, "ad", "operands live on different tapes");
  return *a.tape;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------- Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, {}});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> parents,
                       BackwardFn backward) {
  return record(std::move(value), std::vector<Var<T>>(parents), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& parents,
                       BackwardFn backward) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || nodes_[p.id].needs_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, false,
                        needs ? std::move(backward) : BackwardFn{}});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Tensor<T>& Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
const Tensor<T>* Tape<T>::grad_if_any(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.has_grad ? &n.grad : nullptr;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  const Tensor<T>& v = nodes_.at(loss.id).value;
  if (v.size() != 1) throw std::invalid_argument("backward: loss must be 1 x 1");
  if (!std::isfinite(v[0])) throw NumericError("backward: loss is not finite");
  grad(loss.id)[0] += T(1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.backward && n.has_grad) n.backward(*this, id);
  }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require(a.value().same_shape(b.value()), "add", "shape mismatch");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape_of(a, b).record(std::move(out), {a, b},
                              [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
                                const Tensor<T>& g = *t.grad_if_any(self);
                                for (std::size_t id : {ia, ib}) {
                                  if (!t.needs_grad(id)) continue;
                                  Tensor<T>& d = t.grad(id);
                                  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                                }
                              });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x *= factor;
  return a.tape->record(std::move(out), {a}, [ia = a.id, factor](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = *t.grad_if_any(self);
    Tensor<T>& d = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += factor * g[i];
  });
}

template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>& terms) {
  require(!terms.empty(), "weighted_sum", "no terms");
  T total = T(0);
  std::vector<Var<T>> parents;
  for (const auto& [w, v] : terms) {
    require(v.value().size() == 1, "weighted_sum", "terms must be scalars");
    total += w * v.scalar();
    parents.push_back(v);
  }
  return terms.front().second.tape->record(
      Tensor<T>(1, 1, total), parents, [terms](Tape<T>& t, std::size_t self) {
        const T g = (*t.grad_if_any(self))[0];
        for (const auto& [w, v] : terms) {
          if (t.needs_grad(v.id)) t.grad(v.id)[0] += w * g;
        }
      });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total = T(0);
  for (T v : x.value().values()) total += v;
  return x.tape->record(Tensor<T>(1, 1, total), {x}, [ix = x.id](Tape<T>& t, std::size_t self) {
    const T g = (*t.grad_if_any(self))[0];
    for (auto& d : t.grad(ix).values()) d += g;
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return x.tape->record(std::move(out), {x}, [ix = x.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = *t.grad_if_any(self);
    const Tensor<T>& in = t.value(ix);
    Tensor<T>& d = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > T(0)) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> reglu(Var<T> x) {
  const Tensor<T>& in = x.value();
  require(in.cols() % 2 == 0, "reglu", "odd column count");
  const std::size_t f = in.cols() / 2;
  Tensor<T> out(in.rows(), f);
  for (std::size_t r = 0; r < in.rows(); ++r) {
    for (std::size_t c = 0; c < f; ++c) {
      const T g = in(r, f + c);
      out(r, c) = g > T(0) ? in(r, c) * g : T(0);
    }
  }
  return x.tape->record(std::move(out), {x}, [ix = x.id, f](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = *t.grad_if_any(self);
    const Tensor<T>& in = t.value(ix);
    Tensor<T>& d = t.grad(ix);
    for (std::size_t r = 0; r < in.rows(); ++r) {
      for (std::size_t c = 0; c < f; ++c) {
        const T gate = in(r, f + c);
        if (gate > T(0)) {
          d(r, c) += g(r, c) * gate;
          d(r, f + c) += g(r, c) * in(r, c);
        }
      }
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = sigmoid_scalar(v);
  auto saved = out;
  return x.tape->record(std::move(out), {x},
                        [ix = x.id, s = std::move(saved)](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& g = *t.grad_if_any(self);
                          Tensor<T>& d = t.grad(ix);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            d[i] += g[i] * s[i] * (T(1) - s[i]);
                          }
                        });
}

template <typename T>
Var<T> dropout(Var<T> x, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  const T keep_scale = p >= 1.0 ? T(0) : static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(x.rows(), x.cols());
  for (auto& m : mask.values()) m = rng->bernoulli(p) ? T(0) : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape->record(std::move(out), {x},
                        [ix = x.id, m = std::move(mask)](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& g = *t.grad_if_any(self);
                          Tensor<T>& d = t.grad(ix);
                          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * m[i];
                        });
}

// ---------------------------------------------------------------- dense

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = b.value();
  require(xv.cols() == wv.rows(), "linear", "input width does not match weight rows");
  require(bv.size() == wv.cols(), "linear", "bias width does not match weight cols");
  Tensor<T> out(xv.rows(), wv.cols());
  auto o = as_mat(out);
  o.noalias() = as_mat(xv) * as_mat(wv);
  o.rowwise() += as_mat(bv).row(0);
  return x.tape->record(
      std::move(out), {x, w, b},
      [ix = x.id, iw = w.id, ib = b.id](Tape<T>& t, std::size_t self) {
        const auto g = as_mat(*t.grad_if_any(self));
        if (t.needs_grad(ix)) as_mat(t.grad(ix)).noalias() += g * as_mat(t.value(iw)).transpose();
        if (t.needs_grad(iw)) as_mat(t.grad(iw)).noalias() += as_mat(t.value(ix)).transpose() * g;
        if (t.needs_grad(ib)) as_mat(t.grad(ib)).row(0) += g.colwise().sum();
      });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor<T>& in = x.value();
  const std::size_t n = in.rows();
  const std::size_t d = in.cols();
  require(gamma.value().size() == d && beta.value().size() == d, "layer_norm",
          "scale/offset width mismatch");
  const Tensor<T>& g = gamma.value();
  const Tensor<T>& bta = beta.value();
  Tensor<T> out(n, d);
  Tensor<T> xhat(n, d);
  std::vector<T> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = in.row(r);
    T mean = T(0);
    for (T v : row) mean += v;
    mean /= static_cast<T>(d);
    T var = T(0);
    for (T v : row) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (row[c] - mean) * inv;
      xhat(r, c) = h;
      out(r, c) = g[c] * h + bta[c];
    }
  }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [ix = x.id, ig = gamma.id, ibeta = beta.id, xh = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const Tensor<T>& dy = *t.grad_if_any(self);
        const Tensor<T>& g = t.value(ig);
        const std::size_t n = dy.rows();
        const std::size_t d = dy.cols();
        if (t.needs_grad(ig) || t.needs_grad(ibeta)) {
          Tensor<T>& dg = t.grad(ig);
          Tensor<T>& db = t.grad(ibeta);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
              dg[c] += dy(r, c) * xh(r, c);
              db[c] += dy(r, c);
            }
          }
        }
        if (!t.needs_grad(ix)) return;
        Tensor<T>& dx = t.grad(ix);
        std::vector<T> dxh(d);
        for (std::size_t r = 0; r < n; ++r) {
          T mean_dxh = T(0);
          T mean_dxh_xh = T(0);
          for (std::size_t c = 0; c < d; ++c) {
            dxh[c] = dy(r, c) * g[c];
            mean_dxh += dxh[c];
            mean_dxh_xh += dxh[c] * xh(r, c);
          }
          mean_dxh /= static_cast<T>(d);
          mean_dxh_xh /= static_cast<T>(d);
          for (std::size_t c = 0; c < d; ++c) {
            dx(r, c) += inv_std[r] * (dxh[c] - mean_dxh - xh(r, c) * mean_dxh_xh);
          }
        }
      });
}

template <typename T>
Var<T> attention(Var<T> qkv, std::size_t batch, std::size_t seq, std::size_t heads, double p,
                 Rng* rng) {
  const Tensor<T>& in = qkv.value();
  require(in.rows() == batch * seq, "attention", "row count is not batch * seq");
  require(in.cols() % 3 == 0, "attention", "width is not 3 * d");
  const std::size_t d = in.cols() / 3;
  require(heads > 0 && d % heads == 0, "attention", "d not divisible by heads");
  const std::size_t dh = d / heads;
  const auto S = static_cast<Eigen::Index>(seq);
  const auto DH = static_cast<Eigen::Index>(dh);
  const auto in_stride = static_cast<Eigen::Index>(3 * d);
  const auto out_stride = static_cast<Eigen::Index>(d);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const bool use_dropout = p > 0.0 && rng != nullptr;
  const T keep_scale = p >= 1.0 ? T(0) : static_cast<T>(1.0 / (1.0 - p));

  Tensor<T> out(batch * seq, d);
  // Saved per (batch, head): softmax probabilities and the dropout multipliers.
  Tensor<T> probs(batch * heads, seq * seq);
  Tensor<T> drop(use_dropout ? batch * heads : 0, seq * seq);
  RowMat<T> scores(S, S);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* base = in.data() + b * seq * 3 * d;
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap<T> q(base + h * dh, S, DH, Eigen::OuterStride<>(in_stride));
      ConstStridedMap<T> k(base + d + h * dh, S, DH, Eigen::OuterStride<>(in_stride));
      ConstStridedMap<T> v(base + 2 * d + h * dh, S, DH, Eigen::OuterStride<>(in_stride));
      scores.noalias() = (q * k.transpose()) * inv_sqrt;
      MatMap<T> pm(probs.data() + (b * heads + h) * seq * seq, S, S);
      for (Eigen::Index r = 0; r < S; ++r) {
        const T mx = scores.row(r).maxCoeff();
        pm.row(r) = (scores.row(r).array() - mx).exp();
        pm.row(r) /= pm.row(r).sum();
      }
      StridedMap<T> o(out.data() + b * seq * d + h * dh, S, DH, Eigen::OuterStride<>(out_stride));
      if (use_dropout) {
        MatMap<T> dm(drop.data() + (b * heads + h) * seq * seq, S, S);
        for (Eigen::Index i = 0; i < dm.size(); ++i) {
          dm.data()[i] = rng->bernoulli(p) ? T(0) : keep_scale;
        }
        o.noalias() = (pm.array() * dm.array()).matrix() * v;
      } else {
        o.noalias() = pm * v;
      }
    }
  }

  return qkv.tape->record(
      std::move(out), {qkv},
      [iq = qkv.id, batch, seq, heads, d, dh, inv_sqrt, use_dropout, probs = std::move(probs),
       drop = std::move(drop)](Tape<T>& t, std::size_t self) {
        const Tensor<T>& gout = *t.grad_if_any(self);
        const Tensor<T>& in = t.value(iq);
        Tensor<T>& gin = t.grad(iq);
        const auto S = static_cast<Eigen::Index>(seq);
        const auto DH = static_cast<Eigen::Index>(dh);
        const auto in_stride = static_cast<Eigen::Index>(3 * d);
        const auto out_stride = static_cast<Eigen::Index>(d);
        RowMat<T> pd(S, S), dpd(S, S), ds(S, S);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* base = in.data() + b * seq * 3 * d;
          T* gbase = gin.data() + b * seq * 3 * d;
          for (std::size_t h = 0; h < heads; ++h) {
            ConstStridedMap<T> q(base + h * dh, S, DH, Eigen::OuterStride<>(in_stride));
            ConstStridedMap<T> k(base + d + h * dh, S, DH, Eigen::OuterStride<>(in_stride));
            ConstStridedMap<T> v(base + 2 * d + h * dh, S, DH, Eigen::OuterStride<>(in_stride));
            StridedMap<T> gq(gbase + h * dh, S, DH, Eigen::OuterStride<>(in_stride));
            StridedMap<T> gk(gbase + d + h * dh, S, DH, Eigen::OuterStride<>(in_stride));
            StridedMap<T> gv(gbase + 2 * d + h * dh, S, DH, Eigen::OuterStride<>(in_stride));
            ConstStridedMap<T> go(gout.data() + b * seq * d + h * dh, S, DH,
                                  Eigen::OuterStride<>(out_stride));
            ConstMatMap<T> pm(probs.data() + (b * heads + h) * seq * seq, S, S);
            if (use_dropout) {
              ConstMatMap<T> dm(drop.data() + (b * heads + h) * seq * seq, S, S);
              pd = (pm.array() * dm.array()).matrix();
              dpd.noalias() = go * v.transpose();
              dpd.array() *= dm.array();
            } else {
              pd = pm;
              dpd.noalias() = go * v.transpose();
            }
            gv.noalias() += pd.transpose() * go;
            // Softmax adjoint: ds = P * (dP - rowsum(dP * P)).
            for (Eigen::Index r = 0; r < S; ++r) {
              const T dot = (dpd.row(r).array() * pm.row(r).array()).sum();
              ds.row(r) = (pm.row(r).array() * (dpd.row(r).array() - dot)).matrix();
            }
            ds *= inv_sqrt;
            gq.noalias() += ds * k;
            gk.noalias() += ds.transpose() * q;
          }
        }
      });
}

// ---------------------------------------------------------------- layout

template <typename T>
Var<T> scale_rows(Var<T> z, Var<T> m) {
  const Tensor<T>& zv = z.value();
  const Tensor<T>& mv = m.value();
  require(mv.size() > 0 && zv.rows() % mv.size() == 0, "scale_rows",
          "multiplier count must divide row count");
  Tensor<T> out = zv;
  const std::size_t k = mv.size();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const T f = mv[r % k];
    for (auto& v : out.row(r)) v *= f;
  }
  return tape_of(z, m).record(
      std::move(out), {z, m}, [iz = z.id, im = m.id, k](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = *t.grad_if_any(self);
        const Tensor<T>& zv = t.value(iz);
        const Tensor<T>& mv = t.value(im);
        if (t.needs_grad(iz)) {
          Tensor<T>& dz = t.grad(iz);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            const T f = mv[r % k];
            for (std::size_t c = 0; c < g.cols(); ++c) dz(r, c) += g(r, c) * f;
          }
        }
        if (t.needs_grad(im)) {
          Tensor<T>& dm = t.grad(im);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            T acc = T(0);
            for (std::size_t c = 0; c < g.cols(); ++c) acc += g(r, c) * zv(r, c);
            dm[r % k] += acc;
          }
        }
      });
}

template <typename T>
Var<T> prepend_rows(Var<T> z, Var<T> head, std::size_t groups) {
  const Tensor<T>& zv = z.value();
  const Tensor<T>& hv = head.value();
  require(hv.rows() == 1 && hv.cols() == zv.cols(), "prepend_rows", "head must be 1 x d");
  require(groups > 0 && zv.rows() % groups == 0, "prepend_rows", "rows not divisible by groups");
  const std::size_t k = zv.rows() / groups;
  const std::size_t d = zv.cols();
  Tensor<T> out(groups * (k + 1), d);
  for (std::size_t g = 0; g < groups; ++g) {
    std::copy(hv.data(), hv.data() + d, out.data() + g * (k + 1) * d);
    std::copy(zv.data() + g * k * d, zv.data() + (g + 1) * k * d,
              out.data() + (g * (k + 1) + 1) * d);
  }
  return tape_of(z, head).record(
      std::move(out), {z, head},
      [iz = z.id, ih = head.id, groups, k, d](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = *t.grad_if_any(self);
        if (t.needs_grad(ih)) {
          Tensor<T>& dh = t.grad(ih);
          for (std::size_t gi = 0; gi < groups; ++gi) {
            for (std::size_t c = 0; c < d; ++c) dh[c] += g(gi * (k + 1), c);
          }
        }
        if (t.needs_grad(iz)) {
          Tensor<T>& dz = t.grad(iz);
          for (std::size_t gi = 0; gi < groups; ++gi) {
            for (std::size_t r = 0; r < k; ++r) {
              for (std::size_t c = 0; c < d; ++c) dz(gi * k + r, c) += g(gi * (k + 1) + 1 + r, c);
            }
          }
        }
      });
}

template <typename T>
Var<T> take_rows(Var<T> x, std::size_t stride) {
  const Tensor<T>& xv = x.value();
  require(stride > 0 && xv.rows() % stride == 0, "take_rows", "rows not divisible by stride");
  const std::size_t n = xv.rows() / stride;
  Tensor<T> out(n, xv.cols());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(xv.row(i * stride).begin(), xv.row(i * stride).end(), out.row(i).begin());
  }
  return x.tape->record(std::move(out), {x}, [ix = x.id, stride](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = *t.grad_if_any(self);
    Tensor<T>& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t c = 0; c < g.cols(); ++c) dx(i * stride, c) += g(i, c);
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, std::size_t rows, std::size_t cols) {
  const Tensor<T>& xv = x.value();
  require(rows * cols == xv.size(), "reshape", "element count mismatch");
  Tensor<T> out(rows, cols, xv.values());
  return x.tape->record(std::move(out), {x}, [ix = x.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = *t.grad_if_any(self);
    Tensor<T>& dx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.rows() == bv.rows(), "concat_cols", "row count mismatch");
  const std::size_t ca = av.cols();
  const std::size_t cb = bv.cols();
  Tensor<T> out(av.rows(), ca + cb);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy(av.row(r).begin(), av.row(r).end(), out.row(r).begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), out.row(r).begin() + ca);
  }
  return tape_of(a, b).record(
      std::move(out), {a, b}, [ia = a.id, ib = b.id, ca, cb](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = *t.grad_if_any(self);
        if (t.needs_grad(ia)) {
          Tensor<T>& d = t.grad(ia);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < ca; ++c) d(r, c) += g(r, c);
          }
        }
        if (t.needs_grad(ib)) {
          Tensor<T>& d = t.grad(ib);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < cb; ++c) d(r, c) += g(r, ca + c);
          }
        }
      });
}

// ---------------------------------------------------------------- losses

template <typename T>
Var<T> mse(Var<T> pred, const Tensor<T>& target) {
  const Tensor<T>& pv = pred.value();
  require(pv.size() == target.size() && !target.empty(), "mse", "size mismatch");
  const T n = static_cast<T>(pv.size());
  T total = T(0);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T e = pv[i] - target[i];
    total += e * e;
  }
  return pred.tape->record(Tensor<T>(1, 1, total / n), {pred},
                           [ip = pred.id, target, n](Tape<T>& t, std::size_t self) {
                             const T g = (*t.grad_if_any(self))[0];
                             const Tensor<T>& pv = t.value(ip);
                             Tensor<T>& d = t.grad(ip);
                             for (std::size_t i = 0; i < pv.size(); ++i) {
                               d[i] += g * T(2) * (pv[i] - target[i]) / n;
                             }
                           });
}

template <typename T>
Var<T> bce(Var<T> prob, const Tensor<T>& target) {
  const Tensor<T>& pv = prob.value();
  require(pv.size() == target.size() && !target.empty(), "bce", "size mismatch");
  const T lo = T(1e-12);
  const T hi = T(1) - T(1e-12);
  const T n = static_cast<T>(pv.size());
  T total = T(0);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T p = std::clamp(pv[i], lo, hi);
    total -= target[i] * std::log(p) + (T(1) - target[i]) * std::log(T(1) - p);
  }
  return prob.tape->record(Tensor<T>(1, 1, total / n), {prob},
                           [ip = prob.id, target, n, lo, hi](Tape<T>& t, std::size_t self) {
                             const T g = (*t.grad_if_any(self))[0];
                             const Tensor<T>& pv = t.value(ip);
                             Tensor<T>& d = t.grad(ip);
                             for (std::size_t i = 0; i < pv.size(); ++i) {
                               if (pv[i] < lo || pv[i] > hi) continue;
                               const T p = pv[i];
                               d[i] += g * (-target[i] / p + (T(1) - target[i]) / (T(1) - p)) / n;
                             }
                           });
}

template <typename T>
Var<T> relaxed_gate(Var<T> logits, const Tensor<T>& noise_logit, T tau) {
  const Tensor<T>& lv = logits.value();
  const std::size_t k = lv.size();
  require(k > 0 && noise_logit.size() % k == 0, "relaxed_gate", "noise size mismatch");
  require(tau > T(0), "relaxed_gate", "temperature must be positive");
  Tensor<T> out(noise_logit.rows(), noise_logit.cols());
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] = sigmoid_scalar((lv[j % k] - noise_logit[j]) / tau);
  }
  auto saved = out;
  return logits.tape->record(std::move(out), {logits},
                             [il = logits.id, s = std::move(saved), tau, k](Tape<T>& t,
                                                                             std::size_t self) {
                               const Tensor<T>& g = *t.grad_if_any(self);
                               Tensor<T>& d = t.grad(il);
                               for (std::size_t j = 0; j < g.size(); ++j) {
                                 d[j % k] += g[j] * s[j] * (T(1) - s[j]) / tau;
                               }
                             });
}

template <typename T>
Var<T> sigmoid_sum(Var<T> logits) {
  const Tensor<T>& lv = logits.value();
  T total = T(0);
  for (T v : lv.values()) total += sigmoid_scalar(v);
  return logits.tape->record(Tensor<T>(1, 1, total), {logits},
                             [il = logits.id](Tape<T>& t, std::size_t self) {
                               const T g = (*t.grad_if_any(self))[0];
                               const Tensor<T>& lv = t.value(il);
                               Tensor<T>& d = t.grad(il);
                               for (std::size_t j = 0; j < lv.size(); ++j) {
                                 const T s = sigmoid_scalar(lv[j]);
                                 d[j] += g * s * (T(1) - s);
                               }
                             });
}

// ---------------------------------------------------------------- instantiation

#define APAR_INSTANTIATE_AD(T)                                                            \
  template class Tape<T>;                                                                 \
  template Var<T> add(Var<T>, Var<T>);                                                    \
  template Var<T> scale(Var<T>, T);                                                       \
  template Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>&);                 \
  template Var<T> sum(Var<T>);                                                            \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                         \
  template Var<T> relu(Var<T>);                                                           \
  template Var<T> reglu(Var<T>);                                                          \
  template Var<T> sigmoid(Var<T>);                                                        \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                  \
  template Var<T> dropout(Var<T>, double, Rng*);                                          \
  template Var<T> attention(Var<T>, std::size_t, std::size_t, std::size_t, double, Rng*); \
  template Var<T> scale_rows(Var<T>, Var<T>);                                             \
  template Var<T> prepend_rows(Var<T>, Var<T>, std::size_t);                              \
  template Var<T> take_rows(Var<T>, std::size_t);                                         \
  template Var<T> reshape(Var<T>, std::size_t, std::size_t);                              \
  template Var<T> concat_cols(Var<T>, Var<T>);                                            \
  template Var<T> mse(Var<T>, const Tensor<T>&);                                          \
  template Var<T> bce(Var<T>, const Tensor<T>&);                                          \
  template Var<T> relaxed_gate(Var<T>, const Tensor<T>&, T);                              \
  template Var<T> sigmoid_sum(Var<T>);

APAR_INSTANTIATE_AD(float)
APAR_INSTANTIATE_AD(double)

#undef APAR_INSTANTIATE_AD

}  // namespace apar::ad
