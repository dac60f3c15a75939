#pragma once

// Tape-based reverse-mode differentiation over row-major matrices.
//
// Ops are coarse (linear, layer norm, fused multi-head attention) with
// hand-written adjoints. Every op is instantiated for float (training) and
// double (finite-difference checking).

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "apar/rng.hpp"
#include "apar/tensor.hpp"

namespace apar::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  // Only valid for 1 x 1 nodes.
  T scalar() const { return value()[0]; }
};

template <typename T>
class Tape {
 public:
  // Receives the tape and the id of the node being differentiated; reads
  // grad(self) and accumulates into the parents' gradients.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var<T> constant(Tensor<T> value);
  // Leaf whose gradient is tracked.
  Var<T> leaf(Tensor<T> value);
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  // Zero-initialised on first access.
  Tensor<T>& grad(std::size_t id);
  // nullptr when nothing flowed into the node.
  const Tensor<T>* grad_if_any(std::size_t id) const;

  // Seeds d(loss)/d(loss) = 1 and runs every recorded adjoint in reverse.
  // Throws NumericError when the loss is not a finite 1 x 1 value.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
// Weighted sum of 1 x 1 nodes.
template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>& terms);
template <typename T>
Var<T> sum(Var<T> x);

// x[N, in] * w[in, out] + b[1, out]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
template <typename T>
Var<T> relu(Var<T> x);
// x[N, 2f] -> a * relu(g) where a = x[:, :f], g = x[:, f:].
template <typename T>
Var<T> reglu(Var<T> x);
template <typename T>
Var<T> sigmoid(Var<T> x);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
// Inverted dropout. Identity when p == 0 or rng is null.
template <typename T>
Var<T> dropout(Var<T> x, double p, Rng* rng);

// Fused multi-head self-attention core. qkv is [batch * seq, 3 * d] with the
// query, key and value blocks side by side; returns [batch * seq, d]. Dropout
// with rate p is applied to the attention probabilities when rng is set.
template <typename T>
Var<T> attention(Var<T> qkv, std::size_t batch, std::size_t seq, std::size_t heads,
                 double p, Rng* rng);

// Row r of z is multiplied by m[r % m.size()]; m.size() must divide z.rows().
template <typename T>
Var<T> scale_rows(Var<T> z, Var<T> m);
// z holds `groups` consecutive blocks of rows; `head` (1 x d) is inserted in
// front of each block.
template <typename T>
Var<T> prepend_rows(Var<T> z, Var<T> head, std::size_t groups);
// Rows 0, stride, 2 * stride, ...
template <typename T>
Var<T> take_rows(Var<T> x, std::size_t stride);
// Same row-major data, new shape.
template <typename T>
Var<T> reshape(Var<T> x, std::size_t rows, std::size_t cols);
template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b);

// Mean squared error against a constant target of the same element count.
template <typename T>
Var<T> mse(Var<T> pred, const Tensor<T>& target);
// Mean binary cross-entropy of probabilities (clamped to [1e-12, 1 - 1e-12]).
template <typename T>
Var<T> bce(Var<T> prob, const Tensor<T>& target);

// sigmoid((logits - noise_logit) / tau) with noise_logit constant. The noise
// may hold several draws back to back; logits repeat across them and the
// result takes the noise shape.
template <typename T>
Var<T> relaxed_gate(Var<T> logits, const Tensor<T>& noise_logit, T tau);
// sum_j sigmoid(logits_j) as a 1 x 1 node.
template <typename T>
Var<T> sigmoid_sum(Var<T> logits);

}  // namespace apar::ad
