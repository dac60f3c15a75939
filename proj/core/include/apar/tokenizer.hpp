#pragma once

// Feature tokenizer: one d-dimensional embedding per feature. Numerical
// feature j maps to b_num[j] + x_j * w_num[j]; categorical feature j maps to
// b_cat[j] + w_cat[j][id]. Rows are stacked numerical block first, then
// categorical, each in schema order.

#include <span>
#include <string>
#include <vector>

#include "apar/autodiff.hpp"
#include "apar/params.hpp"
#include "apar/rng.hpp"
#include "apar/tabdata.hpp"
#include "apar/tensor.hpp"

namespace apar {

template <typename T>
struct TokenizerParams {
  using value_type = T;

  std::size_t d = 0;
  Tensor<T> w_num;               // k_num x d
  Tensor<T> b_num;               // k_num x d
  std::vector<Tensor<T>> w_cat;  // per categorical column: cardinality x d
  Tensor<T> b_cat;               // k_cat x d

  std::size_t k_num() const { return w_num.rows(); }
  std::size_t k_cat() const { return w_cat.size(); }
  std::size_t k() const { return k_num() + k_cat(); }

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  template <typename U>
  TokenizerParams<U> cast() const {
    TokenizerParams<U> out;
    out.d = d;
    out.w_num = w_num.template cast<U>();
    out.b_num = b_num.template cast<U>();
    for (const auto& t : w_cat) out.w_cat.push_back(t.template cast<U>());
    out.b_cat = b_cat.template cast<U>();
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("tokenizer.w_num"), self.w_num);
    f(std::string("tokenizer.b_num"), self.b_num);
    for (std::size_t j = 0; j < self.w_cat.size(); ++j) {
      f("tokenizer.w_cat." + std::to_string(j), self.w_cat[j]);
    }
    f(std::string("tokenizer.b_cat"), self.b_cat);
  }
};

// Weights ~ N(0, 2 / d); biases zero.
template <typename T>
TokenizerParams<T> init_tokenizer(const Schema& schema, std::size_t d, Rng& rng);

template <typename T>
struct TokenizerVars {
  ad::Var<T> w_num;
  ad::Var<T> b_num;
  std::vector<ad::Var<T>> w_cat;
  ad::Var<T> b_cat;
};

template <typename T>
TokenizerVars<T> bind_tokenizer(ParamBinder<T>& binder, const TokenizerParams<T>& params);

// Embeds the given rows of `data`; returns [rows.size() * k, d].
template <typename T>
ad::Var<T> tokenize_batch(const TokenizerVars<T>& vars, const TabularDataset& data,
                          std::span<const std::size_t> rows);

// Single-sample k x d embedding stack.
template <typename T>
Tensor<T> tokenize(const TabularDataset& data, std::size_t row, const TokenizerParams<T>& params);

}  // namespace apar
