#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "apar/autodiff.hpp"
#include "apar/tensor.hpp"

namespace apar {

// Flat, name-addressed view over a model's trainable tensors.
template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename P>
auto param_list(P& params) {
  ParamList<typename P::value_type> out;
  params.visit([&](const std::string& name, auto& t) { out.emplace_back(name, &t); });
  return out;
}

// One gradient tensor per named parameter, shape-matched.
template <typename T>
class GradientSet {
 public:
  void accumulate(const std::string& name, const Tensor<T>& grad) {
    auto [it, inserted] = entries_.try_emplace(name, grad);
    if (inserted) return;
    if (!it->second.same_shape(grad)) {
      throw std::invalid_argument("gradient shape mismatch for " + name);
    }
    for (std::size_t i = 0; i < grad.size(); ++i) it->second[i] += grad[i];
  }

  void merge(const GradientSet& other) {
    for (const auto& [name, g] : other.entries_) accumulate(name, g);
  }

  const Tensor<T>* find(const std::string& name) const {
    auto it = entries_.find(name);
    return it == entries_.end() ? nullptr : &it->second;
  }
  const Tensor<T>& at(const std::string& name) const { return entries_.at(name); }
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Tensor<T>>& entries() const { return entries_; }

  bool all_finite() const {
    for (const auto& [_, g] : entries_) {
      if (!g.all_finite()) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Tensor<T>> entries_;
};

// Registers parameters as tape leaves and reads their gradients back after
// Tape::backward.
template <typename T>
class ParamBinder {
 public:
  explicit ParamBinder(ad::Tape<T>& tape) : tape_(&tape) {}

  ad::Var<T> bind(const std::string& name, const Tensor<T>& value) {
    auto v = tape_->leaf(value);
    bound_.emplace_back(name, v);
    return v;
  }

  ad::Tape<T>& tape() { return *tape_; }

  // Every bound parameter gets an entry; disconnected ones are zero.
  GradientSet<T> gradients() const {
    GradientSet<T> out;
    for (const auto& [name, v] : bound_) {
      if (const Tensor<T>* g = tape_->grad_if_any(v.id)) {
        out.accumulate(name, *g);
      } else {
        out.accumulate(name, Tensor<T>(v.rows(), v.cols()));
      }
    }
    return out;
  }

 private:
  ad::Tape<T>* tape_;
  std::vector<std::pair<std::string, ad::Var<T>>> bound_;
};

}  // namespace apar
