#pragma once

// Feature encoder: a learned [CLS] row is stacked in front of the feature
// embeddings and the sequence passes through L pre-norm transformer layers
// (multi-head self-attention, then a ReGLU feed-forward block, each wrapped in
// a residual connection). Also holds the two MLP prediction heads.

#include <span>
#include <string>
#include <vector>

#include "apar/autodiff.hpp"
#include "apar/params.hpp"
#include "apar/rng.hpp"
#include "apar/tensor.hpp"

namespace apar {

struct EncoderConfig {
  std::size_t d = 192;
  std::size_t layers = 3;
  std::size_t heads = 8;
  // Feed-forward hidden width; 0 selects 4d/3.
  std::size_t ffn_hidden = 0;
  double attention_dropout = 0.2;
  double ffn_dropout = 0.1;
  // Accepted for configuration parity; no residual dropout site exists.
  double residual_dropout = 0.0;

  std::size_t ffn_width() const { return ffn_hidden > 0 ? ffn_hidden : d * 4 / 3; }
  void validate() const;
};

template <typename T>
struct EncoderLayerParams {
  Tensor<T> norm1_scale, norm1_offset;
  Tensor<T> w_qkv, b_qkv;  // d x 3d, 1 x 3d
  Tensor<T> w_out, b_out;  // d x d, 1 x d
  Tensor<T> norm2_scale, norm2_offset;
  Tensor<T> w_ffn_in, b_ffn_in;    // d x 2f, 1 x 2f
  Tensor<T> w_ffn_out, b_ffn_out;  // f x d, 1 x d
};

template <typename T>
struct EncoderParams {
  using value_type = T;

  EncoderConfig config;
  Tensor<T> cls;  // 1 x d
  std::vector<EncoderLayerParams<T>> layers;

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  template <typename U>
  EncoderParams<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("encoder.cls"), self.cls);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      f(p + "norm1.scale", L.norm1_scale);
      f(p + "norm1.offset", L.norm1_offset);
      f(p + "attn.w_qkv", L.w_qkv);
      f(p + "attn.b_qkv", L.b_qkv);
      f(p + "attn.w_out", L.w_out);
      f(p + "attn.b_out", L.b_out);
      f(p + "norm2.scale", L.norm2_scale);
      f(p + "norm2.offset", L.norm2_offset);
      f(p + "ffn.w_in", L.w_ffn_in);
      f(p + "ffn.b_in", L.b_ffn_in);
      f(p + "ffn.w_out", L.w_ffn_out);
      f(p + "ffn.b_out", L.b_ffn_out);
    }
  }
};

// Two-layer rectifier MLP: in -> hidden -> 1.
template <typename T>
struct MlpHead {
  Tensor<T> w1, b1, w2, b2;
  std::size_t in_width() const { return w1.rows(); }
};

enum class HeadKind { pretrain, finetune };

template <typename T>
struct HeadParams {
  using value_type = T;

  MlpHead<T> pretrain;  // 2d -> d -> 1
  MlpHead<T> finetune;  // d -> d -> 1

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  template <typename U>
  HeadParams<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    for (auto [name, head] : {std::pair{"pretrain", &self.pretrain},
                              std::pair{"finetune", &self.finetune}}) {
      const std::string p = std::string("head.") + name + ".";
      f(p + "w1", head->w1);
      f(p + "b1", head->b1);
      f(p + "w2", head->w2);
      f(p + "b2", head->b2);
    }
  }
};

// Kaiming-normal weights (fan-in), zero biases, unit norm scales.
template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, Rng& rng);
template <typename T>
MlpHead<T> init_mlp_head(std::size_t in, std::size_t hidden, Rng& rng);
template <typename T>
HeadParams<T> init_heads(std::size_t d, Rng& rng);

template <typename T>
struct EncoderLayerVars {
  ad::Var<T> norm1_scale, norm1_offset, w_qkv, b_qkv, w_out, b_out;
  ad::Var<T> norm2_scale, norm2_offset, w_ffn_in, b_ffn_in, w_ffn_out, b_ffn_out;
};

template <typename T>
struct EncoderVars {
  EncoderConfig config;
  ad::Var<T> cls;
  std::vector<EncoderLayerVars<T>> layers;
};

template <typename T>
struct MlpVars {
  ad::Var<T> w1, b1, w2, b2;
};

template <typename T>
EncoderVars<T> bind_encoder(ParamBinder<T>& binder, const EncoderParams<T>& params);
template <typename T>
MlpVars<T> bind_head(ParamBinder<T>& binder, const MlpHead<T>& head, HeadKind kind);

// z is [batch * k, d]; returns [batch * (k + 1), d] with the [CLS] row first
// in every block. Dropout is active only when dropout_rng is non-null.
// Throws NumericError naming the layer if an activation becomes non-finite.
template <typename T>
ad::Var<T> encode_batch(const EncoderVars<T>& enc, ad::Var<T> z, std::size_t batch,
                        Rng* dropout_rng);

// Row 0 of every (k + 1)-row block.
template <typename T>
ad::Var<T> cls_rows(ad::Var<T> encoded, std::size_t batch);

// [n, in] -> [n, 1]
template <typename T>
ad::Var<T> mlp_forward(const MlpVars<T>& head, ad::Var<T> x);

// Single-sample value-level entry points.
template <typename T>
Tensor<T> encode(const Tensor<T>& z, const EncoderParams<T>& params, bool train_mode, Rng& rng);
template <typename T>
std::vector<T> extract_cls(const Tensor<T>& encoded);
// Throws std::invalid_argument when vec does not match the head input width.
template <typename T>
T head_forward(std::span<const T> vec, HeadKind kind, const HeadParams<T>& heads);

}  // namespace apar
