#include "apar/encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "apar/error.hpp"

namespace apar {
namespace {

template <typename T>
Tensor<T> kaiming(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor<T> w(fan_in, fan_out);
  for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return w;
}

template <typename T>
void check_finite(const ad::Var<T>& v, std::size_t layer) {
  if (!v.value().all_finite()) {
    throw NumericError("non-finite activation in encoder layer " + std::to_string(layer));
  }
}

template <typename U, typename T>
MlpHead<U> cast_head(const MlpHead<T>& h) {
  return {h.w1.template cast<U>(), h.b1.template cast<U>(), h.w2.template cast<U>(),
          h.b2.template cast<U>()};
}

}  // namespace

void EncoderConfig::validate() const {
  if (d == 0) throw ConfigError("encoder width d must be positive");
  if (heads == 0 || d % heads != 0) throw ConfigError("d must be divisible by the head count");
  if (ffn_width() == 0) throw ConfigError("feed-forward width must be positive");
  for (double p : {attention_dropout, ffn_dropout, residual_dropout}) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout rates must lie in [0, 1)");
  }
}

template <typename T>
template <typename U>
EncoderParams<U> EncoderParams<T>::cast() const {
  EncoderParams<U> out;
  out.config = config;
  out.cls = cls.template cast<U>();
  for (const auto& L : layers) {
    out.layers.push_back({L.norm1_scale.template cast<U>(), L.norm1_offset.template cast<U>(),
                          L.w_qkv.template cast<U>(), L.b_qkv.template cast<U>(),
                          L.w_out.template cast<U>(), L.b_out.template cast<U>(),
                          L.norm2_scale.template cast<U>(), L.norm2_offset.template cast<U>(),
                          L.w_ffn_in.template cast<U>(), L.b_ffn_in.template cast<U>(),
                          L.w_ffn_out.template cast<U>(), L.b_ffn_out.template cast<U>()});
  }
  return out;
}

template <typename T>
template <typename U>
HeadParams<U> HeadParams<T>::cast() const {
  return {cast_head<U>(pretrain), cast_head<U>(finetune)};
}

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.d;
  const std::size_t f = config.ffn_width();
  EncoderParams<T> p;
  p.config = config;
  p.cls = Tensor<T>(1, d);
  const double stddev = std::sqrt(2.0 / static_cast<double>(d));
  for (auto& v : p.cls.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayerParams<T> L;
    L.norm1_scale = Tensor<T>(1, d, T(1));
    L.norm1_offset = Tensor<T>(1, d);
    L.w_qkv = kaiming<T>(d, 3 * d, rng);
    L.b_qkv = Tensor<T>(1, 3 * d);
    L.w_out = kaiming<T>(d, d, rng);
    L.b_out = Tensor<T>(1, d);
    L.norm2_scale = Tensor<T>(1, d, T(1));
    L.norm2_offset = Tensor<T>(1, d);
    L.w_ffn_in = kaiming<T>(d, 2 * f, rng);
    L.b_ffn_in = Tensor<T>(1, 2 * f);
    L.w_ffn_out = kaiming<T>(f, d, rng);
    L.b_ffn_out = Tensor<T>(1, d);
    p.layers.push_back(std::move(L));
  }
  return p;
}

template <typename T>
MlpHead<T> init_mlp_head(std::size_t in, std::size_t hidden, Rng& rng) {
  return {kaiming<T>(in, hidden, rng), Tensor<T>(1, hidden), kaiming<T>(hidden, 1, rng),
          Tensor<T>(1, 1)};
}

template <typename T>
HeadParams<T> init_heads(std::size_t d, Rng& rng) {
  HeadParams<T> h;
  h.pretrain = init_mlp_head<T>(2 * d, d, rng);
  h.finetune = init_mlp_head<T>(d, d, rng);
  return h;
}

template <typename T>
EncoderVars<T> bind_encoder(ParamBinder<T>& binder, const EncoderParams<T>& params) {
  EncoderVars<T> v;
  v.config = params.config;
  v.cls = binder.bind("encoder.cls", params.cls);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& L = params.layers[l];
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    v.layers.push_back({binder.bind(p + "norm1.scale", L.norm1_scale),
                        binder.bind(p + "norm1.offset", L.norm1_offset),
                        binder.bind(p + "attn.w_qkv", L.w_qkv),
                        binder.bind(p + "attn.b_qkv", L.b_qkv),
                        binder.bind(p + "attn.w_out", L.w_out),
                        binder.bind(p + "attn.b_out", L.b_out),
                        binder.bind(p + "norm2.scale", L.norm2_scale),
                        binder.bind(p + "norm2.offset", L.norm2_offset),
                        binder.bind(p + "ffn.w_in", L.w_ffn_in),
                        binder.bind(p + "ffn.b_in", L.b_ffn_in),
                        binder.bind(p + "ffn.w_out", L.w_ffn_out),
                        binder.bind(p + "ffn.b_out", L.b_ffn_out)});
  }
  return v;
}

template <typename T>
MlpVars<T> bind_head(ParamBinder<T>& binder, const MlpHead<T>& head, HeadKind kind) {
  const std::string p = kind == HeadKind::pretrain ? "head.pretrain." : "head.finetune.";
  return {binder.bind(p + "w1", head.w1), binder.bind(p + "b1", head.b1),
          binder.bind(p + "w2", head.w2), binder.bind(p + "b2", head.b2)};
}

template <typename T>
ad::Var<T> encode_batch(const EncoderVars<T>& enc, ad::Var<T> z, std::size_t batch,
                        Rng* dropout_rng) {
  if (!z.value().all_finite()) throw NumericError("non-finite encoder input");
  const auto& cfg = enc.config;
  ad::Var<T> x = ad::prepend_rows(z, enc.cls, batch);
  const std::size_t seq = x.rows() / batch;
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    const auto& L = enc.layers[l];
    auto h = ad::layer_norm(x, L.norm1_scale, L.norm1_offset);
    auto qkv = ad::linear(h, L.w_qkv, L.b_qkv);
    auto att = ad::attention(qkv, batch, seq, cfg.heads, cfg.attention_dropout, dropout_rng);
    x = ad::add(x, ad::linear(att, L.w_out, L.b_out));
    h = ad::layer_norm(x, L.norm2_scale, L.norm2_offset);
    auto ff = ad::reglu(ad::linear(h, L.w_ffn_in, L.b_ffn_in));
    ff = ad::dropout(ff, cfg.ffn_dropout, dropout_rng);
    x = ad::add(x, ad::linear(ff, L.w_ffn_out, L.b_ffn_out));
    check_finite(x, l);
  }
  return x;
}

template <typename T>
ad::Var<T> cls_rows(ad::Var<T> encoded, std::size_t batch) {
  return ad::take_rows(encoded, encoded.rows() / batch);
}

template <typename T>
ad::Var<T> mlp_forward(const MlpVars<T>& head, ad::Var<T> x) {
  return ad::linear(ad::relu(ad::linear(x, head.w1, head.b1)), head.w2, head.b2);
}

template <typename T>
Tensor<T> encode(const Tensor<T>& z, const EncoderParams<T>& params, bool train_mode, Rng& rng) {
  if (z.cols() != params.config.d) throw std::invalid_argument("encode: width mismatch");
  ad::Tape<T> tape;
  ParamBinder<T> binder(tape);
  const auto vars = bind_encoder(binder, params);
  const auto input = tape.constant(z);
  return encode_batch(vars, input, 1, train_mode ? &rng : nullptr).value();
}

template <typename T>
std::vector<T> extract_cls(const Tensor<T>& encoded) {
  if (encoded.rows() == 0) throw std::invalid_argument("extract_cls: empty input");
  auto row = encoded.row(0);
  return {row.begin(), row.end()};
}

template <typename T>
T head_forward(std::span<const T> vec, HeadKind kind, const HeadParams<T>& heads) {
  const MlpHead<T>& head = kind == HeadKind::pretrain ? heads.pretrain : heads.finetune;
  if (vec.size() != head.in_width()) {
    throw std::invalid_argument("head_forward: input width " + std::to_string(vec.size()) +
                                " does not match head width " +
                                std::to_string(head.in_width()));
  }
  ad::Tape<T> tape;
  ParamBinder<T> binder(tape);
  const auto vars = bind_head(binder, head, kind);
  const auto x = tape.constant(Tensor<T>(1, vec.size(), std::vector<T>(vec.begin(), vec.end())));
  return mlp_forward(vars, x).scalar();
}

#define APAR_INSTANTIATE_ENCODER(T)                                                      \
  template EncoderParams<T> init_encoder<T>(const EncoderConfig&, Rng&);                \
  template MlpHead<T> init_mlp_head<T>(std::size_t, std::size_t, Rng&);                 \
  template HeadParams<T> init_heads<T>(std::size_t, Rng&);                              \
  template EncoderVars<T> bind_encoder(ParamBinder<T>&, const EncoderParams<T>&);       \
  template MlpVars<T> bind_head(ParamBinder<T>&, const MlpHead<T>&, HeadKind);          \
  template ad::Var<T> encode_batch(const EncoderVars<T>&, ad::Var<T>, std::size_t, Rng*); \
  template ad::Var<T> cls_rows(ad::Var<T>, std::size_t);                                \
  template ad::Var<T> mlp_forward(const MlpVars<T>&, ad::Var<T>);                       \
  template Tensor<T> encode(const Tensor<T>&, const EncoderParams<T>&, bool, Rng&);     \
  template std::vector<T> extract_cls(const Tensor<T>&);                                \
  template T head_forward(std::span<const T>, HeadKind, const HeadParams<T>&);

APAR_INSTANTIATE_ENCODER(float)
APAR_INSTANTIATE_ENCODER(double)

template EncoderParams<double> EncoderParams<float>::cast<double>() const;
template EncoderParams<float> EncoderParams<double>::cast<float>() const;
template EncoderParams<float> EncoderParams<float>::cast<float>() const;
template HeadParams<double> HeadParams<float>::cast<double>() const;
template HeadParams<float> HeadParams<double>::cast<float>() const;
template HeadParams<float> HeadParams<float>::cast<float>() const;

}  // namespace apar
