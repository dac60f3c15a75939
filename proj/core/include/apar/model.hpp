#pragma once

// Tokenizer + encoder + heads bundled under one parameter namespace.

#include <span>

#include "apar/encoder.hpp"
#include "apar/tabdata.hpp"
#include "apar/tokenizer.hpp"

namespace apar {

template <typename T>
struct ModelParams {
  using value_type = T;

  TokenizerParams<T> tokenizer;
  EncoderParams<T> encoder;
  HeadParams<T> heads;

  template <typename F>
  void visit(F&& f) {
    tokenizer.visit(f);
    encoder.visit(f);
    heads.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    tokenizer.visit(f);
    encoder.visit(f);
    heads.visit(f);
  }

  template <typename U>
  ModelParams<U> cast() const {
    return {tokenizer.template cast<U>(), encoder.template cast<U>(), heads.template cast<U>()};
  }
};

template <typename T>
ModelParams<T> init_model(const Schema& schema, const EncoderConfig& config, Rng& rng) {
  ModelParams<T> m;
  m.tokenizer = init_tokenizer<T>(schema, config.d, rng);
  m.encoder = init_encoder<T>(config, rng);
  m.heads = init_heads<T>(config.d, rng);
  return m;
}

template <typename T>
struct BackboneVars {
  TokenizerVars<T> tokenizer;
  EncoderVars<T> encoder;
};

template <typename T>
BackboneVars<T> bind_backbone(ParamBinder<T>& binder, const ModelParams<T>& model) {
  return {bind_tokenizer(binder, model.tokenizer), bind_encoder(binder, model.encoder)};
}

// [CLS] states for the given rows: [rows.size(), d].
template <typename T>
ad::Var<T> embed_rows(const BackboneVars<T>& vars, const TabularDataset& data,
                      std::span<const std::size_t> rows, Rng* dropout_rng) {
  auto z = tokenize_batch(vars.tokenizer, data, rows);
  return cls_rows(encode_batch(vars.encoder, z, rows.size(), dropout_rng), rows.size());
}

}  // namespace apar
