#include "apar/tokenizer.hpp"

#include <cmath>

#include "apar/error.hpp"

namespace apar {

template <typename T>
TokenizerParams<T> init_tokenizer(const Schema& schema, std::size_t d, Rng& rng) {
  if (d == 0) throw ConfigError("embedding width d must be positive");
  std::size_t k_num = 0;
  std::vector<std::size_t> cards;
  for (const auto& c : schema) {
    if (c.kind == ColumnKind::numerical) ++k_num;
    if (c.kind == ColumnKind::categorical) {
      if (c.cardinality == 0) throw ConfigError("categorical column " + c.name + " has no cardinality");
      cards.push_back(c.cardinality);
    }
  }
  const double stddev = std::sqrt(2.0 / static_cast<double>(d));
  TokenizerParams<T> p;
  p.d = d;
  p.w_num = Tensor<T>(k_num, d);
  for (auto& v : p.w_num.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  p.b_num = Tensor<T>(k_num, d);
  for (std::size_t card : cards) {
    Tensor<T> table(card, d);
    for (auto& v : table.values()) v = static_cast<T>(rng.normal(0.0, stddev));
    p.w_cat.push_back(std::move(table));
  }
  p.b_cat = Tensor<T>(cards.size(), d);
  return p;
}

template <typename T>
TokenizerVars<T> bind_tokenizer(ParamBinder<T>& binder, const TokenizerParams<T>& params) {
  TokenizerVars<T> v;
  v.w_num = binder.bind("tokenizer.w_num", params.w_num);
  v.b_num = binder.bind("tokenizer.b_num", params.b_num);
  for (std::size_t j = 0; j < params.w_cat.size(); ++j) {
    v.w_cat.push_back(binder.bind("tokenizer.w_cat." + std::to_string(j), params.w_cat[j]));
  }
  v.b_cat = binder.bind("tokenizer.b_cat", params.b_cat);
  return v;
}

template <typename T>
ad::Var<T> tokenize_batch(const TokenizerVars<T>& vars, const TabularDataset& data,
                          std::span<const std::size_t> rows) {
  const Tensor<T>& w_num = vars.w_num.value();
  const Tensor<T>& b_num = vars.b_num.value();
  const Tensor<T>& b_cat = vars.b_cat.value();
  const std::size_t k_num = w_num.rows();
  const std::size_t k_cat = vars.w_cat.size();
  const std::size_t k = k_num + k_cat;
  const std::size_t d = w_num.cols() > 0 ? w_num.cols() : vars.w_cat.at(0).cols();
  if (data.k_num() != k_num || data.k_cat() != k_cat) {
    throw DataError("dataset feature counts do not match tokenizer");
  }
  Tensor<T> out(rows.size() * k, d);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const std::size_t r = rows[b];
    for (std::size_t j = 0; j < k_num; ++j) {
      const T x = static_cast<T>(data.num(r, j));
      auto dst = out.row(b * k + j);
      for (std::size_t c = 0; c < d; ++c) dst[c] = b_num(j, c) + x * w_num(j, c);
    }
    for (std::size_t j = 0; j < k_cat; ++j) {
      const std::uint32_t id = data.cat(r, j);
      const Tensor<T>& table = vars.w_cat[j].value();
      if (id >= table.rows()) {
        throw DataError("categorical id " + std::to_string(id) + " out of range for feature " +
                        std::to_string(j));
      }
      auto dst = out.row(b * k + k_num + j);
      for (std::size_t c = 0; c < d; ++c) dst[c] = b_cat(j, c) + table(id, c);
    }
  }

  std::vector<ad::Var<T>> parents{vars.w_num, vars.b_num, vars.b_cat};
  parents.insert(parents.end(), vars.w_cat.begin(), vars.w_cat.end());
  std::vector<std::size_t> row_ids(rows.begin(), rows.end());
  std::vector<std::size_t> table_ids;
  for (const auto& w : vars.w_cat) table_ids.push_back(w.id);
  return vars.w_num.tape->record(
      std::move(out), parents,
      [&data, row_ids = std::move(row_ids), table_ids = std::move(table_ids), iw = vars.w_num.id,
       ib = vars.b_num.id, ibc = vars.b_cat.id, k_num, k_cat, k, d](ad::Tape<T>& t,
                                                                   std::size_t self) {
        const Tensor<T>& g = *t.grad_if_any(self);
        const bool num_grad = t.needs_grad(iw) && k_num > 0;
        for (std::size_t b = 0; b < row_ids.size(); ++b) {
          const std::size_t r = row_ids[b];
          if (num_grad) {
            Tensor<T>& dw = t.grad(iw);
            Tensor<T>& db = t.grad(ib);
            for (std::size_t j = 0; j < k_num; ++j) {
              const T x = static_cast<T>(data.num(r, j));
              auto gr = g.row(b * k + j);
              for (std::size_t c = 0; c < d; ++c) {
                dw(j, c) += x * gr[c];
                db(j, c) += gr[c];
              }
            }
          }
          for (std::size_t j = 0; j < k_cat; ++j) {
            auto gr = g.row(b * k + k_num + j);
            Tensor<T>& dtable = t.grad(table_ids[j]);
            Tensor<T>& dbc = t.grad(ibc);
            const std::uint32_t id = data.cat(r, j);
            for (std::size_t c = 0; c < d; ++c) {
              dtable(id, c) += gr[c];
              dbc(j, c) += gr[c];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> tokenize(const TabularDataset& data, std::size_t row, const TokenizerParams<T>& params) {
  ad::Tape<T> tape;
  ParamBinder<T> binder(tape);
  const auto vars = bind_tokenizer(binder, params);
  const std::size_t rows[] = {row};
  return tokenize_batch(vars, data, rows).value();
}

#define APAR_INSTANTIATE_TOKENIZER(T)                                                      \
  template TokenizerParams<T> init_tokenizer<T>(const Schema&, std::size_t, Rng&);        \
  template TokenizerVars<T> bind_tokenizer(ParamBinder<T>&, const TokenizerParams<T>&);   \
  template ad::Var<T> tokenize_batch(const TokenizerVars<T>&, const TabularDataset&,      \
                                     std::span<const std::size_t>);                       \
  template Tensor<T> tokenize(const TabularDataset&, std::size_t, const TokenizerParams<T>&);

APAR_INSTANTIATE_TOKENIZER(float)
APAR_INSTANTIATE_TOKENIZER(double)

}  // namespace apar
