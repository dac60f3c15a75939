#include "apar/tabdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "apar/digest.hpp"
#include "apar/error.hpp"
#include "apar/rng.hpp"

namespace apar {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    cells.push_back(trim(line.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cells;
}

bool parse_real(std::string_view cell, double& out) {
  if (cell.empty()) return false;
  if (cell.front() == '+') cell.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), out);
  return ec == std::errc() && ptr == cell.data() + cell.size() && std::isfinite(out);
}

std::size_t count_kind(const Schema& schema, ColumnKind kind) {
  return static_cast<std::size_t>(std::count_if(
      schema.begin(), schema.end(), [kind](const ColumnSchema& c) { return c.kind == kind; }));
}

}  // namespace

// ---------------------------------------------------------------- schema

std::string to_string(ColumnKind kind) {
  switch (kind) {
    case ColumnKind::numerical: return "numerical";
    case ColumnKind::categorical: return "categorical";
    case ColumnKind::target: return "target";
  }
  return "?";
}

ColumnKind parse_column_kind(const std::string& text) {
  if (text == "numerical") return ColumnKind::numerical;
  if (text == "categorical") return ColumnKind::categorical;
  if (text == "target") return ColumnKind::target;
  throw ConfigError("unknown column kind '" + text + "'");
}

void validate_schema(const Schema& schema) {
  if (count_kind(schema, ColumnKind::target) != 1) {
    throw ConfigError("schema must contain exactly one target column");
  }
  std::set<std::string> names;
  for (const auto& c : schema) {
    if (c.name.empty()) throw ConfigError("schema column with empty name");
    if (!names.insert(c.name).second) throw ConfigError("duplicate schema column " + c.name);
    if (c.kind != ColumnKind::categorical && c.cardinality != 0) {
      throw ConfigError("cardinality given for non-categorical column " + c.name);
    }
  }
}

Schema parse_schema(const nlohmann::json& doc) {
  if (!doc.is_array()) throw ConfigError("schema must be a JSON array");
  Schema schema;
  for (const auto& entry : doc) {
    if (!entry.is_object()) throw ConfigError("schema entries must be objects");
    ColumnSchema col;
    for (const auto& [key, value] : entry.items()) {
      if (key == "name") {
        col.name = value.get<std::string>();
      } else if (key == "kind") {
        col.kind = parse_column_kind(value.get<std::string>());
      } else if (key == "cardinality") {
        col.cardinality = value.get<std::size_t>();
      } else {
        throw ConfigError("unknown schema key '" + key + "'");
      }
    }
    schema.push_back(std::move(col));
  }
  validate_schema(schema);
  return schema;
}

Schema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schema file " + path.string());
  try {
    return parse_schema(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed schema file " + path.string() + ": " + e.what());
  }
}

nlohmann::json schema_to_json(const Schema& schema) {
  auto out = nlohmann::json::array();
  for (const auto& c : schema) {
    nlohmann::json e{{"name", c.name}, {"kind", to_string(c.kind)}};
    if (c.kind == ColumnKind::categorical && c.cardinality > 0) e["cardinality"] = c.cardinality;
    out.push_back(std::move(e));
  }
  return out;
}

std::string schema_digest(const Schema& schema) {
  return to_hex(fnv1a64(schema_to_json(schema).dump()));
}

// ---------------------------------------------------------------- dataset

std::vector<std::size_t> TabularDataset::cardinalities() const {
  std::vector<std::size_t> out;
  for (const auto& c : schema) {
    if (c.kind == ColumnKind::categorical) out.push_back(c.cardinality);
  }
  return out;
}

void TabularDataset::validate() const {
  const std::size_t n = targets.size();
  if (num.rows() != n || cat.rows() != n) throw DataError("dataset containers disagree on n");
  if (count_kind(schema, ColumnKind::numerical) != num.cols() ||
      count_kind(schema, ColumnKind::categorical) != cat.cols()) {
    throw DataError("dataset shape does not match schema");
  }
  if (!num.all_finite() ||
      !std::all_of(targets.begin(), targets.end(), [](double v) { return std::isfinite(v); })) {
    throw DataError("dataset holds non-finite values");
  }
  const auto card = cardinalities();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < cat.cols(); ++j) {
      if (cat(r, j) >= card[j]) throw DataError("categorical id exceeds cardinality");
    }
  }
}

TabularDataset TabularDataset::subset(std::span<const std::size_t> rows) const {
  TabularDataset out;
  out.schema = schema;
  out.num = Tensor<double>(rows.size(), num.cols());
  out.cat = Tensor<std::uint32_t>(rows.size(), cat.cols());
  out.targets.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    std::copy(num.row(r).begin(), num.row(r).end(), out.num.row(i).begin());
    std::copy(cat.row(r).begin(), cat.row(r).end(), out.cat.row(i).begin());
    out.targets.push_back(targets[r]);
  }
  return out;
}

Tensor<double> TabularDataset::numeric_view() const {
  Tensor<double> out(size(), k());
  for (std::size_t r = 0; r < size(); ++r) {
    for (std::size_t j = 0; j < k_num(); ++j) out(r, j) = num(r, j);
    for (std::size_t j = 0; j < k_cat(); ++j) out(r, k_num() + j) = cat(r, j);
  }
  return out;
}

// ---------------------------------------------------------------- csv

RawTable parse_csv(std::istream& in, const Schema& schema) {
  validate_schema(schema);
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV input is empty");
  const auto header = split_line(line);
  bool header_ok = header.size() == schema.size();
  for (std::size_t c = 0; header_ok && c < header.size(); ++c) {
    header_ok = header[c] == schema[c].name;
  }
  if (!header_ok) {
    std::string expected;
    for (const auto& c : schema) expected += (expected.empty() ? "" : ",") + c.name;
    throw DataError("CSV header '" + std::string(trim(line)) +
                    "' does not match schema columns '" + expected + "'");
  }

  RawTable table;
  table.schema = schema;
  table.numbers.resize(schema.size());
  table.labels.resize(schema.size());
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto cells = split_line(line);
    if (cells.size() != schema.size()) {
      throw DataError("row " + std::to_string(row) + ": expected " +
                      std::to_string(schema.size()) + " cells, found " +
                      std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (schema[c].kind == ColumnKind::categorical) {
        table.labels[c].emplace_back(cells[c]);
        continue;
      }
      double v = 0.0;
      if (!parse_real(cells[c], v)) {
        throw DataError("row " + std::to_string(row) + ", column " + schema[c].name +
                        ": cannot parse '" + std::string(cells[c]) + "' as a number");
      }
      table.numbers[c].push_back(v);
    }
  }
  if (row == 0) throw DataError("CSV has no data rows");
  table.rows = row;
  return table;
}

RawTable load_csv(const std::filesystem::path& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file " + path.string());
  return parse_csv(in, schema);
}

void write_csv(std::ostream& out, const RawTable& table) {
  for (std::size_t c = 0; c < table.schema.size(); ++c) {
    out << (c ? "," : "") << table.schema[c].name;
  }
  out << '\n';
  char buf[32];
  for (std::size_t r = 0; r < table.rows; ++r) {
    for (std::size_t c = 0; c < table.schema.size(); ++c) {
      if (c) out << ',';
      if (table.schema[c].kind == ColumnKind::categorical) {
        out << table.labels[c][r];
      } else {
        const auto res = std::to_chars(buf, buf + sizeof(buf), table.numbers[c][r]);
        out.write(buf, res.ptr - buf);
      }
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------- preprocessing

double signed_log(double v) { return std::copysign(std::log1p(std::fabs(v)), v); }

double signed_log_inverse(double s) { return std::copysign(std::expm1(std::fabs(s)), s); }

std::pair<TabularDataset, Preprocessor> fit_transform(const RawTable& table,
                                                      PreprocessFlags flags) {
  validate_schema(table.schema);
  Preprocessor prep;
  prep.schema_ = table.schema;
  prep.flags_ = flags;
  for (std::size_t c = 0; c < table.schema.size(); ++c) {
    if (table.schema[c].kind != ColumnKind::categorical) continue;
    std::vector<std::string> vocab;
    std::unordered_map<std::string, std::uint32_t> index;
    for (const auto& label : table.labels[c]) {
      if (index.try_emplace(label, static_cast<std::uint32_t>(vocab.size() + 1)).second) {
        vocab.push_back(label);
      }
    }
    prep.schema_[c].cardinality = vocab.size() + 1;
    prep.vocab_.push_back(std::move(vocab));
    prep.index_.push_back(std::move(index));
  }
  TabularDataset data = prep.transform(table);
  return {std::move(data), std::move(prep)};
}

std::uint32_t Preprocessor::encode(std::size_t categorical_index, const std::string& label) const {
  const auto& idx = index_.at(categorical_index);
  auto it = idx.find(label);
  return it == idx.end() ? 0u : it->second;
}

double Preprocessor::transform_target(double y) const {
  return flags_.scale_target ? signed_log(y) : y;
}

double Preprocessor::inverse_target(double s) const {
  return flags_.scale_target ? signed_log_inverse(s) : s;
}

TabularDataset Preprocessor::transform(const RawTable& table) const {
  if (table.schema.size() != schema_.size()) throw DataError("table does not match fitted schema");
  for (std::size_t c = 0; c < schema_.size(); ++c) {
    if (table.schema[c].name != schema_[c].name || table.schema[c].kind != schema_[c].kind) {
      throw DataError("table column " + table.schema[c].name + " does not match fitted schema");
    }
  }
  const std::size_t n = table.rows;
  TabularDataset out;
  out.schema = schema_;
  out.num = Tensor<double>(n, count_kind(schema_, ColumnKind::numerical));
  out.cat = Tensor<std::uint32_t>(n, count_kind(schema_, ColumnKind::categorical));
  out.targets.resize(n);
  std::size_t jn = 0;
  std::size_t jc = 0;
  for (std::size_t c = 0; c < schema_.size(); ++c) {
    switch (schema_[c].kind) {
      case ColumnKind::numerical:
        for (std::size_t r = 0; r < n; ++r) {
          const double v = table.numbers[c][r];
          out.num(r, jn) = flags_.scale_numerical ? signed_log(v) : v;
        }
        ++jn;
        break;
      case ColumnKind::categorical:
        for (std::size_t r = 0; r < n; ++r) out.cat(r, jc) = encode(jc, table.labels[c][r]);
        ++jc;
        break;
      case ColumnKind::target:
        for (std::size_t r = 0; r < n; ++r) out.targets[r] = transform_target(table.numbers[c][r]);
        break;
    }
  }
  out.validate();
  return out;
}

nlohmann::json Preprocessor::to_json() const {
  return {{"schema", schema_to_json(schema_)},
          {"scale_numerical", flags_.scale_numerical},
          {"scale_target", flags_.scale_target},
          {"vocab", vocab_}};
}

Preprocessor Preprocessor::from_json(const nlohmann::json& doc) {
  Preprocessor p;
  p.schema_ = parse_schema(doc.at("schema"));
  p.flags_.scale_numerical = doc.at("scale_numerical").get<bool>();
  p.flags_.scale_target = doc.at("scale_target").get<bool>();
  p.vocab_ = doc.at("vocab").get<std::vector<std::vector<std::string>>>();
  for (const auto& vocab : p.vocab_) {
    std::unordered_map<std::string, std::uint32_t> index;
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      index.emplace(vocab[i], static_cast<std::uint32_t>(i + 1));
    }
    p.index_.push_back(std::move(index));
  }
  if (p.vocab_.size() != count_kind(p.schema_, ColumnKind::categorical)) {
    throw ConfigError("preprocessor vocabulary does not match schema");
  }
  return p;
}

// ---------------------------------------------------------------- split

DatasetSplit split(const TabularDataset& data, SplitFractions f, std::uint64_t seed) {
  if (f.train <= 0.0 || f.valid <= 0.0 || f.test <= 0.0) {
    throw ConfigError("split fractions must be positive");
  }
  if (std::fabs(f.train + f.valid + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  const std::size_t n = data.size();
  const auto n_valid = static_cast<std::size_t>(std::floor(static_cast<double>(n) * f.valid + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * f.test + 1e-9));
  if (n_valid == 0 || n_test == 0 || n_valid + n_test >= n) {
    throw DataError("split of " + std::to_string(n) + " rows leaves an empty partition");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed, "split");
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);

  DatasetSplit out;
  out.valid_rows.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_valid));
  out.test_rows.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_valid),
                       perm.begin() + static_cast<std::ptrdiff_t>(n_valid + n_test));
  out.train_rows.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_valid + n_test), perm.end());
  out.train = data.subset(out.train_rows);
  out.valid = data.subset(out.valid_rows);
  out.test = data.subset(out.test_rows);
  return out;
}

// ---------------------------------------------------------------- synthetic

void SyntheticTaskSpec::validate() const {
  if (n == 0) throw ConfigError("synthetic n must be positive");
  if (k_num + k_cat == 0) throw ConfigError("synthetic task needs at least one feature");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be nonnegative");
  if (!(uninformative_fraction >= 0.0 && uninformative_fraction <= 1.0)) {
    throw ConfigError("uninformative_fraction must lie in [0, 1]");
  }
  if (k_cat > 0 && cat_cardinality == 0) throw ConfigError("cat_cardinality must be positive");
}

nlohmann::json SyntheticTaskSpec::to_json() const {
  return {{"seed", seed},
          {"n", n},
          {"k_num", k_num},
          {"k_cat", k_cat},
          {"threshold_count", threshold_count},
          {"noise_sigma", noise_sigma},
          {"uninformative_fraction", uninformative_fraction},
          {"cat_cardinality", cat_cardinality}};
}

SyntheticTaskSpec SyntheticTaskSpec::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("synthetic spec must be a JSON object");
  SyntheticTaskSpec s;
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key == "seed") s.seed = value.get<std::uint64_t>();
      else if (key == "n") s.n = value.get<std::size_t>();
      else if (key == "k_num") s.k_num = value.get<std::size_t>();
      else if (key == "k_cat") s.k_cat = value.get<std::size_t>();
      else if (key == "threshold_count") s.threshold_count = value.get<std::size_t>();
      else if (key == "noise_sigma") s.noise_sigma = value.get<double>();
      else if (key == "uninformative_fraction") s.uninformative_fraction = value.get<double>();
      else if (key == "cat_cardinality") s.cat_cardinality = value.get<std::size_t>();
      else throw ConfigError("unknown synthetic spec key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

double SyntheticFormula::evaluate(const TabularDataset& data, std::size_t row) const {
  double y = intercept;
  for (std::size_t j = 0; j < linear.size(); ++j) y += linear[j] * data.num(row, j);
  for (std::size_t j = 0; j < cat_effects.size(); ++j) y += cat_effects[j][data.cat(row, j)];
  for (const auto& s : steps) {
    if (data.num(row, s.feature) > s.threshold) y += s.height;
  }
  return y;
}

SyntheticTask generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  const std::size_t k = spec.k_num + spec.k_cat;
  Rng rng(spec.seed, "synthetic");

  SyntheticFormula f;
  f.informative.assign(k, true);
  const auto n_uninf = static_cast<std::size_t>(
      std::llround(spec.uninformative_fraction * static_cast<double>(k)));
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = k; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  for (std::size_t i = 0; i < n_uninf; ++i) f.informative[order[i]] = false;

  f.intercept = rng.normal(0.0, 0.5);
  f.linear.assign(spec.k_num, 0.0);
  std::vector<std::size_t> informative_num;
  for (std::size_t j = 0; j < spec.k_num; ++j) {
    const double w = rng.normal();
    if (f.informative[j]) {
      f.linear[j] = w;
      informative_num.push_back(j);
    }
  }
  f.cat_effects.resize(spec.k_cat);
  for (std::size_t j = 0; j < spec.k_cat; ++j) {
    f.cat_effects[j].assign(spec.cat_cardinality + 1, 0.0);
    for (std::size_t c = 1; c <= spec.cat_cardinality; ++c) {
      const double e = rng.normal(0.0, 0.5);
      if (f.informative[spec.k_num + j]) f.cat_effects[j][c] = e;
    }
  }
  if (!informative_num.empty()) {
    for (std::size_t s = 0; s < spec.threshold_count; ++s) {
      StepTerm t;
      t.feature = informative_num[rng.index(informative_num.size())];
      t.threshold = rng.uniform(-0.9, 0.9);
      const double magnitude = rng.uniform(0.5, 1.5);
      t.height = rng.bernoulli(0.5) ? magnitude : -magnitude;
      f.steps.push_back(t);
    }
  }

  TabularDataset data;
  for (std::size_t j = 0; j < spec.k_num; ++j) {
    data.schema.push_back({"x" + std::to_string(j), ColumnKind::numerical, 0});
  }
  for (std::size_t j = 0; j < spec.k_cat; ++j) {
    data.schema.push_back({"c" + std::to_string(j), ColumnKind::categorical,
                           spec.cat_cardinality + 1});
  }
  data.schema.push_back({"y", ColumnKind::target, 0});
  data.num = Tensor<double>(spec.n, spec.k_num);
  data.cat = Tensor<std::uint32_t>(spec.n, spec.k_cat);
  data.targets.resize(spec.n);
  for (std::size_t r = 0; r < spec.n; ++r) {
    for (std::size_t j = 0; j < spec.k_num; ++j) data.num(r, j) = rng.uniform(-1.0, 1.0);
    for (std::size_t j = 0; j < spec.k_cat; ++j) {
      data.cat(r, j) = static_cast<std::uint32_t>(1 + rng.index(spec.cat_cardinality));
    }
  }
  for (std::size_t r = 0; r < spec.n; ++r) {
    double y = f.evaluate(data, r);
    if (spec.noise_sigma > 0.0) y += rng.normal(0.0, spec.noise_sigma);
    data.targets[r] = y;
  }
  return {std::move(data), std::move(f)};
}

RawTable to_raw_table(const TabularDataset& data) {
  RawTable t;
  t.schema = data.schema;
  for (auto& c : t.schema) c.cardinality = 0;
  t.rows = data.size();
  t.numbers.resize(t.schema.size());
  t.labels.resize(t.schema.size());
  std::size_t jn = 0;
  std::size_t jc = 0;
  for (std::size_t c = 0; c < t.schema.size(); ++c) {
    switch (t.schema[c].kind) {
      case ColumnKind::numerical:
        for (std::size_t r = 0; r < t.rows; ++r) t.numbers[c].push_back(data.num(r, jn));
        ++jn;
        break;
      case ColumnKind::categorical:
        for (std::size_t r = 0; r < t.rows; ++r) {
          t.labels[c].push_back("c" + std::to_string(data.cat(r, jc)));
        }
        ++jc;
        break;
      case ColumnKind::target:
        t.numbers[c] = data.targets;
        break;
    }
  }
  return t;
}

}  // namespace apar
