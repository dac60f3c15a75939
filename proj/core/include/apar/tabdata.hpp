#pragma once

// Dataset ingestion, label encoding, signed-log scaling, seeded splits and the
// synthetic irregular-target generator used by tests and the ablation runner.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "apar/tensor.hpp"

namespace apar {

enum class ColumnKind { numerical, categorical, target };

struct ColumnSchema {
  std::string name;
  ColumnKind kind = ColumnKind::numerical;
  // Categorical only: number of embedding rows, including reserved id 0.
  std::size_t cardinality = 0;

  bool operator==(const ColumnSchema&) const = default;
};

using Schema = std::vector<ColumnSchema>;

std::string to_string(ColumnKind kind);
ColumnKind parse_column_kind(const std::string& text);

// Throws ConfigError unless exactly one target column exists and names are unique.
void validate_schema(const Schema& schema);
Schema parse_schema(const nlohmann::json& doc);
Schema load_schema(const std::filesystem::path& path);
nlohmann::json schema_to_json(const Schema& schema);
// Stable digest over column names, kinds and cardinalities.
std::string schema_digest(const Schema& schema);

// Encoded dataset. Numerical block is n x k_num, categorical ids n x k_cat.
struct TabularDataset {
  Tensor<double> num;
  Tensor<std::uint32_t> cat;
  std::vector<double> targets;
  Schema schema;

  std::size_t size() const { return targets.size(); }
  std::size_t k_num() const { return num.cols(); }
  std::size_t k_cat() const { return cat.cols(); }
  std::size_t k() const { return k_num() + k_cat(); }
  // Categorical cardinalities in column order.
  std::vector<std::size_t> cardinalities() const;

  // Throws DataError on any broken invariant.
  void validate() const;
  TabularDataset subset(std::span<const std::size_t> rows) const;
  // n x k real view: numerical columns, then categorical ids as reals.
  Tensor<double> numeric_view() const;
};

// Raw parsed CSV: numeric cells as reals, categorical cells as strings.
struct RawTable {
  Schema schema;
  std::size_t rows = 0;
  // Indexed by schema column; only the member matching the kind is filled.
  std::vector<std::vector<double>> numbers;
  std::vector<std::vector<std::string>> labels;
};

RawTable parse_csv(std::istream& in, const Schema& schema);
RawTable load_csv(const std::filesystem::path& path, const Schema& schema);
void write_csv(std::ostream& out, const RawTable& table);

// sign(v) * ln(1 + |v|) and its inverse.
double signed_log(double v);
double signed_log_inverse(double s);

struct PreprocessFlags {
  bool scale_numerical = true;
  bool scale_target = true;
};

class Preprocessor {
 public:
  Preprocessor() = default;

  // Encodes a table with the fitted maps; unseen categories become id 0.
  TabularDataset transform(const RawTable& table) const;
  std::uint32_t encode(std::size_t categorical_index, const std::string& label) const;
  double transform_target(double y) const;
  double inverse_target(double s) const;

  const Schema& schema() const { return schema_; }
  const PreprocessFlags& flags() const { return flags_; }

  nlohmann::json to_json() const;
  static Preprocessor from_json(const nlohmann::json& doc);

  friend std::pair<TabularDataset, Preprocessor> fit_transform(const RawTable& table,
                                                               PreprocessFlags flags);

 private:
  Schema schema_;
  PreprocessFlags flags_;
  // Per categorical column, labels in id order (id = position + 1).
  std::vector<std::vector<std::string>> vocab_;
  std::vector<std::unordered_map<std::string, std::uint32_t>> index_;
};

// Label-encodes categoricals in first-appearance order starting at 1 and
// applies signed-log scaling per the flags.
std::pair<TabularDataset, Preprocessor> fit_transform(const RawTable& table,
                                                      PreprocessFlags flags = {});

struct SplitFractions {
  double train = 0.7;
  double valid = 0.15;
  double test = 0.15;
};

struct DatasetSplit {
  TabularDataset train;
  TabularDataset valid;
  TabularDataset test;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> valid_rows;
  std::vector<std::size_t> test_rows;
};

// Seeded permutation; valid/test get floor(n * f), train takes the remainder.
DatasetSplit split(const TabularDataset& data, SplitFractions fractions, std::uint64_t seed);

struct SyntheticTaskSpec {
  std::uint64_t seed = 0;
  std::size_t n = 1000;
  std::size_t k_num = 10;
  std::size_t k_cat = 0;
  std::size_t threshold_count = 0;
  double noise_sigma = 0.0;
  double uninformative_fraction = 0.0;
  // Distinct categories per categorical column (ids 1..c).
  std::size_t cat_cardinality = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticTaskSpec from_json(const nlohmann::json& doc);
};

struct StepTerm {
  std::size_t feature = 0;  // numerical column index
  double threshold = 0.0;
  double height = 0.0;
};

// Noiseless generator: intercept + sum_j linear_j x_j + sum_c effect_c[id]
// + sum_s height_s * [x_{feature_s} > threshold_s].
struct SyntheticFormula {
  double intercept = 0.0;
  std::vector<double> linear;                    // per numerical column
  std::vector<std::vector<double>> cat_effects;  // per categorical column, indexed by id
  std::vector<StepTerm> steps;
  std::vector<bool> informative;                 // per feature, numerical then categorical

  double evaluate(const TabularDataset& data, std::size_t row) const;
};

struct SyntheticTask {
  TabularDataset data;  // raw (unscaled) values
  SyntheticFormula formula;
};

SyntheticTask generate_synthetic(const SyntheticTaskSpec& spec);

// Categorical ids rendered as "c<id>" strings so the table can go through
// fit_transform like any CSV input.
RawTable to_raw_table(const TabularDataset& data);

}  // namespace apar
