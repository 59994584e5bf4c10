#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "comet/error.hpp"
#include "comet/tensor.hpp"

namespace comet::data {

enum class TaskKind { kRegression, kBinary };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

/// Ground-truth router of synth_cluster_moe: cluster c is generated by the
/// linear map coefficients.row(c) . x + intercepts[c].
struct ClusterOracle {
  Tensor coefficients;           // n_clusters x p
  std::vector<double> intercepts;
  std::vector<std::size_t> cluster;  // per sample
  double noise_sd = 0.0;

  double predict(std::span<const double> x, std::size_t cluster_id) const;
};

struct Provenance {
  std::string source;  // generator name or file path
  std::uint64_t seed = 0;
  std::optional<ClusterOracle> oracle;
};

struct Dataset {
  Tensor features;                          // N x p
  std::vector<std::vector<double>> targets;  // one N-vector per task
  std::vector<TaskKind> task_kinds;
  std::vector<std::string> feature_names;
  std::vector<std::string> task_names;
  std::vector<std::int64_t> hash_keys;  // empty when the data carries no keys
  Provenance provenance;

  std::size_t size() const { return features.rows(); }
  std::size_t n_features() const { return features.cols(); }
  std::size_t n_tasks() const { return targets.size(); }
  bool has_hash_keys() const { return !hash_keys.empty(); }

  /// Rows in the given order; oracle cluster ids follow the rows.
  Dataset subset(std::span<const std::size_t> rows) const;
  /// Throws UsageError when field lengths disagree, values are non-finite,
  /// or binary targets fall outside {0, 1}.
  void validate() const;
};

/// Gaussian clusters with one random linear target map per cluster. Features
/// are standardized; hash keys are the cluster ids.
Dataset synth_cluster_moe(std::uint64_t seed, std::size_t n_clusters, std::size_t p,
                          std::size_t n, double noise_sd);

/// Shared features with a regression task (mixture of linear maps) and a
/// binary task (thresholded second mixture). Hash keys are the regression
/// mixture component of each sample.
Dataset synth_multitask(std::uint64_t seed, std::size_t p, std::size_t n);

struct CsvTarget {
  std::string column;
  TaskKind kind = TaskKind::kRegression;
};

struct CsvSchema {
  std::vector<std::string> features;  // empty: every column not used elsewhere
  std::vector<CsvTarget> targets;
  std::optional<std::string> key_column;
  char delimiter = ',';
  // With no key column, keys are row index modulo this; 0 leaves keys empty.
  std::size_t hash_buckets = 0;
};

class CsvError : public Error {
 public:
  enum class Kind { kIo, kEmptyFile, kMissingColumn, kNonNumeric, kMalformedRow, kInvalidValue };

  CsvError(Kind kind, std::size_t line, const std::string& message)
      : Error(message), kind_(kind), line_(line) {}

  Kind kind() const { return kind_; }
  /// 1-based line number (the header is line 1); 0 when not line specific.
  std::size_t line() const { return line_; }

 private:
  Kind kind_;
  std::size_t line_;
};

Dataset load_csv(const std::string& path, const CsvSchema& schema);
/// Header: feature names, task names, then "key" when hash keys exist.
/// Numbers are written in shortest round-trip form.
void write_csv(const Dataset& dataset, const std::string& path, char delimiter = ',');

struct SplitSpec {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;
};

struct Splits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

/// Seeded shuffle then contiguous partition; validation and test sizes are
/// the rounded fractions (at least one row each), train takes the rest.
Splits split(const Dataset& dataset, const SplitSpec& spec);
std::vector<std::vector<std::size_t>> split_indices(std::size_t n, const SplitSpec& spec);

}  // namespace comet::data
