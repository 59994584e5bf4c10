#include "comet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace comet::data {

std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::kRegression ? "regression" : "binary";
}

TaskKind parse_task_kind(std::string_view text) {
  if (text == "regression") return TaskKind::kRegression;
  if (text == "binary") return TaskKind::kBinary;
  throw UsageError("unknown task kind '" + std::string(text) + "'");
}

double ClusterOracle::predict(std::span<const double> x, std::size_t cluster_id) const {
  double y = intercepts.at(cluster_id);
  auto a = coefficients.row(cluster_id);
  for (std::size_t j = 0; j < x.size(); ++j) y += a[j] * x[j];
  return y;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.features = Tensor(rows.size(), n_features());
  out.targets.assign(n_tasks(), std::vector<double>(rows.size()));
  out.task_kinds = task_kinds;
  out.feature_names = feature_names;
  out.task_names = task_names;
  out.provenance = provenance;
  if (out.provenance.oracle) out.provenance.oracle->cluster.clear();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t src = rows[r];
    auto from = features.row(src);
    std::copy(from.begin(), from.end(), out.features.row(r).begin());
    for (std::size_t t = 0; t < n_tasks(); ++t) out.targets[t][r] = targets[t][src];
    if (has_hash_keys()) out.hash_keys.push_back(hash_keys[src]);
    if (out.provenance.oracle) {
      out.provenance.oracle->cluster.push_back(provenance.oracle->cluster[src]);
    }
  }
  return out;
}

void Dataset::validate() const {
  const std::size_t n = size();
  if (targets.size() != task_kinds.size()) {
    throw UsageError("dataset: " + std::to_string(targets.size()) + " target columns but " +
                     std::to_string(task_kinds.size()) + " task kinds");
  }
  if (!features.all_finite()) throw UsageError("dataset: non-finite feature value");
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t].size() != n) throw UsageError("dataset: target length mismatch");
    for (double y : targets[t]) {
      if (!std::isfinite(y)) throw UsageError("dataset: non-finite target value");
      if (task_kinds[t] == TaskKind::kBinary && y != 0.0 && y != 1.0) {
        throw UsageError("dataset: binary target outside {0, 1}");
      }
    }
  }
  if (has_hash_keys() && hash_keys.size() != n) throw UsageError("dataset: hash key length mismatch");
}

namespace {

// Column-wise zero mean, unit variance (columns with zero variance are only centered).
void standardize(Tensor& x) {
  const std::size_t n = x.rows();
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += x(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<double>(n);
    const double sd = var > 0.0 ? std::sqrt(var) : 1.0;
    for (std::size_t r = 0; r < n; ++r) x(r, c) = (x(r, c) - mean) / sd;
  }
}

std::vector<std::string> default_names(const char* prefix, std::size_t count) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < count; ++i) names.push_back(prefix + std::to_string(i));
  return names;
}

std::size_t argmax_projection(const Tensor& directions, std::span<const double> x) {
  std::size_t best = 0;
  double best_value = -HUGE_VAL;
  for (std::size_t m = 0; m < directions.rows(); ++m) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) s += directions(m, j) * x[j];
    if (s > best_value) {
      best_value = s;
      best = m;
    }
  }
  return best;
}

}  // namespace

Dataset synth_cluster_moe(std::uint64_t seed, std::size_t n_clusters, std::size_t p,
                          std::size_t n, double noise_sd) {
  if (n_clusters < 2) throw UsageError("synth_cluster_moe: need at least 2 clusters");
  if (p < 2) throw UsageError("synth_cluster_moe: need at least 2 features");
  if (n < n_clusters) throw UsageError("synth_cluster_moe: fewer samples than clusters");
  if (noise_sd < 0.0) throw UsageError("synth_cluster_moe: noise_sd must be >= 0");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, n_clusters - 1);

  Tensor centers(n_clusters, p);
  for (double& v : centers.values()) v = 3.0 * normal(rng);

  Dataset ds;
  ds.features = Tensor(n, p);
  std::vector<std::size_t> cluster(n);
  for (std::size_t r = 0; r < n; ++r) {
    cluster[r] = pick(rng);
    for (std::size_t j = 0; j < p; ++j) ds.features(r, j) = centers(cluster[r], j) + normal(rng);
  }
  standardize(ds.features);

  ClusterOracle oracle;
  oracle.coefficients = Tensor(n_clusters, p);
  for (double& v : oracle.coefficients.values()) v = normal(rng);
  oracle.intercepts.resize(n_clusters);
  for (double& v : oracle.intercepts) v = normal(rng);
  oracle.noise_sd = noise_sd;

  std::vector<double> y(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double eps = normal(rng);
    y[r] = oracle.predict(ds.features.row(r), cluster[r]) + noise_sd * eps;
  }
  oracle.cluster = cluster;

  ds.targets = {std::move(y)};
  ds.task_kinds = {TaskKind::kRegression};
  ds.feature_names = default_names("x", p);
  ds.task_names = {"y"};
  ds.hash_keys.assign(cluster.begin(), cluster.end());
  ds.provenance = {"synth_cluster_moe", seed, std::move(oracle)};
  return ds;
}

Dataset synth_multitask(std::uint64_t seed, std::size_t p, std::size_t n) {
  if (p < 1) throw UsageError("synth_multitask: need at least 1 feature");
  if (n < 1) throw UsageError("synth_multitask: need at least 1 sample");
  constexpr std::size_t kComponents = 4;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset ds;
  ds.features = Tensor(n, p);
  for (double& v : ds.features.values()) v = normal(rng);
  standardize(ds.features);

  Tensor route_a(kComponents, p), route_b(kComponents, p), maps_a(kComponents, p),
      maps_b(kComponents, p);
  for (Tensor* t : {&route_a, &route_b, &maps_a, &maps_b}) {
    for (double& v : t->values()) v = normal(rng);
  }
  std::vector<double> offsets(kComponents);
  for (double& v : offsets) v = normal(rng);

  std::vector<double> regression(n), binary(n);
  ds.hash_keys.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto x = ds.features.row(r);
    const std::size_t a = argmax_projection(route_a, x);
    const std::size_t b = argmax_projection(route_b, x);
    double ya = offsets[a], zb = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
      ya += maps_a(a, j) * x[j];
      zb += maps_b(b, j) * x[j];
    }
    regression[r] = ya + 0.1 * normal(rng);
    binary[r] = zb > 0.0 ? 1.0 : 0.0;
    ds.hash_keys[r] = static_cast<std::int64_t>(a);
  }
  ds.targets = {std::move(regression), std::move(binary)};
  ds.task_kinds = {TaskKind::kRegression, TaskKind::kBinary};
  ds.feature_names = default_names("x", p);
  ds.task_names = {"regression", "binary"};
  ds.provenance = {"synth_multitask", seed, std::nullopt};
  return ds;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_fields(const std::string& line, char delimiter) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        current += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        current += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == delimiter) {
      fields.push_back(trim(current));
      current.clear();
    } else {
      current += ch;
    }
  }
  fields.push_back(trim(current));
  return fields;
}

bool parse_double(const std::string& text, double& out) {
  if (text.empty()) return false;
  const char* begin = text.data();
  const char* end = begin + text.size();
  if (*begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_int(const std::string& text, std::int64_t& out) {
  if (text.empty()) return false;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc() && ptr == text.data() + text.size();
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  using Kind = CsvError::Kind;
  std::ifstream in(path);
  if (!in) throw CsvError(Kind::kIo, 0, "cannot open '" + path + "'");

  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      header = split_fields(line, schema.delimiter);
      break;
    }
  }
  if (header.empty()) throw CsvError(Kind::kEmptyFile, 0, "'" + path + "' is empty");
  if (!header[0].empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0].erase(0, 3);

  std::map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) column.emplace(header[i], i);
  auto require = [&](const std::string& name) {
    auto it = column.find(name);
    if (it == column.end()) {
      throw CsvError(Kind::kMissingColumn, 1, "missing column '" + name + "' in '" + path + "'");
    }
    return it->second;
  };

  if (schema.targets.empty()) throw UsageError("csv schema: at least one target column required");
  std::vector<std::size_t> target_cols;
  for (const auto& t : schema.targets) target_cols.push_back(require(t.column));
  std::optional<std::size_t> key_col;
  if (schema.key_column) key_col = require(*schema.key_column);

  std::vector<std::size_t> feature_cols;
  std::vector<std::string> feature_names;
  if (schema.features.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      const bool used = std::find(target_cols.begin(), target_cols.end(), i) != target_cols.end() ||
                        (key_col && *key_col == i);
      if (!used) {
        feature_cols.push_back(i);
        feature_names.push_back(header[i]);
      }
    }
  } else {
    for (const auto& f : schema.features) {
      feature_cols.push_back(require(f));
      feature_names.push_back(f);
    }
  }
  if (feature_cols.empty()) throw CsvError(Kind::kMissingColumn, 1, "no feature columns");

  std::vector<double> features;
  std::vector<std::vector<double>> targets(target_cols.size());
  std::vector<std::int64_t> keys;
  std::size_t rows = 0;

  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line, schema.delimiter);
    if (fields.size() != header.size()) {
      throw CsvError(Kind::kMalformedRow, line_no,
                     "line " + std::to_string(line_no) + ": expected " +
                         std::to_string(header.size()) + " fields, found " +
                         std::to_string(fields.size()));
    }
    auto number = [&](std::size_t col) {
      double v = 0.0;
      if (!parse_double(fields[col], v)) {
        throw CsvError(Kind::kNonNumeric, line_no,
                       "line " + std::to_string(line_no) + ", column '" + header[col] +
                           "': '" + fields[col] + "' is not a number");
      }
      if (!std::isfinite(v)) {
        throw CsvError(Kind::kInvalidValue, line_no,
                       "line " + std::to_string(line_no) + ", column '" + header[col] +
                           "': non-finite value");
      }
      return v;
    };
    for (auto c : feature_cols) features.push_back(number(c));
    for (std::size_t t = 0; t < target_cols.size(); ++t) {
      const double y = number(target_cols[t]);
      if (schema.targets[t].kind == TaskKind::kBinary && y != 0.0 && y != 1.0) {
        throw CsvError(Kind::kInvalidValue, line_no,
                       "line " + std::to_string(line_no) + ", column '" +
                           header[target_cols[t]] + "': binary target must be 0 or 1");
      }
      targets[t].push_back(y);
    }
    if (key_col) {
      std::int64_t key = 0;
      if (!parse_int(fields[*key_col], key)) {
        throw CsvError(Kind::kNonNumeric, line_no,
                       "line " + std::to_string(line_no) + ", column '" + header[*key_col] +
                           "': '" + fields[*key_col] + "' is not an integer key");
      }
      keys.push_back(key);
    }
    ++rows;
  }
  if (rows == 0) throw CsvError(Kind::kEmptyFile, line_no, "'" + path + "' has no data rows");

  Dataset ds;
  ds.features = Tensor(rows, feature_cols.size(), std::move(features));
  ds.targets = std::move(targets);
  for (const auto& t : schema.targets) {
    ds.task_kinds.push_back(t.kind);
    ds.task_names.push_back(t.column);
  }
  ds.feature_names = std::move(feature_names);
  if (key_col) {
    ds.hash_keys = std::move(keys);
  } else if (schema.hash_buckets > 0) {
    ds.hash_keys.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      ds.hash_keys[r] = static_cast<std::int64_t>(r % schema.hash_buckets);
    }
  }
  ds.provenance = {path, 0, std::nullopt};
  return ds;
}

void write_csv(const Dataset& dataset, const std::string& path, char delimiter) {
  std::ofstream out(path);
  if (!out) throw CsvError(CsvError::Kind::kIo, 0, "cannot write '" + path + "'");
  std::vector<std::string> header = dataset.feature_names;
  if (header.size() != dataset.n_features()) header = default_names("x", dataset.n_features());
  for (std::size_t t = 0; t < dataset.n_tasks(); ++t) {
    header.push_back(t < dataset.task_names.size() ? dataset.task_names[t]
                                                   : "y" + std::to_string(t));
  }
  if (dataset.has_hash_keys()) header.emplace_back("key");
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out << delimiter;
    out << header[i];
  }
  out << '\n';
  for (std::size_t r = 0; r < dataset.size(); ++r) {
    for (std::size_t j = 0; j < dataset.n_features(); ++j) {
      if (j) out << delimiter;
      out << format_double(dataset.features(r, j));
    }
    for (std::size_t t = 0; t < dataset.n_tasks(); ++t) {
      out << delimiter << format_double(dataset.targets[t][r]);
    }
    if (dataset.has_hash_keys()) out << delimiter << dataset.hash_keys[r];
    out << '\n';
  }
}

std::vector<std::vector<std::size_t>> split_indices(std::size_t n, const SplitSpec& spec) {
  for (double f : {spec.train, spec.validation, spec.test}) {
    if (!(f > 0.0 && f < 1.0)) throw UsageError("split: each fraction must lie in (0, 1)");
  }
  if (std::abs(spec.train + spec.validation + spec.test - 1.0) > 1e-9) {
    throw UsageError("split: fractions must sum to 1");
  }
  if (n < 3) throw UsageError("split: need at least 3 rows");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto rounded = [n](double f) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(n))));
  };
  std::size_t n_val = rounded(spec.validation);
  std::size_t n_test = rounded(spec.test);
  while (n_val + n_test > n - 1) {
    if (n_val >= n_test && n_val > 1) --n_val; else --n_test;
  }
  const std::size_t n_train = n - n_val - n_test;
  std::vector<std::vector<std::size_t>> parts(3);
  parts[0].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  parts[1].assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                  order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  parts[2].assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return parts;
}

Splits split(const Dataset& dataset, const SplitSpec& spec) {
  const auto parts = split_indices(dataset.size(), spec);
  return {dataset.subset(parts[0]), dataset.subset(parts[1]), dataset.subset(parts[2])};
}

}  // namespace comet::data
