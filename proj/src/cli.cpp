#include "comet/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

extern char** environ;

namespace comet::cli {

namespace fs = std::filesystem;

std::size_t DatasetSpec::n_tasks() const {
  if (generator == "synth_multitask") return 2;
  if (generator == "csv") return schema.targets.size();
  return 1;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "gate", "n_experts", "k", "expert_hidden", "dropout", "shared_hidden",
      "key_embedding_dim", "key_buckets", "gamma", "lambda_entropy", "leaf_bias", "zeta",
      "u_init_sd", "tau_start", "tau_end", "iterations_start", "iterations_end",
      "learning_rate", "beta1", "beta2", "epsilon", "batch_size", "epochs", "stage1_epochs",
      "patience", "stop_at_binarization", "seed", "task_weights", "dataset", "split",
      "hash_assignment", "hash_seed", "teacher", "output_dir", "deterministic", "variants",
      "n_seeds", "pooled_t_test", "trials", "search_space", "tune_seed"};
  return keys;
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace {

/// Typed access to one JSON object; keys never read are reported by finish().
class Fields {
 public:
  Fields(const Json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "expected an object");
  }

  std::string path(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

  const Json* find(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  double number(const std::string& key, double fallback) {
    const Json* j = find(key);
    if (!j) return fallback;
    if (!j->is_number()) throw ConfigError(path(key), "expected a number");
    const double v = j->get<double>();
    if (!std::isfinite(v)) throw ConfigError(path(key), "must be finite");
    return v;
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    const Json* j = find(key);
    if (!j) return fallback;
    if (!j->is_number_integer() || j->get<std::int64_t>() < 0) {
      throw ConfigError(path(key), "expected a nonnegative integer");
    }
    return j->get<std::size_t>();
  }

  bool flag(const std::string& key, bool fallback) {
    const Json* j = find(key);
    if (!j) return fallback;
    if (!j->is_boolean()) throw ConfigError(path(key), "expected true or false");
    return j->get<bool>();
  }

  std::string text(const std::string& key, const std::string& fallback) {
    const Json* j = find(key);
    if (!j) return fallback;
    if (!j->is_string()) throw ConfigError(path(key), "expected a string");
    return j->get<std::string>();
  }

  std::vector<std::size_t> counts(const std::string& key, std::vector<std::size_t> fallback) {
    const Json* j = find(key);
    if (!j) return fallback;
    if (!j->is_array()) throw ConfigError(path(key), "expected an array of integers");
    std::vector<std::size_t> out;
    for (const auto& e : *j) {
      if (!e.is_number_integer() || e.get<std::int64_t>() < 0) {
        throw ConfigError(path(key), "expected an array of nonnegative integers");
      }
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  std::vector<double> numbers(const std::string& key) {
    const Json* j = find(key);
    if (!j) return {};
    if (!j->is_array()) throw ConfigError(path(key), "expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : *j) {
      if (!e.is_number()) throw ConfigError(path(key), "expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.contains(key)) throw ConfigError(path(key), "unknown key");
    }
  }

 private:
  const Json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

std::pair<moe::GateKind, bool> parse_variant(const std::string& name) {
  std::string base = name;
  bool ls = false;
  if (base.size() > 3 && base.compare(base.size() - 3, 3, "+ls") == 0) {
    base.resize(base.size() - 3);
    ls = true;
  }
  try {
    return {moe::parse_gate_kind(base), ls};
  } catch (const UsageError&) {
    throw ConfigError("variants", "unknown variant '" + name + "'");
  }
}

DatasetSpec parse_dataset(const Json& j) {
  Fields f(j, "dataset");
  DatasetSpec d;
  if (f.has("csv")) {
    d.generator = "csv";
    d.path = f.text("csv", "");
    require(!d.path.empty(), "dataset.csv", "path must not be empty");
    if (const Json* feats = f.find("features")) {
      require(feats->is_array(), "dataset.features", "expected an array of column names");
      for (const auto& c : *feats) {
        require(c.is_string(), "dataset.features", "expected column names");
        d.schema.features.push_back(c.get<std::string>());
      }
    }
    const Json* targets = f.find("targets");
    require(targets && targets->is_array() && !targets->empty(), "dataset.targets",
            "expected a nonempty array of {column, kind}");
    for (std::size_t i = 0; i < targets->size(); ++i) {
      Fields t((*targets)[i], "dataset.targets[" + std::to_string(i) + "]");
      data::CsvTarget target;
      target.column = t.text("column", "");
      require(!target.column.empty(), t.path("column"), "required");
      try {
        target.kind = data::parse_task_kind(t.text("kind", "regression"));
      } catch (const UsageError& e) {
        throw ConfigError(t.path("kind"), e.what());
      }
      t.finish();
      d.schema.targets.push_back(target);
    }
    if (f.has("key_column")) d.schema.key_column = f.text("key_column", "");
    const std::string delim = f.text("delimiter", ",");
    require(delim.size() == 1, "dataset.delimiter", "must be a single character");
    d.schema.delimiter = delim[0];
    d.schema.hash_buckets = f.count("hash_buckets", 0);
  } else {
    d.generator = f.text("generator", "synth_cluster_moe");
    require(d.generator == "synth_cluster_moe" || d.generator == "synth_multitask", "dataset.generator",
            "expected synth_cluster_moe or synth_multitask (or give a csv path)");
    if (d.generator == "synth_cluster_moe") {
      d.n_clusters = f.count("n_clusters", d.n_clusters);
      d.noise_sd = f.number("noise_sd", d.noise_sd);
      require(d.n_clusters >= 2, "dataset.n_clusters", "must be >= 2");
      require(d.noise_sd >= 0.0, "dataset.noise_sd", "must be >= 0");
    }
    d.p = f.count("p", d.p);
    d.n = f.count("n", d.n);
    d.seed = f.count("seed", 0);
    require(d.p >= (d.generator == "synth_cluster_moe" ? 2u : 1u), "dataset.p", "too few features");
    require(d.n >= 3, "dataset.n", "must be >= 3");
    require(d.generator != "synth_cluster_moe" || d.n >= d.n_clusters, "dataset.n",
            "must be >= n_clusters");
  }
  f.finish();
  return d;
}

SearchDimension parse_dimension(const std::string& key, const Json& j) {
  const std::string field = "search_space." + key;
  SearchDimension dim;
  if (j.is_array()) {
    require(!j.empty(), field, "choice list must not be empty");
    dim.kind = SearchDimension::Kind::kChoice;
    dim.choices.assign(j.begin(), j.end());
    return dim;
  }
  require(j.is_object() && j.size() == 1, field,
          "expected a list of choices or one of {uniform, log_uniform, int_uniform}: [low, high]");
  const auto& [name, range] = *j.items().begin();
  require(range.is_array() && range.size() == 2 && range[0].is_number() && range[1].is_number(),
          field, "range must be [low, high]");
  dim.low = range[0].get<double>();
  dim.high = range[1].get<double>();
  require(dim.low <= dim.high, field, "low must not exceed high");
  if (name == "uniform") {
    dim.kind = SearchDimension::Kind::kUniform;
  } else if (name == "log_uniform") {
    dim.kind = SearchDimension::Kind::kLogUniform;
    require(dim.low > 0.0, field, "log_uniform needs low > 0");
  } else if (name == "int_uniform") {
    dim.kind = SearchDimension::Kind::kIntUniform;
  } else {
    throw ConfigError(field, "unknown distribution '" + name + "'");
  }
  return dim;
}

}  // namespace

RunConfig parse_config(const Json& doc) {
  Fields f(doc, "");
  RunConfig c;
  moe::ModelConfig& m = c.model;
  moe::TrainConfig& t = c.train;

  try {
    m.gate = moe::parse_gate_kind(f.text("gate", "comet"));
  } catch (const UsageError& e) {
    throw ConfigError("gate", e.what());
  }
  m.n_experts = f.count("n_experts", m.n_experts);
  m.k = f.count("k", m.k);
  m.expert_hidden = f.counts("expert_hidden", m.expert_hidden);
  m.dropout = f.number("dropout", m.dropout);
  m.shared_hidden = f.counts("shared_hidden", m.shared_hidden);
  m.key_embedding_dim = f.count("key_embedding_dim", 0);
  m.key_buckets = f.count("key_buckets", 0);
  m.gamma = f.number("gamma", m.gamma);
  m.lambda_entropy = f.number("lambda_entropy", m.lambda_entropy);
  m.leaf_bias = f.flag("leaf_bias", false);
  m.zeta = f.number("zeta", m.zeta);
  m.u_init_sd = f.number("u_init_sd", m.u_init_sd);
  m.schedule.tau_start = f.number("tau_start", m.schedule.tau_start);
  m.schedule.tau_end = f.number("tau_end", m.schedule.tau_end);
  m.schedule.iterations_start = f.count("iterations_start", m.schedule.iterations_start);
  m.schedule.iterations_end = f.count("iterations_end", m.schedule.iterations_end);

  t.adam.learning_rate = f.number("learning_rate", t.adam.learning_rate);
  t.adam.beta1 = f.number("beta1", t.adam.beta1);
  t.adam.beta2 = f.number("beta2", t.adam.beta2);
  t.adam.epsilon = f.number("epsilon", t.adam.epsilon);
  t.batch_size = f.count("batch_size", t.batch_size);
  t.epochs = f.count("epochs", t.epochs);
  t.stage1_epochs = f.count("stage1_epochs", t.stage1_epochs);
  t.patience = f.count("patience", t.patience);
  t.stop_at_binarization = f.flag("stop_at_binarization", false);
  const std::uint64_t seed = f.count("seed", 0);
  m.seed = seed;
  t.seed = seed;

  require(m.n_experts >= 2, "n_experts", "must be >= 2");
  require(m.k >= 1 && m.k <= m.n_experts, "k", "must be in [1, n_experts]");
  for (auto w : m.expert_hidden) require(w > 0, "expert_hidden", "widths must be positive");
  for (auto w : m.shared_hidden) require(w > 0, "shared_hidden", "widths must be positive");
  require(m.dropout >= 0.0 && m.dropout < 1.0, "dropout", "must be in [0, 1)");
  require(m.key_embedding_dim == 0 || m.key_buckets > 0, "key_buckets",
          "must be > 0 when key_embedding_dim > 0");
  require(m.gamma > 0.0, "gamma", "must be > 0");
  require(m.lambda_entropy >= 0.0, "lambda_entropy", "must be >= 0");
  require(m.zeta >= 0.0, "zeta", "must be >= 0");
  require(m.u_init_sd >= 0.0, "u_init_sd", "must be >= 0");
  require(m.schedule.tau_start > 0.0, "tau_start", "must be > 0");
  require(m.schedule.tau_end > 0.0, "tau_end", "must be > 0");
  require(m.schedule.iterations_start >= 1, "iterations_start", "must be >= 1");
  require(m.schedule.iterations_end >= 1, "iterations_end", "must be >= 1");
  require(t.adam.learning_rate > 0.0, "learning_rate", "must be > 0");
  require(t.adam.beta1 >= 0.0 && t.adam.beta1 < 1.0, "beta1", "must be in [0, 1)");
  require(t.adam.beta2 >= 0.0 && t.adam.beta2 < 1.0, "beta2", "must be in [0, 1)");
  require(t.adam.epsilon > 0.0, "epsilon", "must be > 0");
  require(t.batch_size >= 1, "batch_size", "must be >= 1");
  require(t.epochs >= 1, "epochs", "must be >= 1");
  require(t.stage1_epochs == 0 || t.stage1_epochs < t.epochs, "stage1_epochs", "must be < epochs");
  require(t.patience >= 1, "patience", "must be >= 1");

  if (const Json* d = f.find("dataset")) c.dataset = parse_dataset(*d);
  if (const Json* s = f.find("split")) {
    Fields sf(*s, "split");
    c.split.train = sf.number("train", c.split.train);
    c.split.validation = sf.number("validation", c.split.validation);
    c.split.test = sf.number("test", c.split.test);
    c.split.seed = sf.count("seed", 0);
    sf.finish();
  }
  for (double fr : {c.split.train, c.split.validation, c.split.test}) {
    require(fr > 0.0 && fr < 1.0, "split", "each fraction must lie in (0, 1)");
  }
  require(std::abs(c.split.train + c.split.validation + c.split.test - 1.0) <= 1e-9, "split",
          "fractions must sum to 1");

  c.task_weights = f.numbers("task_weights");
  const std::size_t n_tasks = c.dataset.n_tasks();
  if (c.task_weights.empty()) {
    c.task_weights.assign(n_tasks, 1.0 / static_cast<double>(n_tasks));
  } else {
    require(c.task_weights.size() == n_tasks, "task_weights",
            "expected " + std::to_string(n_tasks) + " weights");
    double total = 0.0;
    for (double w : c.task_weights) {
      require(w >= 0.0, "task_weights", "weights must be >= 0");
      total += w;
    }
    require(std::abs(total - 1.0) <= 1e-9, "task_weights", "weights must sum to 1");
  }

  c.hash_assignment = f.text("hash_assignment", c.hash_assignment);
  require(c.hash_assignment == "random" || c.hash_assignment == "modulo", "hash_assignment",
          "expected random or modulo");
  c.hash_seed = f.count("hash_seed", 0);
  if (const Json* tj = f.find("teacher")) {
    Fields tf(*tj, "teacher");
    TeacherSpec ts;
    ts.mapping = tf.counts("mapping", {});
    ts.noise_sd = tf.number("noise_sd", 0.0);
    tf.finish();
    require(c.dataset.generator == "synth_cluster_moe", "teacher", "needs the synth_cluster_moe generator");
    require(ts.mapping.size() == c.dataset.n_clusters, "teacher.mapping",
            "needs one expert per cluster");
    for (auto e : ts.mapping) require(e < m.n_experts, "teacher.mapping", "expert index out of range");
    require(ts.noise_sd >= 0.0, "teacher.noise_sd", "must be >= 0");
    c.teacher = ts;
  }
  c.output_dir = f.text("output_dir", c.output_dir);
  c.deterministic = f.flag("deterministic", false);

  if (const Json* v = f.find("variants")) {
    require(v->is_array() && !v->empty(), "variants", "expected a nonempty array of names");
    c.variants.clear();
    for (const auto& e : *v) {
      require(e.is_string(), "variants", "expected names such as \"comet+ls\"");
      c.variants.push_back(e.get<std::string>());
    }
  }
  bool any_ls = false;
  bool any_hash = m.gate == moe::GateKind::kHash;
  for (const auto& name : c.variants) {
    const auto [gate, ls] = parse_variant(name);
    any_ls = any_ls || ls;
    if (f.has("variants")) any_hash = any_hash || gate == moe::GateKind::kHash;
  }
  c.n_seeds = f.count("n_seeds", c.n_seeds);
  require(c.n_seeds >= 2, "n_seeds", "must be >= 2 so a standard error exists");
  if (f.has("variants") && any_ls) {
    require(t.stage1_epochs > 0, "stage1_epochs", "+ls variants need stage1_epochs > 0");
  }
  c.pooled_t_test = f.flag("pooled_t_test", false);

  if (any_hash) {
    const bool keys = c.dataset.generator != "csv" || c.dataset.schema.key_column ||
                      c.dataset.schema.hash_buckets > 0;
    require(keys, "gate", "hash gate needs hash keys (dataset.key_column or dataset.hash_buckets)");
  }
  require(m.key_embedding_dim == 0 || c.dataset.generator != "csv" ||
              c.dataset.schema.key_column || c.dataset.schema.hash_buckets > 0,
          "key_embedding_dim", "key embedding needs hash keys");

  c.trials = f.count("trials", 0);
  c.tune_seed = f.count("tune_seed", 0);
  if (const Json* sp = f.find("search_space")) {
    require(sp->is_object(), "search_space", "expected an object");
    const auto& keys = config_keys();
    static const std::set<std::string> fixed = {"dataset", "split", "search_space", "trials",
                                                "tune_seed", "output_dir", "variants", "teacher"};
    for (const auto& [key, value] : sp->items()) {
      require(std::find(keys.begin(), keys.end(), key) != keys.end() && !fixed.contains(key),
              "search_space." + key, "not a tunable field");
      c.search_space[key] = parse_dimension(key, value);
    }
  }
  f.finish();

  m.n_features = c.dataset.generator == "csv" ? 0 : c.dataset.p;
  c.raw = doc;
  return c;
}

Json apply_env_overrides(Json doc, const std::map<std::string, std::string>& env) {
  static const std::string prefix = "COMET_MOE_";
  const auto& keys = config_keys();
  for (const auto& [name, text] : env) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::string field = name.substr(prefix.size());
    std::transform(field.begin(), field.end(), field.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    if (std::find(keys.begin(), keys.end(), field) != keys.end()) {
      doc[field] = value;
      continue;
    }
    bool placed = false;
    for (const std::string group : {"dataset", "split"}) {
      if (field.rfind(group + "_", 0) == 0 && field.size() > group.size() + 1) {
        if (!doc.contains(group)) doc[group] = Json::object();
        doc[group][field.substr(group.size() + 1)] = value;
        placed = true;
        break;
      }
    }
    if (!placed) throw ConfigError(name, "environment override names no config field");
  }
  return doc;
}

std::map<std::string, std::string> environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq != std::string::npos) env.emplace(entry.substr(0, eq), entry.substr(eq + 1));
  }
  return env;
}

RunConfig load_config(const std::string& path, const std::map<std::string, std::string>& env) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open config '" + path + "'");
  Json doc = Json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("<file>", "'" + path + "' is not valid JSON");
  doc = apply_env_overrides(std::move(doc), env);
  if (doc.is_object() && doc.contains("dataset") && doc["dataset"].is_object() &&
      doc["dataset"].contains("csv") && doc["dataset"]["csv"].is_string()) {
    fs::path csv = doc["dataset"]["csv"].get<std::string>();
    if (csv.is_relative()) {
      doc["dataset"]["csv"] = (fs::path(path).parent_path() / csv).lexically_normal().string();
    }
  }
  return parse_config(doc);
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

data::Dataset build_dataset(const RunConfig& config) {
  const DatasetSpec& d = config.dataset;
  if (d.generator == "synth_cluster_moe") {
    return data::synth_cluster_moe(d.seed, d.n_clusters, d.p, d.n, d.noise_sd);
  }
  if (d.generator == "synth_multitask") return data::synth_multitask(d.seed, d.p, d.n);
  data::Dataset ds = data::load_csv(d.path, d.schema);
  ds.validate();
  return ds;
}

Prepared prepare(const RunConfig& config, const data::Dataset& dataset, moe::GateKind gate,
                 bool local_search, std::uint64_t seed) {
  moe::ModelConfig mc = config.model;
  mc.gate = gate;
  mc.local_search = local_search;
  mc.seed = seed;
  mc.n_features = dataset.n_features();
  if (config.task_weights.size() != dataset.n_tasks()) {
    throw ConfigError("task_weights", "dataset has " + std::to_string(dataset.n_tasks()) + " tasks");
  }
  mc.tasks.clear();
  for (std::size_t t = 0; t < dataset.n_tasks(); ++t) {
    mc.tasks.push_back({dataset.task_kinds[t], config.task_weights[t]});
  }
  if ((gate == moe::GateKind::kHash || mc.key_embedding_dim > 0) && !dataset.has_hash_keys()) {
    throw ConfigError("gate", "dataset carries no hash keys");
  }
  moe::MoeModel model = moe::MoeModel::create(mc);
  data::Dataset labeled = config.teacher ? moe::teacher_targets(model, dataset, config.teacher->mapping,
                                                                config.teacher->noise_sd, seed)
                                         : dataset;
  if (gate == moe::GateKind::kHash) {
    model.set_hash_assignment(
        config.hash_assignment == "modulo"
            ? gates::HashAssignment::modulo(labeled.hash_keys, mc.n_experts)
            : gates::HashAssignment::uniform_random(labeled.hash_keys, mc.n_experts, config.hash_seed));
  }
  data::Splits splits = data::split(labeled, config.split);
  return {std::move(model), std::move(splits)};
}

namespace {

Json tensor_rows(const Tensor& t) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    rows.push_back(std::vector<double>(t.row(r).begin(), t.row(r).end()));
  }
  return rows;
}

Json optional_number(const std::optional<std::size_t>& v) { return v ? Json(*v) : Json(nullptr); }

Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

Json evaluation_json(const moe::Evaluation& e) {
  Json acc = Json::array();
  for (double a : e.accuracy) acc.push_back(finite_or_null(a));
  return {{"loss", e.loss},
          {"task_losses", e.task_losses},
          {"accuracy", acc},
          {"experts_per_sample", e.experts_per_sample},
          {"binary_fraction", e.binary_fraction}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace

Json epoch_json(const moe::EpochRecord& r, bool with_timing) {
  Json j = {{"epoch", r.epoch},
            {"stage", r.stage},
            {"train_loss", r.train_loss},
            {"validation_loss", r.validation_loss},
            {"binary_fraction", r.binary_fraction}};
  if (r.schedule) {
    j["tau"] = r.schedule->tau;
    j["sinkhorn_iterations"] = r.schedule->iterations;
  }
  if (with_timing) j["seconds"] = r.seconds;
  return j;
}

Json report_json(const moe::TrainReport& report, bool with_timing) {
  Json j = {{"epochs_run", report.epochs.size()},
            {"best_epoch", report.best_epoch},
            {"best_validation_loss", finite_or_null(report.best_validation_loss)},
            {"early_stopped", report.early_stopped},
            {"stopped_at_binarization", report.stopped_at_binarization},
            {"binarization_epoch", optional_number(report.binarization_epoch)},
            {"hardening_epoch", optional_number(report.hardening_epoch)},
            {"hard_permutation",
             report.hard_permutation ? tensor_rows(*report.hard_permutation) : Json(nullptr)},
            {"test_loss", report.test.loss},
            {"experts_per_sample", report.test.experts_per_sample},
            {"test", evaluation_json(report.test)}};
  if (with_timing) {
    double total = 0.0;
    for (const auto& e : report.epochs) total += e.seconds;
    j["train_seconds"] = total;
  }
  return j;
}

moe::TrainReport cmd_train(const RunConfig& config) {
  const data::Dataset dataset = build_dataset(config);
  const bool search = config.train.stage1_epochs > 0;
  Prepared prep = prepare(config, dataset, config.model.gate, search, config.model.seed);

  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  std::ofstream metrics(dir / "metrics.jsonl");
  if (!metrics) throw Error("cannot write '" + (dir / "metrics.jsonl").string() + "'");
  const bool timing = !config.deterministic;
  moe::TrainReport report =
      moe::two_stage_train(prep.model, prep.splits, config.train, [&](const moe::EpochRecord& r) {
        metrics << epoch_json(r, timing).dump() << '\n';
        metrics.flush();
      });

  Json summary = report_json(report, timing);
  summary["gate"] = moe::to_string(config.model.gate);
  summary["n_experts"] = config.model.n_experts;
  summary["k"] = config.model.k;
  summary["local_search"] = search;
  summary["dataset"] = dataset.provenance.source;
  summary["config"] = config.raw;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  moe::save_checkpoint(prep.model, (dir / "model.json").string());
  return report;
}

Json cmd_eval(const RunConfig& config, const std::string& checkpoint, const std::string& split) {
  moe::MoeModel model = moe::load_checkpoint(checkpoint);
  const data::Dataset dataset = build_dataset(config);
  const Prepared prep =
      prepare(config, dataset, model.config().gate, model.has_permutation(), model.config().seed);
  const data::Dataset* part = split == "train"        ? &prep.splits.train
                              : split == "validation" ? &prep.splits.validation
                              : split == "test"       ? &prep.splits.test
                                                      : nullptr;
  if (!part) throw UsageError("unknown split '" + split + "' (expected train, validation or test)");
  if (model.has_permutation() && !model.hard_permutation()) {
    throw UsageError("checkpoint holds an unhardened permutation");
  }
  Json j = evaluation_json(moe::evaluate(model, *part));
  j["split"] = split;
  j["rows"] = part->size();
  return j;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& config) {
  const data::Dataset dataset = build_dataset(config);
  std::vector<AblationRow> rows;
  std::vector<std::pair<moe::GateKind, bool>> kinds;
  for (const auto& name : config.variants) {
    kinds.push_back(parse_variant(name));
    AblationRow row;
    row.variant = name;
    rows.push_back(row);
  }
  for (std::size_t s = 0; s < config.n_seeds; ++s) {
    for (std::size_t v = 0; v < rows.size(); ++v) {
      const auto [gate, ls] = kinds[v];
      Prepared prep = prepare(config, dataset, gate, ls, config.model.seed + s);
      moe::TrainConfig tc = config.train;
      tc.stage1_epochs = ls ? config.train.stage1_epochs : 0;
      tc.seed = config.train.seed + s;
      rows[v].test_losses.push_back(moe::two_stage_train(prep.model, prep.splits, tc).test.loss);
    }
  }
  for (std::size_t v = 0; v < rows.size(); ++v) {
    AblationRow& row = rows[v];
    row.mean = stats::mean(row.test_losses);
    row.standard_error = stats::standard_error(row.test_losses);
    std::string base = row.variant;
    if (kinds[v].second) base = std::string(moe::to_string(kinds[v].first));
    for (std::size_t b = 0; b < v; ++b) {
      if (rows[b].variant == base) {
        row.baseline = base;
        row.test = stats::t_test_less(row.test_losses, rows[b].test_losses, config.pooled_t_test);
        break;
      }
    }
    if (!row.baseline && kinds[v].second) {
      for (std::size_t b = v + 1; b < rows.size(); ++b) {
        if (rows[b].variant == base) {
          row.baseline = base;
          row.test = stats::t_test_less(row.test_losses, rows[b].test_losses, config.pooled_t_test);
          break;
        }
      }
    }
  }
  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  write_text(dir / "ablation.json", ablation_json(rows).dump(2) + "\n");
  return rows;
}

Json ablation_json(const std::vector<AblationRow>& rows) {
  Json out = Json::array();
  for (const auto& r : rows) {
    Json j = {{"variant", r.variant},
              {"n", r.test_losses.size()},
              {"mean_test_loss", r.mean},
              {"standard_error", r.standard_error},
              {"test_losses", r.test_losses}};
    j["baseline"] = r.baseline ? Json(*r.baseline) : Json(nullptr);
    j["p_value"] = r.test ? finite_or_null(r.test->p_value) : Json(nullptr);
    j["t"] = r.test ? finite_or_null(r.test->t) : Json(nullptr);
    j["df"] = r.test ? finite_or_null(r.test->df) : Json(nullptr);
    out.push_back(std::move(j));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

Json trial_json(const TrialRecord& r) {
  Json j = {{"trial", r.trial}, {"seed", r.seed}, {"params", r.params}};
  if (r.ok) {
    j["status"] = "ok";
    j["validation_loss"] = r.validation_loss;
    j["test_loss"] = r.test_loss;
    j["experts_per_sample"] = r.experts_per_sample;
  } else {
    j["status"] = "failed";
    j["error"] = r.error;
  }
  return j;
}

TrialRecord trial_from_json(const Json& j) {
  TrialRecord r;
  r.trial = j.at("trial").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.params = j.value("params", Json::object());
  r.ok = j.at("status") == "ok";
  if (r.ok) {
    r.validation_loss = j.at("validation_loss").get<double>();
    r.test_loss = j.at("test_loss").get<double>();
    r.experts_per_sample = j.value("experts_per_sample", 0.0);
  } else {
    r.error = j.value("error", "");
  }
  return r;
}

namespace {

// Complete lines of a trials file; `torn` is set when the last line is partial.
std::vector<std::string> trial_lines(const std::string& path, bool& torn) {
  torn = false;
  std::ifstream in(path, std::ios::binary);
  std::vector<std::string> lines;
  if (!in) return lines;
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  std::size_t start = 0;
  while (start < text.size()) {
    const auto nl = text.find('\n', start);
    if (nl == std::string::npos) {
      torn = true;
      break;
    }
    const std::string line = text.substr(start, nl - start);
    if (!line.empty()) {
      if (Json::parse(line, nullptr, false).is_discarded()) {
        torn = true;
        break;
      }
      lines.push_back(line);
    }
    start = nl + 1;
  }
  return lines;
}

}  // namespace

std::vector<TrialRecord> read_trials(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("trials file '" + path + "' does not exist");
  bool torn = false;
  std::vector<TrialRecord> out;
  for (const auto& line : trial_lines(path, torn)) {
    try {
      out.push_back(trial_from_json(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw UsageError("malformed trial record in '" + path + "': " + e.what());
    }
  }
  return out;
}

std::vector<stats::CurvePoint> cmd_bootstrap(const std::string& trials_path,
                                             const std::vector<std::size_t>& s_values,
                                             std::size_t repeats, std::uint64_t seed) {
  std::vector<stats::Trial> bag;
  for (const auto& r : read_trials(trials_path)) {
    if (r.ok) bag.push_back({r.validation_loss, r.test_loss});
  }
  if (bag.empty()) throw UsageError("trials file '" + trials_path + "' holds no completed trials");
  if (s_values.empty()) throw UsageError("bootstrap: no s values");
  const std::size_t largest = *std::max_element(s_values.begin(), s_values.end());
  if (largest > bag.size()) {
    throw UsageError("bootstrap: s=" + std::to_string(largest) + " needs at least that many trials, file has " +
                     std::to_string(bag.size()));
  }
  return stats::bootstrap_curve(bag, s_values, repeats, seed);
}

// ---------------------------------------------------------------------------
// FLOPs
// ---------------------------------------------------------------------------

std::vector<GateFlops> cmd_flops(const RunConfig& config) {
  const moe::ModelConfig& m = config.model;
  std::size_t p_in = m.n_features;
  if (config.dataset.generator == "csv") p_in = build_dataset(config).n_features();
  const std::size_t n_tasks = config.dataset.n_tasks();

  std::size_t shared = 0;
  std::size_t width = p_in;
  for (auto w : m.shared_hidden) {
    shared += width * w;
    width = w;
  }
  const std::size_t p = width + m.key_embedding_dim;
  std::size_t per_expert = 0;
  width = p;
  std::vector<std::size_t> layers = m.expert_hidden;
  layers.push_back(n_tasks);
  for (auto w : layers) {
    per_expert += width * w;
    width = w;
  }
  const std::size_t n = m.n_experts;
  const std::size_t depth = gates::build_tree(n).depth;

  std::vector<GateFlops> out;
  for (auto gate : {moe::GateKind::kSoftmax, moe::GateKind::kTopK, moe::GateKind::kComet,
                    moe::GateKind::kHash}) {
    GateFlops f;
    f.gate = std::string(moe::to_string(gate));
    f.shared = shared;
    f.per_expert = per_expert;
    std::size_t active = 0;
    switch (gate) {
      case moe::GateKind::kSoftmax:
        f.gate_logits = p * n * n_tasks;
        active = n;
        break;
      case moe::GateKind::kTopK:
        f.gate_logits = p * n * n_tasks;
        f.gate_selection = n * m.k * n_tasks;
        active = m.k;
        break;
      case moe::GateKind::kComet:
        f.gate_internal = m.k * p * depth * n_tasks;
        f.gate_leaf = m.k * p * n_tasks;
        active = m.k;
        break;
      case moe::GateKind::kHash:
        active = 1;
        break;
    }
    f.active_experts = std::min(n, active * n_tasks);
    out.push_back(f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tuning
// ---------------------------------------------------------------------------

namespace {

Json sample_dimension(const SearchDimension& d, std::mt19937_64& rng) {
  switch (d.kind) {
    case SearchDimension::Kind::kChoice: {
      std::uniform_int_distribution<std::size_t> pick(0, d.choices.size() - 1);
      return d.choices[pick(rng)];
    }
    case SearchDimension::Kind::kUniform:
      return std::uniform_real_distribution<double>(d.low, d.high)(rng);
    case SearchDimension::Kind::kLogUniform:
      return std::exp(std::uniform_real_distribution<double>(std::log(d.low), std::log(d.high))(rng));
    case SearchDimension::Kind::kIntUniform:
      return std::uniform_int_distribution<std::int64_t>(static_cast<std::int64_t>(std::ceil(d.low)),
                                                         static_cast<std::int64_t>(std::floor(d.high)))(rng);
  }
  return nullptr;
}

}  // namespace

TuneResult cmd_tune(const RunConfig& config, std::optional<std::size_t> max_new_trials) {
  if (config.trials < 1) throw ConfigError("trials", "must be >= 1 for tune");
  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  const fs::path path = dir / "trials.jsonl";

  bool torn = false;
  const auto lines = trial_lines(path.string(), torn);
  if (torn) {
    std::string kept;
    for (const auto& l : lines) kept += l + "\n";
    write_text(path, kept);
  }
  std::set<std::size_t> done;
  for (const auto& l : lines) done.insert(trial_from_json(Json::parse(l)).trial);

  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot append to '" + path.string() + "'");
  TuneResult result{path.string(), done.size(), 0};
  for (std::size_t t = 0; t < config.trials; ++t) {
    if (done.contains(t)) continue;
    if (max_new_trials && result.ran >= *max_new_trials) break;
    std::seed_seq seq{static_cast<std::uint32_t>(config.tune_seed),
                      static_cast<std::uint32_t>(config.tune_seed >> 32),
                      static_cast<std::uint32_t>(t)};
    std::mt19937_64 rng(seq);
    TrialRecord rec;
    rec.trial = t;
    rec.seed = config.model.seed + t;
    rec.params = Json::object();
    for (const auto& [key, dim] : config.search_space) rec.params[key] = sample_dimension(dim, rng);
    try {
      Json doc = config.raw;
      for (const auto& [key, value] : rec.params.items()) doc[key] = value;
      doc["seed"] = rec.seed;
      const RunConfig trial_config = parse_config(doc);
      const data::Dataset dataset = build_dataset(trial_config);
      Prepared prep = prepare(trial_config, dataset, trial_config.model.gate,
                              trial_config.train.stage1_epochs > 0, rec.seed);
      const moe::TrainReport report = moe::two_stage_train(prep.model, prep.splits, trial_config.train);
      rec.validation_loss = report.best_validation_loss;
      rec.test_loss = report.test.loss;
      rec.experts_per_sample = report.test.experts_per_sample;
      if (!std::isfinite(rec.validation_loss) || !std::isfinite(rec.test_loss)) {
        throw TrainingError("non-finite loss");
      }
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
    }
    out << trial_json(rec).dump() << '\n';
    out.flush();
    ++result.ran;
    ++result.completed;
  }
  return result;
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) != nullptr) return 1;
  return 2;
}

}  // namespace comet::cli
