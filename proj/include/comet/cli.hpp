#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "comet/data.hpp"
#include "comet/error.hpp"
#include "comet/moe.hpp"
#include "comet/stats.hpp"

namespace comet::cli {

using Json = nlohmann::json;

/// Invalid configuration; `field` is the dotted path of the offending key.
class ConfigError : public UsageError {
 public:
  ConfigError(std::string field, const std::string& message)
      : UsageError("config field '" + field + "': " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct DatasetSpec {
  std::string generator = "synth_cluster_moe";  // synth_cluster_moe, synth_multitask or csv
  std::size_t n_clusters = 4;
  std::size_t p = 8;
  std::size_t n = 2000;
  double noise_sd = 0.1;
  std::uint64_t seed = 0;
  std::string path;  // csv only
  data::CsvSchema schema;

  std::size_t n_tasks() const;
};

/// Adversarial relabeling: cluster c is generated by expert mapping[c] of
/// the freshly initialized model.
struct TeacherSpec {
  std::vector<std::size_t> mapping;
  double noise_sd = 0.0;
};

struct SearchDimension {
  enum class Kind { kChoice, kUniform, kLogUniform, kIntUniform };
  Kind kind = Kind::kChoice;
  std::vector<Json> choices;
  double low = 0.0;
  double high = 0.0;
};

struct RunConfig {
  moe::ModelConfig model;  // n_features and local_search are filled per run
  moe::TrainConfig train;
  DatasetSpec dataset;
  data::SplitSpec split;
  std::vector<double> task_weights;  // empty: equal weights
  std::string hash_assignment = "random";  // random or modulo
  std::uint64_t hash_seed = 0;
  std::optional<TeacherSpec> teacher;
  std::string output_dir = "comet_out";
  bool deterministic = false;
  // ablate
  std::vector<std::string> variants = {"hash", "hash+ls", "topk", "topk+ls", "comet", "comet+ls"};
  std::size_t n_seeds = 100;
  bool pooled_t_test = false;
  // tune
  std::size_t trials = 0;
  std::map<std::string, SearchDimension> search_space;
  std::uint64_t tune_seed = 0;

  Json raw;  // normalized source document
};

/// Every top-level key the config accepts.
const std::vector<std::string>& config_keys();

RunConfig parse_config(const Json& doc);
/// Applies COMET_MOE_<FIELD> variables (nested fields as COMET_MOE_DATASET_<FIELD>
/// and COMET_MOE_SPLIT_<FIELD>). Values are parsed as JSON when possible.
Json apply_env_overrides(Json doc, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> environment();
/// Reads the file, applies environment overrides and resolves a relative CSV
/// path against the config file's directory.
RunConfig load_config(const std::string& path,
                      const std::map<std::string, std::string>& env = environment());

data::Dataset build_dataset(const RunConfig& config);

struct Prepared {
  moe::MoeModel model;
  data::Splits splits;
};

/// Builds the model for one run and the (possibly relabeled) splits.
Prepared prepare(const RunConfig& config, const data::Dataset& dataset, moe::GateKind gate,
                 bool local_search, std::uint64_t seed);

Json report_json(const moe::TrainReport& report, bool with_timing);
Json epoch_json(const moe::EpochRecord& record, bool with_timing);

/// Trains and writes metrics.jsonl, summary.json and model.json into output_dir.
moe::TrainReport cmd_train(const RunConfig& config);

Json cmd_eval(const RunConfig& config, const std::string& checkpoint, const std::string& split);

struct AblationRow {
  std::string variant;
  std::vector<double> test_losses;
  double mean = 0.0;
  double standard_error = 0.0;
  std::optional<std::string> baseline;
  std::optional<stats::TTest> test;  // this row below its baseline
};

std::vector<AblationRow> cmd_ablate(const RunConfig& config);
Json ablation_json(const std::vector<AblationRow>& rows);

struct TrialRecord {
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  Json params;
  bool ok = true;
  double validation_loss = 0.0;
  double test_loss = 0.0;
  double experts_per_sample = 0.0;
  std::string error;
};

Json trial_json(const TrialRecord& record);
TrialRecord trial_from_json(const Json& j);
/// Complete records of a trials file; a torn final line is ignored.
std::vector<TrialRecord> read_trials(const std::string& path);

std::vector<stats::CurvePoint> cmd_bootstrap(const std::string& trials_path,
                                             const std::vector<std::size_t>& s_values,
                                             std::size_t repeats, std::uint64_t seed);

struct GateFlops {
  std::string gate;
  std::size_t shared = 0;
  std::size_t gate_internal = 0;  // COMET: dot products along the realized paths
  std::size_t gate_leaf = 0;      // COMET: leaf logits of the reached leaves
  std::size_t gate_logits = 0;    // softmax / top-k: p n
  std::size_t gate_selection = 0; // top-k: comparisons for partial selection
  std::size_t active_experts = 0;
  std::size_t per_expert = 0;
  std::size_t gate_total() const { return gate_internal + gate_leaf + gate_logits + gate_selection; }
  std::size_t total() const { return shared + gate_total() + active_experts * per_expert; }
};

/// Per-sample inference multiply-adds for each gate kind at the configured
/// sizes.
std::vector<GateFlops> cmd_flops(const RunConfig& config);

struct TuneResult {
  std::string path;
  std::size_t completed = 0;
  std::size_t ran = 0;
};

/// Appends one record per trial to output_dir/trials.jsonl, skipping trials
/// already present. Stops after `max_new_trials` new trials when given.
TuneResult cmd_tune(const RunConfig& config, std::optional<std::size_t> max_new_trials = {});

/// 0 success, 1 validation error, 2 runtime failure.
int exit_code(const std::exception& e);

}  // namespace comet::cli
