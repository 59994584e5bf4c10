#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "comet/autodiff.hpp"
#include "comet/data.hpp"
#include "comet/gates.hpp"
#include "comet/permute.hpp"
#include "comet/tensor.hpp"

namespace comet::moe {

using data::TaskKind;

enum class GateKind { kComet, kSoftmax, kTopK, kHash };

std::string_view to_string(GateKind kind);
GateKind parse_gate_kind(std::string_view text);

struct TaskSpec {
  TaskKind kind = TaskKind::kRegression;
  double weight = 1.0;
};

struct ModelConfig {
  std::size_t n_features = 0;
  std::size_t n_experts = 4;
  std::size_t k = 2;  // trees for COMET, active experts for Top-k
  GateKind gate = GateKind::kComet;
  std::vector<std::size_t> expert_hidden = {16};
  double dropout = 0.0;
  // Optional shared bottom: dense relu layers, then a key embedding appended.
  std::vector<std::size_t> shared_hidden;
  std::size_t key_embedding_dim = 0;
  std::size_t key_buckets = 0;
  std::vector<TaskSpec> tasks = {TaskSpec{}};
  // COMET gate
  double gamma = 1.0;
  double lambda_entropy = 0.0;
  bool leaf_bias = false;
  // Permutation local search
  bool local_search = false;
  permute::ScheduleConfig schedule;
  double zeta = 1e-4;
  double u_init_sd = 1e-5;
  std::uint64_t seed = 0;

  std::size_t n_tasks() const { return tasks.size(); }
  /// Width of the representation the gates and experts see.
  std::size_t bottom_width() const;
  /// Throws UsageError on inconsistent settings.
  void validate() const;
};

struct ExpertParams {
  std::vector<ad::ParamId> weights;  // per layer, in x out
  std::vector<ad::ParamId> biases;   // per layer, 1 x out
};

struct GateParams {
  std::vector<ad::ParamId> hyperplanes;
  std::vector<ad::ParamId> leaf_coefficients;
  std::vector<ad::ParamId> leaf_bias;
  std::optional<ad::ParamId> weights;  // softmax / top-k, n x p
};

/// Experts, one gate per task, an optional shared bottom and an optional
/// learnable permutation between gate outputs and experts. Every expert emits
/// one value per task; task t reads column t weighted by its own gate.
class MoeModel {
 public:
  static MoeModel create(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ad::ParameterStore& parameters() { return params_; }
  const ad::ParameterStore& parameters() const { return params_; }
  const gates::TreeTopology& topology() const { return topology_; }

  const std::vector<ExpertParams>& experts() const { return experts_; }
  const std::vector<GateParams>& gate_params() const { return gates_; }
  const std::vector<ExpertParams>& shared_layers() const { return shared_; }
  std::optional<ad::ParamId> key_embedding() const { return key_embedding_; }

  /// Snapshot of task t's COMET gate as a plain TreeGate.
  gates::TreeGate tree_gate(std::size_t task) const;

  const gates::HashAssignment& hash_assignment() const { return hash_; }
  void set_hash_assignment(gates::HashAssignment assignment);

  bool has_permutation() const { return scores_.has_value(); }
  std::optional<ad::ParamId> permutation_scores() const { return scores_; }
  const std::optional<Tensor>& hard_permutation() const { return hard_; }
  /// Fixes the permutation and freezes the scores.
  void set_hard_permutation(Tensor p);

  /// Expert evaluations (one per active expert per sample) since the last reset.
  std::size_t expert_calls() const { return expert_calls_; }
  void reset_expert_calls() const { expert_calls_ = 0; }
  void count_expert_calls(std::size_t n) const { expert_calls_ += n; }

 private:
  ModelConfig config_;
  ad::ParameterStore params_;
  gates::TreeTopology topology_;
  std::vector<ExpertParams> shared_;
  std::optional<ad::ParamId> key_embedding_;
  std::vector<ExpertParams> experts_;
  std::vector<GateParams> gates_;
  gates::HashAssignment hash_;
  std::optional<ad::ParamId> scores_;
  std::optional<Tensor> hard_;
  mutable std::size_t expert_calls_ = 0;
};

struct Batch {
  Tensor x;                     // B x p
  std::vector<Tensor> targets;  // per task, B x 1
  std::vector<std::int64_t> keys;
};

Batch make_batch(const data::Dataset& dataset, std::span<const std::size_t> rows);
Batch make_batch(const data::Dataset& dataset);

struct ForwardOptions {
  // Soft permutation settings; ignored once the permutation is hard.
  std::optional<permute::Schedule> schedule;
  bool training = false;              // enables dropout
  std::mt19937_64* rng = nullptr;     // dropout masks
};

struct ForwardPass {
  std::vector<ad::Var> predictions;   // per task, B x 1 (logits for binary tasks)
  ad::Var entropy;                    // mean over tasks; invalid unless COMET
  std::optional<ad::Var> permutation; // soft B when used
  std::vector<Tensor> gate_values;    // per task, B x n before permutation
  std::vector<Tensor> routed_values;  // per task, B x n after permutation
  std::vector<std::vector<Tensor>> tree_v;  // per task, per tree, B x n
};

/// Batched forward on `tape`, which must be attached to model.parameters().
/// Experts run only on rows with a nonzero routed weight for some task.
ForwardPass forward_batch(ad::Tape& tape, const MoeModel& model, const Batch& batch,
                          const ForwardOptions& options = {});

/// Single-sample output, one value per task (logits for binary tasks).
std::vector<double> moe_forward(const MoeModel& model, std::span<const double> x,
                                std::optional<std::int64_t> key = std::nullopt,
                                const ForwardOptions& options = {});

/// Raw outputs of expert `expert` on each row of the batch (B x n_tasks),
/// without dropout.
Tensor expert_outputs(const MoeModel& model, const Batch& batch, std::size_t expert);

struct LossTerms {
  ad::Var total;             // valid only while the tape lives
  double value = 0.0;        // total as a number
  double data = 0.0;         // weighted sum of task losses
  double entropy = 0.0;      // lambda * mean entropy
  double permutation = 0.0;  // anti-degeneracy term
};

LossTerms total_loss(ad::Tape& tape, const MoeModel& model, const Batch& batch,
                     const ForwardOptions& options = {});

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {});
  /// Updates every parameter that has a gradient entry.
  void step(ad::ParameterStore& params, const ad::GradMap& grads);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig config_;
  std::map<ad::ParamId, Tensor> m_;
  std::map<ad::ParamId, Tensor> v_;
  std::size_t t_ = 0;
};

/// One optimizer step; returns the loss terms evaluated before the update.
/// Throws TrainingError on a non-finite loss or gradient.
LossTerms train_step(MoeModel& model, Adam& optimizer, const Batch& batch,
                     const ForwardOptions& options = {});

struct Evaluation {
  double loss = 0.0;                 // weighted task loss
  std::vector<double> task_losses;   // MSE or BCE per task
  std::vector<double> accuracy;      // binary tasks only, NaN otherwise
  double experts_per_sample = 0.0;   // mean over tasks of nonzero routed weights
  double binary_fraction = 0.0;      // COMET only: share of samples with one-hot v
};

Evaluation evaluate(const MoeModel& model, const data::Dataset& dataset,
                    const ForwardOptions& options = {}, std::size_t chunk = 1024);

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::size_t stage1_epochs = 0;  // 0 disables permutation search
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  // End training (keeping the current parameters) at the first stage-2 epoch
  // whose validation routing is fully binary.
  bool stop_at_binarization = false;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  int stage = 2;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double binary_fraction = 0.0;
  std::optional<permute::Schedule> schedule;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_validation_loss = 0.0;
  bool early_stopped = false;
  bool stopped_at_binarization = false;
  std::optional<std::size_t> binarization_epoch;
  std::optional<std::size_t> hardening_epoch;  // last stage-1 epoch
  std::optional<Tensor> hard_permutation;
  Evaluation test;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Stage 1 (stage1_epochs epochs) trains everything including the permutation
/// scores under the tau / iteration schedule; the permutation is then
/// hardened with the final schedule values and stage 2 trains the rest with
/// early stopping on validation loss. The best stage-2 parameters are restored.
TrainReport two_stage_train(MoeModel& model, const data::Splits& splits, const TrainConfig& config,
                            const EpochCallback& on_epoch = {});

struct CardinalityReport {
  double fraction_binary = 0.0;  // samples whose every tree routes one-hot
  std::size_t max_support = 0;   // largest number of nonzero gate entries
  double simplex_error = 0.0;    // max |sum g - 1| and negativity
  bool within_k = false;
};

CardinalityReport verify_cardinality(const MoeModel& model, const data::Dataset& dataset,
                                     const ForwardOptions& options = {});

void save_checkpoint(const MoeModel& model, const std::string& path);
MoeModel load_checkpoint(const std::string& path);

/// Replaces task 0 targets: a sample of cluster c gets expert
/// mapping[c]'s output under `teacher` plus Normal(0, noise_sd^2) noise.
data::Dataset teacher_targets(const MoeModel& teacher, const data::Dataset& dataset,
                              std::span<const std::size_t> mapping, double noise_sd,
                              std::uint64_t seed);

}  // namespace comet::moe
