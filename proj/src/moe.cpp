#include "comet/moe.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "comet/error.hpp"

namespace comet::moe {

using json = nlohmann::json;

std::string_view to_string(GateKind kind) {
  switch (kind) {
    case GateKind::kComet: return "comet";
    case GateKind::kSoftmax: return "softmax";
    case GateKind::kTopK: return "topk";
    case GateKind::kHash: return "hash";
  }
  return "?";
}

GateKind parse_gate_kind(std::string_view text) {
  if (text == "comet") return GateKind::kComet;
  if (text == "softmax") return GateKind::kSoftmax;
  if (text == "topk") return GateKind::kTopK;
  if (text == "hash") return GateKind::kHash;
  throw UsageError("unknown gate '" + std::string(text) + "' (expected comet, softmax, topk or hash)");
}

std::size_t ModelConfig::bottom_width() const {
  return (shared_hidden.empty() ? n_features : shared_hidden.back()) + key_embedding_dim;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw UsageError("model config: " + msg); };
  if (n_features < 1) fail("n_features must be >= 1");
  if (n_experts < 2) fail("n_experts must be >= 2");
  if (tasks.empty()) fail("at least one task required");
  double weight_sum = 0.0;
  for (const auto& t : tasks) {
    if (!(t.weight >= 0.0) || !std::isfinite(t.weight)) fail("task weights must be finite and >= 0");
    weight_sum += t.weight;
  }
  if (std::abs(weight_sum - 1.0) > 1e-9) fail("task weights must sum to 1");
  if ((gate == GateKind::kComet || gate == GateKind::kTopK) && (k < 1 || k > n_experts)) {
    fail("k must be in [1, n_experts]");
  }
  if (!(gamma > 0.0)) fail("gamma must be > 0");
  if (!(lambda_entropy >= 0.0)) fail("lambda_entropy must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  for (auto w : expert_hidden) {
    if (w == 0) fail("expert hidden widths must be positive");
  }
  for (auto w : shared_hidden) {
    if (w == 0) fail("shared hidden widths must be positive");
  }
  if (key_embedding_dim > 0 && key_buckets == 0) fail("key embedding needs key_buckets > 0");
  if (!(zeta >= 0.0)) fail("zeta must be >= 0");
  if (!(u_init_sd >= 0.0)) fail("u_init_sd must be >= 0");
  if (!(schedule.tau_start > 0.0 && schedule.tau_end > 0.0)) fail("tau must be > 0");
  if (schedule.iterations_start < 1 || schedule.iterations_end < 1) {
    fail("sinkhorn iterations must be >= 1");
  }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace {

ExpertParams add_dense_stack(ad::ParameterStore& store, const std::string& prefix,
                             std::size_t in, const std::vector<std::size_t>& widths,
                             std::mt19937_64& rng) {
  ExpertParams layers;
  std::size_t fan_in = in;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w(fan_in, widths[l]);
    for (double& v : w.values()) v = dist(rng);
    Tensor b(1, widths[l]);
    for (double& v : b.values()) v = dist(rng);
    layers.weights.push_back(store.add(prefix + ".w" + std::to_string(l), std::move(w)));
    layers.biases.push_back(store.add(prefix + ".b" + std::to_string(l), std::move(b)));
    fan_in = widths[l];
  }
  return layers;
}

}  // namespace

MoeModel MoeModel::create(const ModelConfig& config) {
  config.validate();
  MoeModel m;
  m.config_ = config;
  std::mt19937_64 rng(config.seed);
  const std::size_t n = config.n_experts;

  if (!config.shared_hidden.empty()) {
    m.shared_ = {add_dense_stack(m.params_, "shared", config.n_features, config.shared_hidden, rng)};
  }
  if (config.key_embedding_dim > 0) {
    std::normal_distribution<double> dist(0.0, 0.1);
    Tensor e(config.key_buckets, config.key_embedding_dim);
    for (double& v : e.values()) v = dist(rng);
    m.key_embedding_ = m.params_.add("shared.key_embedding", std::move(e));
  }

  const std::size_t p = config.bottom_width();
  std::vector<std::size_t> widths = config.expert_hidden;
  widths.push_back(config.n_tasks());
  for (std::size_t i = 0; i < n; ++i) {
    m.experts_.push_back(add_dense_stack(m.params_, "expert" + std::to_string(i), p, widths, rng));
  }

  m.topology_ = gates::build_tree(n);
  for (std::size_t t = 0; t < config.n_tasks(); ++t) {
    const std::string prefix = "gate" + std::to_string(t);
    GateParams gp;
    if (config.gate == GateKind::kComet) {
      auto tree = gates::TreeGate::initialize(n, config.k, p, {config.gamma},
                                              config.lambda_entropy, rng, config.leaf_bias);
      for (std::size_t j = 0; j < config.k; ++j) {
        const std::string tp = prefix + ".tree" + std::to_string(j);
        gp.hyperplanes.push_back(m.params_.add(tp + ".hyperplanes", tree.hyperplanes[j]));
        gp.leaf_coefficients.push_back(m.params_.add(tp + ".leaf", tree.leaf_coefficients[j]));
        if (config.leaf_bias) gp.leaf_bias.push_back(m.params_.add(tp + ".bias", tree.leaf_bias[j]));
      }
    } else if (config.gate == GateKind::kSoftmax || config.gate == GateKind::kTopK) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(p));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Tensor w(n, p);
      for (double& v : w.values()) v = dist(rng);
      gp.weights = m.params_.add(prefix + ".weights", std::move(w));
    }
    m.gates_.push_back(std::move(gp));
  }
  m.hash_ = gates::HashAssignment(n);

  if (config.local_search) {
    auto search = permute::PermutationSearch::initialize(n, config.u_init_sd, rng);
    m.scores_ = m.params_.add("permutation.scores", std::move(search.scores));
  }
  return m;
}

gates::TreeGate MoeModel::tree_gate(std::size_t task) const {
  if (config_.gate != GateKind::kComet) throw UsageError("tree_gate: model gate is not comet");
  const GateParams& gp = gates_.at(task);
  gates::TreeGate g;
  g.k = config_.k;
  g.topology = topology_;
  g.smooth_step = {config_.gamma};
  g.lambda_entropy = config_.lambda_entropy;
  for (auto id : gp.hyperplanes) g.hyperplanes.push_back(params_.value(id));
  for (auto id : gp.leaf_coefficients) g.leaf_coefficients.push_back(params_.value(id));
  for (auto id : gp.leaf_bias) g.leaf_bias.push_back(params_.value(id));
  return g;
}

void MoeModel::set_hash_assignment(gates::HashAssignment assignment) {
  if (assignment.n_experts() != config_.n_experts) {
    throw UsageError("hash assignment covers " + std::to_string(assignment.n_experts()) +
                     " experts, model has " + std::to_string(config_.n_experts));
  }
  hash_ = std::move(assignment);
}

void MoeModel::set_hard_permutation(Tensor p) {
  if (!scores_) throw UsageError("set_hard_permutation: model has no permutation");
  if (p.rows() != config_.n_experts || !permute::is_permutation_matrix(p)) {
    throw UsageError("set_hard_permutation: not an n x n permutation matrix");
  }
  hard_ = std::move(p);
  params_.set_trainable(*scores_, false);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

Batch make_batch(const data::Dataset& dataset, std::span<const std::size_t> rows) {
  Batch b;
  b.x = Tensor(rows.size(), dataset.n_features());
  b.targets.assign(dataset.n_tasks(), Tensor(rows.size(), 1));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto src = dataset.features.row(rows[r]);
    std::copy(src.begin(), src.end(), b.x.row(r).begin());
    for (std::size_t t = 0; t < dataset.n_tasks(); ++t) b.targets[t](r, 0) = dataset.targets[t][rows[r]];
    if (dataset.has_hash_keys()) b.keys.push_back(dataset.hash_keys[rows[r]]);
  }
  return b;
}

Batch make_batch(const data::Dataset& dataset) {
  std::vector<std::size_t> rows(dataset.size());
  std::iota(rows.begin(), rows.end(), 0);
  return make_batch(dataset, rows);
}

namespace {

ad::Var dropout(ad::Tape& tape, const ad::Var& h, const ModelConfig& cfg,
                const ForwardOptions& options) {
  if (!options.training || cfg.dropout == 0.0) return h;
  if (options.rng == nullptr) throw UsageError("dropout during training needs an rng");
  std::bernoulli_distribution keep(1.0 - cfg.dropout);
  Tensor mask(h.rows(), h.cols());
  const double scale = 1.0 / (1.0 - cfg.dropout);
  for (double& v : mask.values()) v = keep(*options.rng) ? scale : 0.0;
  return h * tape.constant(std::move(mask));
}

ad::Var dense_stack(ad::Tape& tape, const ExpertParams& layers, ad::Var h, bool relu_last,
                    const ModelConfig& cfg, const ForwardOptions& options) {
  const std::size_t depth = layers.weights.size();
  for (std::size_t l = 0; l < depth; ++l) {
    h = ad::matmul(h, tape.parameter(layers.weights[l])) + tape.parameter(layers.biases[l]);
    if (l + 1 < depth || relu_last) h = dropout(tape, ad::relu(h), cfg, options);
  }
  return h;
}

ad::Var bottom(ad::Tape& tape, const MoeModel& model, const Batch& batch,
               const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  if (batch.x.cols() != cfg.n_features) {
    throw ShapeError("model expects " + std::to_string(cfg.n_features) + " features, batch has " +
                     std::to_string(batch.x.cols()));
  }
  ad::Var h = tape.constant(batch.x);
  for (const auto& layers : model.shared_layers()) h = dense_stack(tape, layers, h, true, cfg, options);
  if (auto emb = model.key_embedding()) {
    if (batch.keys.size() != batch.x.rows()) throw RoutingError("key embedding needs one key per row");
    const auto buckets = static_cast<std::int64_t>(cfg.key_buckets);
    std::vector<std::size_t> rows;
    for (auto key : batch.keys) rows.push_back(static_cast<std::size_t>(((key % buckets) + buckets) % buckets));
    h = ad::concat(h, ad::gather_rows(tape.parameter(*emb), std::move(rows)), ad::Axis::kCols);
  }
  return h;
}

void check_tape(const ad::Tape& tape, const MoeModel& model) {
  if (tape.parameters() != &model.parameters()) {
    throw UsageError("forward: tape is not attached to the model parameters");
  }
}

}  // namespace

ForwardPass forward_batch(ad::Tape& tape, const MoeModel& model, const Batch& batch,
                          const ForwardOptions& options) {
  check_tape(tape, model);
  const ModelConfig& cfg = model.config();
  const std::size_t rows = batch.x.rows();
  const std::size_t n = cfg.n_experts;
  if (rows == 0) throw UsageError("forward: empty batch");

  const ad::Var h = bottom(tape, model, batch, options);
  ForwardPass out;

  // Permutation applied as r = g P^T.
  std::optional<ad::Var> perm_t;
  if (model.has_permutation()) {
    if (model.hard_permutation()) {
      perm_t = tape.constant(model.hard_permutation()->transposed());
    } else {
      if (!options.schedule) throw UsageError("soft permutation requires a tau / iteration schedule");
      const ad::Var b = permute::sinkhorn(tape.parameter(*model.permutation_scores()),
                                          options.schedule->tau, options.schedule->iterations);
      out.permutation = b;
      perm_t = ad::transpose(b);
    }
  }

  std::vector<ad::Var> routed;
  ad::Var entropy_sum;
  for (std::size_t t = 0; t < cfg.n_tasks(); ++t) {
    const GateParams& gp = model.gate_params()[t];
    ad::Var g;
    switch (cfg.gate) {
      case GateKind::kComet: {
        std::vector<ad::Var> hyper, leaf, bias;
        for (auto id : gp.hyperplanes) hyper.push_back(tape.parameter(id));
        for (auto id : gp.leaf_coefficients) leaf.push_back(tape.parameter(id));
        for (auto id : gp.leaf_bias) bias.push_back(tape.parameter(id));
        auto c = gates::comet_forward(tape, h, hyper, leaf, bias, model.topology(), {cfg.gamma});
        g = c.g;
        entropy_sum = t == 0 ? c.entropy : entropy_sum + c.entropy;
        out.tree_v.push_back(std::move(c.v));
        break;
      }
      case GateKind::kSoftmax:
        g = gates::softmax_gate(tape, h, tape.parameter(*gp.weights));
        break;
      case GateKind::kTopK:
        g = gates::topk_gate(tape, h, tape.parameter(*gp.weights), cfg.k);
        break;
      case GateKind::kHash:
        if (batch.keys.size() != rows) throw RoutingError("hash gate needs one key per row");
        g = tape.constant(gates::hash_gate_batch(model.hash_assignment(), batch.keys));
        break;
    }
    if (!g.value().all_finite()) throw TrainingError("gate of task " + std::to_string(t) + " is non-finite");
    out.gate_values.push_back(g.value());
    const ad::Var r = perm_t ? ad::matmul(g, *perm_t) : g;
    out.routed_values.push_back(r.value());
    routed.push_back(r);
  }
  if (cfg.gate == GateKind::kComet) {
    out.entropy = ad::scale(entropy_sum, 1.0 / static_cast<double>(cfg.n_tasks()));
  }

  std::vector<ad::Var> outputs(cfg.n_tasks());
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> active;
    for (std::size_t b = 0; b < rows; ++b) {
      for (const auto& r : out.routed_values) {
        if (r(b, i) != 0.0) {
          active.push_back(b);
          break;
        }
      }
    }
    if (active.empty()) continue;
    const bool all = active.size() == rows;
    const ad::Var input = all ? h : ad::gather_rows(h, active);
    const ad::Var f = dense_stack(tape, model.experts()[i], input, false, cfg, options);
    model.count_expert_calls(active.size());
    if (!f.value().all_finite()) throw TrainingError("expert " + std::to_string(i) + " output is non-finite");
    for (std::size_t t = 0; t < cfg.n_tasks(); ++t) {
      ad::Var w = ad::slice_cols(routed[t], i, 1);
      if (!all) w = ad::gather_rows(w, active);
      ad::Var contribution = ad::slice_cols(f, t, 1) * w;
      if (!all) contribution = ad::scatter_rows(contribution, active, rows);
      outputs[t] = outputs[t].valid() ? outputs[t] + contribution : contribution;
    }
  }
  for (auto& o : outputs) {
    if (!o.valid()) o = tape.constant(Tensor(rows, 1));
  }
  out.predictions = std::move(outputs);
  return out;
}

std::vector<double> moe_forward(const MoeModel& model, std::span<const double> x,
                                std::optional<std::int64_t> key, const ForwardOptions& options) {
  Batch b;
  b.x = Tensor::row_vector(x);
  if (key) b.keys = {*key};
  ad::Tape tape(&model.parameters());
  const auto pass = forward_batch(tape, model, b, options);
  std::vector<double> y;
  for (const auto& p : pass.predictions) y.push_back(p.value()(0, 0));
  return y;
}

Tensor expert_outputs(const MoeModel& model, const Batch& batch, std::size_t expert) {
  if (expert >= model.config().n_experts) throw UsageError("expert index out of range");
  ad::Tape tape(&model.parameters());
  const ad::Var h = bottom(tape, model, batch, {});
  return dense_stack(tape, model.experts()[expert], h, false, model.config(), {}).value();
}

// ---------------------------------------------------------------------------
// Loss and optimization
// ---------------------------------------------------------------------------

LossTerms total_loss(ad::Tape& tape, const MoeModel& model, const Batch& batch,
                     const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  if (batch.targets.size() != cfg.n_tasks()) {
    throw ShapeError("batch has " + std::to_string(batch.targets.size()) + " targets, model has " +
                     std::to_string(cfg.n_tasks()) + " tasks");
  }
  const ForwardPass pass = forward_batch(tape, model, batch, options);
  LossTerms terms;
  ad::Var total;
  for (std::size_t t = 0; t < cfg.n_tasks(); ++t) {
    const ad::Var target = tape.constant(batch.targets[t]);
    const ad::Var task = cfg.tasks[t].kind == TaskKind::kRegression
                             ? ad::squared_error(pass.predictions[t], target)
                             : ad::binary_cross_entropy(pass.predictions[t], target);
    const ad::Var weighted = ad::scale(task, cfg.tasks[t].weight);
    total = total.valid() ? total + weighted : weighted;
  }
  terms.data = total.value().item();
  if (cfg.gate == GateKind::kComet && cfg.lambda_entropy > 0.0) {
    const ad::Var e = ad::scale(pass.entropy, cfg.lambda_entropy);
    terms.entropy = e.value().item();
    total = total + e;
  }
  if (pass.permutation && cfg.zeta > 0.0) {
    const ad::Var p = permute::anti_degeneracy_penalty(*pass.permutation, cfg.zeta);
    terms.permutation = p.value().item();
    total = total + p;
  }
  terms.total = total;
  terms.value = total.value().item();
  return terms;
}

Adam::Adam(AdamConfig config) : config_(config) {
  if (!(config.learning_rate >= 0.0)) throw UsageError("adam: learning rate must be >= 0");
  if (!(config.beta1 >= 0.0 && config.beta1 < 1.0) || !(config.beta2 >= 0.0 && config.beta2 < 1.0)) {
    throw UsageError("adam: betas must be in [0, 1)");
  }
  if (!(config.epsilon > 0.0)) throw UsageError("adam: epsilon must be > 0");
}

void Adam::step(ad::ParameterStore& params, const ad::GradMap& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [id, g] : grads) {
    Tensor& w = params.value(id);
    auto [mit, m_new] = m_.try_emplace(id, g.rows(), g.cols());
    auto [vit, v_new] = v_.try_emplace(id, g.rows(), g.cols());
    auto m = mit->second.values();
    auto v = vit->second.values();
    auto gv = g.values();
    auto wv = w.values();
    for (std::size_t i = 0; i < gv.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gv[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gv[i] * gv[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      wv[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

LossTerms train_step(MoeModel& model, Adam& optimizer, const Batch& batch,
                     const ForwardOptions& options) {
  const ad::ParameterStore& params = model.parameters();
  for (ad::ParamId id = 0; id < params.size(); ++id) {
    if (!params.value(id).all_finite()) {
      throw TrainingError("parameter '" + params.name(id) + "' is non-finite");
    }
  }
  ad::Tape tape(&model.parameters());
  LossTerms terms = total_loss(tape, model, batch, options);
  const double loss = terms.value;
  if (!std::isfinite(loss)) {
    throw TrainingError("non-finite loss (parameter norm " +
                        std::to_string(std::sqrt(model.parameters().squared_norm())) + ")");
  }
  const ad::GradMap grads = tape.backward(terms.total);
  for (const auto& [id, g] : grads) {
    if (!g.all_finite()) {
      throw TrainingError("non-finite gradient for '" + model.parameters().name(id) + "'");
    }
  }
  optimizer.step(model.parameters(), grads);
  return terms;
}

Evaluation evaluate(const MoeModel& model, const data::Dataset& dataset,
                    const ForwardOptions& options, std::size_t chunk) {
  const ModelConfig& cfg = model.config();
  if (dataset.size() == 0) throw UsageError("evaluate: empty dataset");
  if (dataset.n_tasks() != cfg.n_tasks()) throw ShapeError("evaluate: task count mismatch");
  ForwardOptions eval_options = options;
  eval_options.training = false;

  const std::size_t n_rows = dataset.size();
  std::vector<double> loss_sum(cfg.n_tasks(), 0.0), correct(cfg.n_tasks(), 0.0);
  double active = 0.0, binary = 0.0;
  for (std::size_t start = 0; start < n_rows; start += chunk) {
    const std::size_t end = std::min(n_rows, start + chunk);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    const Batch batch = make_batch(dataset, rows);
    ad::Tape tape(&model.parameters());
    const ForwardPass pass = forward_batch(tape, model, batch, eval_options);
    for (std::size_t t = 0; t < cfg.n_tasks(); ++t) {
      const Tensor& z = pass.predictions[t].value();
      for (std::size_t b = 0; b < rows.size(); ++b) {
        const double y = batch.targets[t](b, 0);
        if (cfg.tasks[t].kind == TaskKind::kRegression) {
          loss_sum[t] += (z(b, 0) - y) * (z(b, 0) - y);
        } else {
          const double s = z(b, 0);
          loss_sum[t] += std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::abs(s)));
          correct[t] += ((s > 0.0) == (y > 0.5)) ? 1.0 : 0.0;
        }
      }
      for (std::size_t b = 0; b < rows.size(); ++b) {
        for (double v : pass.routed_values[t].row(b)) active += v != 0.0 ? 1.0 : 0.0;
      }
    }
    for (std::size_t b = 0; b < rows.size(); ++b) {
      bool one_hot = true;
      if (cfg.gate == GateKind::kComet) {
        for (const auto& trees : pass.tree_v) {
          for (const auto& v : trees) one_hot = one_hot && gates::is_one_hot(v.row(b));
        }
      } else {
        for (const auto& g : pass.gate_values) one_hot = one_hot && gates::is_one_hot(g.row(b));
      }
      binary += one_hot ? 1.0 : 0.0;
    }
  }
  Evaluation e;
  const double count = static_cast<double>(n_rows);
  for (std::size_t t = 0; t < cfg.n_tasks(); ++t) {
    e.task_losses.push_back(loss_sum[t] / count);
    e.loss += cfg.tasks[t].weight * e.task_losses.back();
    e.accuracy.push_back(cfg.tasks[t].kind == TaskKind::kBinary
                             ? correct[t] / count
                             : std::numeric_limits<double>::quiet_NaN());
  }
  e.experts_per_sample = active / (count * static_cast<double>(cfg.n_tasks()));
  e.binary_fraction = binary / count;
  return e;
}

// ---------------------------------------------------------------------------
// Two-stage training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw UsageError("train config: " + msg); };
  if (!(adam.learning_rate >= 0.0)) fail("learning_rate must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (stage1_epochs >= epochs && stage1_epochs > 0) fail("stage1_epochs must be < epochs");
  if (patience < 1) fail("patience must be >= 1");
}

namespace {

std::vector<Tensor> snapshot(const ad::ParameterStore& store) {
  std::vector<Tensor> values;
  for (std::size_t i = 0; i < store.size(); ++i) values.push_back(store.value(i));
  return values;
}

void restore(ad::ParameterStore& store, const std::vector<Tensor>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) store.value(i) = values[i];
}

}  // namespace

TrainReport two_stage_train(MoeModel& model, const data::Splits& splits, const TrainConfig& config,
                            const EpochCallback& on_epoch) {
  config.validate();
  const ModelConfig& cfg = model.config();
  const bool search = config.stage1_epochs > 0;
  if (search != model.has_permutation()) {
    throw UsageError(search ? "stage1_epochs > 0 needs a model built with local_search"
                            : "a model with local_search needs stage1_epochs > 0");
  }
  if (search && model.hard_permutation()) throw UsageError("permutation is already hardened");
  if (splits.train.size() == 0 || splits.validation.size() == 0) {
    throw UsageError("training and validation splits must be nonempty");
  }
  if (cfg.gate == GateKind::kHash && model.hash_assignment().entries().empty()) {
    throw UsageError("hash gate needs an assignment before training");
  }

  std::mt19937_64 rng(config.seed);
  Adam optimizer(config.adam);
  const std::size_t n_train = splits.train.size();
  const std::size_t steps_per_epoch = (n_train + config.batch_size - 1) / config.batch_size;
  const std::size_t stage1_total = config.stage1_epochs * steps_per_epoch;
  std::size_t stage1_step = 0;

  TrainReport report;
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_params;
  std::size_t stale = 0;
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const int stage = epoch <= config.stage1_epochs ? 1 : 2;
    if (stage == 2 && search && !model.hard_permutation()) {
      const auto end = permute::schedule(stage1_total, stage1_total, cfg.schedule);
      model.set_hard_permutation(permute::matching(
          permute::sinkhorn(model.parameters().value(*model.permutation_scores()), end.tau,
                            end.iterations)));
      report.hardening_epoch = epoch - 1;
      report.hard_permutation = model.hard_permutation();
    }

    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    EpochRecord record;
    record.epoch = epoch;
    record.stage = stage;
    try {
      for (std::size_t start = 0; start < n_train; start += config.batch_size) {
        const std::size_t end = std::min(n_train, start + config.batch_size);
        const Batch batch = make_batch(
            splits.train, std::span<const std::size_t>(order.data() + start, end - start));
        ForwardOptions options;
        options.training = true;
        options.rng = &rng;
        if (stage == 1) options.schedule = permute::schedule(stage1_step, stage1_total, cfg.schedule);
        const LossTerms terms = train_step(model, optimizer, batch, options);
        loss_sum += terms.value * static_cast<double>(end - start);
        if (stage == 1) ++stage1_step;
      }
      ForwardOptions eval_options;
      if (stage == 1) {
        record.schedule = permute::schedule(stage1_step, stage1_total, cfg.schedule);
        eval_options.schedule = record.schedule;
      }
      const Evaluation val = evaluate(model, splits.validation, eval_options);
      if (!std::isfinite(val.loss)) throw TrainingError("non-finite validation loss");
      record.validation_loss = val.loss;
      record.binary_fraction = val.binary_fraction;
    } catch (const TrainingError& e) {
      throw TrainingError("epoch " + std::to_string(epoch) + ": " + e.what());
    }
    record.train_loss = loss_sum / static_cast<double>(n_train);
    record.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (cfg.gate == GateKind::kComet && !report.binarization_epoch && record.binary_fraction == 1.0) {
      report.binarization_epoch = epoch;
    }
    report.epochs.push_back(record);
    if (on_epoch) on_epoch(record);

    if (stage == 2 && config.stop_at_binarization && report.binarization_epoch == epoch) {
      best_params.clear();
      report.best_epoch = epoch;
      best = record.validation_loss;
      report.stopped_at_binarization = true;
      break;
    }
    if (stage == 2) {
      if (record.validation_loss < best) {
        best = record.validation_loss;
        best_params = snapshot(model.parameters());
        report.best_epoch = epoch;
        stale = 0;
      } else if (++stale >= config.patience) {
        report.early_stopped = true;
        break;
      }
    }
  }
  if (!best_params.empty()) restore(model.parameters(), best_params);
  report.best_validation_loss = best;
  report.test = evaluate(model, splits.test);
  return report;
}

CardinalityReport verify_cardinality(const MoeModel& model, const data::Dataset& dataset,
                                     const ForwardOptions& options) {
  const ModelConfig& cfg = model.config();
  CardinalityReport rep;
  double binary = 0.0;
  constexpr std::size_t kChunk = 1024;
  for (std::size_t start = 0; start < dataset.size(); start += kChunk) {
    const std::size_t end = std::min(dataset.size(), start + kChunk);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    ad::Tape tape(&model.parameters());
    const auto pass = forward_batch(tape, model, make_batch(dataset, rows), options);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      bool one_hot = true;
      for (std::size_t t = 0; t < cfg.n_tasks(); ++t) {
        auto g = pass.gate_values[t].row(b);
        std::size_t support = 0;
        double total = 0.0;
        for (double v : g) {
          support += v != 0.0 ? 1 : 0;
          total += v;
          rep.simplex_error = std::max(rep.simplex_error, -v);
        }
        rep.simplex_error = std::max(rep.simplex_error, std::abs(total - 1.0));
        rep.max_support = std::max(rep.max_support, support);
        if (cfg.gate == GateKind::kComet) {
          for (const auto& v : pass.tree_v[t]) one_hot = one_hot && gates::is_one_hot(v.row(b));
        } else {
          one_hot = one_hot && gates::is_one_hot(g);
        }
      }
      binary += one_hot ? 1.0 : 0.0;
    }
  }
  rep.fraction_binary = dataset.size() ? binary / static_cast<double>(dataset.size()) : 0.0;
  const std::size_t bound =
      (cfg.gate == GateKind::kComet || cfg.gate == GateKind::kTopK) ? cfg.k
      : cfg.gate == GateKind::kHash                                  ? 1
                                                                     : cfg.n_experts;
  rep.within_k = rep.max_support <= bound;
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "comet-moe-checkpoint";
constexpr int kCheckpointVersion = 1;

json tensor_json(const Tensor& t) {
  return {{"rows", t.rows()}, {"cols", t.cols()},
          {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from(const json& j) {
  return Tensor(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("values").get<std::vector<double>>());
}

json config_json(const ModelConfig& c) {
  json tasks = json::array();
  for (const auto& t : c.tasks) tasks.push_back({{"kind", data::to_string(t.kind)}, {"weight", t.weight}});
  return {{"n_features", c.n_features},
          {"n_experts", c.n_experts},
          {"k", c.k},
          {"gate", to_string(c.gate)},
          {"expert_hidden", c.expert_hidden},
          {"dropout", c.dropout},
          {"shared_hidden", c.shared_hidden},
          {"key_embedding_dim", c.key_embedding_dim},
          {"key_buckets", c.key_buckets},
          {"tasks", tasks},
          {"gamma", c.gamma},
          {"lambda_entropy", c.lambda_entropy},
          {"leaf_bias", c.leaf_bias},
          {"local_search", c.local_search},
          {"tau_start", c.schedule.tau_start},
          {"tau_end", c.schedule.tau_end},
          {"iterations_start", c.schedule.iterations_start},
          {"iterations_end", c.schedule.iterations_end},
          {"zeta", c.zeta},
          {"u_init_sd", c.u_init_sd},
          {"seed", c.seed}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.n_features = j.at("n_features");
  c.n_experts = j.at("n_experts");
  c.k = j.at("k");
  c.gate = parse_gate_kind(j.at("gate").get<std::string>());
  c.expert_hidden = j.at("expert_hidden").get<std::vector<std::size_t>>();
  c.dropout = j.at("dropout");
  c.shared_hidden = j.at("shared_hidden").get<std::vector<std::size_t>>();
  c.key_embedding_dim = j.at("key_embedding_dim");
  c.key_buckets = j.at("key_buckets");
  c.tasks.clear();
  for (const auto& t : j.at("tasks")) {
    c.tasks.push_back({data::parse_task_kind(t.at("kind").get<std::string>()), t.at("weight")});
  }
  c.gamma = j.at("gamma");
  c.lambda_entropy = j.at("lambda_entropy");
  c.leaf_bias = j.at("leaf_bias");
  c.local_search = j.at("local_search");
  c.schedule.tau_start = j.at("tau_start");
  c.schedule.tau_end = j.at("tau_end");
  c.schedule.iterations_start = j.at("iterations_start");
  c.schedule.iterations_end = j.at("iterations_end");
  c.zeta = j.at("zeta");
  c.u_init_sd = j.at("u_init_sd");
  c.seed = j.at("seed");
  return c;
}

}  // namespace

void save_checkpoint(const MoeModel& model, const std::string& path) {
  json params = json::array();
  const auto& store = model.parameters();
  for (std::size_t i = 0; i < store.size(); ++i) {
    json p = tensor_json(store.value(i));
    p["name"] = store.name(i);
    p["trainable"] = store.trainable(i);
    params.push_back(std::move(p));
  }
  json hash = json::array();
  for (const auto& [key, expert] : model.hash_assignment().entries()) hash.push_back({key, expert});
  json doc = {{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"config", config_json(model.config())},
              {"parameters", params},
              {"hash_assignment", hash}};
  if (model.hard_permutation()) doc["hard_permutation"] = tensor_json(*model.hard_permutation());
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out << doc.dump();
  if (!out) throw Error("failed writing checkpoint '" + path + "'");
}

MoeModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
    if (doc.at("format") != kCheckpointFormat) throw Error("'" + path + "' is not a checkpoint");
    if (doc.at("version") != kCheckpointVersion) {
      throw Error("unsupported checkpoint version " + doc.at("version").dump());
    }
    MoeModel model = MoeModel::create(config_from(doc.at("config")));
    auto& store = model.parameters();
    const auto& params = doc.at("parameters");
    if (params.size() != store.size()) throw Error("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& p = params[i];
      if (p.at("name") != store.name(i)) {
        throw Error("checkpoint parameter " + std::to_string(i) + " is '" +
                    p.at("name").get<std::string>() + "', expected '" + store.name(i) + "'");
      }
      Tensor value = tensor_from(p);
      if (!value.same_shape(store.value(i))) throw Error("shape mismatch for '" + store.name(i) + "'");
      store.value(i) = std::move(value);
      store.set_trainable(i, p.at("trainable"));
    }
    gates::HashAssignment hash(model.config().n_experts);
    for (const auto& e : doc.at("hash_assignment")) hash.assign(e[0], e[1]);
    model.set_hash_assignment(std::move(hash));
    if (doc.contains("hard_permutation")) model.set_hard_permutation(tensor_from(doc["hard_permutation"]));
    return model;
  } catch (const json::exception& e) {
    throw Error("malformed checkpoint '" + path + "': " + e.what());
  }
}

data::Dataset teacher_targets(const MoeModel& teacher, const data::Dataset& dataset,
                              std::span<const std::size_t> mapping, double noise_sd,
                              std::uint64_t seed) {
  std::vector<std::size_t> cluster;
  if (dataset.provenance.oracle && dataset.provenance.oracle->cluster.size() == dataset.size()) {
    cluster = dataset.provenance.oracle->cluster;
  } else if (dataset.has_hash_keys()) {
    for (auto k : dataset.hash_keys) cluster.push_back(static_cast<std::size_t>(k));
  } else {
    throw UsageError("teacher_targets: dataset carries no cluster ids");
  }
  for (auto e : mapping) {
    if (e >= teacher.config().n_experts) throw UsageError("teacher_targets: mapping out of range");
  }
  const Batch batch = make_batch(dataset);
  std::vector<Tensor> outputs;
  for (std::size_t i = 0; i < teacher.config().n_experts; ++i) outputs.push_back(expert_outputs(teacher, batch, i));

  data::Dataset out = dataset;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t r = 0; r < out.size(); ++r) {
    if (cluster[r] >= mapping.size()) throw UsageError("teacher_targets: cluster id outside mapping");
    out.targets[0][r] = outputs[mapping[cluster[r]]](r, 0) + noise_sd * noise(rng);
  }
  if (out.provenance.oracle) out.provenance.oracle.reset();
  out.provenance.source = dataset.provenance.source + "+teacher";
  return out;
}

}  // namespace comet::moe
