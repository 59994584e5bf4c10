#include "comet/gates.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>

#include "comet/error.hpp"

namespace comet::gates {

namespace {

// Additive logit for entries that must come out of exp() as exactly zero.
constexpr double kMaskedLogit = -1e300;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_features(const Tensor& weights, std::span<const double> x, const char* what) {
  if (weights.cols() != x.size()) {
    throw ShapeError(std::string(what) + ": weights " + weights.shape_string() +
                     " incompatible with " + std::to_string(x.size()) + " features");
  }
}

}  // namespace

double smooth_step(double t, SmoothStepParams params) {
  const double g = params.gamma;
  if (t <= -g / 2.0) return 0.0;
  if (t >= g / 2.0) return 1.0;
  return -2.0 / (g * g * g) * t * t * t + 3.0 / (2.0 * g) * t + 0.5;
}

double smooth_step_derivative(double t, SmoothStepParams params) {
  const double g = params.gamma;
  if (t <= -g / 2.0 || t >= g / 2.0) return 0.0;
  return -6.0 / (g * g * g) * t * t + 3.0 / (2.0 * g);
}

ad::Var smooth_step(const ad::Var& t, SmoothStepParams params) {
  if (!(params.gamma > 0.0)) throw UsageError("smooth_step: gamma must be positive");
  return ad::map(
      t, [params](double v) { return smooth_step(v, params); },
      [params](double v) { return smooth_step_derivative(v, params); });
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> TreeTopology::leaves_per_level() const {
  std::vector<std::size_t> counts(depth + 1, 0);
  for (const auto& path : leaf_paths) ++counts[path.size()];
  return counts;
}

Tensor TreeTopology::left_indicator() const {
  Tensor t(n_internal(), n_leaves);
  for (std::size_t l = 0; l < n_leaves; ++l) {
    for (const auto& step : leaf_paths[l]) {
      if (step.direction == Direction::kLeft) t(step.node, l) = 1.0;
    }
  }
  return t;
}

Tensor TreeTopology::right_indicator() const {
  Tensor t(n_internal(), n_leaves);
  for (std::size_t l = 0; l < n_leaves; ++l) {
    for (const auto& step : leaf_paths[l]) {
      if (step.direction == Direction::kRight) t(step.node, l) = 1.0;
    }
  }
  return t;
}

TreeTopology build_tree(std::size_t n) {
  if (n < 2) throw UsageError("build_tree: need at least 2 experts, got " + std::to_string(n));
  std::size_t d = 0;
  while ((std::size_t{1} << d) < n) ++d;
  const std::size_t full = std::size_t{1} << d;
  // Number of level d-1 slots that stay leaves.
  const std::size_t collapsed = full - n;

  auto is_internal = [&](std::size_t level, std::size_t slot) {
    return level + 1 < d || (level + 1 == d && slot >= collapsed);
  };

  TreeTopology topo;
  topo.n_leaves = n;
  topo.depth = d;

  // Breadth-first ids for internal slots.
  std::vector<std::vector<std::size_t>> ids(d);
  for (std::size_t level = 0; level < d; ++level) {
    ids[level].assign(std::size_t{1} << level, 0);
    for (std::size_t slot = 0; slot < ids[level].size(); ++slot) {
      if (is_internal(level, slot)) {
        ids[level][slot] = topo.internal_nodes.size();
        InternalNode node;
        node.level = level;
        topo.internal_nodes.push_back(node);
      }
    }
  }

  auto child_of = [&](std::size_t level, std::size_t slot) -> Child {
    // Slot at `level` (one below the parent).
    if (level == d) {
      const std::size_t parent_slot = slot / 2;
      return {true, collapsed + 2 * (parent_slot - collapsed) + slot % 2};
    }
    if (is_internal(level, slot)) return {false, ids[level][slot]};
    return {true, slot};
  };

  for (std::size_t level = 0; level < d; ++level) {
    for (std::size_t slot = 0; slot < ids[level].size(); ++slot) {
      if (!is_internal(level, slot)) continue;
      InternalNode& node = topo.internal_nodes[ids[level][slot]];
      node.left = child_of(level + 1, 2 * slot);
      node.right = child_of(level + 1, 2 * slot + 1);
      for (const Child& c : {node.left, node.right}) {
        if (!c.is_leaf) topo.internal_nodes[c.index].parent = ids[level][slot];
      }
    }
  }

  topo.leaf_paths.assign(n, {});
  std::vector<PathStep> path;
  auto walk = [&](auto&& self, std::size_t node_id) -> void {
    const InternalNode& node = topo.internal_nodes[node_id];
    for (auto [child, dir] : {std::pair{node.left, Direction::kLeft},
                              std::pair{node.right, Direction::kRight}}) {
      path.push_back({node_id, dir});
      if (child.is_leaf) {
        topo.leaf_paths[child.index] = path;
      } else {
        self(self, child.index);
      }
      path.pop_back();
    }
  };
  walk(walk, 0);
  return topo;
}

std::vector<double> tree_route(const TreeTopology& topology, const Tensor& hyperplanes,
                               std::span<const double> x, SmoothStepParams params) {
  if (hyperplanes.rows() != topology.n_internal()) {
    throw ShapeError("tree_route: " + std::to_string(hyperplanes.rows()) +
                     " hyperplanes for " + std::to_string(topology.n_internal()) +
                     " internal nodes");
  }
  require_features(hyperplanes, x, "tree_route");
  std::vector<double> h(topology.n_internal());
  for (std::size_t q = 0; q < h.size(); ++q) h[q] = smooth_step(dot(hyperplanes.row(q), x), params);
  std::vector<double> v(topology.n_leaves, 1.0);
  for (std::size_t l = 0; l < v.size(); ++l) {
    for (const auto& step : topology.leaf_paths[l]) {
      v[l] *= step.direction == Direction::kLeft ? h[step.node] : 1.0 - h[step.node];
    }
  }
  return v;
}

TreeGate TreeGate::initialize(std::size_t n, std::size_t k, std::size_t p,
                              SmoothStepParams params, double lambda_entropy,
                              std::mt19937_64& rng, bool leaf_bias) {
  if (k < 1 || k > n) {
    throw UsageError("tree gate: k must be in [1, n], got k=" + std::to_string(k) +
                     " n=" + std::to_string(n));
  }
  if (p < 1) throw UsageError("tree gate: need at least one feature");
  if (!(params.gamma > 0.0)) throw UsageError("tree gate: gamma must be positive");
  if (lambda_entropy < 0.0) throw UsageError("tree gate: lambda must be nonnegative");
  TreeGate gate;
  gate.k = k;
  gate.topology = build_tree(n);
  gate.smooth_step = params;
  gate.lambda_entropy = lambda_entropy;
  const double bound = 0.5 / std::sqrt(static_cast<double>(p));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::size_t j = 0; j < k; ++j) {
    Tensor w(gate.topology.n_internal(), p);
    for (double& v : w.values()) v = dist(rng);
    gate.hyperplanes.push_back(std::move(w));
    gate.leaf_coefficients.emplace_back(n, p);
    if (leaf_bias) gate.leaf_bias.emplace_back(1, n);
  }
  return gate;
}

std::vector<double> combine_trees(const Tensor& v, const Tensor& alpha) {
  if (!v.same_shape(alpha)) {
    throw ShapeError("combine_trees: v " + v.shape_string() + " vs alpha " + alpha.shape_string());
  }
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < v.rows(); ++j) {
    for (std::size_t i = 0; i < v.cols(); ++i) {
      if (v(j, i) > 0.0) m = std::max(m, alpha(j, i) + std::log(std::max(v(j, i), ad::kLogFloor)));
    }
  }
  if (!std::isfinite(m)) throw UsageError("combine_trees: every routing vector is zero");
  std::vector<double> g(v.cols(), 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < v.rows(); ++j) {
    for (std::size_t i = 0; i < v.cols(); ++i) {
      if (v(j, i) > 0.0) {
        const double e = std::exp(alpha(j, i) + std::log(std::max(v(j, i), ad::kLogFloor)) - m);
        g[i] += e;
        total += e;
      }
    }
  }
  for (double& gi : g) gi /= total;
  return g;
}

CometEvaluation evaluate_comet(const TreeGate& gate, std::span<const double> x) {
  const std::size_t n = gate.n_experts();
  CometEvaluation out;
  out.v = Tensor(gate.k, n);
  out.alpha = Tensor(gate.k, n);
  for (std::size_t j = 0; j < gate.k; ++j) {
    const auto v = tree_route(gate.topology, gate.hyperplanes[j], x, gate.smooth_step);
    std::copy(v.begin(), v.end(), out.v.row(j).begin());
    require_features(gate.leaf_coefficients[j], x, "comet_weights");
    for (std::size_t i = 0; i < n; ++i) {
      out.alpha(j, i) = dot(gate.leaf_coefficients[j].row(i), x);
      if (!gate.leaf_bias.empty()) out.alpha(j, i) += gate.leaf_bias[j](0, i);
    }
  }
  out.g = combine_trees(out.v, out.alpha);
  return out;
}

std::vector<double> comet_weights(const TreeGate& gate, std::span<const double> x) {
  return evaluate_comet(gate, x).g;
}

double entropy_penalty(std::span<const double> v) {
  double h = 0.0;
  for (double p : v) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

bool is_one_hot(std::span<const double> v, double tol) {
  if (v.empty()) return false;
  return std::abs(*std::max_element(v.begin(), v.end()) - 1.0) <= tol;
}

// ---------------------------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  if (out.empty()) return out;
  const double m = *std::max_element(out.begin(), out.end());
  double z = 0.0;
  for (double& v : out) {
    v = std::exp(v - m);
    z += v;
  }
  for (double& v : out) v /= z;
  return out;
}

std::vector<std::size_t> top_k_indices(std::span<const double> logits, std::size_t k) {
  if (k < 1 || k > logits.size()) {
    throw UsageError("top-k: k must be in [1, n], got k=" + std::to_string(k) +
                     " n=" + std::to_string(logits.size()));
  }
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<double> topk_softmax(std::span<const double> logits, std::size_t k) {
  const auto selected = top_k_indices(logits, k);
  std::vector<double> sub;
  sub.reserve(k);
  for (auto i : selected) sub.push_back(logits[i]);
  const auto w = softmax(sub);
  std::vector<double> g(logits.size(), 0.0);
  for (std::size_t s = 0; s < k; ++s) g[selected[s]] = w[s];
  return g;
}

namespace {
std::vector<double> gate_logits(const Tensor& weights, std::span<const double> x) {
  require_features(weights, x, "gate");
  std::vector<double> logits(weights.rows());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = dot(weights.row(i), x);
  return logits;
}
}  // namespace

std::vector<double> softmax_gate(const Tensor& weights, std::span<const double> x) {
  return softmax(gate_logits(weights, x));
}

std::vector<double> topk_gate(const Tensor& weights, std::span<const double> x, std::size_t k) {
  return topk_softmax(gate_logits(weights, x), k);
}

HashAssignment HashAssignment::uniform_random(std::span<const std::int64_t> keys,
                                              std::size_t n_experts, std::uint64_t seed) {
  if (n_experts == 0) throw UsageError("hash assignment: need at least one expert");
  std::set<std::int64_t> distinct(keys.begin(), keys.end());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dist(0, n_experts - 1);
  HashAssignment a(n_experts);
  for (auto key : distinct) a.assign(key, dist(rng));
  return a;
}

HashAssignment HashAssignment::modulo(std::span<const std::int64_t> keys, std::size_t n_experts) {
  if (n_experts == 0) throw UsageError("hash assignment: need at least one expert");
  HashAssignment a(n_experts);
  const auto n = static_cast<std::int64_t>(n_experts);
  for (auto key : keys) a.assign(key, static_cast<std::size_t>(((key % n) + n) % n));
  return a;
}

void HashAssignment::assign(std::int64_t key, std::size_t expert) {
  if (expert >= n_experts_) {
    throw UsageError("hash assignment: expert " + std::to_string(expert) + " out of range");
  }
  table_[key] = expert;
}

std::size_t HashAssignment::expert(std::int64_t key) const {
  auto it = table_.find(key);
  if (it == table_.end()) {
    throw RoutingError("hash gate: key " + std::to_string(key) + " has no assigned expert");
  }
  return it->second;
}

std::vector<double> hash_gate(const HashAssignment& assignment, std::int64_t key) {
  std::vector<double> g(assignment.n_experts(), 0.0);
  g[assignment.expert(key)] = 1.0;
  return g;
}

double experts_per_sample(const Tensor& g_batch, double threshold) {
  if (threshold < 0.0) throw UsageError("experts_per_sample: threshold must be >= 0");
  if (g_batch.rows() == 0) return 0.0;
  std::size_t count = 0;
  for (double v : g_batch.values()) {
    if (v > threshold) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(g_batch.rows());
}

// ---------------------------------------------------------------------------

CometTapeOutput comet_forward(ad::Tape& tape, const ad::Var& x,
                              std::span<const ad::Var> hyperplanes,
                              std::span<const ad::Var> leaf_coefficients,
                              std::span<const ad::Var> leaf_bias, const TreeTopology& topology,
                              SmoothStepParams params) {
  const std::size_t k = hyperplanes.size();
  const std::size_t n = topology.n_leaves;
  const std::size_t batch = x.rows();
  if (k == 0 || leaf_coefficients.size() != k || (!leaf_bias.empty() && leaf_bias.size() != k)) {
    throw UsageError("comet_forward: inconsistent tree parameter counts");
  }
  const ad::Var left = tape.constant(topology.left_indicator());
  const ad::Var right = tape.constant(topology.right_indicator());
  const ad::Var one = tape.scalar(1.0);

  CometTapeOutput out;
  std::vector<ad::Var> log_v(k);
  std::vector<ad::Var> scores(k);
  std::vector<Tensor> penalty(k);

  for (std::size_t j = 0; j < k; ++j) {
    const ad::Var z = ad::matmul(x, ad::transpose(hyperplanes[j]));
    const ad::Var h = smooth_step(z, params);
    log_v[j] = ad::matmul(ad::log(h), left) + ad::matmul(ad::log(one - h), right);

    // Exact routing probabilities from the saturated activations; zeros here
    // must stay exact zeros downstream.
    const Tensor& hv = h.value();
    Tensor v(batch, n, 1.0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t l = 0; l < n; ++l) {
        for (const auto& step : topology.leaf_paths[l]) {
          const double hq = hv(b, step.node);
          v(b, l) *= step.direction == Direction::kLeft ? hq : 1.0 - hq;
        }
      }
    }
    penalty[j] = Tensor(batch, n);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!(v.values()[i] > 0.0)) penalty[j].values()[i] = kMaskedLogit;
    }
    out.v.push_back(std::move(v));

    ad::Var alpha = ad::matmul(x, ad::transpose(leaf_coefficients[j]));
    if (!leaf_bias.empty()) alpha = alpha + leaf_bias[j];
    scores[j] = alpha + log_v[j];
  }

  // Row max over (tree, leaf) among reachable leaves, held constant.
  Tensor row_max(batch, 1, -HUGE_VAL);
  for (std::size_t j = 0; j < k; ++j) {
    const Tensor& s = scores[j].value();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t l = 0; l < n; ++l) {
        if (penalty[j](b, l) == 0.0) row_max(b, 0) = std::max(row_max(b, 0), s(b, l));
      }
    }
  }
  const ad::Var shift = tape.constant(std::move(row_max));

  ad::Var numerator;
  ad::Var entropy_sum;
  for (std::size_t j = 0; j < k; ++j) {
    const ad::Var mask_logit = tape.constant(penalty[j]);
    const ad::Var e = ad::exp(scores[j] - shift + mask_logit);
    numerator = j == 0 ? e : numerator + e;

    const ad::Var v = ad::exp(log_v[j] + mask_logit);
    const ad::Var h = ad::scale(ad::sum(v * log_v[j], ad::Axis::kCols), -1.0);
    entropy_sum = j == 0 ? h : entropy_sum + h;
  }
  out.g = numerator / ad::sum(numerator, ad::Axis::kCols);
  out.entropy = ad::scale(ad::mean(entropy_sum), 1.0 / static_cast<double>(k));
  return out;
}

ad::Var softmax_gate(ad::Tape&, const ad::Var& x, const ad::Var& weights) {
  return ad::softmax(ad::matmul(x, ad::transpose(weights)));
}

ad::Var topk_gate(ad::Tape& tape, const ad::Var& x, const ad::Var& weights, std::size_t k) {
  const ad::Var logits = ad::matmul(x, ad::transpose(weights));
  const Tensor& lv = logits.value();
  Tensor mask(lv.rows(), lv.cols(), kMaskedLogit);
  for (std::size_t b = 0; b < lv.rows(); ++b) {
    for (auto i : top_k_indices(lv.row(b), k)) mask(b, i) = 0.0;
  }
  return ad::softmax(logits + tape.constant(std::move(mask)));
}

Tensor hash_gate_batch(const HashAssignment& assignment, std::span<const std::int64_t> keys) {
  Tensor g(keys.size(), assignment.n_experts());
  for (std::size_t b = 0; b < keys.size(); ++b) g(b, assignment.expert(keys[b])) = 1.0;
  return g;
}

}  // namespace comet::gates
