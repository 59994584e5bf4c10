#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "comet/autodiff.hpp"
#include "comet/tensor.hpp"

namespace comet::gates {

// ---------------------------------------------------------------------------
// Smooth-step activation
// ---------------------------------------------------------------------------

struct SmoothStepParams {
  double gamma = 1.0;  // width of the non-saturated region, > 0
};

/// Piecewise cubic: exactly 0 for t <= -gamma/2, exactly 1 for t >= gamma/2,
/// -(2/gamma^3) t^3 + (3/(2 gamma)) t + 1/2 in between.
double smooth_step(double t, SmoothStepParams params);
/// Closed-form derivative; exactly 0 in both saturated regions.
double smooth_step_derivative(double t, SmoothStepParams params);
/// Elementwise tape primitive built from the two functions above.
ad::Var smooth_step(const ad::Var& t, SmoothStepParams params);

// ---------------------------------------------------------------------------
// Tree topology
// ---------------------------------------------------------------------------

enum class Direction : std::uint8_t { kLeft, kRight };

struct PathStep {
  std::size_t node;  // internal node id
  Direction direction;
};

struct Child {
  bool is_leaf = false;
  std::size_t index = 0;  // leaf id or internal node id
};

struct InternalNode {
  std::optional<std::size_t> parent;
  Child left;
  Child right;
  std::size_t level = 0;
};

/// Binary tree with n leaves and depth ceil(log2 n). When n is not a power of
/// two the leftmost 2^d - n nodes of level d-1 are leaves and the remaining
/// 2n - 2^d leaves sit at level d. Internal nodes are numbered breadth first;
/// leaves are numbered left to right, so leaf i is expert i.
struct TreeTopology {
  std::size_t n_leaves = 0;
  std::size_t depth = 0;
  std::vector<InternalNode> internal_nodes;
  std::vector<std::vector<PathStep>> leaf_paths;

  std::size_t n_internal() const { return internal_nodes.size(); }
  std::size_t leaf_level(std::size_t leaf) const { return leaf_paths.at(leaf).size(); }
  /// Count of leaves at each level 0..depth.
  std::vector<std::size_t> leaves_per_level() const;
  /// I x n indicator of "leaf l lies in the left (right) subtree of node q".
  Tensor left_indicator() const;
  Tensor right_indicator() const;
};

TreeTopology build_tree(std::size_t n);

/// Leaf-reaching probabilities of one tree. `hyperplanes` is I x p.
std::vector<double> tree_route(const TreeTopology& topology, const Tensor& hyperplanes,
                               std::span<const double> x, SmoothStepParams params);

// ---------------------------------------------------------------------------
// k-tree gate
// ---------------------------------------------------------------------------

struct TreeGate {
  std::size_t k = 1;
  TreeTopology topology;
  std::vector<Tensor> hyperplanes;        // k tensors, I x p
  std::vector<Tensor> leaf_coefficients;  // k tensors, n x p
  std::vector<Tensor> leaf_bias;          // empty, or k tensors 1 x n
  SmoothStepParams smooth_step;
  double lambda_entropy = 0.0;

  std::size_t n_experts() const { return topology.n_leaves; }
  std::size_t n_features() const { return hyperplanes.empty() ? 0 : hyperplanes[0].cols(); }

  /// Hyperplanes uniform in [-0.5/sqrt(p), 0.5/sqrt(p)], leaf coefficients 0.
  static TreeGate initialize(std::size_t n, std::size_t k, std::size_t p, SmoothStepParams params,
                             double lambda_entropy, std::mt19937_64& rng, bool leaf_bias = false);
};

struct CometEvaluation {
  std::vector<double> g;  // n
  Tensor v;               // k x n routing probabilities
  Tensor alpha;           // k x n leaf logits
};

/// Combines per-tree routing vectors (rows of `v`) with leaf logits `alpha`
/// in log space: max-subtracted exponentials of alpha + log v, normalized.
/// Exact zeros of v give exact zeros of g.
std::vector<double> combine_trees(const Tensor& v, const Tensor& alpha);

CometEvaluation evaluate_comet(const TreeGate& gate, std::span<const double> x);
std::vector<double> comet_weights(const TreeGate& gate, std::span<const double> x);

/// -sum v_i log v_i with 0 log 0 = 0.
double entropy_penalty(std::span<const double> v);

/// A routing vector is binary when its largest entry is 1 within `tol`.
bool is_one_hot(std::span<const double> v, double tol = 1e-9);

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits);
/// Indices of the k largest logits, ties to the lower index, in index order.
std::vector<std::size_t> top_k_indices(std::span<const double> logits, std::size_t k);
std::vector<double> topk_softmax(std::span<const double> logits, std::size_t k);

/// Dense softmax of weights . x (weights is n x p).
std::vector<double> softmax_gate(const Tensor& weights, std::span<const double> x);
/// Softmax restricted to the k largest logits; all other entries exactly 0.
std::vector<double> topk_gate(const Tensor& weights, std::span<const double> x, std::size_t k);

/// Fixed key -> expert table.
class HashAssignment {
 public:
  HashAssignment() = default;
  explicit HashAssignment(std::size_t n_experts) : n_experts_(n_experts) {}

  /// Each distinct key gets an expert drawn uniformly at random.
  static HashAssignment uniform_random(std::span<const std::int64_t> keys, std::size_t n_experts,
                                       std::uint64_t seed);
  /// key -> key mod n.
  static HashAssignment modulo(std::span<const std::int64_t> keys, std::size_t n_experts);

  void assign(std::int64_t key, std::size_t expert);
  std::size_t expert(std::int64_t key) const;
  bool contains(std::int64_t key) const { return table_.contains(key); }
  std::size_t n_experts() const { return n_experts_; }
  const std::map<std::int64_t, std::size_t>& entries() const { return table_; }

 private:
  std::size_t n_experts_ = 0;
  std::map<std::int64_t, std::size_t> table_;
};

std::vector<double> hash_gate(const HashAssignment& assignment, std::int64_t key);

/// Mean over rows of the number of entries strictly above `threshold`.
double experts_per_sample(const Tensor& g_batch, double threshold = 0.0);

// ---------------------------------------------------------------------------
// Batched tape versions (one sample per row of x)
// ---------------------------------------------------------------------------

struct CometTapeOutput {
  ad::Var g;             // B x n
  ad::Var entropy;       // 1 x 1, mean over samples and trees
  std::vector<Tensor> v; // per tree, B x n routing probabilities
};

CometTapeOutput comet_forward(ad::Tape& tape, const ad::Var& x,
                              std::span<const ad::Var> hyperplanes,
                              std::span<const ad::Var> leaf_coefficients,
                              std::span<const ad::Var> leaf_bias, const TreeTopology& topology,
                              SmoothStepParams params);

ad::Var softmax_gate(ad::Tape& tape, const ad::Var& x, const ad::Var& weights);
ad::Var topk_gate(ad::Tape& tape, const ad::Var& x, const ad::Var& weights, std::size_t k);

/// One-hot rows for a batch of keys.
Tensor hash_gate_batch(const HashAssignment& assignment, std::span<const std::int64_t> keys);

}  // namespace comet::gates
