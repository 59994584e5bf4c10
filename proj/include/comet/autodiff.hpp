#pragma once

// Reverse-mode differentiation over a fixed primitive set.
//
// A Tape records primitive applications as they are evaluated (define by run).
// Node inputs always reference earlier nodes, so the backward sweep is a single
// pass in reverse insertion order. Tapes are rebuilt per minibatch.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "comet/tensor.hpp"

namespace comet::ad {

using ParamId = std::size_t;
using GradMap = std::map<ParamId, Tensor>;
using NamedTensors = std::map<std::string, Tensor>;

/// Named parameter tensors with a per-parameter trainable flag.
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor value, bool trainable = true);

  std::size_t size() const { return values_.size(); }
  const Tensor& value(ParamId id) const { return values_.at(id); }
  Tensor& value(ParamId id) { return values_.at(id); }
  const std::string& name(ParamId id) const { return names_.at(id); }
  bool trainable(ParamId id) const { return trainable_.at(id); }
  void set_trainable(ParamId id, bool on) { trainable_.at(id) = on; }
  std::optional<ParamId> find(const std::string& name) const;

  /// Sum of squared entries over all parameters.
  double squared_norm() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::vector<bool> trainable_;
};

enum class Op : std::uint8_t {
  kConstant,
  kInput,
  kParameter,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kExp,
  kLog,
  kSum,
  kMean,
  kMax,
  kSoftmax,
  kLogSumExp,
  kSigmoid,
  kRelu,
  kMap,
  kSquaredError,
  kBinaryCrossEntropy,
  kConcat,
  kGatherRows,
  kScatterRows,
  kSliceCols,
  kTranspose,
  kScale,
};

std::string_view op_name(Op op);

/// Reduction axis. kRows collapses the row dimension (result 1 x c), kCols
/// collapses the column dimension (result r x 1), kAll yields 1 x 1.
enum class Axis : std::uint8_t { kRows, kCols, kAll };

/// Inputs below this are clamped before taking a logarithm; the gradient uses
/// the clamped value.
inline constexpr double kLogFloor = 1e-38;

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using UnaryFn = std::function<double(double)>;

struct Node {
  Op op = Op::kConstant;
  std::vector<std::size_t> inputs;
  Tensor value;
  Tensor saved;
  std::vector<std::size_t> index;
  double attr = 0.0;
  Axis axis = Axis::kAll;
  ParamId param = 0;
  UnaryFn derivative;
};

class Tape {
 public:
  explicit Tape(const ParameterStore* params = nullptr, const NamedTensors* inputs = nullptr)
      : params_(params), inputs_(inputs) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Tensor value);
  Var scalar(double v) { return constant(Tensor::scalar(v)); }
  /// Placeholder bound to a named input tensor.
  Var input(const std::string& name);
  /// Trainable (or frozen) parameter read from the attached store.
  Var parameter(ParamId id);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(const Var& v) const { return nodes_.at(v.id()).value; }
  const ParameterStore* parameters() const { return params_; }

  /// Propagates `seed` (shape of `output`) back through the tape. The result
  /// holds one entry per trainable parameter of the attached store; parameters
  /// absent from the tape receive zero gradients.
  GradMap backward(const Var& output, const Tensor& seed) const;
  /// Scalar outputs only: seed = 1.
  GradMap backward(const Var& output) const;

  // Primitive construction used by the free functions below.
  Var push(Node node);
  void check(bool ok, Op op, const std::string& detail) const;

 private:
  const ParameterStore* params_;
  const NamedTensors* inputs_;
  std::vector<Node> nodes_;
};

// Primitives. Binary elementwise ops broadcast a dimension of size 1.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var exp(const Var& a);
Var log(const Var& a);
Var sum(const Var& a, Axis axis = Axis::kAll);
Var mean(const Var& a, Axis axis = Axis::kAll);
Var max(const Var& a, Axis axis);
/// Row-wise softmax.
Var softmax(const Var& a);
Var logsumexp(const Var& a, Axis axis);
Var sigmoid(const Var& a);
Var relu(const Var& a);
/// Elementwise map with a caller-supplied derivative.
Var map(const Var& a, UnaryFn f, UnaryFn df);
/// Mean of squared differences over all entries.
Var squared_error(const Var& prediction, const Var& target);
/// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
Var binary_cross_entropy(const Var& logits, const Var& target);
Var concat(const Var& a, const Var& b, Axis axis);
/// Row gather (embedding lookup). Gradients scatter-add into touched rows only.
Var gather_rows(const Var& a, std::vector<std::size_t> rows);
/// Places row r of `a` at row rows[r] of a zero matrix with `total_rows` rows.
Var scatter_rows(const Var& a, std::vector<std::size_t> rows, std::size_t total_rows);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var transpose(const Var& a);
Var scale(const Var& a, double factor);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

/// A tape-producing function plus the bookkeeping to run forward, then backward.
class Graph {
 public:
  using Builder = std::function<Var(Tape&)>;

  explicit Graph(Builder builder) : builder_(std::move(builder)) {}

  /// Rebuilds the tape against `params` and `inputs` and returns the output.
  Tensor forward(const ParameterStore& params, NamedTensors inputs = {});
  GradMap backward(const Tensor& seed) const;
  GradMap backward() const;

  bool has_run() const { return tape_.has_value(); }
  const Tape& tape() const;

 private:
  Builder builder_;
  NamedTensors inputs_;
  std::optional<Tape> tape_;
  Var output_;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  ParamId worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares analytic gradients against central differences over every entry
/// of every trainable parameter. Error per entry is
/// |analytic - numeric| / max(1, |analytic|).
GradCheckResult grad_check(Graph& graph, ParameterStore& params, const NamedTensors& inputs,
                           double eps);

}  // namespace comet::ad
