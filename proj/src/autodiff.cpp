#include "comet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "comet/error.hpp"

namespace comet::ad {

ParamId ParameterStore::add(std::string name, Tensor value, bool trainable) {
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  trainable_.push_back(trainable);
  return values_.size() - 1;
}

std::optional<ParamId> ParameterStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

double ParameterStore::squared_norm() const {
  double s = 0.0;
  for (const auto& t : values_) {
    for (double v : t.values()) s += v * v;
  }
  return s;
}

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kInput: return "input";
    case Op::kParameter: return "parameter";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kMax: return "max";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSumExp: return "logsumexp";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRelu: return "relu";
    case Op::kMap: return "map";
    case Op::kSquaredError: return "squared_error";
    case Op::kBinaryCrossEntropy: return "binary_cross_entropy";
    case Op::kConcat: return "concat";
    case Op::kGatherRows: return "gather_rows";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kTranspose: return "transpose";
    case Op::kScale: return "scale";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw UsageError("value() on an unbound Var");
  return tape_->value(*this);
}

namespace {

// Element of `t` viewed under broadcasting to a larger shape.
inline double bcast(const Tensor& t, std::size_t r, std::size_t c) {
  return t(t.rows() == 1 ? 0 : r, t.cols() == 1 ? 0 : c);
}

bool broadcast_dim(std::size_t a, std::size_t b, std::size_t& out) {
  if (a == b) {
    out = a;
  } else if (a == 1) {
    out = b;
  } else if (b == 1) {
    out = a;
  } else {
    return false;
  }
  return true;
}

// Sums `g` over the dimensions that were broadcast to reach g's shape.
Tensor reduce_to(const Tensor& g, std::size_t rows, std::size_t cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    for (std::size_t c = 0; c < g.cols(); ++c) {
      out(rows == 1 ? 0 : r, cols == 1 ? 0 : c) += g(r, c);
    }
  }
  return out;
}

void accumulate(Tensor& slot, const Tensor& g) {
  if (slot.empty() && !g.empty()) {
    slot = g;
    return;
  }
  auto dst = slot.values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw UsageError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw UsageError("operands recorded on different tapes");
  return t;
}

Var binary(Op op, const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  std::size_t rows = 0;
  std::size_t cols = 0;
  tape.check(broadcast_dim(x.rows(), y.rows(), rows) && broadcast_dim(x.cols(), y.cols(), cols),
             op, "operands " + x.shape_string() + " and " + y.shape_string() + " do not broadcast");
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double u = bcast(x, r, c);
      const double v = bcast(y, r, c);
      double w = 0.0;
      switch (op) {
        case Op::kAdd: w = u + v; break;
        case Op::kSub: w = u - v; break;
        case Op::kMul: w = u * v; break;
        case Op::kDiv: w = u / v; break;
        default: break;
      }
      out(r, c) = w;
    }
  }
  Node n;
  n.op = op;
  n.inputs = {a.id(), b.id()};
  n.value = std::move(out);
  return tape.push(std::move(n));
}

template <typename F>
Var unary(Op op, const Var& a, F&& f) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v = f(v);
  Node n;
  n.op = op;
  n.inputs = {a.id()};
  n.value = std::move(out);
  return tape.push(std::move(n));
}

std::size_t reduced_rows(const Tensor& t, Axis axis) {
  return axis == Axis::kCols ? t.rows() : 1;
}
std::size_t reduced_cols(const Tensor& t, Axis axis) {
  return axis == Axis::kRows ? t.cols() : 1;
}
std::size_t reduced_index(std::size_t r, std::size_t c, Axis axis) {
  switch (axis) {
    case Axis::kRows: return c;
    case Axis::kCols: return r;
    case Axis::kAll: return 0;
  }
  return 0;
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

void Tape::check(bool ok, Op op, const std::string& detail) const {
  if (!ok) {
    throw ShapeError("node " + std::to_string(nodes_.size()) + " (" + std::string(op_name(op)) +
                     "): " + detail);
  }
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) {
    throw UsageError("node " + std::to_string(nodes_.size()) + " (constant): non-finite value");
  }
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::input(const std::string& name) {
  if (inputs_ == nullptr || !inputs_->contains(name)) {
    throw UsageError("no input named '" + name + "' bound to the tape");
  }
  const Tensor& t = inputs_->at(name);
  if (!t.all_finite()) throw UsageError("input '" + name + "' contains non-finite values");
  Node n;
  n.op = Op::kInput;
  n.value = t;
  return push(std::move(n));
}

Var Tape::parameter(ParamId id) {
  if (params_ == nullptr || id >= params_->size()) {
    throw UsageError("parameter id " + std::to_string(id) + " not in the attached store");
  }
  const Tensor& t = params_->value(id);
  if (!t.all_finite()) {
    throw UsageError("parameter '" + params_->name(id) + "' contains non-finite values");
  }
  Node n;
  n.op = Op::kParameter;
  n.value = t;
  n.param = id;
  return push(std::move(n));
}

GradMap Tape::backward(const Var& output) const {
  if (output.tape() != this) throw UsageError("backward: output not recorded on this tape");
  const Tensor& v = value(output);
  if (v.rows() != 1 || v.cols() != 1) {
    throw UsageError("backward without a seed requires a scalar output, got " + v.shape_string());
  }
  return backward(output, Tensor::scalar(1.0));
}

GradMap Tape::backward(const Var& output, const Tensor& seed) const {
  if (output.tape() != this || output.id() >= nodes_.size()) {
    throw UsageError("backward: output not recorded on this tape");
  }
  if (!seed.same_shape(nodes_[output.id()].value)) {
    throw UsageError("backward: seed shape " + seed.shape_string() + " != output shape " +
                     nodes_[output.id()].value.shape_string());
  }
  GradMap result;
  if (params_ != nullptr) {
    for (ParamId id = 0; id < params_->size(); ++id) {
      if (params_->trainable(id)) {
        const Tensor& p = params_->value(id);
        result.emplace(id, Tensor(p.rows(), p.cols()));
      }
    }
  }

  std::vector<Tensor> grads(output.id() + 1);
  grads[output.id()] = seed;

  for (std::size_t idx = output.id() + 1; idx-- > 0;) {
    const Tensor& g = grads[idx];
    if (g.empty()) continue;
    const Node& n = nodes_[idx];
    auto in_value = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
    auto grad_of = [&](std::size_t k) -> Tensor& { return grads[n.inputs[k]]; };

    switch (n.op) {
      case Op::kConstant:
      case Op::kInput:
        break;
      case Op::kParameter: {
        auto it = result.find(n.param);
        if (it != result.end()) accumulate(it->second, g);
        break;
      }
      case Op::kMatMul: {
        const Tensor& a = in_value(0);
        const Tensor& b = in_value(1);
        accumulate(grad_of(0), comet::matmul(g, b.transposed()));
        accumulate(grad_of(1), comet::matmul(a.transposed(), g));
        break;
      }
      case Op::kAdd:
      case Op::kSub: {
        const Tensor& a = in_value(0);
        const Tensor& b = in_value(1);
        accumulate(grad_of(0), reduce_to(g, a.rows(), a.cols()));
        Tensor gb = reduce_to(g, b.rows(), b.cols());
        if (n.op == Op::kSub) {
          for (double& v : gb.values()) v = -v;
        }
        accumulate(grad_of(1), gb);
        break;
      }
      case Op::kMul:
      case Op::kDiv: {
        const Tensor& a = in_value(0);
        const Tensor& b = in_value(1);
        Tensor ga(g.rows(), g.cols());
        Tensor gb(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) {
            const double u = bcast(a, r, c);
            const double v = bcast(b, r, c);
            if (n.op == Op::kMul) {
              ga(r, c) = g(r, c) * v;
              gb(r, c) = g(r, c) * u;
            } else {
              ga(r, c) = g(r, c) / v;
              gb(r, c) = -g(r, c) * n.value(r, c) / v;
            }
          }
        }
        accumulate(grad_of(0), reduce_to(ga, a.rows(), a.cols()));
        accumulate(grad_of(1), reduce_to(gb, b.rows(), b.cols()));
        break;
      }
      case Op::kExp: {
        Tensor ga = g;
        auto out = n.value.values();
        auto dst = ga.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] *= out[i];
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kLog: {
        Tensor ga = g;
        auto clamped = n.saved.values();
        auto dst = ga.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] /= clamped[i];
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kSum:
      case Op::kMean: {
        const Tensor& a = in_value(0);
        const double factor =
            n.op == Op::kMean ? static_cast<double>(g.size()) / static_cast<double>(a.size()) : 1.0;
        Tensor ga(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = bcast(g, r, c) * factor;
        }
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kMax: {
        const Tensor& a = in_value(0);
        Tensor ga(a.rows(), a.cols());
        auto gv = g.values();
        for (std::size_t i = 0; i < n.index.size(); ++i) ga.values()[n.index[i]] += gv[i];
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kSoftmax: {
        const Tensor& s = n.value;
        Tensor ga(s.rows(), s.cols());
        for (std::size_t r = 0; r < s.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < s.cols(); ++c) dot += g(r, c) * s(r, c);
          for (std::size_t c = 0; c < s.cols(); ++c) ga(r, c) = s(r, c) * (g(r, c) - dot);
        }
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kLogSumExp: {
        const Tensor& a = in_value(0);
        Tensor ga(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = 0; c < a.cols(); ++c) {
            ga(r, c) = bcast(g, r, c) * std::exp(a(r, c) - bcast(n.value, r, c));
          }
        }
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kSigmoid: {
        Tensor ga = g;
        auto s = n.value.values();
        auto dst = ga.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] *= s[i] * (1.0 - s[i]);
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kRelu: {
        Tensor ga = g;
        auto x = in_value(0).values();
        auto dst = ga.values();
        for (std::size_t i = 0; i < dst.size(); ++i) {
          if (!(x[i] > 0.0)) dst[i] = 0.0;
        }
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kMap: {
        Tensor ga = g;
        auto x = in_value(0).values();
        auto dst = ga.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] *= n.derivative(x[i]);
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kSquaredError: {
        const Tensor& p = in_value(0);
        const Tensor& t = in_value(1);
        const double scale = 2.0 * g.item() / static_cast<double>(p.size());
        Tensor gp(p.rows(), p.cols());
        Tensor gt(p.rows(), p.cols());
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double d = scale * (p.values()[i] - t.values()[i]);
          gp.values()[i] = d;
          gt.values()[i] = -d;
        }
        accumulate(grad_of(0), gp);
        accumulate(grad_of(1), gt);
        break;
      }
      case Op::kBinaryCrossEntropy: {
        const Tensor& z = in_value(0);
        const Tensor& y = in_value(1);
        const double scale = g.item() / static_cast<double>(z.size());
        Tensor gz(z.rows(), z.cols());
        Tensor gy(z.rows(), z.cols());
        for (std::size_t i = 0; i < z.size(); ++i) {
          gz.values()[i] = scale * (logistic(z.values()[i]) - y.values()[i]);
          gy.values()[i] = -scale * z.values()[i];
        }
        accumulate(grad_of(0), gz);
        accumulate(grad_of(1), gy);
        break;
      }
      case Op::kConcat: {
        const Tensor& a = in_value(0);
        const Tensor& b = in_value(1);
        Tensor ga(a.rows(), a.cols());
        Tensor gb(b.rows(), b.cols());
        const bool stack_rows = n.axis == Axis::kRows;
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) {
            if (stack_rows) {
              if (r < a.rows()) ga(r, c) = g(r, c); else gb(r - a.rows(), c) = g(r, c);
            } else {
              if (c < a.cols()) ga(r, c) = g(r, c); else gb(r, c - a.cols()) = g(r, c);
            }
          }
        }
        accumulate(grad_of(0), ga);
        accumulate(grad_of(1), gb);
        break;
      }
      case Op::kGatherRows: {
        const Tensor& a = in_value(0);
        Tensor& slot = grad_of(0);
        if (slot.empty()) slot = Tensor(a.rows(), a.cols());
        for (std::size_t r = 0; r < n.index.size(); ++r) {
          auto dst = slot.row(n.index[r]);
          auto src = g.row(r);
          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
        }
        break;
      }
      case Op::kScatterRows: {
        const Tensor& a = in_value(0);
        Tensor ga(a.rows(), a.cols());
        for (std::size_t r = 0; r < n.index.size(); ++r) {
          auto src = g.row(n.index[r]);
          std::copy(src.begin(), src.end(), ga.row(r).begin());
        }
        accumulate(grad_of(0), ga);
        break;
      }
      case Op::kSliceCols: {
        const Tensor& a = in_value(0);
        const auto begin = n.index[0];
        Tensor& slot = grad_of(0);
        if (slot.empty()) slot = Tensor(a.rows(), a.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) slot(r, begin + c) += g(r, c);
        }
        break;
      }
      case Op::kTranspose:
        accumulate(grad_of(0), g.transposed());
        break;
      case Op::kScale: {
        Tensor ga = g;
        for (double& v : ga.values()) v *= n.attr;
        accumulate(grad_of(0), ga);
        break;
      }
    }
  }
  return result;
}

Var matmul(const Var& a, const Var& b) {
  Tape& tape = tape_of(a, b);
  tape.check(a.value().cols() == b.value().rows(), Op::kMatMul,
             "operands " + a.value().shape_string() + " and " + b.value().shape_string() +
                 " are not conformable");
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {a.id(), b.id()};
  n.value = comet::matmul(a.value(), b.value());
  return tape.push(std::move(n));
}

Var add(const Var& a, const Var& b) { return binary(Op::kAdd, a, b); }
Var sub(const Var& a, const Var& b) { return binary(Op::kSub, a, b); }
Var mul(const Var& a, const Var& b) { return binary(Op::kMul, a, b); }
Var div(const Var& a, const Var& b) { return binary(Op::kDiv, a, b); }

Var exp(const Var& a) {
  return unary(Op::kExp, a, [](double v) { return std::exp(v); });
}

Var log(const Var& a) {
  Tape& tape = tape_of(a);
  Tensor clamped = a.value();
  for (double& v : clamped.values()) v = std::max(v, kLogFloor);
  Tensor out = clamped;
  for (double& v : out.values()) v = std::log(v);
  Node n;
  n.op = Op::kLog;
  n.inputs = {a.id()};
  n.value = std::move(out);
  n.saved = std::move(clamped);
  return tape.push(std::move(n));
}

namespace {

Var reduce(Op op, const Var& a, Axis axis) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  tape.check(!x.empty(), op, "reduction over an empty tensor");
  Tensor out(reduced_rows(x, axis), reduced_cols(x, axis));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) out.values()[reduced_index(r, c, axis)] += x(r, c);
  }
  if (op == Op::kMean) {
    const double count = static_cast<double>(x.size()) / static_cast<double>(out.size());
    for (double& v : out.values()) v /= count;
  }
  Node n;
  n.op = op;
  n.inputs = {a.id()};
  n.value = std::move(out);
  n.axis = axis;
  return tape.push(std::move(n));
}

}  // namespace

Var sum(const Var& a, Axis axis) { return reduce(Op::kSum, a, axis); }
Var mean(const Var& a, Axis axis) { return reduce(Op::kMean, a, axis); }

Var max(const Var& a, Axis axis) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  tape.check(!x.empty(), Op::kMax, "max over an empty tensor");
  Tensor out(reduced_rows(x, axis), reduced_cols(x, axis));
  std::vector<std::size_t> arg(out.size(), x.size());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const std::size_t k = reduced_index(r, c, axis);
      const std::size_t flat = r * x.cols() + c;
      if (arg[k] == x.size() || x(r, c) > out.values()[k]) {
        out.values()[k] = x(r, c);
        arg[k] = flat;
      }
    }
  }
  Node n;
  n.op = Op::kMax;
  n.inputs = {a.id()};
  n.value = std::move(out);
  n.index = std::move(arg);
  n.axis = axis;
  return tape.push(std::move(n));
}

Var softmax(const Var& a) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - m);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  Node n;
  n.op = Op::kSoftmax;
  n.inputs = {a.id()};
  n.value = std::move(out);
  return tape.push(std::move(n));
}

Var logsumexp(const Var& a, Axis axis) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  tape.check(!x.empty(), Op::kLogSumExp, "logsumexp over an empty tensor");
  Tensor m(reduced_rows(x, axis), reduced_cols(x, axis), -HUGE_VAL);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double& slot = m.values()[reduced_index(r, c, axis)];
      slot = std::max(slot, x(r, c));
    }
  }
  Tensor s(m.rows(), m.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const std::size_t k = reduced_index(r, c, axis);
      s.values()[k] += std::exp(x(r, c) - m.values()[k]);
    }
  }
  for (std::size_t k = 0; k < s.size(); ++k) s.values()[k] = m.values()[k] + std::log(s.values()[k]);
  Node n;
  n.op = Op::kLogSumExp;
  n.inputs = {a.id()};
  n.value = std::move(s);
  n.axis = axis;
  return tape.push(std::move(n));
}

Var sigmoid(const Var& a) { return unary(Op::kSigmoid, a, logistic); }

Var relu(const Var& a) {
  return unary(Op::kRelu, a, [](double v) { return v > 0.0 ? v : 0.0; });
}

Var map(const Var& a, UnaryFn f, UnaryFn df) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v = f(v);
  Node n;
  n.op = Op::kMap;
  n.inputs = {a.id()};
  n.value = std::move(out);
  n.derivative = std::move(df);
  return tape.push(std::move(n));
}

Var squared_error(const Var& prediction, const Var& target) {
  Tape& tape = tape_of(prediction, target);
  const Tensor& p = prediction.value();
  const Tensor& t = target.value();
  tape.check(p.same_shape(t) && !p.empty(), Op::kSquaredError,
             "prediction " + p.shape_string() + " vs target " + t.shape_string());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p.values()[i] - t.values()[i];
    s += d * d;
  }
  Node n;
  n.op = Op::kSquaredError;
  n.inputs = {prediction.id(), target.id()};
  n.value = Tensor::scalar(s / static_cast<double>(p.size()));
  return tape.push(std::move(n));
}

Var binary_cross_entropy(const Var& logits, const Var& target) {
  Tape& tape = tape_of(logits, target);
  const Tensor& z = logits.value();
  const Tensor& y = target.value();
  tape.check(z.same_shape(y) && !z.empty(), Op::kBinaryCrossEntropy,
             "logits " + z.shape_string() + " vs target " + y.shape_string());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    s += softplus(z.values()[i]) - y.values()[i] * z.values()[i];
  }
  Node n;
  n.op = Op::kBinaryCrossEntropy;
  n.inputs = {logits.id(), target.id()};
  n.value = Tensor::scalar(s / static_cast<double>(z.size()));
  return tape.push(std::move(n));
}

Var concat(const Var& a, const Var& b, Axis axis) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  tape.check(axis != Axis::kAll, Op::kConcat, "axis must be kRows or kCols");
  const bool stack_rows = axis == Axis::kRows;
  tape.check(stack_rows ? x.cols() == y.cols() : x.rows() == y.rows(), Op::kConcat,
             "operands " + x.shape_string() + " and " + y.shape_string() + " cannot be joined");
  Tensor out(stack_rows ? x.rows() + y.rows() : x.rows(),
             stack_rows ? x.cols() : x.cols() + y.cols());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      if (stack_rows) {
        out(r, c) = r < x.rows() ? x(r, c) : y(r - x.rows(), c);
      } else {
        out(r, c) = c < x.cols() ? x(r, c) : y(r, c - x.cols());
      }
    }
  }
  Node n;
  n.op = Op::kConcat;
  n.inputs = {a.id(), b.id()};
  n.value = std::move(out);
  n.axis = axis;
  return tape.push(std::move(n));
}

Var gather_rows(const Var& a, std::vector<std::size_t> rows) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(rows.size(), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    tape.check(rows[r] < x.rows(), Op::kGatherRows,
               "row " + std::to_string(rows[r]) + " out of range for " + x.shape_string());
    auto src = x.row(rows[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  Node n;
  n.op = Op::kGatherRows;
  n.inputs = {a.id()};
  n.value = std::move(out);
  n.index = std::move(rows);
  return tape.push(std::move(n));
}

Var scatter_rows(const Var& a, std::vector<std::size_t> rows, std::size_t total_rows) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  tape.check(rows.size() == x.rows(), Op::kScatterRows,
             std::to_string(rows.size()) + " indices for " + x.shape_string());
  Tensor out(total_rows, x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    tape.check(rows[r] < total_rows, Op::kScatterRows,
               "row " + std::to_string(rows[r]) + " out of range");
    auto dst = out.row(rows[r]);
    auto src = x.row(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
  Node n;
  n.op = Op::kScatterRows;
  n.inputs = {a.id()};
  n.value = std::move(out);
  n.index = std::move(rows);
  return tape.push(std::move(n));
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  tape.check(begin + count <= x.cols(), Op::kSliceCols,
             "columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                 ") out of range for " + x.shape_string());
  Tensor out(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < count; ++c) out(r, c) = x(r, begin + c);
  }
  Node n;
  n.op = Op::kSliceCols;
  n.inputs = {a.id()};
  n.value = std::move(out);
  n.index = {begin};
  return tape.push(std::move(n));
}

Var transpose(const Var& a) {
  Tape& tape = tape_of(a);
  Node n;
  n.op = Op::kTranspose;
  n.inputs = {a.id()};
  n.value = a.value().transposed();
  return tape.push(std::move(n));
}

Var scale(const Var& a, double factor) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  Node n;
  n.op = Op::kScale;
  n.inputs = {a.id()};
  n.value = std::move(out);
  n.attr = factor;
  return tape.push(std::move(n));
}

Tensor Graph::forward(const ParameterStore& params, NamedTensors inputs) {
  inputs_ = std::move(inputs);
  tape_.reset();
  tape_.emplace(&params, &inputs_);
  output_ = builder_(*tape_);
  if (output_.tape() != &*tape_) throw UsageError("graph builder returned a foreign Var");
  return output_.value();
}

const Tape& Graph::tape() const {
  if (!tape_) throw UsageError("graph has not been run forward");
  return *tape_;
}

GradMap Graph::backward(const Tensor& seed) const {
  if (!tape_) throw UsageError("backward called before forward");
  return tape_->backward(output_, seed);
}

GradMap Graph::backward() const {
  if (!tape_) throw UsageError("backward called before forward");
  return tape_->backward(output_);
}

GradCheckResult grad_check(Graph& graph, ParameterStore& params, const NamedTensors& inputs,
                           double eps) {
  if (!(eps > 0.0)) throw UsageError("grad_check: eps must be positive");
  const Tensor out = graph.forward(params, inputs);
  if (out.rows() != 1 || out.cols() != 1) {
    throw UsageError("grad_check: graph output must be scalar, got " + out.shape_string());
  }
  const GradMap analytic = graph.backward();

  GradCheckResult res;
  for (const auto& [id, grad] : analytic) {
    Tensor& value = params.value(id);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value.values()[i];
      value.values()[i] = orig + eps;
      const double plus = graph.forward(params, inputs).item();
      value.values()[i] = orig - eps;
      const double minus = graph.forward(params, inputs).item();
      value.values()[i] = orig;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = grad.values()[i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++res.checked;
      if (err > res.max_relative_error) {
        res.max_relative_error = err;
        res.worst_param = id;
        res.worst_index = i;
      }
    }
  }
  graph.forward(params, inputs);
  return res;
}

}  // namespace comet::ad
