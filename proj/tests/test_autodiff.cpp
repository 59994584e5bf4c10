#include <doctest.h>

#include <cmath>
#include <random>

#include "comet/autodiff.hpp"
#include "comet/error.hpp"

using namespace comet;
using namespace comet::ad;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Tensor t(r, c);
  for (double& v : t.values()) v = d(rng);
  return t;
}

// Central differences of a scalar graph over every entry of one parameter.
Tensor numeric_grad(Graph& g, ParameterStore& ps, ParamId id, double eps = 1e-6) {
  Tensor out(ps.value(id).rows(), ps.value(id).cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double& x = ps.value(id).values()[i];
    const double orig = x;
    x = orig + eps;
    const double plus = g.forward(ps).item();
    x = orig - eps;
    const double minus = g.forward(ps).item();
    x = orig;
    out.values()[i] = (plus - minus) / (2 * eps);
  }
  return out;
}

double max_rel(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.values()[i] - b.values()[i]) / std::max(1.0, std::abs(a.values()[i])));
  }
  return m;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction and access") {
    Tensor t(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(t(1, 2) == 6);
    CHECK(t.shape_string() == "[2x3]");
    CHECK(t.transposed()(2, 1) == 6);
    CHECK_THROWS_AS(Tensor(2, 2, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor(2, 2).item(), ShapeError);
    CHECK(Tensor::identity(3)(1, 1) == 1.0);
  }

  TEST_CASE("matmul") {
    Tensor a(2, 2, {1, 2, 3, 4});
    Tensor b(2, 1, {5, 6});
    CHECK(matmul(a, b) == Tensor(2, 1, {17, 39}));
    CHECK_THROWS_AS(matmul(b, b), ShapeError);
  }
}

TEST_SUITE("autodiff") {
  TEST_CASE("forward examples") {
    ParameterStore ps;
    const ParamId x = ps.add("x", Tensor::scalar(3.0));
    Graph square([&](Tape& t) { return t.parameter(x) * t.parameter(x); });
    CHECK(square.forward(ps).item() == 9.0);
    CHECK(square.backward().at(x).item() == 6.0);

    Graph sm([](Tape& t) { return softmax(t.constant(Tensor(1, 2, {0.0, 0.0}))); });
    CHECK(sm.forward(ps) == Tensor(1, 2, {0.5, 0.5}));

    Graph inv([](Tape& t) { return log(exp(t.scalar(2.5))); });
    CHECK(inv.forward(ps).item() == doctest::Approx(2.5).epsilon(1e-12));
  }

  TEST_CASE("backward before forward is a usage error") {
    Graph g([](Tape& t) { return t.scalar(1.0); });
    CHECK_THROWS_AS(g.backward(), UsageError);
  }

  TEST_CASE("shape errors name the node") {
    Tape t;
    const Var a = t.constant(Tensor(2, 3));
    const Var b = t.constant(Tensor(3, 2));
    try {
      add(a, b);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("add") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
  }

  TEST_CASE("entropy through softmax matches finite differences") {
    ParameterStore ps;
    const ParamId z = ps.add("z", Tensor(1, 2, {0.0, 0.0}));
    Graph g([&](Tape& t) {
      const Var v = softmax(t.parameter(z));
      return scale(sum(mul(v, log(v))), -1.0);
    });
    CHECK(g.forward(ps).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    ps.value(z) = Tensor(1, 2, {0.3, -0.4});
    g.forward(ps);
    const Tensor analytic = g.backward().at(z);
    CHECK(max_rel(analytic, numeric_grad(g, ps, z, 1e-5)) < 1e-6);
  }

  TEST_CASE("linear regression grad_check") {
    std::mt19937_64 rng(1);
    ParameterStore ps;
    const ParamId w = ps.add("w", random_tensor(3, 1, rng));
    const ParamId b = ps.add("b", random_tensor(1, 1, rng));
    const Tensor x = random_tensor(10, 3, rng);
    const Tensor y = random_tensor(10, 1, rng);
    Graph g([&](Tape& t) {
      return squared_error(add(matmul(t.input("x"), t.parameter(w)), t.parameter(b)), t.input("y"));
    });
    const auto r = grad_check(g, ps, {{"x", x}, {"y", y}}, 1e-5);
    CHECK(r.checked == 4);
    CHECK(r.max_relative_error < 1e-6);
  }

  TEST_CASE("parameters that do not reach the output get exactly zero") {
    ParameterStore ps;
    const ParamId used = ps.add("used", Tensor::scalar(2.0));
    const ParamId unused = ps.add("unused", Tensor(2, 2, 7.0));
    const ParamId frozen = ps.add("frozen", Tensor::scalar(1.0), false);
    Graph g([&](Tape& t) { return mul(t.parameter(used), t.parameter(frozen)); });
    g.forward(ps);
    const GradMap grads = g.backward();
    CHECK(grads.at(unused) == Tensor(2, 2, 0.0));
    CHECK(grads.count(frozen) == 0);
    CHECK(grads.at(used).item() == 1.0);
  }

  TEST_CASE("grad_check rejects non-scalar outputs") {
    ParameterStore ps;
    ps.add("a", Tensor(2, 2, 1.0));
    Graph g([](Tape& t) { return t.parameter(0); });
    CHECK_THROWS_AS(grad_check(g, ps, {}, 1e-6), UsageError);
  }

  TEST_CASE("log clamps at the floor") {
    Tape t;
    CHECK(log(t.scalar(0.0)).value().item() == std::log(kLogFloor));
  }

  TEST_CASE("every primitive matches central differences") {
    std::mt19937_64 rng(7);
    ParameterStore ps;
    const ParamId a = ps.add("a", random_tensor(3, 4, rng));
    const ParamId b = ps.add("b", random_tensor(3, 4, rng));
    const ParamId row = ps.add("row", random_tensor(1, 4, rng));
    const ParamId col = ps.add("col", random_tensor(3, 1, rng));
    const ParamId pos = ps.add("pos", Tensor(3, 4, 1.5));
    const ParamId m = ps.add("m", random_tensor(4, 2, rng));
    for (double& v : ps.value(pos).values()) v += std::uniform_real_distribution<double>(0, 1)(rng);

    using Build = std::function<Var(Tape&)>;
    auto P = [](Tape& t, ParamId id) { return t.parameter(id); };
    const std::vector<std::pair<const char*, Build>> cases = {
        {"matmul", [&](Tape& t) { return sum(matmul(P(t, a), P(t, m))); }},
        {"add broadcast row", [&](Tape& t) { return sum(mul(add(P(t, a), P(t, row)), P(t, b))); }},
        {"sub broadcast col", [&](Tape& t) { return sum(mul(sub(P(t, a), P(t, col)), P(t, b))); }},
        {"mul", [&](Tape& t) { return sum(mul(P(t, a), P(t, b))); }},
        {"div", [&](Tape& t) { return sum(div(P(t, a), P(t, pos))); }},
        {"div broadcast", [&](Tape& t) { return sum(div(P(t, row), P(t, pos))); }},
        {"exp", [&](Tape& t) { return sum(mul(exp(P(t, a)), P(t, b))); }},
        {"log", [&](Tape& t) { return sum(mul(log(P(t, pos)), P(t, b))); }},
        {"sum rows", [&](Tape& t) { return sum(mul(sum(P(t, a), Axis::kRows), P(t, row))); }},
        {"sum cols", [&](Tape& t) { return sum(mul(sum(P(t, a), Axis::kCols), P(t, col))); }},
        {"mean", [&](Tape& t) { return sum(mul(mean(P(t, a), Axis::kCols), P(t, col))); }},
        {"max", [&](Tape& t) { return sum(mul(max(P(t, a), Axis::kCols), P(t, col))); }},
        {"softmax", [&](Tape& t) { return sum(mul(softmax(P(t, a)), P(t, b))); }},
        {"logsumexp", [&](Tape& t) { return sum(mul(logsumexp(P(t, a), Axis::kRows), P(t, row))); }},
        {"sigmoid", [&](Tape& t) { return sum(mul(sigmoid(P(t, a)), P(t, b))); }},
        {"relu", [&](Tape& t) { return sum(mul(relu(P(t, a)), P(t, b))); }},
        {"map", [&](Tape& t) {
           return sum(map(P(t, a), [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); }));
         }},
        {"squared_error", [&](Tape& t) { return squared_error(P(t, a), P(t, b)); }},
        {"bce", [&](Tape& t) { return binary_cross_entropy(P(t, col), t.constant(Tensor(3, 1, {0, 1, 1}))); }},
        {"concat cols", [&](Tape& t) { return sum(mul(concat(P(t, a), P(t, col), Axis::kCols), concat(P(t, b), P(t, col), Axis::kCols))); }},
        {"concat rows", [&](Tape& t) { return sum(mul(concat(P(t, a), P(t, row), Axis::kRows), concat(P(t, b), P(t, row), Axis::kRows))); }},
        {"gather", [&](Tape& t) { return sum(mul(gather_rows(P(t, a), {2, 0, 2}), P(t, b))); }},
        {"scatter", [&](Tape& t) { return sum(mul(scatter_rows(P(t, row), {1}, 3), P(t, b))); }},
        {"slice", [&](Tape& t) { return sum(mul(slice_cols(P(t, a), 1, 2), slice_cols(P(t, b), 0, 2))); }},
        {"transpose", [&](Tape& t) { return sum(matmul(transpose(P(t, m)), transpose(P(t, a)))); }},
        {"scale", [&](Tape& t) { return sum(mul(scale(P(t, a), -2.5), P(t, b))); }},
    };
    for (const auto& [name, build] : cases) {
      CAPTURE(name);
      Graph g(build);
      auto r = grad_check(g, ps, {}, 1e-6);
      CHECK(r.max_relative_error < 1e-6);
    }
  }

  TEST_CASE("gather accumulates repeated rows") {
    ParameterStore ps;
    const ParamId e = ps.add("e", Tensor(3, 2, 1.0));
    Graph g([&](Tape& t) { return sum(gather_rows(t.parameter(e), {1, 1, 2})); });
    g.forward(ps);
    CHECK(g.backward().at(e) == Tensor(3, 2, {0, 0, 2, 2, 1, 1}));
  }

  TEST_CASE("tape replays identically") {
    std::mt19937_64 rng(2);
    ParameterStore ps;
    const ParamId a = ps.add("a", random_tensor(4, 4, rng));
    Graph g([&](Tape& t) { return sum(softmax(matmul(t.parameter(a), t.parameter(a)))); });
    const double first = g.forward(ps).item();
    const Tensor grad = g.backward().at(a);
    CHECK(g.forward(ps).item() == first);
    CHECK(g.backward().at(a) == grad);
  }
}
