#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "comet/error.hpp"
#include "comet/permute.hpp"

using namespace comet;
using namespace comet::permute;

namespace {

Tensor random_scores(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Tensor u(n, n);
  for (double& v : u.values()) v = d(rng);
  return u;
}

std::vector<std::size_t> brute_force(const Tensor& u) {
  std::vector<std::size_t> perm(u.rows()), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_sum = -INFINITY;
  do {
    double s = 0.0;
    for (std::size_t r = 0; r < perm.size(); ++r) s += u(r, perm[r]);
    if (s > best_sum) {
      best_sum = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double max_row_deviation(const Tensor& s) {
  double dev = 0.0;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double sum = 0.0;
    for (double v : s.row(r)) sum += v;
    dev = std::max(dev, std::abs(sum - 1.0));
  }
  return dev;
}

double max_col_deviation(const Tensor& s) {
  double dev = 0.0;
  for (std::size_t c = 0; c < s.cols(); ++c) {
    double sum = 0.0;
    for (std::size_t r = 0; r < s.rows(); ++r) sum += s(r, c);
    dev = std::max(dev, std::abs(sum - 1.0));
  }
  return dev;
}

}  // namespace

TEST_SUITE("permute") {
  TEST_CASE("sinkhorn of zeros is uniform") {
    for (double tau : {1e-7, 1.0, 10.0}) {
      const Tensor s = sinkhorn(Tensor(4, 4, 0.0), tau, 1);
      for (double v : s.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    }
  }

  TEST_CASE("sinkhorn of a diagonal-dominant matrix approaches the identity") {
    Tensor u(3, 3, 0.0);
    for (std::size_t i = 0; i < 3; ++i) u(i, i) = 10.0;
    const Tensor s = sinkhorn(u, 0.1, 150);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(std::abs(s.values()[i] - Tensor::identity(3).values()[i]) < 1e-3);
    }
    CHECK(matching(s) == Tensor::identity(3));
  }

  TEST_CASE("sinkhorn matches a frozen reference") {
    // Log-domain recursion run in numpy/scipy for tau = 0.5, R = 3.
    const Tensor u(3, 3, {0.3, -1.2, 0.5, 1.1, 0.0, -0.4, 0.2, 0.9, -0.7});
    const Tensor expected(3, 3, {0.18142454854440399, 0.01739397918072029, 0.8361379008778667,
                                 0.7122065685260072, 0.15196530817989, 0.10954349550161704,
                                 0.10636888292958892, 0.8306407126393897, 0.0543186036205163});
    const Tensor s = sinkhorn(u, 0.5, 3);
    for (std::size_t i = 0; i < 9; ++i) CHECK(s.values()[i] == doctest::Approx(expected.values()[i]).epsilon(1e-13));
  }

  TEST_CASE("sinkhorn columns are exactly normalized and never overflow") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 50; ++i) {
      const Tensor s = sinkhorn(random_scores(8, rng), 1e-7, 20);
      CHECK(s.all_finite());
      CHECK(max_col_deviation(s) < 1e-12);
    }
  }

  TEST_CASE("row deviation shrinks with more iterations") {
    std::mt19937_64 rng(2);
    const std::vector<std::size_t> rs = {1, 5, 20, 80};
    std::vector<double> mean_dev(rs.size(), 0.0);
    for (int seed = 0; seed < 100; ++seed) {
      const Tensor u = random_scores(6, rng);
      for (std::size_t i = 0; i < rs.size(); ++i) mean_dev[i] += max_row_deviation(sinkhorn(u, 0.3, rs[i])) / 100;
    }
    for (std::size_t i = 1; i < rs.size(); ++i) CHECK(mean_dev[i] < mean_dev[i - 1]);
  }

  TEST_CASE("tape sinkhorn matches the plain version and its gradient") {
    std::mt19937_64 rng(3);
    ad::ParameterStore ps;
    const auto id = ps.add("u", random_scores(4, rng));
    const Tensor weights = random_scores(4, rng);
    ad::Graph g([&](ad::Tape& t) {
      return ad::sum(ad::mul(sinkhorn(t.parameter(id), 0.05, 30), t.constant(weights)));
    });
    g.forward(ps);
    const Tensor plain = sinkhorn(ps.value(id), 0.05, 30);
    double expect = 0.0;
    for (std::size_t i = 0; i < 16; ++i) expect += plain.values()[i] * weights.values()[i];
    CHECK(g.forward(ps).item() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(ad::grad_check(g, ps, {}, 1e-6).max_relative_error < 1e-4);
  }

  TEST_CASE("matching examples") {
    CHECK(matching(Tensor(2, 2, {2, 1, 1, 2})) == Tensor::identity(2));
    CHECK(matching(Tensor(2, 2, {1, 2, 2, 1})) == Tensor(2, 2, {0, 1, 1, 0}));
    for (double c : {1e-9, 1.0, 1e9}) {
      Tensor u = Tensor::identity(5);
      for (double& v : u.values()) v *= c;
      CHECK(matching(u) == Tensor::identity(5));
    }
    CHECK(matching(Tensor(3, 3, 0.0)) == Tensor::identity(3));
    CHECK(matching(Tensor(1, 1, {-4.0})) == Tensor(1, 1, {1.0}));
  }

  TEST_CASE("matching agrees with brute force including ties") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> small(-2, 2);
    for (int i = 0; i < 300; ++i) {
      const std::size_t n = 1 + i % 6;
      Tensor u = random_scores(n, rng);
      if (i % 3 == 0) {
        for (double& v : u.values()) v = small(rng);
      }
      CAPTURE(i);
      CHECK(solve_assignment(u) == brute_force(u));
    }
  }

  TEST_CASE("matching handles non-finite input") {
    CHECK_THROWS_AS(matching(Tensor(2, 2, {NAN, 0, 0, 0})), UsageError);
  }

  TEST_CASE("harden always yields a permutation matrix") {
    std::mt19937_64 rng(5);
    for (std::size_t n = 1; n <= 10; ++n) {
      auto search = PermutationSearch::initialize(n, 0.01, rng);
      const Tensor& p = harden(search, 1e-3, 20);
      CHECK(is_permutation_matrix(p));
      CHECK(search.hard.has_value());
    }
    PermutationSearch diag;
    diag.scores = Tensor::identity(4);
    CHECK(harden(diag, 1e-3, 20) == Tensor::identity(4));
  }

  TEST_CASE("schedule endpoints and midpoint") {
    const auto a = schedule(0, 100);
    CHECK(a.iterations == 20);
    CHECK(a.tau == doctest::Approx(1e-3).epsilon(1e-12));
    const auto b = schedule(100, 100);
    CHECK(b.iterations == 150);
    CHECK(b.tau == doctest::Approx(1e-7).epsilon(1e-12));
    const auto m = schedule(50, 100);
    CHECK(m.iterations == 85);
    CHECK(m.tau == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK_THROWS_AS(schedule(101, 100), UsageError);
    CHECK_THROWS_AS(schedule(0, 0), UsageError);
  }

  TEST_CASE("anti-degeneracy penalty") {
    CHECK(anti_degeneracy_penalty(permutation_matrix(std::vector<std::size_t>{2, 0, 1}), 3.0) == 0.0);
    Tensor b = Tensor::identity(4);
    b(0, 0) = b(0, 1) = b(1, 0) = b(1, 1) = 0.5;
    CHECK(anti_degeneracy_penalty(b, 1.0) == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-14));
    CHECK(anti_degeneracy_penalty(b, 0.0) == 0.0);
    ad::Tape t;
    CHECK(anti_degeneracy_penalty(t.constant(b), 1.0).value().item() ==
          doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-14));
  }

  TEST_CASE("applying a permutation") {
    const std::vector<double> g = {0.7, 0.3};
    CHECK(apply_permutation(Tensor::identity(2), g) == g);
    CHECK(apply_permutation(Tensor(2, 2, {0, 1, 1, 0}), g) == std::vector<double>{0.3, 0.7});
    const auto u = apply_permutation(Tensor(3, 3, 1.0 / 3), std::vector<double>{0.6, 0.4, 0.0});
    for (double v : u) CHECK(v == doctest::Approx(1.0 / 3));

    std::mt19937_64 rng(6);
    for (int i = 0; i < 50; ++i) {
      std::vector<std::size_t> a(7);
      std::iota(a.begin(), a.end(), 0);
      std::shuffle(a.begin(), a.end(), rng);
      const std::vector<double> gv = {0, 0.1, 0.4, 0, 0.2, 0, 0.3};
      auto out = apply_permutation(permutation_matrix(a), gv);
      auto sorted_in = gv;
      std::sort(out.begin(), out.end());
      std::sort(sorted_in.begin(), sorted_in.end());
      CHECK(out == sorted_in);
    }
  }
}
