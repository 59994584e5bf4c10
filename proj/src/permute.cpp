#include "comet/permute.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "comet/error.hpp"

namespace comet::permute {

namespace {

void check_sinkhorn_args(std::size_t rows, std::size_t cols, double tau, std::size_t iterations) {
  if (rows != cols || rows == 0) {
    throw ShapeError("sinkhorn: score matrix must be square and nonempty");
  }
  if (!(tau > 0.0)) throw UsageError("sinkhorn: tau must be positive");
  if (iterations < 1) throw UsageError("sinkhorn: need at least one iteration");
}

void normalize_log_rows(Tensor& l) {
  for (std::size_t r = 0; r < l.rows(); ++r) {
    auto row = l.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    const double lse = m + std::log(s);
    for (double& v : row) v -= lse;
  }
}

void normalize_log_cols(Tensor& l) {
  for (std::size_t c = 0; c < l.cols(); ++c) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < l.rows(); ++r) m = std::max(m, l(r, c));
    double s = 0.0;
    for (std::size_t r = 0; r < l.rows(); ++r) s += std::exp(l(r, c) - m);
    const double lse = m + std::log(s);
    for (std::size_t r = 0; r < l.rows(); ++r) l(r, c) -= lse;
  }
}

// Minimum-cost perfect matching on a square cost matrix (potentials form of
// the Hungarian method, O(n^3)). Returns row -> column.
std::vector<std::size_t> hungarian_min(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is a virtual start.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

// Best achievable score over rows [first, n) using only unused columns.
double best_completion(const Tensor& scores, std::size_t first, const std::vector<bool>& used) {
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    if (!used[c]) cols.push_back(c);
  }
  const std::size_t m = scores.rows() - first;
  if (m == 0) return 0.0;
  std::vector<std::vector<double>> cost(m, std::vector<double>(m));
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < m; ++c) cost[r][c] = -scores(first + r, cols[c]);
  }
  const auto a = hungarian_min(cost);
  double s = 0.0;
  for (std::size_t r = 0; r < m; ++r) s += scores(first + r, cols[a[r]]);
  return s;
}

}  // namespace

Tensor sinkhorn(const Tensor& scores, double tau, std::size_t iterations) {
  check_sinkhorn_args(scores.rows(), scores.cols(), tau, iterations);
  Tensor l = scores;
  for (double& v : l.values()) v /= tau;
  for (std::size_t r = 0; r < iterations; ++r) {
    normalize_log_rows(l);
    normalize_log_cols(l);
  }
  for (double& v : l.values()) v = std::exp(v);
  return l;
}

ad::Var sinkhorn(const ad::Var& scores, double tau, std::size_t iterations) {
  check_sinkhorn_args(scores.rows(), scores.cols(), tau, iterations);
  ad::Var l = ad::scale(scores, 1.0 / tau);
  for (std::size_t r = 0; r < iterations; ++r) {
    l = l - ad::logsumexp(l, ad::Axis::kCols);
    l = l - ad::logsumexp(l, ad::Axis::kRows);
  }
  return ad::exp(l);
}

std::vector<std::size_t> solve_assignment(const Tensor& scores) {
  if (scores.rows() != scores.cols()) throw ShapeError("matching: score matrix must be square");
  const std::size_t n = scores.rows();
  if (n == 0) throw UsageError("matching: empty score matrix");
  if (!scores.all_finite()) throw UsageError("matching: non-finite scores");

  std::vector<bool> used(n, false);
  const double optimum = best_completion(scores, 0, used);
  double scale = 1.0;
  for (double v : scores.values()) scale = std::max(scale, std::abs(v));
  const double tol = 64.0 * std::numeric_limits<double>::epsilon() * static_cast<double>(n) * scale;

  // Fix rows in order, taking the smallest column that still admits an
  // optimal completion.
  std::vector<std::size_t> assignment(n);
  double prefix = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    bool placed = false;
    for (std::size_t c = 0; c < n && !placed; ++c) {
      if (used[c]) continue;
      used[c] = true;
      const double total = prefix + scores(r, c) + best_completion(scores, r + 1, used);
      if (total >= optimum - tol) {
        assignment[r] = c;
        prefix += scores(r, c);
        placed = true;
      } else {
        used[c] = false;
      }
    }
    if (!placed) throw Error("matching: no optimal completion found (numerical failure)");
  }
  return assignment;
}

Tensor matching(const Tensor& scores) { return permutation_matrix(solve_assignment(scores)); }

Tensor permutation_matrix(std::span<const std::size_t> assignment) {
  const std::size_t n = assignment.size();
  Tensor p(n, n);
  for (std::size_t r = 0; r < n; ++r) {
    if (assignment[r] >= n) throw UsageError("permutation_matrix: column out of range");
    p(r, assignment[r]) = 1.0;
  }
  if (!is_permutation_matrix(p)) throw UsageError("permutation_matrix: not a bijection");
  return p;
}

bool is_permutation_matrix(const Tensor& p) {
  if (p.rows() != p.cols()) return false;
  const std::size_t n = p.rows();
  std::vector<int> col_count(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    int row_count = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const double v = p(r, c);
      if (v == 1.0) {
        ++row_count;
        ++col_count[c];
      } else if (v != 0.0) {
        return false;
      }
    }
    if (row_count != 1) return false;
  }
  return std::all_of(col_count.begin(), col_count.end(), [](int c) { return c == 1; });
}

Schedule schedule(std::size_t step, std::size_t total, const ScheduleConfig& config) {
  if (total < 1) throw UsageError("schedule: total steps must be >= 1");
  if (step > total) throw UsageError("schedule: step beyond total");
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  const double r0 = static_cast<double>(config.iterations_start);
  const double r1 = static_cast<double>(config.iterations_end);
  const auto iterations = static_cast<std::size_t>(std::llround(r0 + (r1 - r0) * frac));
  const double l0 = std::log10(config.tau_start);
  const double l1 = std::log10(config.tau_end);
  return {iterations, std::pow(10.0, l0 + (l1 - l0) * frac)};
}

double anti_degeneracy_penalty(const Tensor& b, double zeta) {
  if (zeta < 0.0) throw UsageError("anti_degeneracy_penalty: zeta must be >= 0");
  if (zeta == 0.0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < b.rows(); ++r) {
    auto row = b.row(r);
    double row_sum = 0.0;
    for (double v : row) row_sum += v;
    for (double v : row) {
      if (v > 0.0) {
        total -= v * std::log(v);
        const double w = v / row_sum;
        total -= w * std::log(w);
      }
    }
  }
  return zeta * total;
}

ad::Var anti_degeneracy_penalty(const ad::Var& b, double zeta) {
  if (zeta < 0.0) throw UsageError("anti_degeneracy_penalty: zeta must be >= 0");
  const ad::Var normalized = b / ad::sum(b, ad::Axis::kCols);
  const ad::Var h = ad::sum(b * ad::log(b)) + ad::sum(normalized * ad::log(normalized));
  return ad::scale(h, -zeta);
}

PermutationSearch PermutationSearch::initialize(std::size_t n, double init_sd,
                                                std::mt19937_64& rng) {
  if (n < 1) throw UsageError("permutation search: n must be >= 1");
  PermutationSearch s;
  s.scores = Tensor(n, n);
  if (init_sd > 0.0) {
    std::normal_distribution<double> dist(0.0, init_sd);
    for (double& v : s.scores.values()) v = dist(rng);
  }
  return s;
}

const Tensor& harden(PermutationSearch& search, double tau, std::size_t iterations) {
  if (!search.scores.all_finite()) throw UsageError("harden: non-finite scores");
  search.hard = matching(sinkhorn(search.scores, tau, iterations));
  return *search.hard;
}

std::vector<double> apply_permutation(const Tensor& p, std::span<const double> g) {
  if (p.rows() != p.cols() || p.cols() != g.size()) {
    throw ShapeError("apply_permutation: matrix " + p.shape_string() + " vs vector of " +
                     std::to_string(g.size()));
  }
  std::vector<double> out(p.rows(), 0.0);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    for (std::size_t c = 0; c < p.cols(); ++c) out[r] += p(r, c) * g[c];
  }
  return out;
}

}  // namespace comet::permute
