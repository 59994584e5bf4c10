#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "comet/autodiff.hpp"
#include "comet/tensor.hpp"

namespace comet::permute {

/// S^R(U / tau): R alternations of row then column normalization applied to
/// exp(U / tau). Evaluated in the log domain, so the last (column)
/// normalization is exact up to rounding and no intermediate overflows.
Tensor sinkhorn(const Tensor& scores, double tau, std::size_t iterations);
ad::Var sinkhorn(const ad::Var& scores, double tau, std::size_t iterations);

/// Row r is assigned column assignment[r]. Maximizes sum_r U[r, assignment[r]];
/// among optimal assignments returns the lexicographically smallest sequence.
std::vector<std::size_t> solve_assignment(const Tensor& scores);

/// Permutation matrix P maximizing <P, U>_F (Hungarian method).
Tensor matching(const Tensor& scores);

Tensor permutation_matrix(std::span<const std::size_t> assignment);
bool is_permutation_matrix(const Tensor& p);

struct ScheduleConfig {
  double tau_start = 1e-3;
  double tau_end = 1e-7;
  std::size_t iterations_start = 20;
  std::size_t iterations_end = 150;
};

struct Schedule {
  std::size_t iterations;
  double tau;
};

/// Linear ramp of the iteration count and log-linear ramp of tau over
/// `total` optimizer steps.
Schedule schedule(std::size_t step, std::size_t total, const ScheduleConfig& config = {});

/// zeta * sum over rows of (entropy of the row of B + entropy of the row of
/// the row-normalized B).
double anti_degeneracy_penalty(const Tensor& b, double zeta);
ad::Var anti_degeneracy_penalty(const ad::Var& b, double zeta);

struct PermutationSearch {
  Tensor scores;  // U, n x n
  ScheduleConfig schedule;
  double zeta = 1e-4;
  std::size_t stage1_steps = 0;
  std::optional<Tensor> hard;

  std::size_t size() const { return scores.rows(); }

  /// Scores drawn i.i.d. Normal(0, init_sd^2).
  static PermutationSearch initialize(std::size_t n, double init_sd, std::mt19937_64& rng);
};

/// Fixes search.hard = matching(sinkhorn(U, tau, R)) and returns it.
const Tensor& harden(PermutationSearch& search, double tau, std::size_t iterations);

/// Matrix-vector product P g.
std::vector<double> apply_permutation(const Tensor& p, std::span<const double> g);

}  // namespace comet::permute
