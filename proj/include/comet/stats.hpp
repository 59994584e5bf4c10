#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace comet::stats {

double mean(std::span<const double> xs);
/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
double stddev(std::span<const double> xs);
/// stddev / sqrt(n).
double standard_error(std::span<const double> xs);

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p_value = 0.0;
};

/// One-sided unpaired test of H1: mean(a) < mean(b).
/// `pooled` selects Student's equal-variance statistic; otherwise Welch's.
TTest t_test_less(std::span<const double> a, std::span<const double> b, bool pooled = false);

struct Trial {
  double validation_loss = 0.0;
  double test_loss = 0.0;
};

struct CurvePoint {
  std::size_t s = 0;
  double mean = 0.0;      // mean test loss of the selected trial
  double stddev = 0.0;    // spread of the selected test loss across repeats
  double mc_error = 0.0;  // stddev / sqrt(repeats)
};

/// For each s: `repeats` times draw s trials with replacement, keep the one
/// with the lowest validation loss (first drawn on ties) and record its test
/// loss.
std::vector<CurvePoint> bootstrap_curve(std::span<const Trial> trials,
                                        std::span<const std::size_t> s_values,
                                        std::size_t repeats, std::uint64_t seed);

/// {1, 2, 5, 10, 15, ..., 250}.
std::vector<std::size_t> default_s_grid();

}  // namespace comet::stats
