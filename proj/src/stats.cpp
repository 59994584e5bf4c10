#include "comet/stats.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <limits>
#include <random>

#include "comet/error.hpp"

namespace comet::stats {

double mean(std::span<const double> xs) {
  if (xs.empty()) throw UsageError("mean of an empty sample");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double stddev(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

double standard_error(std::span<const double> xs) {
  if (xs.empty()) throw UsageError("standard error of an empty sample");
  return stddev(xs) / std::sqrt(static_cast<double>(xs.size()));
}

TTest t_test_less(std::span<const double> a, std::span<const double> b, bool pooled) {
  if (a.size() < 2 || b.size() < 2) throw UsageError("t-test needs at least 2 values per sample");
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double va = stddev(a) * stddev(a);
  const double vb = stddev(b) * stddev(b);
  const double diff = mean(a) - mean(b);

  TTest r;
  double se2 = 0.0;
  if (pooled) {
    r.df = na + nb - 2.0;
    const double sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / r.df;
    se2 = sp2 * (1.0 / na + 1.0 / nb);
  } else {
    const double qa = va / na;
    const double qb = vb / nb;
    se2 = qa + qb;
    const double denom = qa * qa / (na - 1.0) + qb * qb / (nb - 1.0);
    r.df = denom > 0.0 ? se2 * se2 / denom : na + nb - 2.0;
  }
  if (se2 == 0.0) {
    r.t = diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
    r.p_value = diff == 0.0 ? 0.5 : (diff < 0.0 ? 0.0 : 1.0);
    return r;
  }
  r.t = diff / std::sqrt(se2);
  boost::math::students_t dist(r.df);
  r.p_value = boost::math::cdf(dist, r.t);
  return r;
}

std::vector<CurvePoint> bootstrap_curve(std::span<const Trial> trials,
                                        std::span<const std::size_t> s_values,
                                        std::size_t repeats, std::uint64_t seed) {
  if (trials.empty()) throw UsageError("bootstrap: no trials");
  if (repeats < 1) throw UsageError("bootstrap: repeats must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, trials.size() - 1);
  std::vector<CurvePoint> curve;
  std::vector<double> selected(repeats);
  for (std::size_t s : s_values) {
    if (s < 1) throw UsageError("bootstrap: s must be >= 1");
    if (s > trials.size()) {
      throw UsageError("bootstrap: s=" + std::to_string(s) + " exceeds the " +
                       std::to_string(trials.size()) + " available trials");
    }
    for (std::size_t r = 0; r < repeats; ++r) {
      std::size_t best = pick(rng);
      for (std::size_t i = 1; i < s; ++i) {
        const std::size_t j = pick(rng);
        if (trials[j].validation_loss < trials[best].validation_loss) best = j;
      }
      selected[r] = trials[best].test_loss;
    }
    CurvePoint pt;
    pt.s = s;
    pt.mean = mean(selected);
    pt.stddev = stddev(selected);
    pt.mc_error = pt.stddev / std::sqrt(static_cast<double>(repeats));
    curve.push_back(pt);
  }
  return curve;
}

std::vector<std::size_t> default_s_grid() {
  std::vector<std::size_t> grid = {1, 2};
  for (std::size_t s = 5; s <= 250; s += 5) grid.push_back(s);
  return grid;
}

}  // namespace comet::stats
