// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "comet/cli.hpp"

using namespace comet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, double limit_seconds, const std::function<Outcome()>& body) {
  const auto start = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  if (limit_seconds > 0 && secs > limit_seconds) {
    o.pass = false;
    o.detail += " (over time limit)";
  }
  if (!o.pass) ++failures;
  std::printf("%s %d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto ds = data::synth_cluster_moe(11, 4, 6, 64, 0.1);
  moe::ModelConfig mc;
  mc.n_features = 6;
  mc.n_experts = 4;
  mc.k = 2;
  mc.expert_hidden = {8};
  mc.gamma = 1.0;
  mc.lambda_entropy = 0.1;
  mc.local_search = true;
  mc.zeta = 1e-2;
  mc.u_init_sd = 0.1;
  std::vector<std::size_t> rows(8);
  std::iota(rows.begin(), rows.end(), 0);
  const moe::Batch batch = moe::make_batch(ds, rows);
  moe::ForwardOptions opts;
  opts.schedule = permute::Schedule{20, 0.1};

  const double margin = 1e-3;
  std::mt19937_64 rng(2718);
  std::normal_distribution<double> normal(0.0, 0.5);
  double worst = 0.0;
  std::size_t draws = 0, rejected = 0, checked = 0;
  while (draws < 50) {
    mc.seed = draws + rejected;
    moe::MoeModel model = moe::MoeModel::create(mc);
    auto& params = model.parameters();
    for (ad::ParamId id = 0; id < params.size(); ++id) {
      for (double& v : params.value(id).values()) v = normal(rng);
    }
    ad::Graph graph([&](ad::Tape& tape) { return moe::total_loss(tape, model, batch, opts).total; });
    graph.forward(params);
    bool near_kink = false;
    const ad::Tape& tape = graph.tape();
    for (std::size_t i = 0; i < tape.size() && !near_kink; ++i) {
      const ad::Node& node = tape.node(i);
      if (node.op != ad::Op::kMap && node.op != ad::Op::kRelu) continue;
      for (double t : tape.node(node.inputs[0]).value.values()) {
        const bool bad = node.op == ad::Op::kRelu
                             ? std::abs(t) < margin
                             : std::abs(std::abs(t) - mc.gamma / 2) < margin;
        if (bad) {
          near_kink = true;
          break;
        }
      }
    }
    if (near_kink) {
      ++rejected;
      continue;
    }
    const auto r = ad::grad_check(graph, params, {}, 1e-6);
    worst = std::max(worst, r.max_relative_error);
    checked += r.checked;
    ++draws;
  }
  return {worst < 1e-4, fmt("max relative error %.2e over %zu draws, %zu entries (%zu draws near a kink redrawn)",
                            worst, draws, checked, rejected)};
}

std::optional<moe::MoeModel> binarized_n16_k2;
data::Dataset binarization_validation;

Outcome cardinality_suite() {
  const auto ds = data::synth_cluster_moe(2024, 4, 8, 2000, 0.1);
  const auto splits = data::split(ds, {0.8, 0.1, 0.1, 0});
  binarization_validation = splits.validation;
  std::ostringstream detail;
  bool ok = true;
  for (std::size_t n : {5, 8, 16}) {
    for (std::size_t k : {1, 2, 3}) {
      moe::ModelConfig mc;
      mc.n_features = 8;
      mc.n_experts = n;
      mc.k = k;
      mc.gamma = 0.01;
      mc.lambda_entropy = 100.0;
      mc.expert_hidden = {8};
      mc.seed = n * 10 + k;
      moe::MoeModel model = moe::MoeModel::create(mc);
      moe::TrainConfig tc;
      tc.epochs = 50;
      tc.batch_size = 256;
      tc.adam.learning_rate = 5e-2;
      tc.patience = 50;
      tc.stop_at_binarization = true;
      const auto rep = moe::two_stage_train(model, splits, tc);
      const auto c = moe::verify_cardinality(model, splits.validation);
      const bool this_ok = rep.binarization_epoch.has_value() && c.fraction_binary == 1.0 &&
                           c.max_support <= k && c.simplex_error < 1e-9;
      ok = ok && this_ok;
      detail << " n" << n << "k" << k << ":"
             << (rep.binarization_epoch ? std::to_string(*rep.binarization_epoch) : std::string("-"))
             << (this_ok ? "" : fmt("[frac %.4f sup %zu err %.1e]", c.fraction_binary, c.max_support,
                                    c.simplex_error));
      if (n == 16 && k == 2) binarized_n16_k2 = std::move(model);
    }
  }
  return {ok, "binarization epoch per (n,k):" + detail.str()};
}

Outcome smooth_step_exactness() {
  bool ok = gates::smooth_step(0.25, {1.0}) == 0.84375;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> g(1e-3, 10.0), u(1.0, 100.0);
  for (int i = 0; i < 10000 && ok; ++i) {
    const double gamma = g(rng);
    const double beyond = gamma / 2 * u(rng);
    ok = gates::smooth_step(beyond, {gamma}) == 1.0 && gates::smooth_step(-beyond, {gamma}) == 0.0 &&
         gates::smooth_step(gamma / 2, {gamma}) == 1.0 && gates::smooth_step(-gamma / 2, {gamma}) == 0.0;
  }
  return {ok, fmt("s(0.25; 1) = %.17g, exact 0/1 outside the band on 10000 draws", gates::smooth_step(0.25, {1.0}))};
}

std::vector<std::size_t> brute_force_assignment(const Tensor& u) {
  const std::size_t n = u.rows();
  std::vector<std::size_t> perm(n), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_sum = -INFINITY;
  do {
    double s = 0.0;
    for (std::size_t r = 0; r < n; ++r) s += u(r, perm[r]);
    if (s > best_sum) {
      best_sum = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Outcome matching_and_sinkhorn() {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> small(0, 3);
  std::size_t agree = 0, total = 0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 1 + i % 6;
    Tensor u(n, n);
    // Half the draws use small integers so that ties are common.
    for (double& v : u.values()) v = i % 2 ? static_cast<double>(small(rng)) : normal(rng);
    ++total;
    if (permute::solve_assignment(u) == brute_force_assignment(u)) ++agree;
  }
  double dev = 0.0;
  for (int i = 0; i < 50; ++i) {
    Tensor u(8, 8);
    for (double& v : u.values()) v = normal(rng);
    const Tensor s = permute::sinkhorn(u, 1e-3, 150);
    for (std::size_t r = 0; r < 8; ++r) {
      double row = 0.0, col = 0.0;
      for (std::size_t c = 0; c < 8; ++c) {
        row += s(r, c);
        col += s(c, r);
      }
      dev = std::max({dev, std::abs(row - 1.0), std::abs(col - 1.0)});
    }
  }
  return {agree == total && dev < 1e-3,
          fmt("matching agrees on %zu/%zu matrices (n<=6); sinkhorn max sum deviation %.2e on 50 8x8", agree,
              total, dev)};
}

Outcome ablation_direction() {
  cli::Json doc = {{"n_experts", 4},
                   {"k", 2},
                   {"gamma", 0.1},
                   {"expert_hidden", {16}},
                   {"epochs", 6},
                   {"stage1_epochs", 3},
                   {"learning_rate", 1e-3},
                   {"batch_size", 64},
                   {"patience", 100},
                   {"seed", 100},
                   {"dataset", {{"n_clusters", 4}, {"p", 8}, {"n", 2000}, {"noise_sd", 0.1}, {"seed", 7}}},
                   {"teacher", {{"mapping", {1, 2, 3, 0}}, {"noise_sd", 0.02}}},
                   {"hash_assignment", "modulo"},
                   {"n_seeds", 60},
                   {"output_dir", (fs::temp_directory_path() / "comet_acceptance_ablate").string()}};
  const auto rows = cli::cmd_ablate(cli::parse_config(doc));
  auto row = [&](const std::string& name) -> const cli::AblationRow& {
    return *std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r.variant == name; });
  };
  const auto& hash_ls = row("hash+ls");
  const auto& topk_ls = row("topk+ls");
  const bool ok = hash_ls.mean < row("hash").mean && hash_ls.test->p_value < 0.05 &&
                  topk_ls.mean < row("topk").mean && topk_ls.test->p_value < 0.05 &&
                  row("comet+ls").mean <= row("comet").mean;
  return {ok, fmt("60 seeds; hash %.3e -> %.3e (p=%.1e), topk %.3e -> %.3e (p=%.1e), comet %.3e -> %.3e",
                  row("hash").mean, hash_ls.mean, hash_ls.test->p_value, row("topk").mean, topk_ls.mean,
                  topk_ls.test->p_value, row("comet").mean, row("comet+ls").mean)};
}

Outcome conditional_computation() {
  if (!binarized_n16_k2) return {false, "no binarized n=16, k=2 model (criterion 2 did not run)"};
  const auto& model = *binarized_n16_k2;
  model.reset_expert_calls();
  moe::evaluate(model, binarization_validation);
  const double per_sample =
      static_cast<double>(model.expert_calls()) / static_cast<double>(binarization_validation.size());
  const auto flops = cli::cmd_flops(cli::parse_config(
      {{"n_experts", 16}, {"k", 2}, {"dataset", {{"p", 128}, {"n_clusters", 4}}}}));
  std::size_t comet = 0, topk = 0;
  for (const auto& f : flops) {
    if (f.gate == "comet") comet = f.gate_total();
    if (f.gate == "topk") topk = f.gate_total();
  }
  return {per_sample <= 2.0 && comet < topk,
          fmt("%.3f expert calls per sample; gate cost comet %zu vs topk %zu (p=128, n=16, k=2)", per_sample,
              comet, topk)};
}

Outcome bootstrap_sanity() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> val(0.5, 1.5);
  std::normal_distribution<double> noise(0.0, 0.05);
  const fs::path path = fs::temp_directory_path() / "comet_acceptance_trials.jsonl";
  std::vector<stats::Trial> bag;
  {
    std::ofstream out(path);
    for (std::size_t t = 0; t < 200; ++t) {
      cli::TrialRecord r;
      r.trial = t;
      r.seed = t;
      r.params = cli::Json::object();
      r.validation_loss = t == 137 ? 0.1 : val(rng);
      r.test_loss = r.validation_loss + noise(rng);
      bag.push_back({r.validation_loss, r.test_loss});
      out << cli::trial_json(r).dump() << "\n";
    }
  }
  const double best_test = bag[137].test_loss;
  std::vector<std::size_t> grid;
  for (std::size_t s : stats::default_s_grid()) {
    if (s <= 200) grid.push_back(s);
  }
  const auto curve = cli::cmd_bootstrap(path.string(), grid, 2000, 6);
  bool monotone = true;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const double noise_band = 3.0 * std::hypot(curve[i].mc_error, curve[i - 1].mc_error);
    monotone = monotone && curve[i].mean <= curve[i - 1].mean + noise_band;
  }
  const auto at200 = *std::find_if(curve.begin(), curve.end(), [](const auto& p) { return p.s == 200; });
  const bool converged = std::abs(at200.mean - best_test) <= at200.stddev;
  return {monotone && converged,
          fmt("monotone within 3 MC errors: %s; s=200 mean %.4f vs best trial %.4f, standard error %.4f",
              monotone ? "yes" : "no", at200.mean, best_test, at200.stddev)};
}

// The direct weight formula evaluated term by term in long double, with routing products taken
// directly along each leaf's path.
std::vector<long double> naive_weights(const gates::TreeGate& gate, std::span<const double> x) {
  const std::size_t n = gate.n_experts();
  const long double gamma = gate.smooth_step.gamma;
  auto step = [&](long double t) -> long double {
    if (t <= -gamma / 2) return 0.0L;
    if (t >= gamma / 2) return 1.0L;
    return -2.0L / (gamma * gamma * gamma) * t * t * t + 1.5L / gamma * t + 0.5L;
  };
  std::vector<long double> num(n, 0.0L);
  long double den = 0.0L;
  for (std::size_t j = 0; j < gate.k; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      long double v = 1.0L;
      for (const auto& stepinfo : gate.topology.leaf_paths[i]) {
        long double t = 0.0L;
        for (std::size_t f = 0; f < x.size(); ++f) t += static_cast<long double>(gate.hyperplanes[j](stepinfo.node, f)) * x[f];
        const long double s = step(t);
        v *= stepinfo.direction == gates::Direction::kLeft ? s : 1.0L - s;
      }
      long double a = 0.0L;
      for (std::size_t f = 0; f < x.size(); ++f) a += static_cast<long double>(gate.leaf_coefficients[j](i, f)) * x[f];
      const long double term = std::exp(a) * v;
      num[i] += term;
      den += term;
    }
  }
  for (auto& g : num) g /= den;
  return num;
}

Outcome stability() {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_n(2, 16), pick_k(1, 4);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t k = pick_k(rng), n = std::max(k, pick_n(rng)), p = 5;
    auto gate = gates::TreeGate::initialize(n, k, p, {10.0}, 0.0, rng);
    for (auto& l : gate.leaf_coefficients) {
      for (double& v : l.values()) v = 2.0 * normal(rng);
    }
    std::vector<double> x(p);
    for (double& v : x) v = normal(rng);
    const auto g = gates::comet_weights(gate, x);
    const auto ref = naive_weights(gate, x);
    for (std::size_t e = 0; e < n; ++e) {
      worst = std::max(worst, static_cast<double>(std::abs(g[e] - ref[e]) / ref[e]));
    }
  }
  // Logits at +-50 and far beyond, where exp overflows in double.
  bool finite = true;
  for (double scale : {50.0, 800.0}) {
    Tensor v(2, 4, 0.25), alpha(2, 4);
    for (std::size_t e = 0; e < alpha.size(); ++e) alpha.values()[e] = e % 2 ? scale : -scale;
    const auto g = gates::combine_trees(v, alpha);
    double sum = 0.0;
    for (double gi : g) {
      finite = finite && std::isfinite(gi);
      sum += gi;
    }
    finite = finite && std::abs(sum - 1.0) < 1e-12;
  }
  return {worst < 1e-9 && finite,
          fmt("max relative error %.2e vs long-double reference on 1000 soft instances; finite at |alpha|=50, 800: %s",
              worst, finite ? "yes" : "no")};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "comet_acceptance_determinism";
  fs::remove_all(root);
  auto run = [&](const std::string& name) {
    cli::Json doc = {{"epochs", 4},
                     {"stage1_epochs", 2},
                     {"lambda_entropy", 0.1},
                     {"dataset", {{"n", 600}, {"seed", 1}}},
                     {"deterministic", true},
                     {"output_dir", (root / name).string()}};
    cli::cmd_train(cli::parse_config(doc));
    std::ifstream in(root / name / "metrics.jsonl", std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  };
  const std::string a = run("a");
  const std::string b = run("b");
  return {!a.empty() && a == b, fmt("metrics.jsonl %zu bytes, identical: %s", a.size(), a == b ? "yes" : "no")};
}

}  // namespace

int main() {
  report(1, "gradient integrity", 60, gradient_integrity);
  report(2, "cardinality after binarization", 300, cardinality_suite);
  report(3, "smooth-step exactness", 0, smooth_step_exactness);
  report(4, "matching and sinkhorn oracles", 0, matching_and_sinkhorn);
  report(5, "local-search ablation direction", 1200, ablation_direction);
  report(6, "conditional computation", 0, conditional_computation);
  report(7, "bootstrap curve sanity", 0, bootstrap_sanity);
  report(8, "log-space stability", 0, stability);
  report(9, "determinism", 0, determinism);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
