// comet: train, evaluate, ablate and tune sparse mixture-of-experts models.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "comet/cli.hpp"

namespace cli = comet::cli;

namespace {

struct Options {
  std::string config;
  std::string output_dir;
  bool deterministic = false;
  std::string checkpoint;
  std::string split = "test";
  std::string trials;
  std::vector<std::size_t> s_values;
  std::size_t repeats = 1000;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t max_trials = 0;
};

cli::RunConfig load(const Options& o) {
  cli::RunConfig c = cli::load_config(o.config);
  if (!o.output_dir.empty()) c.output_dir = o.output_dir;
  if (o.deterministic) c.deterministic = true;
  return c;
}

void print_json(const cli::Json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(out);
  if (!f) throw comet::Error("cannot write '" + out + "'");
  f << j.dump(2) << "\n";
}

int run_train(const Options& o) {
  const cli::RunConfig c = load(o);
  const auto report = cli::cmd_train(c);
  std::printf("test loss %.6g  experts/sample %.3f  epochs %zu  -> %s\n", report.test.loss,
              report.test.experts_per_sample, report.epochs.size(), c.output_dir.c_str());
  if (report.binarization_epoch) std::printf("gates binary after epoch %zu\n", *report.binarization_epoch);
  return 0;
}

int run_eval(const Options& o) {
  print_json(cli::cmd_eval(load(o), o.checkpoint, o.split), o.out);
  return 0;
}

int run_ablate(const Options& o) {
  const cli::RunConfig c = load(o);
  const auto rows = cli::cmd_ablate(c);
  std::printf("%-12s %12s %12s %10s  %s\n", "variant", "mean", "std.err", "p", "vs");
  for (const auto& r : rows) {
    if (r.test) {
      std::printf("%-12s %12.6g %12.6g %10.4g  %s\n", r.variant.c_str(), r.mean, r.standard_error,
                  r.test->p_value, r.baseline->c_str());
    } else {
      std::printf("%-12s %12.6g %12.6g %10s\n", r.variant.c_str(), r.mean, r.standard_error, "-");
    }
  }
  std::printf("written %s\n", (std::filesystem::path(c.output_dir) / "ablation.json").c_str());
  return 0;
}

int run_bootstrap(const Options& o) {
  const auto s_values = o.s_values.empty() ? comet::stats::default_s_grid() : o.s_values;
  const auto curve = cli::cmd_bootstrap(o.trials, s_values, o.repeats, o.seed);
  cli::Json j = cli::Json::array();
  for (const auto& p : curve) {
    j.push_back({{"s", p.s}, {"mean", p.mean}, {"stddev", p.stddev}, {"mc_error", p.mc_error}});
  }
  if (!o.out.empty()) {
    print_json(j, o.out);
    return 0;
  }
  std::printf("%6s %12s %12s %12s\n", "s", "mean", "stddev", "mc_error");
  for (const auto& p : curve) {
    std::printf("%6zu %12.6g %12.6g %12.6g\n", p.s, p.mean, p.stddev, p.mc_error);
  }
  return 0;
}

int run_flops(const Options& o) {
  const auto rows = cli::cmd_flops(load(o));
  std::printf("%-8s %10s %10s %10s %8s %12s %12s\n", "gate", "shared", "gate", "selection", "active",
              "per_expert", "total");
  for (const auto& f : rows) {
    std::printf("%-8s %10zu %10zu %10zu %8zu %12zu %12zu\n", f.gate.c_str(), f.shared,
                f.gate_total() - f.gate_selection, f.gate_selection, f.active_experts, f.per_expert,
                f.total());
  }
  return 0;
}

int run_tune(const Options& o) {
  const cli::RunConfig c = load(o);
  const auto r = cli::cmd_tune(c, o.max_trials > 0 ? std::optional<std::size_t>(o.max_trials) : std::nullopt);
  std::printf("%zu new trials, %zu/%zu recorded in %s\n", r.ran, r.completed, c.trials, r.path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse mixture-of-experts with differentiable tree gates"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "JSON run config")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--output-dir", o.output_dir, "Overrides output_dir");
  };

  auto* train = app.add_subcommand("train", "Train one model");
  add_config(train);
  train->add_flag("--deterministic", o.deterministic, "Omit wall-clock fields from outputs");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  add_config(eval);
  eval->add_option("--checkpoint", o.checkpoint, "model.json from train")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", o.split, "train, validation or test")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  eval->add_option("--out", o.out, "Write JSON here instead of stdout");

  auto* ablate = app.add_subcommand("ablate", "Gate variants with and without permutation search");
  add_config(ablate);

  auto* boot = app.add_subcommand("bootstrap", "Expected best-of-s test loss from a trials file");
  boot->add_option("--trials", o.trials, "trials.jsonl from tune")->required();
  boot->add_option("--s", o.s_values, "Trial counts (default 1,2,5,...,250)")->delimiter(',');
  boot->add_option("--repeats", o.repeats, "Resamples per s")->check(CLI::PositiveNumber);
  boot->add_option("--seed", o.seed, "Resampling seed");
  boot->add_option("--out", o.out, "Write JSON here instead of a table");

  auto* flops = app.add_subcommand("flops", "Inference cost per sample for each gate");
  add_config(flops);

  auto* tune = app.add_subcommand("tune", "Random search; resumes an existing trials file");
  add_config(tune);
  tune->add_option("--max-trials", o.max_trials, "Stop after this many new trials");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return run_train(o);
    if (*eval) return run_eval(o);
    if (*ablate) return run_ablate(o);
    if (*boot) return run_bootstrap(o);
    if (*flops) return run_flops(o);
    if (*tune) return run_tune(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::exit_code(e);
  }
  return 1;
}
