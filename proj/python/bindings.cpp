// Python bindings: gate primitives, permutation solvers, statistics and the
// config-driven train/flops/bootstrap entry points.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "comet/cli.hpp"
#include "comet/gates.hpp"
#include "comet/permute.hpp"
#include "comet/stats.hpp"

namespace py = pybind11;
using namespace comet;
using namespace comet::gates;
using namespace comet::permute;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 1) return Tensor(1, a.shape(0), std::vector<double>(a.data(), a.data() + a.size()));
  if (a.ndim() != 2) throw UsageError("expected a 1-d or 2-d array");
  return Tensor(a.shape(0), a.shape(1), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Array to_array(const std::vector<double>& v) {
  return Array(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())}, v.data());
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

cli::RunConfig config_from(const py::dict& d) {
  auto json = py::module_::import("json");
  return cli::parse_config(cli::Json::parse(json.attr("dumps")(d).cast<std::string>()));
}

py::object to_python(const cli::Json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sparse mixture-of-experts with differentiable tree gates";

  static py::exception<Error> base(m, "CometError", PyExc_RuntimeError);
  static py::exception<UsageError> usage(m, "UsageError", base.ptr());
  static py::exception<cli::ConfigError> config(m, "ConfigError", usage.ptr());
  static py::exception<RoutingError> routing(m, "RoutingError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const cli::ConfigError& e) {
      py::set_error(config, e.what());
    } catch (const UsageError& e) {
      py::set_error(usage, e.what());
    } catch (const RoutingError& e) {
      py::set_error(routing, e.what());
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  m.def("smooth_step", [](double t, double gamma) { return smooth_step(t, {gamma}); },
        py::arg("t"), py::arg("gamma") = 1.0);
  m.def("smooth_step_derivative",
        [](double t, double gamma) { return smooth_step_derivative(t, {gamma}); }, py::arg("t"),
        py::arg("gamma") = 1.0);

  m.def("tree_shape", [](std::size_t n) {
    const auto t = build_tree(n);
    py::dict d;
    d["depth"] = t.depth;
    d["n_internal"] = t.n_internal();
    d["leaves_per_level"] = t.leaves_per_level();
    std::vector<std::size_t> levels;
    for (std::size_t l = 0; l < n; ++l) levels.push_back(t.leaf_level(l));
    d["leaf_levels"] = levels;
    return d;
  }, py::arg("n"), "Depth, internal-node count and leaf levels of the n-leaf gate tree.");

  m.def("combine_trees", [](const Array& v, const Array& alpha) {
    return to_array(combine_trees(to_tensor(v), to_tensor(alpha)));
  }, py::arg("v"), py::arg("alpha"));
  m.def("entropy_penalty", [](const Array& v) { return entropy_penalty(to_vector(v)); });
  m.def("softmax", [](const Array& z) { return to_array(softmax(to_vector(z))); });
  m.def("topk_softmax", [](const Array& z, std::size_t k) {
    return to_array(topk_softmax(to_vector(z), k));
  }, py::arg("logits"), py::arg("k"));

  m.def("sinkhorn", [](const Array& u, double tau, std::size_t iterations) {
    return to_array(sinkhorn(to_tensor(u), tau, iterations));
  }, py::arg("scores"), py::arg("tau"), py::arg("iterations"));
  m.def("solve_assignment", [](const Array& u) { return solve_assignment(to_tensor(u)); },
        "Column index assigned to each row, maximizing the total score.");
  m.def("schedule", [](std::size_t step, std::size_t total) {
    const auto s = schedule(step, total);
    return py::make_tuple(s.tau, s.iterations);
  }, py::arg("step"), py::arg("total"), "(tau, iterations) at an optimizer step.");

  m.def("t_test_less", [](const std::vector<double>& a, const std::vector<double>& b, bool pooled) {
    const auto r = stats::t_test_less(a, b, pooled);
    return py::make_tuple(r.t, r.df, r.p_value);
  }, py::arg("a"), py::arg("b"), py::arg("pooled") = false);

  m.def("bootstrap_curve", [](const std::vector<std::pair<double, double>>& trials,
                              const std::vector<std::size_t>& s_values, std::size_t repeats,
                              std::uint64_t seed) {
    std::vector<stats::Trial> bag;
    for (const auto& [val, test] : trials) bag.push_back({val, test});
    py::list out;
    for (const auto& p : stats::bootstrap_curve(bag, s_values, repeats, seed)) {
      py::dict d;
      d["s"] = p.s;
      d["mean"] = p.mean;
      d["stddev"] = p.stddev;
      d["mc_error"] = p.mc_error;
      out.append(d);
    }
    return out;
  }, py::arg("trials"), py::arg("s_values"), py::arg("repeats") = 1000, py::arg("seed") = 0,
     "trials: (validation_loss, test_loss) pairs.");

  m.def("train", [](const py::dict& d) {
    const auto c = config_from(d);
    cli::Json j;
    {
      py::gil_scoped_release release;
      j = cli::report_json(cli::cmd_train(c), !c.deterministic);
    }
    return to_python(j);
  }, py::arg("config"), "Runs one training job; writes outputs into config['output_dir'].");

  m.def("flops", [](const py::dict& d) {
    py::list out;
    for (const auto& f : cli::cmd_flops(config_from(d))) {
      py::dict row;
      row["gate"] = f.gate;
      row["shared"] = f.shared;
      row["gate_total"] = f.gate_total();
      row["gate_selection"] = f.gate_selection;
      row["active_experts"] = f.active_experts;
      row["total"] = f.total();
      out.append(row);
    }
    return out;
  }, py::arg("config"));
}
