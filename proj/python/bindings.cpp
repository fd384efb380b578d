#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "bifair/evalmetrics.hpp"
#include "bifair/fairloss.hpp"
#include "bifair/report.hpp"
#include "bifair/runner.hpp"

namespace py = pybind11;
using namespace bifair;

namespace {

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

PYBIND11_MODULE(_bifair, m) {
  m.doc() = "bifair core bindings";

  // Translators run newest first, so the derived type goes last.
  py::register_exception<Error>(m, "BifairError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "run_command",
      [](const std::string& command, const std::string& config, const std::vector<std::string>& overrides) {
        py::gil_scoped_release release;
        return run_command(command, config, overrides);
      },
      py::arg("command"), py::arg("config"), py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "resolved_config",
      [](const std::string& path, const std::vector<std::string>& overrides) {
        return resolved_json(load_run_config(path, overrides)).dump();
      },
      py::arg("path"), py::arg("overrides") = std::vector<std::string>{});

  m.def("validate_report", [](const std::string& text) { return validate_report(nlohmann::json::parse(text)); });

  m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("role"));

  m.def("softmax_entropy", [](const std::vector<double>& losses) {
    const auto s = softmax_entropy(losses);
    return py::make_tuple(to_vec(s.p), s.entropy);
  });
  m.def("entropy_coefficients",
        [](const std::vector<double>& losses) { return to_vec(entropy_coefficients(losses)); });

  m.def(
      "frank_wolfe",
      [](const Matrix& gram, std::size_t iterations, bool away_steps) {
        FrankWolfeOptions o;
        o.max_iterations = iterations;
        o.away_steps = away_steps;
        const auto w = frank_wolfe(gram, o);
        py::dict out;
        out["w"] = to_vec(w.w);
        out["objective"] = w.objective;
        out["iterations"] = w.iterations;
        return out;
      },
      py::arg("gram"), py::arg("iterations") = 50, py::arg("away_steps") = true);

  m.def(
      "topk",
      [](const std::vector<double>& scores, std::size_t k, std::vector<Index> masked) {
        std::sort(masked.begin(), masked.end());
        return topk_from_scores(scores, k, masked);
      },
      py::arg("scores"), py::arg("k"), py::arg("masked") = std::vector<Index>{});
  m.def("recall_at_k", [](const std::vector<Index>& top, const std::vector<Index>& rel) { return recall_at_k(top, rel); });
  m.def(
      "ndcg_at_k",
      [](const std::vector<Index>& top, const std::vector<Index>& rel, std::size_t k) { return ndcg_at_k(top, rel, k); },
      py::arg("topk"), py::arg("relevant"), py::arg("k") = 0);
  m.def("hr_at_k", [](const std::vector<Index>& top, const std::vector<Index>& rel) { return hr_at_k(top, rel); });
  m.def("cv", [](const std::vector<double>& u) { return cv(u); });
  m.def(
      "min_bottom", [](const std::vector<double>& u, double fraction) { return min_bottom(u, fraction); },
      py::arg("utilities"), py::arg("fraction") = 0.25);
  m.def("epsilon_if", [](const std::vector<double>& u, double eps) { return epsilon_if(u, eps); });
}
