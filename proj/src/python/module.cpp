// Python bindings: closed forms, verification and checkpoint scoring.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "bmrs/checkpoint.hpp"
#include "bmrs/criteria.hpp"
#include "bmrs/distkit.hpp"
#include "bmrs/errors.hpp"
#include "bmrs/prune_runner.hpp"
#include "bmrs/verify.hpp"

namespace py = pybind11;
using namespace bmrs;

namespace {

dist::TruncatedLogNormal posterior(double mu, double sigma, double log_lo, double log_hi) {
  return {mu, sigma, log_lo, log_hi};
}

CriterionConfig make_criterion(const std::string& kind, int p1, int p2,
                               std::optional<double> threshold) {
  CriterionConfig c;
  c.kind = parse_criterion(kind);
  c.p1 = p1;
  c.p2 = p2;
  c.threshold = threshold;
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bayesian model reduction for structured pruning";
  m.attr("LOG_LO") = kDefaultLogLo;
  m.attr("LOG_HI") = kDefaultLogHi;

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_IOError);

  const auto lo = py::arg("log_lo") = kDefaultLogLo;
  const auto hi = py::arg("log_hi") = kDefaultLogHi;

  m.def("mean_theta",
        [](double mu, double sigma, double a, double b) {
          return dist::trunc_log_normal_moment(posterior(mu, sigma, a, b), 1);
        },
        py::arg("mu"), py::arg("sigma"), lo, hi);
  m.def("variance_theta",
        [](double mu, double sigma, double a, double b) {
          return dist::trunc_log_normal_variance(posterior(mu, sigma, a, b));
        },
        py::arg("mu"), py::arg("sigma"), lo, hi);
  m.def("snr",
        [](double mu, double sigma, double a, double b) { return dist::snr(posterior(mu, sigma, a, b)); },
        py::arg("mu"), py::arg("sigma"), lo, hi);
  m.def("kl",
        [](double mu, double sigma, double a, double b) {
          return dist::kl_q_p(posterior(mu, sigma, a, b), dist::TruncatedLogUniform(a, b));
        },
        py::arg("mu"), py::arg("sigma"), lo, hi, "KL(q || log-uniform prior on the same support)");
  m.def("sample",
        [](double mu, double sigma, double u, double a, double b) {
          return dist::sample_trunc_log_normal(posterior(mu, sigma, a, b), u);
        },
        py::arg("mu"), py::arg("sigma"), py::arg("u"), lo, hi);

  m.def("delta_f_lognormal",
        [](double mu, double sigma, std::optional<double> mu_p, double s2_p, double a, double b) {
          ReducedLogNormalPrior p;
          p.mu_tilde_p = mu_p.value_or(a);
          p.sigma2_tilde_p = s2_p;
          return delta_f_lognormal(posterior(mu, sigma, a, b), p);
        },
        py::arg("mu"), py::arg("sigma"), py::arg("mu_tilde_p") = py::none(),
        py::arg("sigma2_tilde_p") = 1e-12, lo, hi);
  m.def("delta_f_loguniform",
        [](double mu, double sigma, int p1, int p2, double a, double b) {
          return delta_f_loguniform(posterior(mu, sigma, a, b),
                                    ReducedLogUniformPrior::from_precision(p1, p2));
        },
        py::arg("mu"), py::arg("sigma"), py::arg("p1") = 8, py::arg("p2") = 23, lo, hi);

  m.def("verify",
        [](const std::string& profile) {
          const auto report = run_verify(VerifyProfile::by_name(profile));
          py::module_ json = py::module_::import("json");
          return json.attr("loads")(report.to_json());
        },
        py::arg("profile") = "quick", "Run the oracle suites; returns the JSON report as a dict.");

  m.def("spearman",
        [](const std::vector<double>& a, const std::vector<double>& b) -> py::object {
          const auto r = spearman_rank_correlation(a, b);
          if (!r.defined) return py::none();
          return py::float_(r.rho);
        },
        py::arg("a"), py::arg("b"));

  m.def("score_checkpoint",
        [](const std::string& path, const std::string& kind, int p1, int p2,
           std::optional<double> threshold) {
          const Network net = load_checkpoint(std::filesystem::path(path));
          py::list out;
          for (const auto& s : score_network(net, make_criterion(kind, p1, p2, threshold))) {
            py::dict d;
            d["gate"] = s.id.gate;
            d["index"] = s.id.index;
            d["score"] = s.score;
            d["prune"] = s.prune;
            out.append(d);
          }
          return out;
        },
        py::arg("path"), py::arg("criterion") = "bmrs_n", py::arg("p1") = 8, py::arg("p2") = 23,
        py::arg("threshold") = py::none(),
        "Score every alive structure of a saved model.");
}
