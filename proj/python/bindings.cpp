#include "oscilloprobe/criteria.hpp"
#include "oscilloprobe/pipeline.hpp"
#include "oscilloprobe/registry.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace oscilloprobe;

namespace {

py::dict probe_dict(const ProbeResult& r) {
  py::dict d;
  d["r2"] = r.r2;
  d["mse"] = r.mse;
  d["n_samples"] = r.n_samples;
  d["degree"] = r.degree;
  d["flagged"] = r.flagged;
  d["flag_reason"] = r.flag_reason;
  d["coefficients"] = r.coefficients;
  return d;
}

RowMatrix to_rows(const std::vector<State>& states) {
  RowMatrix out(static_cast<Eigen::Index>(states.size()), 2);
  for (std::size_t i = 0; i < states.size(); ++i) {
    out(static_cast<Eigen::Index>(i), 0) = states[i].x;
    out(static_cast<Eigen::Index>(i), 1) = states[i].v;
  }
  return out;
}

Eigen::Matrix2d to_eigen(const Mat2& m) {
  Eigen::Matrix2d out;
  out << m.a00, m.a01, m.a10, m.a11;
  return out;
}

py::list table_rows(const CsvTable& table, const std::vector<std::size_t>& ids) {
  py::list rows;
  for (std::size_t id : ids) {
    py::dict d;
    const auto& row = table.row(id);
    for (std::size_t c = 0; c < table.columns().size(); ++c) d[py::str(table.columns()[c])] = row[c];
    rows.append(d);
  }
  return rows;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Oscillator in-context learning probes";

  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  py::class_<OscParams>(m, "OscParams")
      .def(py::init([](double omega0, double gamma, double dt, double x0, double v0) {
             OscParams p{omega0, gamma, dt, x0, v0};
             p.validate();
             return p;
           }),
           py::arg("omega0") = 1.0, py::arg("gamma") = 0.0, py::arg("dt") = 0.0, py::arg("x0") = 0.0,
           py::arg("v0") = 0.0)
      .def_readwrite("omega0", &OscParams::omega0)
      .def_readwrite("gamma", &OscParams::gamma)
      .def_readwrite("dt", &OscParams::dt)
      .def_readwrite("x0", &OscParams::x0)
      .def_readwrite("v0", &OscParams::v0)
      .def_property_readonly("regime", [](const OscParams& p) { return std::string(to_string(p.regime())); })
      .def("__repr__", [](const OscParams& p) {
        return "OscParams(omega0=" + format_double(p.omega0) + ", gamma=" + format_double(p.gamma) +
               ", dt=" + format_double(p.dt) + ", x0=" + format_double(p.x0) + ", v0=" + format_double(p.v0) + ")";
      });

  m.def("closed_form_state", [](const OscParams& p, std::int64_t k) {
    const State s = closed_form_state(p, k);
    return py::make_tuple(s.x, s.v);
  });
  m.def("trajectory", [](const OscParams& p, std::size_t length) { return to_rows(make_trajectory(p, length).states); },
        "Exact states as a (length, 2) array of (x, v).");
  m.def("system_matrix", [](double omega0, double gamma) { return to_eigen(system_matrix(omega0, gamma)); });
  m.def("mat_exp", [](double omega0, double gamma, double dt) {
    return to_eigen(mat_exp(system_matrix(omega0, gamma), dt));
  });
  m.def("run_stepper", [](const std::string& method, const OscParams& p, std::size_t steps) {
    return to_rows(run_stepper(method, p, steps));
  }, py::arg("method"), py::arg("params"), py::arg("steps"),
        "Numerical solution with 'ab1'..'ab3', 'taylor:N' or 'exp'; (steps + 1, 2) array.");

  m.def("dataset", [](const std::string& kind, const std::string& split, std::uint64_t seed, std::size_t n,
                      std::size_t length) {
    const Dataset d = make_dataset(parse_dataset_kind(kind), parse_split(split), seed, n, length);
    py::dict out;
    out["kind"] = std::string(to_string(d.kind));
    const TokenizedDataset t = tokenize(d);
    py::array_t<double> tokens({t.n_series, t.seq_len, t.token_dim});
    std::copy(t.tokens.begin(), t.tokens.end(), tokens.mutable_data());
    out["tokens"] = tokens;
    if (d.is_linreg()) {
      std::vector<double> w;
      for (const auto& r : d.regressions) w.push_back(r.w);
      out["w"] = w;
    } else {
      std::vector<OscParams> params;
      for (const auto& t : d.trajectories) params.push_back(t.params);
      out["params"] = params;
    }
    return out;
  }, py::arg("kind"), py::arg("split") = "train", py::arg("seed") = 1, py::arg("n") = 0, py::arg("length") = 0);

  m.def("fit_linear", [](const RowMatrix& hs, const Vector& target, std::uint64_t split_seed) {
    ProbeOptions o;
    o.split_seed = split_seed;
    return probe_dict(fit_linear(hs, target, o));
  }, py::arg("hs"), py::arg("target"), py::arg("split_seed") = 0);
  m.def("fit_taylor_cca", [](const RowMatrix& hs, const Vector& target, int degree, std::uint64_t split_seed) {
    ProbeOptions o;
    o.split_seed = split_seed;
    return probe_dict(fit_taylor_cca(hs, target, degree, o));
  }, py::arg("hs"), py::arg("target"), py::arg("degree") = 2, py::arg("split_seed") = 0);
  m.def("fit_reverse", [](const RowMatrix& features, const RowMatrix& hs, std::uint64_t split_seed) {
    ProbeOptions o;
    o.split_seed = split_seed;
    const ReverseProbeResult r = fit_reverse(features, hs, o);
    py::dict d;
    d["variance_explained"] = r.variance_explained;
    d["variance_explained_fit"] = r.variance_explained_fit;
    d["map"] = r.map;
    d["intercept"] = r.intercept;
    d["flagged"] = r.flagged;
    d["flag_reason"] = r.flag_reason;
    return d;
  }, py::arg("features"), py::arg("hs"), py::arg("split_seed") = 0);

  m.def("method_features", [](const std::string& method, const std::vector<OscParams>& params) {
    const MethodFeatures f = method_features(parse_method(method), params);
    return py::make_tuple(f.names, f.values);
  }, "Intermediate names and an (n, m) matrix of values for 'lm', 'taylor' or 'exp'.");
  m.def("pearson_correlation", &pearson_correlation);
  m.def("classify_set_w", &classify_set_w);
  m.def("synthetic_byproduct", [](const std::vector<OscParams>& params, double sigma, std::uint64_t seed) {
    py::list out;
    for (const auto& r : synthetic_byproduct(params, sigma, seed)) {
      py::dict d;
      d["method"] = r.method;
      d["c1"] = r.c1;
      d["c3"] = r.c3;
      out.append(d);
    }
    return out;
  }, py::arg("params"), py::arg("noise_sigma") = 0.0, py::arg("seed") = 1);

  m.def("evaluate_model", [](const std::filesystem::path& dir, std::size_t n) {
    const TrainedModel t = load_model_dir(dir);
    return evaluate(t.model, tokenize(probe_dataset(t.job, n)));
  }, py::arg("model_dir"), py::arg("n") = 256, "Held-out MSE by context length for a trained model directory.");

  m.def("query", [](const std::filesystem::path& registry, const std::string& table, const std::string& filter) {
    const Registry reg(registry);
    const CsvTable& t = reg.table(table);
    return table_rows(t, query(t, filter));
  }, py::arg("registry"), py::arg("table") = "probes", py::arg("filter") = "");
}
