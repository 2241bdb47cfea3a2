#include "oscilloprobe/probes.hpp"

#include "oscilloprobe/rng.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <map>
#include <numeric>

namespace oscilloprobe {

namespace {

constexpr double kDegenerateSS = 1e-12;

RowMatrix take_rows(const Eigen::Ref<const RowMatrix>& m, const std::vector<std::size_t>& rows) {
  RowMatrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

Vector take(const Eigen::Ref<const Vector>& v, const std::vector<std::size_t>& rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(static_cast<Eigen::Index>(rows[i]));
  return out;
}

// Column standardization learned on the fit split. Constant columns get unit
// scale so they stay at zero after centering.
struct Standardizer {
  RowVector mean;
  RowVector scale;

  explicit Standardizer(const RowMatrix& x) {
    const double n = static_cast<double>(x.rows());
    mean = x.colwise().mean();
    scale = ((x.rowwise() - mean).array().square().colwise().sum() / n).sqrt().matrix();
    for (Eigen::Index j = 0; j < scale.size(); ++j) {
      if (!(scale(j) > 0.0)) scale(j) = 1.0;
    }
  }
  RowMatrix apply(const RowMatrix& x) const {
    return ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
  }
};

// Ridge term lambda * trace(cov) / dim for centered, standardized x.
double ridge_lambda(const RowMatrix& xs, double factor) {
  const double n = static_cast<double>(xs.rows());
  const double trace = xs.squaredNorm() / n;
  return factor * std::max(trace, 1e-300) / static_cast<double>(xs.cols());
}

// Solves (X^T X / n + lambda I) W = X^T Y / n.
RowMatrix ridge_solve(const RowMatrix& xs, const RowMatrix& ys, double lambda) {
  const double n = static_cast<double>(xs.rows());
  Eigen::MatrixXd gram = (xs.transpose() * xs) / n;
  gram.diagonal().array() += lambda;
  const Eigen::MatrixXd rhs = (xs.transpose() * ys) / n;
  return Eigen::LDLT<Eigen::MatrixXd>(gram).solve(rhs);
}

// Inverse square root of a symmetric positive-definite matrix.
Eigen::MatrixXd inv_sqrt(const Eigen::MatrixXd& c) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
  const Eigen::VectorXd d = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

double pearson(const Vector& a, const Vector& b) {
  const Vector ca = a.array() - a.mean();
  const Vector cb = b.array() - b.mean();
  const double den = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
  if (!(den > 0.0)) return 0.0;
  return ca.dot(cb) / den;
}

struct Prepared {
  SampleSplit split;
  bool ok = true;
  std::string reason;
};

Prepared prepare(std::size_t n, std::size_t width, const ProbeOptions& options) {
  Prepared p;
  if (n <= width + 10) {
    p.ok = false;
    p.reason = "too few samples (n=" + std::to_string(n) + ", need > " + std::to_string(width + 10) + ")";
    return p;
  }
  if (options.mode == ProbeMode::in_sample) {
    p.split.fit.resize(n);
    std::iota(p.split.fit.begin(), p.split.fit.end(), std::size_t{0});
    p.split.eval = p.split.fit;
  } else {
    p.split = split_samples(n, options.split_seed);
  }
  return p;
}

void check_inputs(const Eigen::Ref<const RowMatrix>& hs, Eigen::Index n) {
  if (hs.rows() != n) throw UsageError("probe: hidden states and target have different sample counts");
  if (!hs.allFinite()) throw UsageError("probe: non-finite hidden states");
}

}  // namespace

SampleSplit split_samples(std::size_t n, std::uint64_t seed, double fit_fraction) {
  if (!(fit_fraction > 0.0 && fit_fraction < 1.0)) throw UsageError("split_samples: fraction must be in (0, 1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed, hash_combine(0x73706c6974ULL, n));
  rng.shuffle(order.begin(), order.end());
  const auto n_fit = static_cast<std::size_t>(std::llround(fit_fraction * static_cast<double>(n)));
  SampleSplit s;
  s.fit.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_fit));
  s.eval.assign(order.begin() + static_cast<std::ptrdiff_t>(n_fit), order.end());
  std::sort(s.fit.begin(), s.fit.end());
  std::sort(s.eval.begin(), s.eval.end());
  return s;
}

std::string_view to_string(ProbeMode m) { return m == ProbeMode::held_out ? "held-out" : "in-sample"; }

ProbeMode parse_probe_mode(std::string_view s) {
  if (s == "held-out") return ProbeMode::held_out;
  if (s == "in-sample") return ProbeMode::in_sample;
  throw UsageError("unknown probe mode '" + std::string(s) + "' (expected held-out or in-sample)");
}

ProbeResult fit_linear(const Eigen::Ref<const RowMatrix>& hs, const Eigen::Ref<const Vector>& target,
                       const ProbeOptions& options) {
  check_inputs(hs, target.size());
  if (!target.allFinite()) throw UsageError("fit_linear: non-finite target");
  ProbeResult r;
  r.n_samples = static_cast<std::size_t>(target.size());
  const Prepared prep = prepare(r.n_samples, static_cast<std::size_t>(hs.cols()), options);
  if (!prep.ok) {
    r.flagged = true;
    r.flag_reason = prep.reason;
    return r;
  }
  const RowMatrix x_fit = take_rows(hs, prep.split.fit);
  const Vector y_fit = take(target, prep.split.fit);
  const RowMatrix x_eval = take_rows(hs, prep.split.eval);
  const Vector y_eval = take(target, prep.split.eval);

  const double ss_tot = (y_eval.array() - y_eval.mean()).square().sum();
  if (ss_tot < kDegenerateSS) {
    r.flagged = true;
    r.flag_reason = "degenerate target variance";
    return r;
  }
  const Standardizer sx(x_fit);
  const RowMatrix xs = sx.apply(x_fit);
  const double y_mean = y_fit.mean();
  const RowMatrix yc = (y_fit.array() - y_mean).matrix();
  const Eigen::MatrixXd w = ridge_solve(xs, yc, ridge_lambda(xs, options.ridge));

  const Vector pred = (sx.apply(x_eval) * w).col(0).array() + y_mean;
  const double ss_res = (pred - y_eval).squaredNorm();
  r.r2 = 1.0 - ss_res / ss_tot;
  r.mse = ss_res / static_cast<double>(y_eval.size());
  // Coefficients in the original hidden-state coordinates, intercept last.
  r.coefficients.resize(static_cast<std::size_t>(hs.cols()) + 1);
  double intercept = y_mean;
  for (Eigen::Index j = 0; j < hs.cols(); ++j) {
    const double c = w(j, 0) / sx.scale(j);
    r.coefficients[static_cast<std::size_t>(j)] = c;
    intercept -= c * sx.mean(j);
  }
  r.coefficients.back() = intercept;
  return r;
}

ProbeResult fit_taylor_cca(const Eigen::Ref<const RowMatrix>& hs, const Eigen::Ref<const Vector>& target,
                           int degree, const ProbeOptions& options) {
  if (degree < 1 || degree > 5) throw UsageError("fit_taylor_cca: degree must be in [1, 5]");
  check_inputs(hs, target.size());
  if (!target.allFinite()) throw UsageError("fit_taylor_cca: non-finite target");
  ProbeResult r;
  r.degree = degree;
  r.n_samples = static_cast<std::size_t>(target.size());
  const Prepared prep = prepare(r.n_samples, static_cast<std::size_t>(hs.cols()), options);
  if (!prep.ok) {
    r.flagged = true;
    r.flag_reason = prep.reason;
    return r;
  }
  RowMatrix features(target.size(), degree);
  for (Eigen::Index i = 0; i < target.size(); ++i) {
    double p = 1.0;
    for (int k = 0; k < degree; ++k) {
      p *= target(i);
      features(i, k) = p;
    }
  }
  const RowMatrix f_fit = take_rows(features, prep.split.fit);
  const RowMatrix f_eval = take_rows(features, prep.split.eval);
  const Vector t_eval = take(target, prep.split.eval);
  if ((t_eval.array() - t_eval.mean()).square().sum() < kDegenerateSS) {
    r.flagged = true;
    r.flag_reason = "degenerate target variance";
    return r;
  }
  const RowMatrix h_fit = take_rows(hs, prep.split.fit);
  const RowMatrix h_eval = take_rows(hs, prep.split.eval);

  const Standardizer sf(f_fit), sh(h_fit);
  const RowMatrix fs = sf.apply(f_fit), hss = sh.apply(h_fit);
  const double n = static_cast<double>(fs.rows());
  Eigen::MatrixXd cff = fs.transpose() * fs / n;
  Eigen::MatrixXd chh = hss.transpose() * hss / n;
  cff.diagonal().array() += ridge_lambda(fs, options.ridge);
  chh.diagonal().array() += ridge_lambda(hss, options.ridge);
  const Eigen::MatrixXd cfh = fs.transpose() * hss / n;
  const Eigen::MatrixXd wf = inv_sqrt(cff), wh = inv_sqrt(chh);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(wf * cfh * wh, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd a = wf * svd.matrixU().col(0);
  const Eigen::VectorXd b = wh * svd.matrixV().col(0);

  const Vector u = sf.apply(f_eval) * a;
  const Vector v = sh.apply(h_eval) * b;
  const double rho = pearson(u, v);
  r.r2 = rho > 0.0 ? rho * rho : 0.0;
  // Residual of the best linear reconstruction of v from u, in canonical units.
  const double slope = rho * std::sqrt((v.array() - v.mean()).square().sum() /
                                       std::max((u.array() - u.mean()).square().sum(), 1e-300));
  r.mse = ((v.array() - v.mean()) - slope * (u.array() - u.mean())).square().mean();
  r.coefficients.assign(a.data(), a.data() + a.size());
  return r;
}

RowMatrix ReverseProbeResult::predict(const Eigen::Ref<const RowMatrix>& features) const {
  if (features.cols() != map.rows()) throw UsageError("reverse probe: feature width mismatch");
  RowMatrix out = features * map;
  out.rowwise() += intercept;
  return out;
}

ReverseProbeResult fit_reverse(const Eigen::Ref<const RowMatrix>& features,
                               const Eigen::Ref<const RowMatrix>& hs, const ProbeOptions& options) {
  if (features.rows() != hs.rows()) throw UsageError("fit_reverse: sample counts differ");
  if (features.cols() < 1 || features.cols() > 8) throw UsageError("fit_reverse: feature count must be in [1, 8]");
  if (!features.allFinite() || !hs.allFinite()) throw UsageError("fit_reverse: non-finite input");
  ReverseProbeResult r;
  r.n_samples = static_cast<std::size_t>(hs.rows());
  r.map = RowMatrix::Zero(features.cols(), hs.cols());
  r.intercept = hs.colwise().mean();
  const Prepared prep = prepare(r.n_samples, static_cast<std::size_t>(features.cols()), options);
  if (!prep.ok) {
    r.flagged = true;
    r.flag_reason = prep.reason;
    return r;
  }
  const RowMatrix f_fit = take_rows(features, prep.split.fit);
  const RowMatrix h_fit = take_rows(hs, prep.split.fit);
  const RowMatrix f_eval = take_rows(features, prep.split.eval);
  const RowMatrix h_eval = take_rows(hs, prep.split.eval);

  const RowVector h_mean_fit = h_fit.colwise().mean();
  const RowVector h_mean_eval = h_eval.colwise().mean();
  const double ss_eval = (h_eval.rowwise() - h_mean_eval).squaredNorm();
  const double ss_fit = (h_fit.rowwise() - h_mean_fit).squaredNorm();
  if (ss_eval < kDegenerateSS || ss_fit < kDegenerateSS) {
    r.flagged = true;
    r.flag_reason = "zero hidden-state variance";
    return r;
  }
  const Standardizer sf(f_fit);
  const RowMatrix fs = sf.apply(f_fit);
  const RowMatrix w = ridge_solve(fs, h_fit.rowwise() - h_mean_fit, ridge_lambda(fs, options.ridge));
  // Back to raw feature coordinates.
  r.map = (w.array().colwise() / sf.scale.transpose().array()).matrix();
  r.intercept = h_mean_fit - sf.mean * r.map;

  const RowMatrix res_eval = h_eval - r.predict(f_eval);
  const RowMatrix res_fit = h_fit - r.predict(f_fit);
  // Variances about each split's own mean, summed over dimensions.
  const RowMatrix res_eval_c = res_eval.rowwise() - res_eval.colwise().mean();
  const RowMatrix res_fit_c = res_fit.rowwise() - res_fit.colwise().mean();
  r.variance_explained = std::clamp(1.0 - res_eval_c.squaredNorm() / ss_eval, 0.0, 1.0);
  r.variance_explained_fit = std::clamp(1.0 - res_fit_c.squaredNorm() / ss_fit, 0.0, 1.0);
  const double ne = static_cast<double>(h_eval.rows());
  r.residual_variance.resize(static_cast<std::size_t>(hs.cols()));
  for (Eigen::Index d = 0; d < hs.cols(); ++d) {
    r.residual_variance[static_cast<std::size_t>(d)] = res_eval_c.col(d).squaredNorm() / ne;
  }
  return r;
}

std::vector<ProbeResult> probe_grid(const HiddenStateCapture& capture, const std::vector<ProbeTarget>& targets,
                                    const std::vector<Site>& sites, const std::vector<ContextSlot>& contexts,
                                    const GridRequest& request) {
  for (const auto& t : targets) {
    if (static_cast<std::size_t>(t.values.size()) != capture.n_series) {
      throw UsageError("probe_grid: target '" + t.name + "' has " + std::to_string(t.values.size()) +
                       " values for " + std::to_string(capture.n_series) + " series");
    }
  }
  const std::size_t n_cells = targets.size() * sites.size() * contexts.size();
  std::vector<ProbeResult> out(n_cells);
  parallel_for(n_cells, request.jobs, [&](std::size_t cell) {
    const std::size_t c = cell % contexts.size();
    const std::size_t s = (cell / contexts.size()) % sites.size();
    const std::size_t t = cell / (contexts.size() * sites.size());
    const auto& target = targets[t];
    ProbeResult r;
    bool have = true;
    std::size_t site_slot = 0, pos_slot = 0;
    try {
      site_slot = capture.site_slot(sites[s]);
      pos_slot = capture.position_slot(contexts[c].position);
    } catch (const UsageError&) {
      have = false;
    }
    if (!have) {
      r.flagged = true;
      r.flag_reason = "missing capture";
    } else {
      const RowMatrix& hs = capture.data[site_slot][pos_slot];
      r = request.kind == ProbeKind::linear ? fit_linear(hs, target.values, request.options)
                                             : fit_taylor_cca(hs, target.values, request.degree, request.options);
    }
    r.target = target.name;
    r.method = target.method;
    r.site = sites[s];
    r.context_length = contexts[c].context_length;
    if (request.kind == ProbeKind::taylor_cca) r.degree = request.degree;
    out[cell] = std::move(r);
  });
  return out;
}

MaxMeanR2 max_mean_r2(const std::vector<ProbeResult>& table, const std::string& target) {
  // Keyed by site index so ties resolve to the shallowest site.
  std::map<std::size_t, std::pair<double, std::size_t>> per_site;
  MaxMeanR2 out;
  for (const auto& r : table) {
    if (r.target != target) continue;
    ++out.cells;
    auto& acc = per_site[r.site.index()];
    if (r.flagged || is_undefined(r.r2)) {
      ++out.flagged_cells;
      continue;
    }
    acc.first += r.r2;
    ++acc.second;
  }
  for (const auto& [index, acc] : per_site) {
    if (acc.second == 0) continue;
    const double mean = acc.first / static_cast<double>(acc.second);
    if (is_undefined(out.value) || mean > out.value) {
      out.value = mean;
      out.site = Site::from_index(index);
    }
  }
  return out;
}

}  // namespace oscilloprobe
