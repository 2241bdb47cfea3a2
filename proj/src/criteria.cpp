#include "oscilloprobe/criteria.hpp"

#include "oscilloprobe/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numbers>
#include <numeric>

namespace oscilloprobe {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return kUndefined;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(v.begin(), mid);
  return 0.5 * (lower + upper);
}

std::vector<std::string> method_target_names(const ModelEvaluation& eval, std::string_view tag) {
  std::vector<std::string> names;
  for (const auto& r : eval.probes) {
    if (r.method == tag && std::find(names.begin(), names.end(), r.target) == names.end()) {
      names.push_back(r.target);
    }
  }
  return names;
}

std::vector<ProbeResult> rows_for(const ModelEvaluation& eval, const std::string& target) {
  std::vector<ProbeResult> out;
  for (const auto& r : eval.probes) {
    if (r.target == target) out.push_back(r);
  }
  return out;
}

CriterionScore summarize(const std::vector<ModelEvaluation>& evals, const std::vector<double>& per_model) {
  CriterionScore s;
  s.per_model = per_model;
  for (std::size_t i = 0; i < evals.size(); ++i) {
    if (is_undefined(per_model[i])) continue;
    // Ties go to the lexicographically smallest id so model order is irrelevant.
    if (is_undefined(s.value) || per_model[i] > s.value ||
        (per_model[i] == s.value && evals[i].model_id < s.best_model)) {
      s.value = per_model[i];
      s.best_model = evals[i].model_id;
    }
  }
  return s;
}

// Fit/evaluation series, hidden states at `site` for every position, and one
// reverse map per position fitted on the fit series.
struct PositionMaps {
  SampleSplit split;
  std::vector<std::size_t> positions;
  std::vector<ReverseProbeResult> maps;
};

PositionMaps fit_position_maps(const Model& model, const TokenizedDataset& tokens, const RowMatrix& features,
                               const Site& site, const std::vector<std::size_t>& positions,
                               const ProbeOptions& options) {
  if (site.index() >= site_count(model.config().layers)) {
    throw UsageError("intervention site " + site.name() + " is beyond the model depth");
  }
  PositionMaps pm;
  pm.positions = positions;
  pm.split = split_samples(tokens.n_series, options.split_seed);
  const HiddenStateCapture hs = capture(model, tokens, {site}, positions);
  RowMatrix f_fit(static_cast<Eigen::Index>(pm.split.fit.size()), features.cols());
  for (std::size_t i = 0; i < pm.split.fit.size(); ++i) {
    f_fit.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(pm.split.fit[i]));
  }
  ProbeOptions all = options;
  all.mode = ProbeMode::in_sample;
  for (std::size_t p = 0; p < positions.size(); ++p) {
    const RowMatrix& full = hs.data[0][p];
    RowMatrix h_fit(f_fit.rows(), full.cols());
    for (std::size_t i = 0; i < pm.split.fit.size(); ++i) {
      h_fit.row(static_cast<Eigen::Index>(i)) = full.row(static_cast<Eigen::Index>(pm.split.fit[i]));
    }
    ReverseProbeResult r = fit_reverse(f_fit, h_fit, all);
    if (r.flagged) {
      // Constant activations (e.g. at a position the model ignores): keep the mean.
      r.map = RowMatrix::Zero(features.cols(), full.cols());
      r.intercept = h_fit.colwise().mean();
    }
    pm.maps.push_back(std::move(r));
  }
  return pm;
}

RowMatrix replacement_rows(const PositionMaps& pm, const RowMatrix& feature_row) {
  RowMatrix rows(static_cast<Eigen::Index>(pm.positions.size()), pm.maps.front().map.cols());
  for (std::size_t p = 0; p < pm.positions.size(); ++p) {
    rows.row(static_cast<Eigen::Index>(p)) = pm.maps[p].predict(feature_row);
  }
  return rows;
}

// Squared error accumulator over (series, masked position, dimension).
struct MseSum {
  double sum = 0.0;
  std::size_t count = 0;
  void add(const Eigen::Ref<const RowVector>& pred, const Eigen::Ref<const RowVector>& target) {
    sum += (pred - target).squaredNorm();
    count += static_cast<std::size_t>(pred.size());
  }
  double value() const { return count ? sum / static_cast<double>(count) : kUndefined; }
};

// Next-token targets under the (possibly modified) propagator.
RowMatrix propagated_targets(const Eigen::Ref<const RowMatrix>& tokens, const Mat2& step) {
  RowMatrix out(tokens.rows(), 2);
  for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
    const State s = step * State{tokens(i, 0), tokens(i, 1)};
    out(i, 0) = s.x;
    out(i, 1) = s.v;
  }
  return out;
}

}  // namespace

MethodFeatures method_features(Method method, const std::vector<OscParams>& params, int taylor_power) {
  if (params.empty()) throw UsageError("method_features: no series");
  MethodFeatures mf;
  mf.method = method;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const IntermediateSet set = intermediates(method, params[i], taylor_power);
    if (i == 0) {
      for (const auto& t : set.targets) mf.names.push_back(t.name);
      mf.values.resize(static_cast<Eigen::Index>(params.size()), static_cast<Eigen::Index>(mf.names.size()));
    }
    if (set.targets.size() != mf.names.size()) {
      throw UsageError("method_features: series mix damped and undamped regimes");
    }
    for (std::size_t k = 0; k < set.targets.size(); ++k) {
      if (set.targets[k].name != mf.names[k]) throw UsageError("method_features: inconsistent target names");
      mf.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = set.targets[k].value;
    }
  }
  return mf;
}

std::vector<ProbeTarget> method_targets(const MethodFeatures& features) {
  std::vector<ProbeTarget> out;
  for (std::size_t k = 0; k < features.names.size(); ++k) {
    out.push_back({features.names[k], std::string(method_tag(features.method)),
                   features.values.col(static_cast<Eigen::Index>(k))});
  }
  return out;
}

std::vector<OscParams> dataset_params(const Dataset& dataset) {
  if (!is_sho(dataset.kind)) throw UsageError("dataset_params: not an oscillator dataset");
  std::vector<OscParams> out;
  out.reserve(dataset.trajectories.size());
  for (const auto& t : dataset.trajectories) out.push_back(t.params);
  return out;
}

double ModelEvaluation::mean_mse() const {
  if (mse_by_context.empty()) return kUndefined;
  return std::accumulate(mse_by_context.begin(), mse_by_context.end(), 0.0) /
         static_cast<double>(mse_by_context.size());
}

double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw UsageError("pearson_correlation: length mismatch");
  if (a.size() < 3) return kUndefined;
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return kUndefined;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double criterion1_model(const ModelEvaluation& eval, Method method) {
  double sum = 0.0;
  int count = 0;
  for (const auto& name : method_target_names(eval, method_tag(method))) {
    const MaxMeanR2 m = max_mean_r2(eval.probes, name);
    if (is_undefined(m.value)) continue;
    sum += m.value;
    ++count;
  }
  return count ? sum / count : kUndefined;
}

CriterionScore criterion1(const std::vector<ModelEvaluation>& evals, Method method) {
  std::vector<double> per_model;
  for (const auto& e : evals) per_model.push_back(criterion1_model(e, method));
  return summarize(evals, per_model);
}

Criterion2 criterion2(const std::vector<ModelEvaluation>& evals, Method method) {
  Criterion2 out;
  std::vector<double> log_mse, score;
  for (const auto& e : evals) {
    const double c1 = criterion1_model(e, method);
    const double mse = e.mean_mse();
    if (!is_undefined(c1) && mse > 0.0 && std::isfinite(mse)) {
      log_mse.push_back(std::log(mse));
      score.push_back(c1);
    }
  }
  out.points = log_mse.size();
  if (out.points < 3) {
    out.note = "fewer than 3 models with scores";
  } else {
    std::vector<double> error(score.size());
    std::transform(score.begin(), score.end(), error.begin(), [](double s) { return 1.0 - s; });
    out.strength = pearson_correlation(log_mse, error);
    out.raw = is_undefined(out.strength) ? kUndefined : -out.strength;
    if (is_undefined(out.strength)) out.note = "zero variance";
  }

  const std::string tag(method_tag(method));
  for (const auto& e : evals) {
    // r2(c) averaged over the method's targets, each read at its best site.
    std::map<std::size_t, std::pair<double, int>> by_cl;
    for (const auto& name : method_target_names(e, tag)) {
      const MaxMeanR2 best = max_mean_r2(e.probes, name);
      if (is_undefined(best.value)) continue;
      for (const auto& r : rows_for(e, name)) {
        if (r.site == best.site && !r.flagged && !is_undefined(r.r2)) {
          by_cl[r.context_length].first += r.r2;
          by_cl[r.context_length].second += 1;
        }
      }
    }
    std::vector<double> mse, err;
    for (const auto& [cl, acc] : by_cl) {
      if (cl >= e.mse_by_context.size()) continue;
      mse.push_back(e.mse_by_context[cl]);
      err.push_back(1.0 - acc.first / acc.second);
    }
    out.per_model_context.push_back(pearson_correlation(mse, err));
  }
  return out;
}

SiteScore criterion3_model(const ModelEvaluation& eval, Method method) {
  const std::string tag(method_tag(method));
  std::map<std::size_t, std::pair<double, int>> per_site;
  for (const auto& c : eval.reverse) {
    if (c.method != tag || c.flagged || is_undefined(c.variance_explained)) continue;
    per_site[c.site.index()].first += c.variance_explained;
    per_site[c.site.index()].second += 1;
  }
  SiteScore best;
  for (const auto& [index, acc] : per_site) {
    const double mean = acc.first / acc.second;
    if (is_undefined(best.value) || mean > best.value) {
      best.value = mean;
      best.site = Site::from_index(index);
    }
  }
  return best;
}

CriterionScore criterion3(const std::vector<ModelEvaluation>& evals, Method method) {
  std::vector<double> per_model;
  std::vector<SiteScore> sites;
  for (const auto& e : evals) {
    sites.push_back(criterion3_model(e, method));
    per_model.push_back(sites.back().value);
  }
  CriterionScore s = summarize(evals, per_model);
  for (std::size_t i = 0; i < evals.size(); ++i) {
    if (!s.best_model.empty() && evals[i].model_id == s.best_model) s.best_site = sites[i].site.name();
  }
  return s;
}

// ---------------------------------------------------------------- interventions

RowMatrix forward_replaced(const Model& model, const Eigen::Ref<const RowMatrix>& tokens, const Site& site,
                           const std::vector<std::size_t>& positions, const RowMatrix& rows) {
  if (static_cast<std::size_t>(rows.rows()) != positions.size()) {
    throw UsageError("forward_replaced: one replacement row per position required");
  }
  const std::size_t index = site.index();
  const ActivationHook hook = [&](std::size_t s, RowMatrix& act) {
    if (s != index) return;
    if (rows.cols() != act.cols()) throw UsageError("forward_replaced: replacement width mismatch");
    for (std::size_t p = 0; p < positions.size(); ++p) {
      act.row(static_cast<Eigen::Index>(positions[p])) = rows.row(static_cast<Eigen::Index>(p));
    }
  };
  return model.forward(tokens, &hook);
}

double identity_intervention_max_diff(const Model& model, const TokenizedDataset& data, std::size_t max_series) {
  const std::size_t n = max_series ? std::min(max_series, data.n_series) : data.n_series;
  const std::size_t sites = site_count(model.config().layers);
  double worst = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const auto tokens = data.series(s);
    const RowMatrix base = model.forward(tokens);
    for (std::size_t site = 0; site < sites; ++site) {
      const ActivationHook hook = [&](std::size_t k, RowMatrix& act) {
        if (k != site) return;
        const RowMatrix copy = act;
        act = copy;
      };
      const RowMatrix out = model.forward(tokens, &hook);
      for (Eigen::Index i = 0; i < out.size(); ++i) {
        const double a = out.data()[i], b = base.data()[i];
        // Bitwise comparison: any difference, including NaN payloads, counts.
        if (std::memcmp(&a, &b, sizeof(double)) != 0) worst = std::max(worst, std::isnan(a - b) ? 1.0 : std::abs(a - b));
      }
    }
  }
  return worst;
}

InterventionOutcome intervene_replace(const Model& model, const Dataset& dataset, Method method, const Site& site,
                                      const InterventionOptions& options) {
  InterventionOutcome out = intervene_modify(model, dataset, method, site, 1.0, 1.0, options);
  out.mode = "replace";
  return out;
}

InterventionOutcome intervene_modify(const Model& model, const Dataset& dataset, Method method, const Site& site,
                                     double dt_factor, double omega_factor, const InterventionOptions& options) {
  if (!(dt_factor > 0.0) || !(omega_factor > 0.0)) throw UsageError("intervene_modify: factors must be positive");
  const std::vector<OscParams> params = dataset_params(dataset);
  const TokenizedDataset tokens = tokenize(dataset);
  const RowMatrix features = method_features(method, params, options.taylor_power).values;
  const std::vector<std::size_t> positions = tokens.masked_positions();
  const PositionMaps pm = fit_position_maps(model, tokens, features, site, positions, options.probe);

  InterventionOutcome out;
  out.site = site;
  out.method = std::string(method_tag(method));
  out.dt_factor = dt_factor;
  out.omega_factor = omega_factor;
  out.mode = dt_factor != 1.0 && omega_factor != 1.0 ? "modify-both"
             : omega_factor != 1.0                  ? "modify-omega"
                                                    : "modify-dt";

  auto modified = [&](const OscParams& p) {
    OscParams q = p;
    q.dt *= dt_factor;
    q.omega0 *= omega_factor;
    return q;
  };

  // Training support, to warn about extrapolation.
  double w_lo = 1e300, w_hi = 0.0, phase_hi = 0.0;
  for (const auto& p : params) {
    w_lo = std::min(w_lo, p.omega0);
    w_hi = std::max(w_hi, p.omega0);
    phase_hi = std::max(phase_hi, p.omega0 * p.dt);
  }

  // Mean predictor of the modified targets, estimated on the fit series.
  RowVector mean_target = RowVector::Zero(2);
  std::size_t mean_count = 0;
  for (auto s : pm.split.fit) {
    const OscParams q = modified(params[s]);
    const RowMatrix target = propagated_targets(tokens.series(s), mat_exp(system_matrix(q.omega0, q.gamma), q.dt));
    for (auto p : positions) {
      mean_target += target.row(static_cast<Eigen::Index>(p));
      ++mean_count;
    }
  }
  mean_target /= static_cast<double>(mean_count);

  MseSum post, base, copy, clean;
  std::vector<double> implied;
  bool outside = false;
  for (auto s : pm.split.eval) {
    const OscParams q = modified(params[s]);
    outside = outside || q.omega0 < w_lo || q.omega0 > w_hi || q.omega0 * q.dt > phase_hi;
    const MethodFeatures mf = method_features(method, {q}, options.taylor_power);
    if (mf.values.cols() != features.cols()) throw UsageError("intervene_modify: modified parameters change the regime");
    const auto tok = tokens.series(s);
    const RowMatrix target = propagated_targets(tok, mat_exp(system_matrix(q.omega0, q.gamma), q.dt));
    const RowMatrix pred = forward_replaced(model, tok, site, positions, replacement_rows(pm, mf.values));
    const RowMatrix plain = model.forward(tok);
    for (auto p : positions) {
      const auto i = static_cast<Eigen::Index>(p);
      post.add(pred.row(i), target.row(i));
      base.add(mean_target, target.row(i));
      copy.add(tok.row(i), target.row(i));
      clean.add(plain.row(i), target.row(i));
    }

    // Implied parameter from the least-squares one-step map of the outputs.
    Eigen::Matrix2d utu = Eigen::Matrix2d::Zero(), uto = Eigen::Matrix2d::Zero();
    for (auto p : positions) {
      const Eigen::Vector2d u(tok(static_cast<Eigen::Index>(p), 0), tok(static_cast<Eigen::Index>(p), 1));
      const Eigen::Vector2d o(pred(static_cast<Eigen::Index>(p), 0), pred(static_cast<Eigen::Index>(p), 1));
      utu += u * u.transpose();
      uto += u * o.transpose();
    }
    if (std::abs(utu.determinant()) < 1e-12) continue;
    const Eigen::Matrix2d w = utu.ldlt().solve(uto).transpose();
    const bool dt_mode = omega_factor == 1.0 || dt_factor != 1.0;
    if (q.gamma == 0.0 && q.omega0 * q.dt < std::numbers::pi && q.dt > 1e-6) {
      const double theta = std::acos(std::clamp(0.5 * w.trace(), -1.0, 1.0));
      if (dt_mode) {
        implied.push_back(std::abs(theta / q.omega0 - q.dt) / q.dt);
      } else {
        implied.push_back(std::abs(theta / q.dt - q.omega0) / q.omega0);
      }
    } else if (q.gamma > 0.0 && dt_mode && q.dt > 1e-6 && w.determinant() > 0.0) {
      implied.push_back(std::abs(-std::log(w.determinant()) / (2.0 * q.gamma) - q.dt) / q.dt);
    }
  }
  out.post_mse = post.value();
  out.baseline_mse = base.value();
  out.copy_last_mse = copy.value();
  out.clean_mse = clean.value();
  out.implied_error = median(implied);
  out.n_series = pm.split.eval.size();
  out.classification = out.post_mse < out.baseline_mse ? "success" : "fail";
  if (outside) out.warning = "modified parameters leave the training support";
  return out;
}

std::string classify_set_w(const std::vector<double>& w_hat, double w_prime) {
  if (w_hat.empty()) return "fail";
  std::vector<double> direct, either;
  std::size_t near_negative = 0;
  for (double w : w_hat) {
    const double d = std::abs(w - w_prime);
    const double m = std::abs(w + w_prime);
    direct.push_back(d);
    either.push_back(std::min(d, m));
    if (m < 0.2) ++near_negative;
  }
  const double med = median(direct);
  if (med < 0.05) return "success";
  if (med < 0.2) return "partial-linear";
  if (median(either) < 0.2 && static_cast<double>(near_negative) >= 0.2 * static_cast<double>(w_hat.size())) {
    return "partial-nonlinear";
  }
  return "fail";
}

InterventionOutcome intervene_set_w(const Model& model, const Dataset& dataset, double w_prime, const Site& site,
                                    const InterventionOptions& options) {
  if (dataset.kind != DatasetKind::linreg) throw UsageError("intervene_set_w: needs a linear-regression dataset");
  const TokenizedDataset tokens = tokenize(dataset);
  const auto n = static_cast<Eigen::Index>(dataset.regressions.size());
  RowMatrix features(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = dataset.regressions[static_cast<std::size_t>(i)].w;
    features(i, 0) = w;
    features(i, 1) = w * w;
  }
  std::vector<std::size_t> positions(tokens.seq_len);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  const PositionMaps pm = fit_position_maps(model, tokens, features, site, positions, options.probe);
  RowMatrix prime(1, 2);
  prime << w_prime, w_prime * w_prime;
  const RowMatrix rows = replacement_rows(pm, prime);

  InterventionOutcome out;
  out.site = site;
  out.method = "w";
  out.mode = "set-w";
  out.w_prime = w_prime;
  const auto masked = tokens.masked_positions();
  const std::size_t late_from = masked.size() / 2;

  MseSum post, base, clean;
  for (auto s : pm.split.eval) {
    const auto tok = tokens.series(s);
    const RowMatrix pred = forward_replaced(model, tok, site, positions, rows);
    const RowMatrix plain = model.forward(tok);
    std::vector<double> ratios;
    for (std::size_t c = 0; c < masked.size(); ++c) {
      const auto i = static_cast<Eigen::Index>(masked[c]);
      const double x = tok(i, 0);  // x token whose y is predicted
      const RowVector target = RowVector::Constant(1, w_prime * x);
      post.add(pred.row(i), target);
      base.add(RowVector::Zero(1), target);
      clean.add(plain.row(i), target);
      if (c >= late_from && std::abs(x) >= 1e-3) ratios.push_back(pred(i, 0) / x);
    }
    const double w_hat = median(ratios);
    if (!is_undefined(w_hat)) out.w_hat.push_back(w_hat);
  }
  out.post_mse = post.value();
  out.baseline_mse = base.value();
  out.clean_mse = clean.value();
  out.n_series = pm.split.eval.size();
  out.classification = classify_set_w(out.w_hat, w_prime);
  return out;
}

// ---------------------------------------------------------------- synthetic byproduct

std::vector<ByproductRow> synthetic_byproduct(const std::vector<OscParams>& params, double noise_sigma,
                                              std::uint64_t seed, const ProbeOptions& options) {
  if (noise_sigma < 0.0) throw UsageError("synthetic_byproduct: negative noise");
  const MethodFeatures exp = method_features(Method::matrix_exponential, params);
  RowMatrix hs = exp.values;
  if (noise_sigma > 0.0) {
    Rng rng(seed, 0x6279ULL);
    for (Eigen::Index i = 0; i < hs.rows(); ++i)
      for (Eigen::Index j = 0; j < hs.cols(); ++j) hs(i, j) += noise_sigma * rng.normal();
  }
  std::vector<ByproductRow> rows;
  for (Method m : kAllMethods) {
    const MethodFeatures mf = method_features(m, params);
    double sum = 0.0;
    int count = 0;
    for (const auto& t : method_targets(mf)) {
      const ProbeResult r = fit_linear(hs, t.values, options);
      if (r.flagged || is_undefined(r.r2)) continue;
      sum += r.r2;
      ++count;
    }
    ByproductRow row;
    row.method = std::string(method_tag(m));
    row.c1 = count ? sum / count : kUndefined;
    const ReverseProbeResult rev = fit_reverse(mf.values, hs, options);
    row.c3 = rev.flagged ? kUndefined : rev.variance_explained;
    row.noise_sigma = noise_sigma;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace oscilloprobe
