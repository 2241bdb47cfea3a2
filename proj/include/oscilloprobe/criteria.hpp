#pragma once

#include "oscilloprobe/dynamics.hpp"
#include "oscilloprobe/numethods.hpp"
#include "oscilloprobe/probes.hpp"
#include "oscilloprobe/transformer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace oscilloprobe {

inline constexpr Method kAllMethods[] = {Method::linear_multistep, Method::taylor, Method::matrix_exponential};

// n x m matrix of a method's intermediate values for each series. Every series
// must share the same target names (one regime family per dataset).
struct MethodFeatures {
  Method method = Method::matrix_exponential;
  std::vector<std::string> names;
  RowMatrix values;
};

MethodFeatures method_features(Method method, const std::vector<OscParams>& params,
                               int taylor_power = kDefaultTaylorPower);
std::vector<ProbeTarget> method_targets(const MethodFeatures& features);
std::vector<OscParams> dataset_params(const Dataset& dataset);

struct ReverseCell {
  std::string method;  // method tag
  Site site;
  std::size_t context_length = 0;
  double variance_explained = kUndefined;
  double variance_explained_fit = kUndefined;
  bool flagged = false;
};

// Everything the criteria need about one trained model.
struct ModelEvaluation {
  std::string model_id;
  int layers = 0;
  int hidden = 0;
  std::uint64_t seed = 0;
  std::vector<double> mse_by_context;  // MSE_M(c), indexed by context length c
  std::vector<ProbeResult> probes;     // forward probes of every method's targets
  std::vector<ReverseCell> reverse;
  // Same grid scored in-sample, and Taylor/CCA probes; reported, not scored.
  std::vector<ProbeResult> probes_in_sample;
  std::vector<ProbeResult> cca_probes;

  double mean_mse() const;
};

struct CriterionScore {
  double value = kUndefined;  // largest per-model value
  std::string best_model;
  std::string best_site;  // criterion 3 only
  std::vector<double> per_model;  // aligned with the evaluations, undefined allowed
};

// Per model: mean over the method's targets of max_mean_r2. Summary: max over models.
double criterion1_model(const ModelEvaluation& eval, Method method);
CriterionScore criterion1(const std::vector<ModelEvaluation>& evals, Method method);

// Correlations are reported with the sign convention strength = corr(log MSE,
// 1 - score): positive when better encodings go with lower error.
struct Criterion2 {
  double strength = kUndefined;
  double raw = kUndefined;  // corr(log MSE, score)
  std::size_t points = 0;
  std::string note;
  // Per model: corr over context length between MSE_M(c) and 1 - r2(c) at the best site.
  std::vector<double> per_model_context;
};

Criterion2 criterion2(const std::vector<ModelEvaluation>& evals, Method method);
double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b);

// Per model: max over sites of the context-averaged variance explained.
struct SiteScore {
  double value = kUndefined;
  Site site;
};
SiteScore criterion3_model(const ModelEvaluation& eval, Method method);
CriterionScore criterion3(const std::vector<ModelEvaluation>& evals, Method method);

// ---------------------------------------------------------------- interventions

struct InterventionOptions {
  ProbeOptions probe;    // split seed also selects the evaluation series
  int taylor_power = kDefaultTaylorPower;
};

struct InterventionOutcome {
  std::string model_id;
  Site site;
  std::string method;
  std::string mode;  // replace, modify-dt, modify-omega, modify-both, set-w, identity
  double dt_factor = 1.0;
  double omega_factor = 1.0;
  double w_prime = kUndefined;
  double post_mse = kUndefined;
  double baseline_mse = kUndefined;   // dataset-mean predictor
  double copy_last_mse = kUndefined;  // context only, not used for success
  double clean_mse = kUndefined;      // un-intervened model on the same targets
  double implied_error = kUndefined;  // median relative error of the implied parameter
  std::string classification;
  std::vector<double> w_hat;  // set-w readouts
  std::size_t n_series = 0;
  std::string warning;
};

// Forward pass of series `s` with activations at `site` replaced at the given
// positions; `rows` holds one H-vector per position.
RowMatrix forward_replaced(const Model& model, const Eigen::Ref<const RowMatrix>& tokens, const Site& site,
                           const std::vector<std::size_t>& positions, const RowMatrix& rows);

// Largest absolute prediction change when every site's activations are
// overwritten with copies of themselves (0 means bit-transparent).
double identity_intervention_max_diff(const Model& model, const TokenizedDataset& data,
                                      std::size_t max_series = 0);

InterventionOutcome intervene_replace(const Model& model, const Dataset& dataset, Method method, const Site& site,
                                      const InterventionOptions& options = {});

InterventionOutcome intervene_modify(const Model& model, const Dataset& dataset, Method method, const Site& site,
                                     double dt_factor, double omega_factor,
                                     const InterventionOptions& options = {});

InterventionOutcome intervene_set_w(const Model& model, const Dataset& dataset, double w_prime, const Site& site,
                                    const InterventionOptions& options = {});

// success: median |w_hat - w'| < 0.05; partial-linear: median < 0.2;
// partial-nonlinear: median of min(|w_hat - w'|, |w_hat + w'|) < 0.2 with at
// least 20% of readouts near -w'; fail otherwise.
std::string classify_set_w(const std::vector<double>& w_hat, double w_prime);

// ---------------------------------------------------------------- synthetic byproduct

struct ByproductRow {
  std::string method;
  double c1 = kUndefined;
  double c3 = kUndefined;
  double noise_sigma = 0.0;
};

// Synthetic hidden states whose columns are the matrix-exponential
// intermediates (plus optional noise), probed with every method's targets.
std::vector<ByproductRow> synthetic_byproduct(const std::vector<OscParams>& params, double noise_sigma,
                                              std::uint64_t seed, const ProbeOptions& options = {});

}  // namespace oscilloprobe
