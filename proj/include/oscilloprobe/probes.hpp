#pragma once

#include "oscilloprobe/common.hpp"
#include "oscilloprobe/transformer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace oscilloprobe {

// Fit/evaluation partition of n samples, a pure function of (n, seed).
struct SampleSplit {
  std::vector<std::size_t> fit;
  std::vector<std::size_t> eval;
};

SampleSplit split_samples(std::size_t n, std::uint64_t seed, double fit_fraction = 0.8);

enum class ProbeMode { held_out, in_sample };

std::string_view to_string(ProbeMode m);
ProbeMode parse_probe_mode(std::string_view s);

struct ProbeOptions {
  std::uint64_t split_seed = 0;
  ProbeMode mode = ProbeMode::held_out;
  // Ridge strength relative to trace(cov)/dim of the standardized inputs.
  double ridge = 1e-6;
};

struct ProbeResult {
  std::string target;
  std::string method;  // "lm", "taylor", "exp", "w", ...
  Site site;
  std::size_t context_length = 0;
  int degree = 1;
  double r2 = kUndefined;
  double mse = kUndefined;
  std::size_t n_samples = 0;
  bool flagged = false;
  std::string flag_reason;
  std::vector<double> coefficients;
};

// Ridge least squares target ~ hs on standardized columns, scored on the
// evaluation split. Flags cells with n <= H + 10 or SS_tot < 1e-12.
ProbeResult fit_linear(const Eigen::Ref<const RowMatrix>& hs, const Eigen::Ref<const Vector>& target,
                       const ProbeOptions& options = {});

// First canonical correlation between [I, I^2, ..., I^degree] and hs; r2 is
// the squared held-out correlation of the fitted directions (0 when negative).
ProbeResult fit_taylor_cca(const Eigen::Ref<const RowMatrix>& hs, const Eigen::Ref<const Vector>& target,
                           int degree, const ProbeOptions& options = {});

struct ReverseProbeResult {
  RowMatrix map;        // features (m) x H
  RowVector intercept;  // 1 x H
  double variance_explained = kUndefined;      // on the evaluation split, clipped to [0, 1]
  double variance_explained_fit = kUndefined;  // on the fit split
  std::vector<double> residual_variance;       // per hidden dimension, evaluation split
  std::size_t n_samples = 0;
  bool flagged = false;
  std::string flag_reason;

  // Reconstruction of hidden states from features.
  RowMatrix predict(const Eigen::Ref<const RowMatrix>& features) const;
};

ReverseProbeResult fit_reverse(const Eigen::Ref<const RowMatrix>& features,
                               const Eigen::Ref<const RowMatrix>& hs, const ProbeOptions& options = {});

// Per-series scalar to probe for; values are broadcast across positions.
struct ProbeTarget {
  std::string name;
  std::string method;
  Vector values;
};

struct ContextSlot {
  std::size_t context_length = 0;
  std::size_t position = 0;  // token position whose activations are probed
};

enum class ProbeKind { linear, taylor_cca };

struct GridRequest {
  ProbeKind kind = ProbeKind::linear;
  int degree = 1;  // taylor_cca only
  ProbeOptions options;
  int jobs = 1;
};

// One result per (target, site, context length), target-major then site then
// context. Cells whose capture is missing are flagged and the grid continues.
std::vector<ProbeResult> probe_grid(const HiddenStateCapture& capture, const std::vector<ProbeTarget>& targets,
                                    const std::vector<Site>& sites, const std::vector<ContextSlot>& contexts,
                                    const GridRequest& request = {});

struct MaxMeanR2 {
  double value = kUndefined;
  Site site;
  std::size_t flagged_cells = 0;
  std::size_t cells = 0;
};

// Mean r2 over context lengths per site (flagged cells skipped), maximized over sites.
MaxMeanR2 max_mean_r2(const std::vector<ProbeResult>& table, const std::string& target);

}  // namespace oscilloprobe
