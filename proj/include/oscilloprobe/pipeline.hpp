#pragma once

// Glue shared by the CLI, the acceptance checks and the Python module:
// standard datasets, reproducible training jobs and their on-disk layout.

#include "oscilloprobe/criteria.hpp"
#include "oscilloprobe/dynamics.hpp"
#include "oscilloprobe/registry.hpp"
#include "oscilloprobe/transformer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace oscilloprobe {

// Standard dataset of a kind and split, with size overrides (0 keeps the default).
Dataset make_dataset(DatasetKind kind, Split split, std::uint64_t seed, std::size_t n_series = 0,
                     std::size_t length = 0);

// Every input that determines a trained model. Seeds are derived from `seed`:
// train data `seed`, OOD data `seed + 1`, model init and shuffling `seed`.
struct TrainJob {
  DatasetKind kind = DatasetKind::linreg;
  int layers = 2;
  int hidden = 16;
  int epochs = 2000;
  double lr = 1e-3;
  int batch = 64;
  std::uint64_t seed = 0;
  std::size_t n_series = 5000;
  std::size_t length = 0;  // 0: standard length for the kind
  int checkpoint_every = 0;
  bool allow_any_width = false;

  std::string to_json() const;  // excludes anything that does not affect the result
  static TrainJob from_json(const std::string& json);
  std::string name() const;  // e.g. "linreg-L2-H16-s1-e2000"
  friend bool operator==(const TrainJob&, const TrainJob&) = default;
};

struct TrainedModel {
  TrainJob job;
  Model model;
  TrainReport report;
  std::filesystem::path dir;
  bool reused = false;
};

// Trains and writes dir/{job.json, final.json, report.json}; report.json holds
// the timing-free report so reruns compare byte-identical.
TrainedModel run_train_job(const TrainJob& job, const std::filesystem::path& dir, int jobs = 1,
                           const std::function<void(int, double)>& on_epoch = {});

// Loads dir when its job.json matches `job` and training finished; nullopt otherwise.
std::optional<TrainedModel> load_trained(const TrainJob& job, const std::filesystem::path& dir);

TrainedModel load_or_train(const TrainJob& job, const std::filesystem::path& dir, int jobs = 1,
                           const std::function<void(int, double)>& on_epoch = {});

// Fresh in-distribution data for probing and interventions (seed + 2).
Dataset probe_dataset(const TrainJob& job, std::size_t n_series);

// Context lengths probed by default: 2, 4, 8, 16, 32, 48 and the last one.
std::vector<std::size_t> standard_contexts(const Dataset& dataset);

struct EvaluationOptions {
  std::vector<std::size_t> contexts;  // empty: standard_contexts
  std::vector<Method> methods{std::begin(kAllMethods), std::end(kAllMethods)};
  int taylor_power = kDefaultTaylorPower;
  int cca_degree = 2;  // regression data only; 0 disables
  ProbeOptions probe;  // mode is ignored: both modes are computed
  int jobs = 1;
  bool forward = true;  // forward probes
  bool reverse = true;  // reverse probes
};

// Token positions scored at the given context lengths.
std::vector<std::size_t> context_positions(const Dataset& data, const std::vector<std::size_t>& contexts);

// Captures every site at the probed contexts, runs forward probes in both
// modes and reverse probes. Oscillator data probes each method's
// intermediates; regression data probes w (method "w").
ModelEvaluation evaluate_model(const Model& model, const std::string& model_id, const Dataset& data,
                               const EvaluationOptions& options = {});
// Probes on a saved capture; it must hold the probed context positions.
// Leaves the model fields and mse_by_context empty.
ModelEvaluation evaluate_capture(const HiddenStateCapture& hs, const Dataset& data,
                                 const EvaluationOptions& options = {});

ModelRecord model_record(const TrainJob& job, const TrainReport& report, const std::string& model_path);
std::vector<ProbeRecord> probe_records(const ModelRecord& model, const ModelEvaluation& eval,
                                       const std::string& data_split);
InterventionRecord intervention_record(const ModelRecord& model, const InterventionOutcome& outcome);

// Rebuilds the probe part of an evaluation from registry rows of one model:
// held-out linear probes and reverse probes on `data_split`.
ModelEvaluation evaluation_from_registry(const Registry& registry, const ModelRecord& model,
                                         const std::string& data_split);

// Trained model directory (job.json + final.json) as written by run_train_job.
TrainedModel load_model_dir(const std::filesystem::path& dir);

// Method x criterion table. Criterion 4 is the replace intervention at the
// criterion-3 site of the criterion-3 best model: value post/baseline MSE.
std::vector<SummaryCell> summarize_criteria(const std::vector<ModelEvaluation>& evals,
                                            const std::vector<InterventionOutcome>& replace_outcomes);

}  // namespace oscilloprobe
