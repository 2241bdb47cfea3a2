#include "oscilloprobe/pipeline.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace oscilloprobe {

using nlohmann::json;

Dataset make_dataset(DatasetKind kind, Split split, std::uint64_t seed, std::size_t n_series,
                     std::size_t length) {
  if (kind == DatasetKind::linreg) {
    LinregConfig cfg = LinregConfig::standard(split);
    if (n_series) cfg.n_series = n_series;
    if (length) cfg.length = length;
    return generate_linreg(cfg, seed);
  }
  ShoConfig cfg = ShoConfig::standard(kind, split);
  if (n_series) cfg.n_series = n_series;
  if (length) cfg.length = length;
  return generate_sho(cfg, seed);
}

std::string TrainJob::to_json() const {
  const json j{{"kind", std::string(to_string(kind))},
               {"layers", layers},
               {"hidden", hidden},
               {"epochs", epochs},
               {"lr", lr},
               {"batch", batch},
               {"seed", seed},
               {"n_series", n_series},
               {"length", length},
               {"checkpoint_every", checkpoint_every},
               {"allow_any_width", allow_any_width}};
  return j.dump(2);
}

TrainJob TrainJob::from_json(const std::string& text) {
  const json j = json::parse(text);
  TrainJob t;
  t.kind = parse_dataset_kind(j.at("kind").get<std::string>());
  t.layers = j.at("layers").get<int>();
  t.hidden = j.at("hidden").get<int>();
  t.epochs = j.at("epochs").get<int>();
  t.lr = j.at("lr").get<double>();
  t.batch = j.at("batch").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.n_series = j.at("n_series").get<std::size_t>();
  t.length = j.at("length").get<std::size_t>();
  t.checkpoint_every = j.value("checkpoint_every", 0);
  t.allow_any_width = j.value("allow_any_width", false);
  return t;
}

std::string TrainJob::name() const {
  std::ostringstream os;
  os << to_string(kind) << "-L" << layers << "-H" << hidden << "-s" << seed << "-e" << epochs;
  return os.str();
}

namespace {

ModelConfig model_config(const TrainJob& job, const TokenizedDataset& data) {
  ModelConfig c;
  c.layers = job.layers;
  c.hidden = job.hidden;
  c.token_dim = static_cast<int>(data.token_dim);
  c.max_seq_len = static_cast<int>(data.seq_len);
  c.seed = job.seed;
  c.validate(job.allow_any_width);
  return c;
}

}  // namespace

TrainedModel run_train_job(const TrainJob& job, const std::filesystem::path& dir, int jobs,
                           const std::function<void(int, double)>& on_epoch) {
  const Dataset train_set = make_dataset(job.kind, Split::train, job.seed, job.n_series, job.length);
  const Dataset ood_set = make_dataset(job.kind, Split::ood_test, job.seed + 1, job.n_series, job.length);
  const TokenizedDataset train_tokens = tokenize(train_set);
  const TokenizedDataset ood_tokens = tokenize(ood_set);

  Model model(model_config(job, train_tokens));
  TrainHyper hyper;
  hyper.epochs = job.epochs;
  hyper.lr = job.lr;
  hyper.batch = job.batch;
  hyper.shuffle_seed = job.seed;
  hyper.checkpoint_every = job.checkpoint_every;
  hyper.checkpoint_dir = dir;
  hyper.jobs = jobs;
  hyper.on_epoch = on_epoch;

  std::filesystem::create_directories(dir);
  // A stale job.json would make a half-written directory look reusable.
  std::filesystem::remove(dir / "job.json");
  TrainReport report = train(model, train_tokens, hyper, &ood_tokens);
  // Checkpoint paths are stored relative to the run directory so that the
  // same job gives the same bytes wherever it runs.
  TrainReport stored = report;
  stored.checkpoint_path = std::filesystem::path(report.checkpoint_path).lexically_relative(dir).generic_string();
  for (auto& c : stored.intermediate_checkpoints) {
    c = std::filesystem::path(c).lexically_relative(dir).generic_string();
  }
  write_file_atomic(dir / "report.json", stored.to_json(false) + "\n");
  write_file_atomic(dir / "timing.json", json{{"wall_seconds", report.wall_seconds}}.dump() + "\n");
  write_file_atomic(dir / "job.json", job.to_json() + "\n");
  return {job, std::move(model), std::move(report), dir, false};
}

std::optional<TrainedModel> load_trained(const TrainJob& job, const std::filesystem::path& dir) {
  const auto job_path = dir / "job.json";
  if (!std::filesystem::exists(job_path) || !std::filesystem::exists(dir / "final.json") ||
      !std::filesystem::exists(dir / "report.json")) {
    return std::nullopt;
  }
  if (TrainJob::from_json(read_file(job_path)) != job) return std::nullopt;
  int epoch = 0;
  Model model = Model::load(dir / "final.json", &epoch);
  const json r = json::parse(read_file(dir / "report.json"));
  TrainReport report;
  report.loss_curve = r.at("loss_curve").get<std::vector<double>>();
  report.mse_train_by_context = r.at("mse_train_by_context").get<std::vector<double>>();
  report.mse_ood_by_context = r.at("mse_ood_by_context").get<std::vector<double>>();
  report.checkpoint_path = (dir / r.at("checkpoint_path").get<std::string>()).string();
  for (const auto& c : r.at("intermediate_checkpoints")) {
    report.intermediate_checkpoints.push_back((dir / c.get<std::string>()).string());
  }
  report.epochs_completed = r.at("epochs_completed").get<int>();
  report.aborted = r.at("aborted").get<bool>();
  report.abort_reason = r.at("abort_reason").get<std::string>();
  report.lr = r.at("adam").at("lr").get<double>();
  report.beta1 = r.at("adam").at("beta1").get<double>();
  report.beta2 = r.at("adam").at("beta2").get<double>();
  report.eps = r.at("adam").at("eps").get<double>();
  report.batch = r.at("batch").get<int>();
  if (std::filesystem::exists(dir / "timing.json")) {
    report.wall_seconds = json::parse(read_file(dir / "timing.json")).value("wall_seconds", 0.0);
  }
  if (epoch != report.epochs_completed) return std::nullopt;
  return TrainedModel{job, std::move(model), std::move(report), dir, true};
}

TrainedModel load_or_train(const TrainJob& job, const std::filesystem::path& dir, int jobs,
                           const std::function<void(int, double)>& on_epoch) {
  if (auto done = load_trained(job, dir)) return std::move(*done);
  return run_train_job(job, dir, jobs, on_epoch);
}

Dataset probe_dataset(const TrainJob& job, std::size_t n_series) {
  return make_dataset(job.kind, Split::train, job.seed + 2, n_series, job.length);
}

std::vector<std::size_t> standard_contexts(const Dataset& dataset) {
  const std::size_t count = context_count(dataset);
  if (count < 2) throw UsageError("standard_contexts: series too short");
  std::vector<std::size_t> out;
  for (std::size_t c : {2, 4, 8, 16, 32, 48}) {
    if (c < count - 1) out.push_back(c);
  }
  out.push_back(count - 1);
  return out;
}

namespace {

RowMatrix regression_features(const Dataset& data) {
  RowMatrix f(static_cast<Eigen::Index>(data.regressions.size()), 1);
  for (std::size_t i = 0; i < data.regressions.size(); ++i) f(static_cast<Eigen::Index>(i), 0) = data.regressions[i].w;
  return f;
}

}  // namespace

std::vector<std::size_t> context_positions(const Dataset& data, const std::vector<std::size_t>& contexts) {
  const std::size_t count = context_count(data);
  std::vector<std::size_t> positions;
  for (auto c : contexts) {
    if (c >= count) throw UsageError("context length " + std::to_string(c) + " is beyond the series");
    positions.push_back(context_position(data.kind, c));
  }
  return positions;
}

ModelEvaluation evaluate_model(const Model& model, const std::string& model_id, const Dataset& data,
                               const EvaluationOptions& options) {
  const TokenizedDataset tokens = tokenize(data);
  if (static_cast<int>(tokens.token_dim) != model.config().token_dim) {
    throw UsageError("evaluate_model: dataset does not match the model's token dimension");
  }
  const std::vector<std::size_t> cls = options.contexts.empty() ? standard_contexts(data) : options.contexts;
  const HiddenStateCapture hs =
      capture(model, tokens, all_sites(model.config().layers), context_positions(data, cls));
  EvaluationOptions with_cls = options;
  with_cls.contexts = cls;
  ModelEvaluation eval = evaluate_capture(hs, data, with_cls);
  eval.model_id = model_id;
  eval.layers = model.config().layers;
  eval.hidden = model.config().hidden;
  eval.seed = model.config().seed;
  eval.mse_by_context = evaluate(model, tokens);
  return eval;
}

ModelEvaluation evaluate_capture(const HiddenStateCapture& hs, const Dataset& data,
                                 const EvaluationOptions& options) {
  if (hs.n_series != data.size()) throw UsageError("evaluate_capture: capture and dataset sizes differ");
  const std::vector<std::size_t> cls = options.contexts.empty() ? standard_contexts(data) : options.contexts;
  const std::vector<std::size_t> positions = context_positions(data, cls);
  std::vector<ContextSlot> slots;
  for (std::size_t i = 0; i < cls.size(); ++i) slots.push_back({cls[i], positions[i]});
  const std::vector<Site>& sites = hs.sites;
  ModelEvaluation eval;

  // (method tag, features, targets)
  struct Family {
    std::string tag;
    RowMatrix features;
    std::vector<ProbeTarget> targets;
  };
  std::vector<Family> families;
  if (data.is_linreg()) {
    Family f{"w", regression_features(data), {}};
    f.targets.push_back({"w", "w", f.features.col(0)});
    families.push_back(std::move(f));
  } else {
    const auto params = dataset_params(data);
    for (Method m : options.methods) {
      MethodFeatures mf = method_features(m, params, options.taylor_power);
      families.push_back({std::string(method_tag(m)), mf.values, method_targets(mf)});
    }
  }

  GridRequest held_out{ProbeKind::linear, 1, options.probe, options.jobs};
  held_out.options.mode = ProbeMode::held_out;
  GridRequest in_sample = held_out;
  in_sample.options.mode = ProbeMode::in_sample;
  for (const auto& f : families) {
    if (!options.forward) break;
    auto a = probe_grid(hs, f.targets, sites, slots, held_out);
    eval.probes.insert(eval.probes.end(), a.begin(), a.end());
    auto b = probe_grid(hs, f.targets, sites, slots, in_sample);
    eval.probes_in_sample.insert(eval.probes_in_sample.end(), b.begin(), b.end());
    if (data.is_linreg() && options.cca_degree > 0) {
      GridRequest cca{ProbeKind::taylor_cca, options.cca_degree, held_out.options, options.jobs};
      auto c = probe_grid(hs, f.targets, sites, slots, cca);
      eval.cca_probes.insert(eval.cca_probes.end(), c.begin(), c.end());
    }
  }

  // Reverse probes: one independent cell per (family, site, context).
  const std::size_t per_family = sites.size() * slots.size();
  if (!options.reverse) return eval;
  eval.reverse.resize(families.size() * per_family);
  ProbeOptions rev = options.probe;
  rev.mode = ProbeMode::held_out;
  parallel_for(eval.reverse.size(), options.jobs, [&](std::size_t i) {
    const Family& f = families[i / per_family];
    const std::size_t s = (i % per_family) / slots.size();
    const std::size_t c = i % slots.size();
    ReverseCell& cell = eval.reverse[i];
    cell.method = f.tag;
    cell.site = sites[s];
    cell.context_length = slots[c].context_length;
    const ReverseProbeResult r = fit_reverse(f.features, hs.at(sites[s], slots[c].position), rev);
    cell.variance_explained = r.variance_explained;
    cell.variance_explained_fit = r.variance_explained_fit;
    cell.flagged = r.flagged;
  });
  return eval;
}

ModelRecord model_record(const TrainJob& job, const TrainReport& report, const std::string& model_path) {
  ModelRecord r;
  r.datatype = std::string(to_string(job.kind));
  r.emb = job.hidden;
  r.layer = job.layers;
  r.epoch = report.epochs_completed;
  const Dataset shape = make_dataset(job.kind, Split::train, job.seed, 1, job.length);
  r.context = static_cast<int>(shape.length());
  r.lr = job.lr;
  r.total_epochs = job.epochs;
  r.batch = job.batch;
  r.model_path = model_path;
  r.seed = job.seed;
  r.status = report.aborted ? "aborted" : "complete";
  return r;
}

std::vector<ProbeRecord> probe_records(const ModelRecord& model, const ModelEvaluation& eval,
                                       const std::string& data_split) {
  std::vector<ProbeRecord> out;
  auto add = [&](const ProbeResult& p, const std::string& traintest, const std::string& kind) {
    ProbeRecord r;
    r.model = model;
    r.datatype = model.datatype;
    r.traintest = traintest;
    r.data_split = data_split;
    r.kind = kind;
    r.target_method = p.method;
    r.target_name = p.target;
    r.layer = p.site.layer;
    r.inlayerpos = std::string(to_string(p.site.kind));
    r.context = static_cast<int>(p.context_length);
    r.r2 = p.r2;
    r.mse = p.mse;
    r.flagged = p.flagged;
    r.flag_reason = p.flag_reason;
    out.push_back(std::move(r));
  };
  for (const auto& p : eval.probes) add(p, "held-out", "linear");
  for (const auto& p : eval.probes_in_sample) add(p, "in-sample", "linear");
  for (const auto& p : eval.cca_probes) add(p, "held-out", "cca" + std::to_string(p.degree));
  for (const auto& c : eval.reverse) {
    ProbeRecord r;
    r.model = model;
    r.datatype = model.datatype;
    r.traintest = "held-out";
    r.data_split = data_split;
    r.kind = "reverse";
    r.target_method = c.method;
    r.target_name = c.method + ".all";
    r.layer = c.site.layer;
    r.inlayerpos = std::string(to_string(c.site.kind));
    r.context = static_cast<int>(c.context_length);
    r.r2 = c.variance_explained;
    r.flagged = c.flagged;
    out.push_back(std::move(r));
  }
  return out;
}

InterventionRecord intervention_record(const ModelRecord& model, const InterventionOutcome& o) {
  InterventionRecord r;
  r.model = model;
  r.layer = o.site.layer;
  r.inlayerpos = std::string(to_string(o.site.kind));
  r.method = o.method;
  r.mode = o.mode;
  r.dt_factor = o.dt_factor;
  r.omega_factor = o.omega_factor;
  r.w_prime = o.w_prime;
  r.post_mse = o.post_mse;
  r.baseline_mse = o.baseline_mse;
  r.copy_last_mse = o.copy_last_mse;
  r.clean_mse = o.clean_mse;
  r.implied_error = o.implied_error;
  r.classification = o.classification;
  r.n_series = static_cast<int>(o.n_series);
  r.warning = o.warning;
  return r;
}

ModelEvaluation evaluation_from_registry(const Registry& registry, const ModelRecord& model,
                                         const std::string& data_split) {
  ModelEvaluation eval;
  eval.model_id = model.id();
  eval.layers = model.layer;
  eval.hidden = model.emb;
  eval.seed = model.seed;
  const CsvTable& table = registry.probes();
  for (std::size_t i = 0; i < table.size(); ++i) {
    const ProbeRecord r = registry.probe(i);
    if (!(r.model.datatype == model.datatype && r.model.layer == model.layer && r.model.emb == model.emb &&
          r.model.seed == model.seed && r.model.total_epochs == model.total_epochs)) {
      continue;
    }
    if (r.data_split != data_split || r.traintest != "held-out") continue;
    const Site site{r.layer, parse_site_kind(r.inlayerpos)};
    if (r.kind == "linear") {
      ProbeResult p;
      p.target = r.target_name;
      p.method = r.target_method;
      p.site = site;
      p.context_length = static_cast<std::size_t>(r.context);
      p.r2 = r.r2;
      p.mse = r.mse;
      p.flagged = r.flagged;
      p.flag_reason = r.flag_reason;
      eval.probes.push_back(std::move(p));
    } else if (r.kind == "reverse") {
      ReverseCell c;
      c.method = r.target_method;
      c.site = site;
      c.context_length = static_cast<std::size_t>(r.context);
      c.variance_explained = r.r2;
      c.flagged = r.flagged;
      eval.reverse.push_back(c);
    }
  }
  return eval;
}

TrainedModel load_model_dir(const std::filesystem::path& dir) {
  const auto job_path = dir / "job.json";
  if (!std::filesystem::exists(job_path)) throw UsageError("no trained model in " + dir.string());
  auto trained = load_trained(TrainJob::from_json(read_file(job_path)), dir);
  if (!trained) throw FormatError("incomplete training run in " + dir.string());
  return std::move(*trained);
}

std::vector<SummaryCell> summarize_criteria(const std::vector<ModelEvaluation>& evals,
                                            const std::vector<InterventionOutcome>& replace_outcomes) {
  std::vector<SummaryCell> cells;
  for (Method m : kAllMethods) {
    const std::string tag(method_tag(m));
    const CriterionScore c1 = criterion1(evals, m);
    cells.push_back({tag, 1, c1.value, "", c1.best_model, ""});
    const Criterion2 c2 = criterion2(evals, m);
    cells.push_back({tag, 2, c2.strength, c2.note, "", ""});
    const CriterionScore c3 = criterion3(evals, m);
    cells.push_back({tag, 3, c3.value, "", c3.best_model, c3.best_site});
    SummaryCell c4{tag, 4, kUndefined, "not run", "", ""};
    for (const auto& o : replace_outcomes) {
      if (o.method != tag) continue;
      c4.value = o.baseline_mse > 0.0 ? o.post_mse / o.baseline_mse : kUndefined;
      c4.label = o.classification;
      c4.best_model = o.model_id;
      c4.best_site = o.site.name();
    }
    cells.push_back(c4);
  }
  return cells;
}

}  // namespace oscilloprobe
