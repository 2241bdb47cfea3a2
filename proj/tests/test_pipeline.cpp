#include "oscilloprobe/pipeline.hpp"

#include <doctest.h>

#include <filesystem>

using namespace oscilloprobe;
namespace fs = std::filesystem;

TEST_CASE("standard contexts") {
  const Dataset sho = make_dataset(DatasetKind::sho_undamped, Split::train, 1, 3);
  CHECK(standard_contexts(sho) == std::vector<std::size_t>{2, 4, 8, 16, 32, 48, 63});
  const Dataset lin = make_dataset(DatasetKind::linreg, Split::train, 1, 3);
  CHECK(standard_contexts(lin) == std::vector<std::size_t>{2, 4, 8, 16, 32, 48, 64});
  const Dataset tiny = make_dataset(DatasetKind::sho_undamped, Split::train, 1, 3, 10);
  CHECK(standard_contexts(tiny) == std::vector<std::size_t>{2, 4, 8});
}

TEST_CASE("evaluation grid shape and registry records") {
  const Dataset data = make_dataset(DatasetKind::sho_undamped, Split::train, 3, 120, 10);
  const Model model(ModelConfig{2, 4, 2, 10, 4, 5});
  EvaluationOptions opts;
  opts.jobs = 2;
  const ModelEvaluation e = evaluate_model(model, "tiny", data, opts);
  const std::size_t sites = 9, cls = 3;
  std::size_t targets = 0;
  for (Method m : kAllMethods) targets += method_features(m, dataset_params(data)).names.size();
  CHECK(e.probes.size() == targets * sites * cls);
  CHECK(e.probes_in_sample.size() == e.probes.size());
  CHECK(e.cca_probes.empty());
  CHECK(e.reverse.size() == 3 * sites * cls);
  CHECK(e.mse_by_context.size() == 9);
  for (const auto& p : e.probes_in_sample) CHECK((p.flagged || !is_undefined(p.r2)));

  // Deterministic across job counts.
  opts.jobs = 1;
  const ModelEvaluation again = evaluate_model(model, "tiny", data, opts);
  for (std::size_t i = 0; i < e.reverse.size(); ++i) {
    CHECK(e.reverse[i].variance_explained == again.reverse[i].variance_explained);
  }

  TrainJob job;
  job.kind = DatasetKind::sho_undamped;
  job.layers = 2;
  job.hidden = 4;
  job.epochs = 3;
  job.length = 10;
  job.allow_any_width = true;
  TrainReport report;
  report.epochs_completed = 3;
  const ModelRecord mr = model_record(job, report, "m/final.json");
  CHECK(mr.context == 10);
  CHECK(mr.id() == job.name());
  const auto records = probe_records(mr, e, "test");
  CHECK(records.size() == 2 * e.probes.size() + e.reverse.size());

  const fs::path dir = fs::temp_directory_path() / "oscilloprobe-test-pipeline";
  fs::remove_all(dir);
  Registry reg(dir);
  for (const auto& r : records) reg.append(r);
  CHECK(reg.probes().size() == records.size());

  const auto cells = summarize_criteria({e}, {});
  CHECK(cells.size() == 12);
  CHECK(cells[3].label == "not run");
}

TEST_CASE("regression evaluation probes w, with CCA") {
  const Dataset data = make_dataset(DatasetKind::linreg, Split::train, 3, 100, 9);
  const Model model(ModelConfig{1, 4, 1, 18, 4, 5});
  const ModelEvaluation e = evaluate_model(model, "lin", data);
  const std::size_t cells = 5 * 3;  // sites x {2, 4, 8}
  CHECK(e.probes.size() == cells);
  CHECK(e.cca_probes.size() == cells);
  CHECK(e.cca_probes.front().degree == 2);
  CHECK(e.reverse.size() == cells);
  CHECK(e.reverse.front().method == "w");
}

TEST_CASE("training runs are byte-identical across directories") {
  TrainJob job;
  job.kind = DatasetKind::sho_undamped;
  job.layers = 1;
  job.hidden = 4;
  job.epochs = 2;
  job.n_series = 32;
  job.length = 8;
  job.checkpoint_every = 1;
  job.seed = 4;
  const fs::path root = fs::temp_directory_path() / "oscilloprobe-test-rerun";
  fs::remove_all(root);
  run_train_job(job, root / "a");
  run_train_job(job, root / "b");
  for (const char* f : {"report.json", "final.json", "epoch-1.json", "job.json"}) {
    CHECK(read_file(root / "a" / f) == read_file(root / "b" / f));
  }
  const auto loaded = load_trained(job, root / "a");
  REQUIRE(loaded);
  CHECK(fs::path(loaded->report.checkpoint_path) == root / "a" / "final.json");
  CHECK(fs::exists(loaded->report.intermediate_checkpoints.at(0)));
}
