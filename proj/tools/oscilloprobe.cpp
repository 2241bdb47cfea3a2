// oscilloprobe command-line driver: data generation, training, probing,
// interventions and the experiment registry.

#include "oscilloprobe/criteria.hpp"
#include "oscilloprobe/pipeline.hpp"
#include "oscilloprobe/registry.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

using namespace oscilloprobe;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  std::string registry;
  int jobs = 1;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  for (const auto& m : split_list(list)) out.push_back(parse_method(m));
  if (out.empty()) throw UsageError("no methods given");
  return out;
}

std::string relative_to(const fs::path& path, const fs::path& base) {
  const fs::path rel = fs::relative(fs::absolute(path), fs::absolute(base));
  return rel.empty() ? path.string() : rel.generic_string();
}

std::string fmt(double v, int digits = 4) {
  if (is_undefined(v)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

// Registers the model once; a rerun finds the existing row.
void ensure_model(Registry& reg, const ModelRecord& m) {
  try {
    reg.append(m);
  } catch (const DuplicateKeyError&) {
  }
}

template <class Record>
std::size_t append_new(Registry& reg, const std::vector<Record>& records) {
  std::size_t added = 0;
  for (const auto& r : records) {
    try {
      reg.append(r);
      ++added;
    } catch (const DuplicateKeyError&) {
    }
  }
  return added;
}

struct LoadedModel {
  TrainedModel trained;
  ModelRecord record;
};

LoadedModel open_model(const std::string& dir, Registry& reg) {
  TrainedModel t = load_model_dir(dir);
  ModelRecord rec = model_record(t.job, t.report, relative_to(fs::path(dir) / "final.json", reg.dir()));
  ensure_model(reg, rec);
  return {std::move(t), rec};
}

// "test": fresh draw from the training distribution; "ood": the flanking
// parameter bands, drawn from the same seed the training OOD set used;
// anything else: a dataset CSV written by `gen`.
Dataset probe_data(const TrainJob& job, std::size_t n, const std::string& source) {
  if (source == "test") return probe_dataset(job, n);
  if (source == "ood") return make_dataset(job.kind, Split::ood_test, job.seed + 1, n, job.length);
  if (!fs::exists(source)) throw UsageError("--data must be test, ood or a dataset CSV, got '" + source + "'");
  Dataset d = read_dataset_csv(source);
  if (d.kind != job.kind) {
    throw UsageError("dataset kind " + std::string(to_string(d.kind)) + " does not match the model's " +
                     std::string(to_string(job.kind)));
  }
  return d;
}

std::string data_split_of(const Dataset& d) { return d.split == Split::ood_test ? "ood" : "test"; }

std::vector<std::size_t> parse_contexts(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& c : split_list(s)) out.push_back(static_cast<std::size_t>(std::stoul(c)));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"oscilloprobe: probing transformers trained on oscillator and regression sequences"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value configuration file mirroring the command-line flags");
  Globals g;
  g.jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("OSCILLOPROBE_REGISTRY")) g.registry = env;
  if (g.registry.empty()) g.registry = "registry";
  app.add_option("--seed", g.seed, "master seed")->capture_default_str();
  app.add_option("--registry", g.registry, "registry directory (default $OSCILLOPROBE_REGISTRY or ./registry)")
      ->capture_default_str();
  app.add_option("--jobs", g.jobs, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a dataset as CSV");
  std::string gen_kind = "sho-undamped", gen_split = "train", gen_out;
  std::size_t gen_n = 5000, gen_len = 0;
  gen->add_option("--kind", gen_kind, "linreg, sho-undamped, sho-underdamped, sho-overdamped, sho-damped-mixed")
      ->capture_default_str();
  gen->add_option("--split", gen_split, "train or ood-test")->capture_default_str();
  gen->add_option("--n", gen_n, "number of series")->capture_default_str();
  gen->add_option("--length", gen_len, "series length (0: standard)")->capture_default_str();
  gen->add_option("--out", gen_out, "output CSV")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model and register it");
  TrainJob job;
  std::string tr_kind = "sho-undamped";
  tr->add_option("--kind", tr_kind, "dataset kind")->capture_default_str();
  std::string tr_out;
  tr->add_option("--layers,--L", job.layers, "transformer layers L")->capture_default_str();
  tr->add_option("--hidden,--H", job.hidden, "hidden width H")->capture_default_str();
  tr->add_option("--out", tr_out, "run directory (default: <registry>/models/<name>)");
  tr->add_option("--epochs", job.epochs)->capture_default_str();
  tr->add_option("--lr", job.lr)->capture_default_str();
  tr->add_option("--batch", job.batch)->capture_default_str();
  tr->add_option("--n", job.n_series, "training series")->capture_default_str();
  tr->add_option("--length", job.length, "series length (0: standard)")->capture_default_str();
  tr->add_option("--checkpoint-every", job.checkpoint_every, "epochs between checkpoints (0: none)")
      ->capture_default_str();
  tr->add_flag("--any-width", job.allow_any_width, "allow widths outside {2,4,8,16,32}");
  bool tr_quiet = false;
  tr->add_flag("--quiet", tr_quiet, "no per-epoch progress");

  // capture
  auto* cap = app.add_subcommand("capture", "save hidden states of a trained model");
  std::string cap_model, cap_out, cap_sites, cap_contexts, cap_data = "test";
  std::size_t cap_n = 2000;
  cap->add_option("--model", cap_model, "trained model directory")->required();
  cap->add_option("--out", cap_out, "output directory")->required();
  cap->add_option("--n", cap_n, "probe series")->capture_default_str();
  cap->add_option("--data", cap_data, "test, ood or a dataset CSV")->capture_default_str();
  cap->add_option("--sites", cap_sites, "comma list of sites, or all");
  cap->add_option("--contexts", cap_contexts, "comma list of context lengths (default: standard)");

  // step
  auto* st = app.add_subcommand("step", "integrate one oscillator with a fixed stepping rule");
  std::string st_method = "exp";
  OscParams st_params;
  st_params.dt = 0.1;
  st_params.x0 = 1.0;
  std::size_t st_steps = 20;
  st->add_option("--method", st_method, "exp, euler, ab<s>, taylor:<k>")->capture_default_str();
  st->add_option("--omega0", st_params.omega0)->capture_default_str();
  st->add_option("--gamma", st_params.gamma)->capture_default_str();
  st->add_option("--dt", st_params.dt)->capture_default_str();
  st->add_option("--x0", st_params.x0)->capture_default_str();
  st->add_option("--v0", st_params.v0)->capture_default_str();
  st->add_option("--steps", st_steps)->capture_default_str();

  // probe / reverse share options
  struct ProbeArgs {
    std::string model, hs, methods = "lm,taylor,exp", contexts, data = "test";
    std::size_t n = 2000;
    int taylor_power = kDefaultTaylorPower;
  };
  ProbeArgs pa, ra;
  auto probe_opts = [](CLI::App* sub, ProbeArgs& a) {
    sub->add_option("--model", a.model, "trained model directory")->required();
    sub->add_option("--hs", a.hs, "saved capture directory (default: capture now)");
    sub->add_option("--methods", a.methods, "comma list of lm, taylor, exp")->capture_default_str();
    sub->add_option("--contexts", a.contexts, "comma list of context lengths (default: standard)");
    sub->add_option("--n", a.n, "probe series when capturing now")->capture_default_str();
    sub->add_option("--data", a.data, "test, ood or a dataset CSV, when capturing now")->capture_default_str();
    sub->add_option("--taylor-power", a.taylor_power)->capture_default_str();
  };
  auto* pr = app.add_subcommand("probe", "forward probes of method intermediates; appends to the registry");
  probe_opts(pr, pa);
  auto* rv = app.add_subcommand("reverse", "reverse probes (intermediates to hidden states); appends to the registry");
  probe_opts(rv, ra);

  // intervene
  auto* iv = app.add_subcommand("intervene", "replace activations with reverse-probe reconstructions");
  std::string iv_model, iv_mode = "replace", iv_method = "exp", iv_site = "L1.mlp-res";
  double iv_dt = 1.0, iv_omega = 1.0, iv_w = 0.5;
  std::size_t iv_n = 2000;
  iv->add_option("--model", iv_model, "trained model directory")->required();
  iv->add_option("--mode", iv_mode, "replace, modify, set-w, identity")->capture_default_str();
  iv->add_option("--method", iv_method, "lm, taylor, exp")->capture_default_str();
  iv->add_option("--site", iv_site, "embed or L<l>.<attn|attn-res|mlp|mlp-res>")->capture_default_str();
  iv->add_option("--dt-factor", iv_dt, "modify: dt multiplier")->capture_default_str();
  iv->add_option("--omega-factor", iv_omega, "modify: omega0 multiplier")->capture_default_str();
  iv->add_option("--w-prime", iv_w, "set-w: inserted weight")->capture_default_str();
  iv->add_option("--n", iv_n, "series")->capture_default_str();

  // criteria
  auto* cr = app.add_subcommand("criteria", "score criteria 1-4 over registered models");
  std::string cr_filter = "model-datatype=sho-undamped", cr_out;
  std::size_t cr_n = 2000;
  cr->add_option("--models", cr_filter, "filter over the models table")->capture_default_str();
  cr->add_option("--out", cr_out, "summary CSV (default: <registry>/summary.csv)");
  cr->add_option("--n", cr_n, "series for MSE and interventions")->capture_default_str();

  // report
  auto* rp = app.add_subcommand("report", "write the report bundle");
  std::string rp_summary, rp_out;
  rp->add_option("--summary", rp_summary, "summary CSV (default: <registry>/summary.csv)");
  rp->add_option("--out", rp_out, "output directory (default: <registry>/report)");

  // query
  auto* qu = app.add_subcommand("query", "print matching registry rows as CSV");
  std::string qu_table = "probes", qu_filter;
  qu->add_option("--table", qu_table, "models, probes or interventions")->capture_default_str();
  qu->add_option("--filter", qu_filter, "e.g. \"L=2 & H=16 & method in {exp,lm}\"");

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path reg_dir = g.registry;

    if (*gen) {
      const Dataset d = make_dataset(parse_dataset_kind(gen_kind), parse_split(gen_split), g.seed, gen_n, gen_len);
      write_dataset_csv(d, gen_out);
      std::cout << "wrote " << d.size() << " series to " << gen_out << "\n";
      if (d.tiny_dt_count) std::cout << "note: " << d.tiny_dt_count << " series with dt < 1e-6\n";
    } else if (*tr) {
      job.kind = parse_dataset_kind(tr_kind);
      job.seed = g.seed;
      Registry reg(reg_dir);
      const fs::path dir = tr_out.empty() ? reg_dir / "models" / job.name() : fs::path(tr_out);
      const TrainedModel t = load_or_train(job, dir, g.jobs, [&](int epoch, double loss) {
        if (!tr_quiet && (epoch % 10 == 0 || epoch == 1)) std::cerr << "epoch " << epoch << " loss " << loss << "\n";
      });
      ensure_model(reg, model_record(job, t.report, relative_to(dir / "final.json", reg_dir)));
      reg.commit();
      const auto& m = t.report.mse_train_by_context;
      std::cout << job.name() << (t.reused ? " (reused)" : "") << ": epochs " << t.report.epochs_completed
                << ", final loss " << fmt(t.report.loss_curve.empty() ? kUndefined : t.report.loss_curve.back())
                << ", train MSE first/last context " << fmt(m.front()) << " / " << fmt(m.back()) << "\n";
      if (t.report.aborted) {
        std::cerr << "training aborted: " << t.report.abort_reason << "\n";
        return 3;
      }
    } else if (*cap) {
      const TrainedModel t = load_model_dir(cap_model);
      const Dataset data = probe_data(t.job, cap_n, cap_data);
      std::vector<Site> sites;
      for (const auto& s : split_list(cap_sites)) {
        if (s != "all") sites.push_back(Site::parse(s));
      }
      if (sites.empty()) sites = all_sites(t.model.config().layers);
      const auto cls = cap_contexts.empty() ? standard_contexts(data) : parse_contexts(cap_contexts);
      const HiddenStateCapture hs = capture(t.model, tokenize(data), sites, context_positions(data, cls));
      hs.save(cap_out);
      write_dataset_csv(data, fs::path(cap_out) / "data.csv");
      std::cout << "captured " << sites.size() << " sites x " << cls.size() << " contexts x " << data.size()
                << " series to " << cap_out << "\n";
    } else if (*st) {
      st_params.validate();
      const auto traj = run_stepper(st_method, st_params, st_steps);
      std::cout << "k,x,v,x_exact,v_exact,abs_error\n";
      for (std::size_t k = 0; k < traj.size(); ++k) {
        const State e = closed_form_state(st_params, static_cast<std::int64_t>(k));
        const double err = std::max(std::abs(traj[k].x - e.x), std::abs(traj[k].v - e.v));
        std::cout << k << ',' << format_double(traj[k].x) << ',' << format_double(traj[k].v) << ','
                  << format_double(e.x) << ',' << format_double(e.v) << ',' << format_double(err) << "\n";
      }
    } else if (*pr || *rv) {
      const bool forward = pr->parsed();
      const ProbeArgs& a = forward ? pa : ra;
      Registry reg(reg_dir);
      const LoadedModel lm = open_model(a.model, reg);
      EvaluationOptions opts;
      opts.methods = parse_methods(a.methods);
      opts.taylor_power = a.taylor_power;
      opts.probe.split_seed = g.seed;
      opts.jobs = g.jobs;
      opts.forward = forward;
      opts.reverse = !forward;
      if (!a.contexts.empty()) opts.contexts = parse_contexts(a.contexts);
      ModelEvaluation e;
      std::string save_path, data_split;
      if (!a.hs.empty()) {
        const HiddenStateCapture hs = HiddenStateCapture::load(a.hs);
        const Dataset data = read_dataset_csv(fs::path(a.hs) / "data.csv");
        e = evaluate_capture(hs, data, opts);
        save_path = relative_to(a.hs, reg_dir);
        data_split = data_split_of(data);
      } else {
        const Dataset data = probe_data(lm.trained.job, a.n, a.data);
        e = evaluate_model(lm.trained.model, lm.record.id(), data, opts);
        data_split = data_split_of(data);
      }
      e.model_id = lm.record.id();
      auto records = probe_records(lm.record, e, data_split);
      for (auto& r : records) r.save_path = save_path;
      const std::size_t added = append_new(reg, records);
      reg.commit();
      std::cout << lm.record.id() << ": " << added << " new probe rows (" << records.size() - added
                << " already registered)\n";
      if (forward) {
        std::vector<std::string> names;
        for (const auto& p : e.probes)
          if (std::find(names.begin(), names.end(), p.target) == names.end()) names.push_back(p.target);
        for (const auto& n : names) {
          const MaxMeanR2 m = max_mean_r2(e.probes, n);
          std::cout << "  " << n << ": max mean r2 " << fmt(m.value) << " at " << m.site.name() << " ("
                    << m.flagged_cells << " flagged cells)\n";
        }
      } else {
        for (Method m : opts.methods) {
          const SiteScore s = criterion3_model(e, m);
          std::cout << "  " << method_tag(m) << ": mean variance explained " << fmt(s.value) << " at "
                    << s.site.name() << "\n";
        }
      }
    } else if (*iv) {
      Registry reg(reg_dir);
      const LoadedModel lm = open_model(iv_model, reg);
      const Dataset data = probe_data(lm.trained.job, iv_n, "test");
      InterventionOptions opts;
      opts.probe.split_seed = g.seed;
      const Site site = Site::parse(iv_site);
      if (iv_mode == "identity") {
        const double d = identity_intervention_max_diff(lm.trained.model, tokenize(data));
        std::cout << "identity intervention: max |change| = " << format_double(d)
                  << (d == 0.0 ? " (bit-exact)" : "") << "\n";
        return d == 0.0 ? 0 : 4;
      }
      InterventionOutcome o;
      if (iv_mode == "replace") o = intervene_replace(lm.trained.model, data, parse_method(iv_method), site, opts);
      else if (iv_mode == "modify")
        o = intervene_modify(lm.trained.model, data, parse_method(iv_method), site, iv_dt, iv_omega, opts);
      else if (iv_mode == "set-w") o = intervene_set_w(lm.trained.model, data, iv_w, site, opts);
      else throw UsageError("unknown intervention mode '" + iv_mode + "'");
      o.model_id = lm.record.id();
      append_new(reg, std::vector<InterventionRecord>{intervention_record(lm.record, o)});
      reg.commit();
      std::cout << o.model_id << " " << o.mode << " at " << site.name() << ": post " << fmt(o.post_mse)
                << ", mean baseline " << fmt(o.baseline_mse) << ", clean " << fmt(o.clean_mse) << ", copy-last "
                << fmt(o.copy_last_mse);
      if (!is_undefined(o.implied_error)) std::cout << ", implied-parameter error " << fmt(o.implied_error);
      std::cout << " -> " << o.classification << "\n";
      if (!o.warning.empty()) std::cout << "warning: " << o.warning << "\n";
    } else if (*cr) {
      Registry reg(reg_dir);
      std::vector<ModelEvaluation> evals;
      std::vector<ModelRecord> models;
      for (auto id : query(reg.models(), cr_filter)) {
        const ModelRecord m = reg.model(id);
        if (m.status != "complete") continue;
        const fs::path ckpt = fs::path(m.model_path).is_absolute() ? fs::path(m.model_path) : reg_dir / m.model_path;
        const TrainedModel t = load_model_dir(ckpt.parent_path());
        ModelEvaluation e = evaluation_from_registry(reg, m, "test");
        if (e.probes.empty() && e.reverse.empty()) {
          std::cerr << "skipping " << m.id() << ": no probes registered (run probe and reverse)\n";
          continue;
        }
        e.mse_by_context = evaluate(t.model, tokenize(probe_data(t.job, cr_n, "test")));
        evals.push_back(std::move(e));
        models.push_back(m);
      }
      if (evals.empty()) throw UsageError("no probed models match '" + cr_filter + "'");
      // Criterion 4: replace intervention at the criterion-3 site of the best model.
      std::vector<InterventionOutcome> outcomes;
      for (Method method : kAllMethods) {
        const CriterionScore c3 = criterion3(evals, method);
        if (c3.best_model.empty()) continue;
        std::size_t k = 0;
        while (models[k].id() != c3.best_model) ++k;
        const fs::path ckpt = fs::path(models[k].model_path).is_absolute() ? fs::path(models[k].model_path)
                                                                           : reg_dir / models[k].model_path;
        const TrainedModel t = load_model_dir(ckpt.parent_path());
        InterventionOptions opts;
        opts.probe.split_seed = g.seed;
        InterventionOutcome o =
            intervene_replace(t.model, probe_data(t.job, cr_n, "test"), method, Site::parse(c3.best_site), opts);
        o.model_id = c3.best_model;
        append_new(reg, std::vector<InterventionRecord>{intervention_record(models[k], o)});
        outcomes.push_back(o);
      }
      reg.commit();
      const auto cells = summarize_criteria(evals, outcomes);
      const fs::path out = cr_out.empty() ? reg_dir / "summary.csv" : fs::path(cr_out);
      write_file_atomic(out, summary_to_csv(cells));
      for (const auto& c : cells) {
        std::cout << c.method << " criterion " << c.criterion << ": " << fmt(c.value);
        if (!c.label.empty()) std::cout << " (" << c.label << ")";
        if (!c.best_model.empty()) std::cout << " best " << c.best_model;
        if (!c.best_site.empty()) std::cout << " at " << c.best_site;
        std::cout << "\n";
      }
      std::cout << "wrote " << out.string() << "\n";
    } else if (*rp) {
      const Registry reg(reg_dir);
      const fs::path summary_path = rp_summary.empty() ? reg_dir / "summary.csv" : fs::path(rp_summary);
      std::vector<SummaryCell> summary;
      if (fs::exists(summary_path)) summary = summary_from_csv(read_file(summary_path));
      const fs::path out = rp_out.empty() ? reg_dir / "report" : fs::path(rp_out);
      const auto missing = write_report(reg, summary, out);
      std::cout << read_file(out / "table2.txt");
      for (const auto& m : missing) std::cout << "missing: " << m << "\n";
      std::cout << "wrote " << out.string() << "\n";
    } else if (*qu) {
      const Registry reg(reg_dir);
      const CsvTable& t = reg.table(qu_table);
      std::string header;
      for (std::size_t i = 0; i < t.columns().size(); ++i) header += (i ? "," : "") + csv_escape(t.columns()[i]);
      const auto ids = query(t, qu_filter);
      std::cout << header << "\n";
      for (auto id : ids) {
        const auto& row = t.row(id);
        for (std::size_t i = 0; i < row.size(); ++i) std::cout << (i ? "," : "") << csv_escape(row[i]);
        std::cout << "\n";
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
