#include "oscilloprobe/registry.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <set>
#include <sstream>

namespace oscilloprobe {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- csv

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    any = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quote");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

CsvTable::CsvTable(std::vector<std::string> columns, std::vector<std::string> key_columns)
    : columns_(std::move(columns)) {
  for (const auto& k : key_columns) key_index_.push_back(column(k));
}

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(columns_.begin(), columns_.end(), name);
  if (it == columns_.end()) throw UsageError("unknown column '" + name + "'");
  return static_cast<std::size_t>(it - columns_.begin());
}

std::string CsvTable::key_of(const std::vector<std::string>& row) const {
  std::string key;
  for (auto k : key_index_) {
    key += row[k];
    key += '\x1f';
  }
  return key;
}

std::size_t CsvTable::append(std::vector<std::string> row) {
  if (row.size() != columns_.size()) {
    throw UsageError("schema mismatch: expected " + std::to_string(columns_.size()) + " fields, got " +
                     std::to_string(row.size()));
  }
  const std::string key = key_of(row);
  if (const auto it = keys_.find(key); it != keys_.end()) {
    throw DuplicateKeyError("duplicate key (existing row " + std::to_string(it->second) + ")", it->second);
  }
  keys_.emplace(key, rows_.size());
  rows_.push_back(std::move(row));
  return rows_.size() - 1;
}

std::string CsvTable::to_csv() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += csv_escape(fields[i]);
    }
    out += '\n';
  };
  line(columns_);
  for (const auto& r : rows_) line(r);
  return out;
}

void CsvTable::load(const fs::path& path) {
  auto rows = parse_csv(read_file(path));
  if (rows.empty() || rows.front() != columns_) throw FormatError("schema mismatch in " + path.string());
  rows_.clear();
  keys_.clear();
  for (std::size_t i = 1; i < rows.size(); ++i) {
    try {
      append(std::move(rows[i]));
    } catch (const UsageError& e) {
      throw FormatError(path.string() + " row " + std::to_string(i) + ": " + e.what());
    }
  }
}

void CsvTable::save(const fs::path& path) const { write_file_atomic(path, to_csv()); }

// ---------------------------------------------------------------- query

namespace {

// Short names; the first candidate present in the table is used.
const std::map<std::string, std::vector<std::string>>& aliases() {
  static const std::map<std::string, std::vector<std::string>> a{
      {"L", {"model-layer"}},
      {"H", {"model-emb"}},
      {"CL", {"probe-CL"}},
      {"method", {"probe-targetmethod", "int-method"}},
  };
  return a;
}

// "site" is derived: "embed" or "L<layer>.<inlayerpos>".
const std::vector<std::pair<std::string, std::string>> kSiteColumns{{"probe-layer", "probe-inlayerpos"},
                                                                    {"int-layer", "int-inlayerpos"}};

bool has_column(const CsvTable& t, const std::string& name) {
  return std::find(t.columns().begin(), t.columns().end(), name) != t.columns().end();
}

// Column index of a name or alias; npos for the derived site column.
std::size_t resolve_column(const CsvTable& t, const std::string& name) {
  if (has_column(t, name)) return t.column(name);
  if (const auto it = aliases().find(name); it != aliases().end()) {
    for (const auto& c : it->second) {
      if (has_column(t, c)) return t.column(c);
    }
  }
  if (name == "site") {
    for (const auto& [layer, pos] : kSiteColumns) {
      if (has_column(t, layer) && has_column(t, pos)) return std::string::npos;
    }
  }
  return t.column(name);  // throws
}

std::string cell(const CsvTable& t, std::size_t row, const std::string& name) {
  const std::size_t c = resolve_column(t, name);
  const auto& r = t.row(row);
  if (c != std::string::npos) return r[c];
  for (const auto& [layer, pos] : kSiteColumns) {
    if (!has_column(t, layer)) continue;
    const std::string& l = r[t.column(layer)];
    return l == "0" ? "embed" : "L" + l + "." + r[t.column(pos)];
  }
  return "";
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool as_number(const std::string& s, double& v) {
  try {
    v = parse_double(s);
    return true;
  } catch (const FormatError&) {
    return false;
  }
}

// -1, 0, 1; numeric when both parse.
int compare(const std::string& a, const std::string& b) {
  double x = 0.0, y = 0.0;
  if (as_number(a, x) && as_number(b, y)) return x < y ? -1 : (x > y ? 1 : 0);
  return a < b ? -1 : (a > b ? 1 : 0);
}

}  // namespace

std::vector<FilterClause> parse_filter(const std::string& expression) {
  std::vector<FilterClause> out;
  std::vector<std::string> parts;
  std::string cur;
  int depth = 0;
  for (char c : expression) {
    if (c == '{') ++depth;
    if (c == '}') --depth;
    if (c == '&' && depth == 0) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  for (const auto& raw : parts) {
    const std::string part = trim(raw);
    if (part.empty()) {
      if (parts.size() == 1) break;
      throw UsageError("empty filter clause in '" + expression + "'");
    }
    FilterClause clause;
    const auto in_pos = part.find(" in ");
    if (in_pos != std::string::npos) {
      clause.column = trim(part.substr(0, in_pos));
      clause.op = "in";
      std::string set = trim(part.substr(in_pos + 4));
      if (set.size() < 2 || set.front() != '{' || set.back() != '}') {
        throw UsageError("set membership needs {a,b,...}: '" + part + "'");
      }
      std::stringstream ss(set.substr(1, set.size() - 2));
      for (std::string v; std::getline(ss, v, ',');) clause.values.push_back(trim(v));
    } else {
      const auto op = part.find_first_of("=<>");
      if (op == std::string::npos || op == 0) throw UsageError("cannot parse filter clause '" + part + "'");
      clause.column = trim(part.substr(0, op));
      clause.op = std::string(1, part[op]);
      clause.values.push_back(trim(part.substr(op + 1)));
    }
    out.push_back(std::move(clause));
  }
  return out;
}

bool matches(const CsvTable& table, std::size_t row, const std::vector<FilterClause>& filter) {
  for (const auto& c : filter) {
    const std::string v = cell(table, row, c.column);
    bool ok = false;
    if (c.op == "=") ok = compare(v, c.values[0]) == 0;
    else if (c.op == "<") ok = compare(v, c.values[0]) < 0;
    else if (c.op == ">") ok = compare(v, c.values[0]) > 0;
    else ok = std::any_of(c.values.begin(), c.values.end(), [&](const auto& x) { return compare(v, x) == 0; });
    if (!ok) return false;
  }
  return true;
}

std::vector<std::size_t> query(const CsvTable& table, const std::string& expression) {
  const auto filter = parse_filter(expression);
  for (const auto& c : filter) resolve_column(table, c.column);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (matches(table, i, filter)) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------- records

namespace {

const std::vector<std::string> kModelColumns{"model-datatype", "model-emb",         "model-layer",
                                             "model-epoch",    "model-CL",          "model-lr",
                                             "model-totalepochs", "model-batch",    "model-modelpath",
                                             "seed",           "model-status"};
const std::vector<std::string> kModelKey{"model-datatype", "model-layer", "model-emb", "seed", "model-totalepochs"};

const std::vector<std::string> kProbeOwn{"probe-datatype", "probe-traintest", "probe-datasplit", "probe-kind",
                                         "probe-targetmethod", "probe-targetname", "probe-layer",
                                         "probe-inlayerpos", "probe-CL", "probe-R2", "probe-MSE",
                                         "probe-savepath", "probe-flagged", "probe-flagreason"};
const std::vector<std::string> kProbeKey{"probe-datatype", "probe-traintest",  "probe-datasplit",
                                         "probe-kind",     "probe-targetmethod", "probe-targetname",
                                         "probe-layer",    "probe-inlayerpos", "probe-CL"};

const std::vector<std::string> kInterventionOwn{
    "int-layer",   "int-inlayerpos", "int-method",       "int-mode",        "int-dtfactor",
    "int-omegafactor", "int-wprime", "int-postmse",      "int-baselinemse", "int-copylastmse",
    "int-cleanmse", "int-impliederror", "int-classification", "int-nseries", "int-warning"};
const std::vector<std::string> kInterventionKey{"int-layer", "int-inlayerpos", "int-method", "int-mode",
                                                "int-dtfactor", "int-omegafactor", "int-wprime"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

const std::set<std::string> kInLayerPos{"embed", "attn", "attn-res", "mlp", "mlp-res"};

std::string num(double v) { return format_double(v); }
std::string num(int v) { return std::to_string(v); }
std::string num(std::uint64_t v) { return std::to_string(v); }

int to_int(const std::string& s) {
  const double v = parse_double(s);
  if (v != static_cast<int>(v)) throw FormatError("not an integer: '" + s + "'");
  return static_cast<int>(v);
}

std::uint64_t to_u64(const std::string& s) {
  std::size_t used = 0;
  const auto v = std::stoull(s, &used);
  if (used != s.size()) throw FormatError("not an integer: '" + s + "'");
  return v;
}

std::vector<std::string> model_fields(const ModelRecord& r) {
  return {r.datatype,        num(r.emb),   num(r.layer),   num(r.epoch), num(r.context), num(r.lr),
          num(r.total_epochs), num(r.batch), r.model_path, num(r.seed),  r.status};
}

ModelRecord model_from(const std::vector<std::string>& f) {
  ModelRecord r;
  r.datatype = f[0];
  r.emb = to_int(f[1]);
  r.layer = to_int(f[2]);
  r.epoch = to_int(f[3]);
  r.context = to_int(f[4]);
  r.lr = parse_double(f[5]);
  r.total_epochs = to_int(f[6]);
  r.batch = to_int(f[7]);
  r.model_path = f[8];
  r.seed = to_u64(f[9]);
  r.status = f[10];
  return r;
}

void validate_model(const ModelRecord& r, const fs::path& dir) {
  if (r.datatype.empty()) throw UsageError("model record needs a datatype");
  if (r.layer <= 0 || r.emb <= 0) throw UsageError("model record needs positive L and H");
  if (r.status == "complete") {
    // Lexical normalization: the registry directory may not exist yet, and
    // the kernel cannot resolve ".." through a missing directory.
    const fs::path p = (fs::absolute(dir) / r.model_path).lexically_normal();
    if (r.model_path.empty() || !fs::exists(p)) {
      throw UsageError("complete model record points at missing checkpoint '" + r.model_path + "'");
    }
  }
}

}  // namespace

std::string ModelRecord::id() const {
  return datatype + "-L" + std::to_string(layer) + "-H" + std::to_string(emb) + "-s" + std::to_string(seed) +
         "-e" + std::to_string(total_epochs);
}

Registry::Registry(fs::path dir)
    : dir_(std::move(dir)),
      models_(kModelColumns, kModelKey),
      probes_(concat(kModelColumns, kProbeOwn), concat(kModelKey, kProbeKey)),
      interventions_(concat(kModelColumns, kInterventionOwn), concat(kModelKey, kInterventionKey)) {
  if (fs::exists(dir_ / "models.csv")) models_.load(dir_ / "models.csv");
  if (fs::exists(dir_ / "probes.csv")) probes_.load(dir_ / "probes.csv");
  if (fs::exists(dir_ / "interventions.csv")) interventions_.load(dir_ / "interventions.csv");
}

std::size_t Registry::append(const ModelRecord& r) {
  validate_model(r, dir_);
  return models_.append(model_fields(r));
}

std::size_t Registry::append(const ProbeRecord& r) {
  if (!kInLayerPos.count(r.inlayerpos)) throw UsageError("invalid probe-inlayerpos '" + r.inlayerpos + "'");
  if (r.context < 0 || (r.model.context > 0 && r.context >= r.model.context)) {
    throw UsageError("probe-CL " + std::to_string(r.context) + " outside [0, sequence length)");
  }
  if (r.layer < 0 || r.layer > r.model.layer) throw UsageError("probe-layer beyond the model depth");
  auto f = model_fields(r.model);
  const std::vector<std::string> own{r.datatype,    r.traintest,      r.data_split,    r.kind,
                                     r.target_method, r.target_name,  num(r.layer),    r.inlayerpos,
                                     num(r.context), num(r.r2),       num(r.mse),      r.save_path,
                                     r.flagged ? "1" : "0", r.flag_reason};
  return probes_.append(concat(std::move(f), own));
}

std::size_t Registry::append(const InterventionRecord& r) {
  if (!kInLayerPos.count(r.inlayerpos)) throw UsageError("invalid int-inlayerpos '" + r.inlayerpos + "'");
  auto f = model_fields(r.model);
  const std::vector<std::string> own{num(r.layer),        r.inlayerpos,         r.method,
                                     r.mode,              num(r.dt_factor),     num(r.omega_factor),
                                     num(r.w_prime),      num(r.post_mse),      num(r.baseline_mse),
                                     num(r.copy_last_mse), num(r.clean_mse),    num(r.implied_error),
                                     r.classification,    num(r.n_series),      r.warning};
  return interventions_.append(concat(std::move(f), own));
}

void Registry::commit() const {
  fs::create_directories(dir_);
  models_.save(dir_ / "models.csv");
  probes_.save(dir_ / "probes.csv");
  interventions_.save(dir_ / "interventions.csv");
}

const CsvTable& Registry::table(const std::string& name) const {
  if (name == "models") return models_;
  if (name == "probes") return probes_;
  if (name == "interventions") return interventions_;
  throw UsageError("unknown table '" + name + "' (models, probes, interventions)");
}

ModelRecord Registry::model(std::size_t id) const { return model_from(models_.row(id)); }

ProbeRecord Registry::probe(std::size_t id) const {
  const auto& f = probes_.row(id);
  ProbeRecord r;
  r.model = model_from(f);
  std::size_t i = kModelColumns.size();
  r.datatype = f[i++];
  r.traintest = f[i++];
  r.data_split = f[i++];
  r.kind = f[i++];
  r.target_method = f[i++];
  r.target_name = f[i++];
  r.layer = to_int(f[i++]);
  r.inlayerpos = f[i++];
  r.context = to_int(f[i++]);
  r.r2 = parse_double(f[i++]);
  r.mse = parse_double(f[i++]);
  r.save_path = f[i++];
  r.flagged = f[i++] == "1";
  r.flag_reason = f[i++];
  return r;
}

InterventionRecord Registry::intervention(std::size_t id) const {
  const auto& f = interventions_.row(id);
  InterventionRecord r;
  r.model = model_from(f);
  std::size_t i = kModelColumns.size();
  r.layer = to_int(f[i++]);
  r.inlayerpos = f[i++];
  r.method = f[i++];
  r.mode = f[i++];
  r.dt_factor = parse_double(f[i++]);
  r.omega_factor = parse_double(f[i++]);
  r.w_prime = parse_double(f[i++]);
  r.post_mse = parse_double(f[i++]);
  r.baseline_mse = parse_double(f[i++]);
  r.copy_last_mse = parse_double(f[i++]);
  r.clean_mse = parse_double(f[i++]);
  r.implied_error = parse_double(f[i++]);
  r.classification = f[i++];
  r.n_series = to_int(f[i++]);
  r.warning = f[i++];
  return r;
}

// ---------------------------------------------------------------- summary and report

namespace {

const std::vector<std::string> kSummaryColumns{"method", "criterion", "value", "label", "best_model", "best_site"};

std::string fixed(double v, int digits = 3) {
  if (is_undefined(v)) return "-";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string join_csv(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(fields[i]);
  }
  return out + "\n";
}

}  // namespace

std::string summary_to_csv(const std::vector<SummaryCell>& cells) {
  std::string out = join_csv(kSummaryColumns);
  for (const auto& c : cells) {
    out += join_csv({c.method, std::to_string(c.criterion), format_double(c.value), c.label, c.best_model,
                     c.best_site});
  }
  return out;
}

std::vector<SummaryCell> summary_from_csv(const std::string& text) {
  const auto rows = parse_csv(text);
  if (rows.empty() || rows.front() != kSummaryColumns) throw FormatError("summary: header mismatch");
  std::vector<SummaryCell> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != kSummaryColumns.size()) throw FormatError("summary: bad row " + std::to_string(i));
    out.push_back({r[0], to_int(r[1]), parse_double(r[2]), r[3], r[4], r[5]});
  }
  return out;
}

std::vector<std::string> write_report(const Registry& registry, const std::vector<SummaryCell>& summary,
                                      const fs::path& out) {
  fs::create_directories(out);
  std::set<std::string> missing;
  if (summary.empty()) missing.insert("criteria summary");

  auto exists = [&](const std::string& p) {
    const fs::path path = fs::path(p).is_absolute() ? fs::path(p) : registry.dir() / p;
    return fs::exists(path);
  };
  for (std::size_t i = 0; i < registry.models().size(); ++i) {
    const ModelRecord m = registry.model(i);
    if (m.status == "complete" && !exists(m.model_path)) missing.insert("model " + m.id() + ": " + m.model_path);
  }
  for (std::size_t i = 0; i < registry.probes().size(); ++i) {
    const auto& row = registry.probes().row(i);
    const std::string& path = row[registry.probes().column("probe-savepath")];
    if (!path.empty() && !exists(path)) missing.insert("probe capture: " + path);
  }

  // (a) method x criterion table.
  std::vector<std::string> methods;
  for (const auto& c : summary) {
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) methods.push_back(c.method);
  }
  write_file_atomic(out / "table2.csv", summary_to_csv(summary));
  std::vector<std::vector<std::string>> grid{{"method", "criterion 1", "criterion 2", "criterion 3", "criterion 4"}};
  for (const auto& m : methods) {
    std::vector<std::string> line{m, "-", "-", "-", "-"};
    for (const auto& c : summary) {
      if (c.method != m || c.criterion < 1 || c.criterion > 4) continue;
      std::string text = fixed(c.value);
      if (!c.label.empty()) text += " (" + c.label + ")";
      line[static_cast<std::size_t>(c.criterion)] = text;
    }
    grid.push_back(line);
  }
  std::vector<std::size_t> width(grid.front().size(), 0);
  for (const auto& line : grid)
    for (std::size_t k = 0; k < line.size(); ++k) width[k] = std::max(width[k], line[k].size());
  std::ostringstream txt;
  for (const auto& line : grid) {
    for (std::size_t k = 0; k < line.size(); ++k) {
      txt << std::left << std::setw(static_cast<int>(width[k])) << line[k];
      txt << (k + 1 < line.size() ? "  " : "");
    }
    txt << '\n';
  }
  std::string text = txt.str();
  // Trailing padding on the last column is noise in diffs.
  std::string trimmed;
  std::istringstream lines(text);
  for (std::string l; std::getline(lines, l);) trimmed += l.substr(0, l.find_last_not_of(' ') + 1) + "\n";
  write_file_atomic(out / "table2.txt", trimmed);

  // (b) per-CL r2 curves: held-out linear probes, averaged over each method's targets.
  const CsvTable& probes = registry.probes();
  using CurveKey = std::tuple<std::string, std::string, int, int, std::string>;  // model, split, CL, site, method
  std::map<CurveKey, std::pair<double, int>> curve;
  std::map<CurveKey, int> flagged;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const ProbeRecord p = registry.probe(i);
    if (p.kind != "linear" || p.traintest != "held-out") continue;
    const std::string site_name = p.layer == 0 ? "embed" : "L" + std::to_string(p.layer) + "." + p.inlayerpos;
    const CurveKey key{p.model.id(), p.data_split, p.context, p.layer, site_name + "|" + p.target_method};
    if (p.flagged || is_undefined(p.r2)) {
      flagged[key] += 1;
      curve.try_emplace(key, 0.0, 0);
      continue;
    }
    curve[key].first += p.r2;
    curve[key].second += 1;
  }
  std::string curves = join_csv({"model", "split", "site", "CL", "method", "mean_r2", "targets", "flagged"});
  for (const auto& [key, acc] : curve) {
    const auto& [model, split, cl, layer, site_method] = key;
    (void)layer;
    const auto bar = site_method.find('|');
    curves += join_csv({model, split, site_method.substr(0, bar), std::to_string(cl), site_method.substr(bar + 1),
                        acc.second ? format_double(acc.first / acc.second) : "nan", std::to_string(acc.second),
                        std::to_string(flagged.count(key) ? flagged.at(key) : 0)});
  }
  write_file_atomic(out / "curves.csv", curves);

  // (c) intervention sweeps.
  std::string sweeps = join_csv({"model", "site", "method", "mode", "dt_factor", "omega_factor", "w_prime",
                                 "post_mse", "baseline_mse", "clean_mse", "copy_last_mse", "implied_error",
                                 "classification", "warning"});
  for (std::size_t i = 0; i < registry.interventions().size(); ++i) {
    const InterventionRecord r = registry.intervention(i);
    const std::string site = r.layer == 0 ? "embed" : "L" + std::to_string(r.layer) + "." + r.inlayerpos;
    sweeps += join_csv({r.model.id(), site, r.method, r.mode, format_double(r.dt_factor),
                        format_double(r.omega_factor), format_double(r.w_prime), format_double(r.post_mse),
                        format_double(r.baseline_mse), format_double(r.clean_mse), format_double(r.copy_last_mse),
                        format_double(r.implied_error), r.classification, r.warning});
  }
  write_file_atomic(out / "sweeps.csv", sweeps);

  std::string missing_text;
  for (const auto& m : missing) missing_text += m + "\n";
  write_file_atomic(out / "missing-inputs.txt", missing_text);
  return {missing.begin(), missing.end()};
}

}  // namespace oscilloprobe
