#include "oscilloprobe/dynamics.hpp"

#include "oscilloprobe/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace oscilloprobe {

namespace {

using nlohmann::json;

// sin(w t) / w without the 0/0 at w -> 0.
double sin_over(double w, double t) {
  const double th = w * t;
  if (std::abs(th) < 1e-4) {
    const double th2 = th * th;
    return t * (1.0 - th2 / 6.0 * (1.0 - th2 / 20.0));
  }
  return std::sin(th) / w;
}

std::string describe(const OscParams& p) {
  std::ostringstream os;
  os << "(omega0=" << format_double(p.omega0) << ", gamma=" << format_double(p.gamma)
     << ", dt=" << format_double(p.dt) << ", x0=" << format_double(p.x0)
     << ", v0=" << format_double(p.v0) << ")";
  return os.str();
}

enum Field : std::uint64_t {
  kOmegaBand = 1,
  kOmega = 2,
  kDt = 3,
  kGamma = 4,
  kX0 = 5,
  kV0 = 6,
  kRegimePick = 7,
  kWBand = 8,
  kW = 9,
  kX = 10,
};

double draw(std::uint64_t seed, std::uint64_t series, Field field, std::uint64_t index = 0) {
  return counter_uniform(seed, hash_combine(series, field), index);
}

double in_interval(const Interval& iv, double u) { return iv.lo + iv.width() * u; }

void check_bands(const Bands& bands, const char* what) {
  if (bands.empty()) throw UsageError(std::string(what) + ": empty range");
  for (const auto& b : bands) {
    if (!(b.hi >= b.lo) || !std::isfinite(b.lo) || !std::isfinite(b.hi)) {
      throw UsageError(std::string(what) + ": invalid interval");
    }
  }
}

// Band picked with probability proportional to its width, i.e. a uniform
// density over the union.
double sample_bands(const Bands& bands, double u_band, double u_value) {
  double total = 0.0;
  for (const auto& b : bands) total += b.width();
  if (total <= 0.0) return in_interval(bands.front(), u_value);
  double acc = 0.0;
  for (const auto& b : bands) {
    acc += b.width();
    if (u_band * total < acc) return in_interval(b, u_value);
  }
  return in_interval(bands.back(), u_value);
}

json bands_to_json(const Bands& bands) {
  json out = json::array();
  for (const auto& b : bands) out.push_back({b.lo, b.hi});
  return out;
}

Bands bands_from_json(const json& j) {
  Bands out;
  for (const auto& b : j) out.push_back({b.at(0).get<double>(), b.at(1).get<double>()});
  return out;
}

}  // namespace

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::undamped: return "undamped";
    case Regime::underdamped: return "underdamped";
    case Regime::critical: return "critical";
    case Regime::overdamped: return "overdamped";
  }
  return "?";
}

Regime OscParams::regime() const {
  if (gamma == 0.0) return Regime::undamped;
  if (std::abs(gamma - omega0) <= kCriticalTolerance * omega0) return Regime::critical;
  return gamma < omega0 ? Regime::underdamped : Regime::overdamped;
}

void OscParams::validate() const {
  const bool finite = std::isfinite(omega0) && std::isfinite(gamma) && std::isfinite(dt) &&
                      std::isfinite(x0) && std::isfinite(v0);
  if (!finite || !(omega0 > 0.0) || gamma < 0.0 || dt < 0.0) {
    throw UsageError("invalid oscillator parameters " + describe(*this));
  }
}

State closed_form_state(const OscParams& p, std::int64_t k) {
  p.validate();
  if (k < 0) throw UsageError("closed_form_state: negative step index");
  if (k == 0) return {p.x0, p.v0};

  const double t = static_cast<double>(k) * p.dt;
  const double b = p.v0 + p.gamma * p.x0;
  State s;
  switch (p.regime()) {
    case Regime::undamped: {
      const double th = p.omega0 * t;
      const double c = std::cos(th);
      const double sn = std::sin(th);
      s.x = p.x0 * c + p.v0 / p.omega0 * sn;
      s.v = p.v0 * c - p.omega0 * p.x0 * sn;
      break;
    }
    case Regime::underdamped: {
      // (omega0 - gamma)(omega0 + gamma) keeps omega accurate near critical.
      const double w2 = (p.omega0 - p.gamma) * (p.omega0 + p.gamma);
      const double w = std::sqrt(w2);
      const double decay = std::exp(-p.gamma * t);
      const double c = std::cos(w * t);
      const double so = sin_over(w, t);
      s.x = decay * (p.x0 * c + b * so);
      s.v = decay * (p.v0 * c - (b * p.gamma + p.x0 * w2) * so);
      break;
    }
    case Regime::critical: {
      // Within the tolerance band w^2 may be slightly nonzero; keep its series terms.
      const double w2 = (p.omega0 - p.gamma) * (p.omega0 + p.gamma);
      const double u = w2 * t * t;
      const double decay = std::exp(-p.gamma * t);
      const double c = 1.0 - u / 2.0 * (1.0 - u / 12.0);
      const double so = t * (1.0 - u / 6.0 * (1.0 - u / 20.0));
      s.x = decay * (p.x0 * c + b * so);
      s.v = decay * (p.v0 * c - (b * p.gamma + p.x0 * w2) * so);
      break;
    }
    case Regime::overdamped: {
      const double w2 = (p.gamma - p.omega0) * (p.gamma + p.omega0);
      const double w = std::sqrt(w2);
      // Both rates are positive; gamma - w is formed without cancellation.
      const double slow = p.omega0 * p.omega0 / (p.gamma + w);
      const double fast = p.gamma + w;
      const double e_slow = std::exp(-slow * t);
      const double e_fast = std::exp(-fast * t);
      const double cosh_part = 0.5 * (e_slow + e_fast);
      // (e_slow - e_fast) / (2w)
      const double sinh_part = -e_slow * std::expm1(-2.0 * w * t) / (2.0 * w);
      s.x = p.x0 * cosh_part + b * sinh_part;
      s.v = p.v0 * cosh_part - (p.gamma * b - p.x0 * w2) * sinh_part;
      break;
    }
  }
  if (!std::isfinite(s.x) || !std::isfinite(s.v)) {
    throw GenerationError("non-finite state at k=" + std::to_string(k) + " for " + describe(p));
  }
  return s;
}

Trajectory make_trajectory(const OscParams& params, std::size_t length) {
  Trajectory tr{params, {}};
  tr.states.reserve(length);
  for (std::size_t k = 0; k < length; ++k) {
    tr.states.push_back(closed_form_state(params, static_cast<std::int64_t>(k)));
  }
  return tr;
}

std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::linreg: return "linreg";
    case DatasetKind::sho_undamped: return "sho-undamped";
    case DatasetKind::sho_underdamped: return "sho-underdamped";
    case DatasetKind::sho_overdamped: return "sho-overdamped";
    case DatasetKind::sho_damped_mixed: return "sho-damped-mixed";
  }
  return "?";
}

std::string_view to_string(Split s) { return s == Split::train ? "train" : "ood-test"; }

DatasetKind parse_dataset_kind(std::string_view s) {
  for (auto k : {DatasetKind::linreg, DatasetKind::sho_undamped, DatasetKind::sho_underdamped,
                 DatasetKind::sho_overdamped, DatasetKind::sho_damped_mixed}) {
    if (to_string(k) == s) return k;
  }
  throw UsageError("unknown dataset kind '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "ood-test" || s == "ood" || s == "test") return Split::ood_test;
  throw UsageError("unknown split '" + std::string(s) + "'");
}

std::size_t Dataset::length() const {
  if (is_linreg()) return regressions.empty() ? 0 : regressions.front().xs.size();
  return trajectories.empty() ? 0 : trajectories.front().length();
}

LinregConfig LinregConfig::standard(Split split) {
  LinregConfig c;
  c.split = split;
  if (split == Split::ood_test) c.w = {{-1.0, -0.75}, {0.75, 1.0}};
  return c;
}

std::string LinregConfig::to_json() const {
  json j{{"n_series", n_series}, {"length", length}, {"w", bands_to_json(w)},
         {"x", bands_to_json(x)}, {"split", std::string(to_string(split))}};
  return j.dump();
}

LinregConfig LinregConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  LinregConfig c;
  c.n_series = j.at("n_series").get<std::size_t>();
  c.length = j.at("length").get<std::size_t>();
  c.w = bands_from_json(j.at("w"));
  c.x = bands_from_json(j.at("x"));
  c.split = parse_split(j.at("split").get<std::string>());
  return c;
}

ShoConfig ShoConfig::standard(DatasetKind kind, Split split) {
  using std::numbers::pi;
  if (!is_sho(kind)) throw UsageError("ShoConfig::standard: not an oscillator kind");
  ShoConfig c;
  c.kind = kind;
  c.split = split;
  if (kind == DatasetKind::sho_undamped) {
    c.length = 65;
    c.omega0 = {{pi / 4, 5 * pi / 4}};
    c.dt_span = 2 * pi;
  } else {
    c.length = 32;
    c.omega0 = {{0.25 * pi, 1.25 * pi}};
    c.dt_span = 2 * pi / 13;
  }
  if (split == Split::ood_test) c.omega0 = {{0.0, pi / 4}, {5 * pi / 4, 1.5 * pi}};
  return c;
}

std::string ShoConfig::to_json() const {
  json j{{"kind", std::string(to_string(kind))},
         {"split", std::string(to_string(split))},
         {"n_series", n_series},
         {"length", length},
         {"omega0", bands_to_json(omega0)},
         {"dt_span", dt_span},
         {"gamma_max", gamma_max},
         {"x0", {x0.lo, x0.hi}},
         {"v0", {v0.lo, v0.hi}}};
  return j.dump();
}

ShoConfig ShoConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  ShoConfig c;
  c.kind = parse_dataset_kind(j.at("kind").get<std::string>());
  c.split = parse_split(j.at("split").get<std::string>());
  c.n_series = j.at("n_series").get<std::size_t>();
  c.length = j.at("length").get<std::size_t>();
  c.omega0 = bands_from_json(j.at("omega0"));
  c.dt_span = j.at("dt_span").get<double>();
  c.gamma_max = j.at("gamma_max").get<double>();
  c.x0 = {j.at("x0").at(0).get<double>(), j.at("x0").at(1).get<double>()};
  c.v0 = {j.at("v0").at(0).get<double>(), j.at("v0").at(1).get<double>()};
  return c;
}

Dataset generate_linreg(std::size_t n_series, std::size_t length, Interval w_range,
                        Interval x_range, std::uint64_t seed) {
  LinregConfig c;
  c.n_series = n_series;
  c.length = length;
  c.w = {w_range};
  c.x = {x_range};
  return generate_linreg(c, seed);
}

Dataset generate_linreg(const LinregConfig& config, std::uint64_t seed) {
  if (config.n_series == 0 || config.length == 0) {
    throw UsageError("generate_linreg: n_series and length must be positive");
  }
  check_bands(config.w, "w range");
  check_bands(config.x, "x range");

  Dataset ds;
  ds.kind = DatasetKind::linreg;
  ds.split = config.split;
  ds.seed = seed;
  ds.config_json = config.to_json();
  ds.regressions.resize(config.n_series);
  for (std::size_t s = 0; s < config.n_series; ++s) {
    auto& series = ds.regressions[s];
    series.w = sample_bands(config.w, draw(seed, s, kWBand), draw(seed, s, kW));
    series.xs.resize(config.length);
    series.ys.resize(config.length);
    for (std::size_t i = 0; i < config.length; ++i) {
      const double x = sample_bands(config.x, draw(seed, s, kX, 2 * i), draw(seed, s, kX, 2 * i + 1));
      series.xs[i] = x;
      series.ys[i] = series.w * x;
    }
  }
  return ds;
}

OscParams sample_sho_params(const ShoConfig& config, std::uint64_t seed, std::uint64_t index) {
  OscParams p;
  p.omega0 = sample_bands(config.omega0, draw(seed, index, kOmegaBand), draw(seed, index, kOmega));
  p.dt = config.dt_span / p.omega0 * draw(seed, index, kDt);
  p.x0 = in_interval(config.x0, draw(seed, index, kX0));
  p.v0 = in_interval(config.v0, draw(seed, index, kV0));

  DatasetKind regime_kind = config.kind;
  if (regime_kind == DatasetKind::sho_damped_mixed) {
    regime_kind = draw(seed, index, kRegimePick) < 0.5 ? DatasetKind::sho_underdamped
                                                        : DatasetKind::sho_overdamped;
  }
  const double ug = draw(seed, index, kGamma);
  switch (regime_kind) {
    case DatasetKind::sho_undamped: p.gamma = 0.0; break;
    case DatasetKind::sho_underdamped: p.gamma = p.omega0 * ug; break;
    case DatasetKind::sho_overdamped:
      if (config.gamma_max < p.omega0) {
        throw GenerationError("overdamped sampling needs gamma_max >= omega0");
      }
      p.gamma = p.omega0 + (config.gamma_max - p.omega0) * ug;
      break;
    default: throw UsageError("sample_sho_params: not an oscillator kind");
  }
  return p;
}

Dataset generate_sho(const ShoConfig& config, std::uint64_t seed) {
  if (!is_sho(config.kind)) throw UsageError("generate_sho: not an oscillator kind");
  if (config.n_series == 0 || config.length == 0) {
    throw UsageError("generate_sho: n_series and length must be positive");
  }
  check_bands(config.omega0, "omega0 range");
  for (const auto& b : config.omega0) {
    if (b.lo < 0.0) throw UsageError("omega0 range must be non-negative");
  }

  Dataset ds;
  ds.kind = config.kind;
  ds.split = config.split;
  ds.seed = seed;
  ds.config_json = config.to_json();
  ds.trajectories.reserve(config.n_series);
  for (std::size_t s = 0; s < config.n_series; ++s) {
    const OscParams p = sample_sho_params(config, seed, s);
    if (p.dt < 1e-6) ++ds.tiny_dt_count;
    try {
      ds.trajectories.push_back(make_trajectory(p, config.length));
    } catch (const GenerationError& e) {
      throw GenerationError("series " + std::to_string(s) + ": " + e.what());
    }
  }
  return ds;
}

std::vector<std::size_t> TokenizedDataset::masked_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.push_back(i);
  }
  return out;
}

TokenizedDataset tokenize(const Dataset& dataset) {
  TokenizedDataset td;
  td.n_series = dataset.size();
  const std::size_t len = dataset.length();
  if (td.n_series == 0 || len == 0) throw UsageError("tokenize: empty dataset");

  if (dataset.is_linreg()) {
    td.token_dim = 1;
    td.seq_len = 2 * len;
    td.tokens.reserve(td.n_series * td.seq_len);
    for (const auto& s : dataset.regressions) {
      if (s.xs.size() != len || s.ys.size() != len) throw UsageError("tokenize: ragged series");
      for (std::size_t i = 0; i < len; ++i) {
        td.tokens.push_back(s.xs[i]);
        td.tokens.push_back(s.ys[i]);
      }
    }
    td.mask.assign(td.seq_len, false);
    for (std::size_t i = 0; i < len; ++i) td.mask[2 * i] = true;
  } else {
    td.token_dim = 2;
    td.seq_len = len;
    td.tokens.reserve(td.n_series * td.seq_len * 2);
    for (const auto& tr : dataset.trajectories) {
      if (tr.length() != len) throw UsageError("tokenize: ragged series");
      for (const auto& st : tr.states) {
        td.tokens.push_back(st.x);
        td.tokens.push_back(st.v);
      }
    }
    td.mask.assign(td.seq_len, false);
    for (std::size_t i = 0; i + 1 < len; ++i) td.mask[i] = true;
  }
  return td;
}

std::size_t context_position(DatasetKind kind, std::size_t context_length) {
  return kind == DatasetKind::linreg ? 2 * context_length : context_length;
}

std::size_t context_count(const Dataset& dataset) {
  const std::size_t len = dataset.length();
  if (dataset.is_linreg()) return len;
  return len == 0 ? 0 : len - 1;
}

void write_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
  json header{{"format", "oscilloprobe-dataset"},
              {"version", 1},
              {"kind", std::string(to_string(ds.kind))},
              {"split", std::string(to_string(ds.split))},
              {"seed", ds.seed},
              {"rng", std::string(kRngName) + "/" + std::to_string(kRngVersion)},
              {"tiny_dt_count", ds.tiny_dt_count},
              {"config", json::parse(ds.config_json.empty() ? "{}" : ds.config_json)}};

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write " + tmp);
    out << "# " << header.dump() << '\n';
    if (ds.is_linreg()) {
      out << "series_id,k,x,y,w\n";
      for (std::size_t s = 0; s < ds.regressions.size(); ++s) {
        const auto& r = ds.regressions[s];
        for (std::size_t k = 0; k < r.xs.size(); ++k) {
          out << s << ',' << k << ',' << format_double(r.xs[k]) << ',' << format_double(r.ys[k])
              << ',' << format_double(r.w) << '\n';
        }
      }
    } else {
      out << "series_id,k,x,v,omega0,gamma,dt,x0,v0\n";
      for (std::size_t s = 0; s < ds.trajectories.size(); ++s) {
        const auto& tr = ds.trajectories[s];
        const std::string tail = ',' + format_double(tr.params.omega0) + ',' +
                                 format_double(tr.params.gamma) + ',' +
                                 format_double(tr.params.dt) + ',' + format_double(tr.params.x0) +
                                 ',' + format_double(tr.params.v0);
        for (std::size_t k = 0; k < tr.states.size(); ++k) {
          out << s << ',' << k << ',' << format_double(tr.states[k].x) << ','
              << format_double(tr.states[k].v) << tail << '\n';
        }
      }
    }
    if (!out) throw FormatError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace

Dataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) {
    throw FormatError(path.string() + ": missing dataset header line");
  }
  const json header = json::parse(line.substr(2));
  if (header.value("format", "") != "oscilloprobe-dataset") {
    throw FormatError(path.string() + ": not a dataset file");
  }
  Dataset ds;
  ds.kind = parse_dataset_kind(header.at("kind").get<std::string>());
  ds.split = parse_split(header.at("split").get<std::string>());
  ds.seed = header.at("seed").get<std::uint64_t>();
  ds.tiny_dt_count = header.value("tiny_dt_count", std::size_t{0});
  ds.config_json = header.at("config").dump();

  std::getline(in, line);  // column header
  const std::size_t expected_cols = ds.is_linreg() ? 5 : 9;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != expected_cols) throw FormatError(path.string() + ": bad row '" + line + "'");
    const std::size_t sid = std::stoull(f[0]);
    const std::size_t k = std::stoull(f[1]);
    if (ds.is_linreg()) {
      if (sid == ds.regressions.size()) ds.regressions.push_back({parse_double(f[4]), {}, {}});
      auto& r = ds.regressions.at(sid);
      if (k != r.xs.size()) throw FormatError(path.string() + ": rows out of order");
      r.xs.push_back(parse_double(f[2]));
      r.ys.push_back(parse_double(f[3]));
    } else {
      if (sid == ds.trajectories.size()) {
        OscParams p{parse_double(f[4]), parse_double(f[5]), parse_double(f[6]),
                    parse_double(f[7]), parse_double(f[8])};
        ds.trajectories.push_back({p, {}});
      }
      auto& tr = ds.trajectories.at(sid);
      if (k != tr.states.size()) throw FormatError(path.string() + ": rows out of order");
      tr.states.push_back({parse_double(f[2]), parse_double(f[3])});
    }
  }
  return ds;
}

}  // namespace oscilloprobe
