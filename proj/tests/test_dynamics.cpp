#include "oscilloprobe/dynamics.hpp"
#include "oscilloprobe/rng.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

using namespace oscilloprobe;
using std::numbers::pi;

namespace {

// Substep count keeping |lambda| h around 3e-3 for the RK4 oracle.
long rk4_substeps(const OscParams& p) {
  const double disc = std::sqrt(std::abs(p.gamma * p.gamma - p.omega0 * p.omega0));
  const double rate = std::max(p.omega0, p.gamma + disc);
  return std::max<long>(1, static_cast<long>(std::ceil(rate * p.dt / 3e-3)));
}

OscParams draw_params(Regime regime, Rng& rng) {
  OscParams p;
  p.omega0 = rng.uniform(pi / 4, 5 * pi / 4);
  p.x0 = rng.uniform(-1, 1);
  p.v0 = rng.uniform(-1, 1);
  switch (regime) {
    case Regime::undamped:
      p.dt = rng.uniform(0, 2 * pi / p.omega0);
      break;
    case Regime::underdamped:
      p.gamma = rng.uniform(0, p.omega0);
      p.dt = rng.uniform(0, 2 * pi / (13 * p.omega0));
      break;
    case Regime::critical:
      p.gamma = p.omega0;
      p.dt = rng.uniform(0, 2 * pi / (13 * p.omega0));
      break;
    case Regime::overdamped:
      p.gamma = rng.uniform(p.omega0, 1.5 * pi);
      p.dt = rng.uniform(0, 2 * pi / (13 * p.omega0));
      break;
  }
  return p;
}

}  // namespace

TEST_CASE("regime classification") {
  CHECK(OscParams{1.0, 0.0, 0.1, 0, 0}.regime() == Regime::undamped);
  CHECK(OscParams{1.0, 0.5, 0.1, 0, 0}.regime() == Regime::underdamped);
  CHECK(OscParams{1.0, 1.0, 0.1, 0, 0}.regime() == Regime::critical);
  CHECK(OscParams{1.0, 1.0 + 5e-10, 0.1, 0, 0}.regime() == Regime::critical);
  CHECK(OscParams{1.0, 1.0 + 1e-8, 0.1, 0, 0}.regime() == Regime::overdamped);
  CHECK(OscParams{1.0, 2.0, 0.1, 0, 0}.regime() == Regime::overdamped);
  CHECK_THROWS_AS(OscParams({0.0, 0.0, 0.1, 0, 0}).validate(), UsageError);
  CHECK_THROWS_AS(OscParams({1.0, -0.1, 0.1, 0, 0}).validate(), UsageError);
  CHECK_THROWS_AS(OscParams({1.0, 0.0, -0.1, 0, 0}).validate(), UsageError);
}

TEST_CASE("closed form: half period of the cosine") {
  const State s = closed_form_state({pi, 0.0, 1.0, 1.0, 0.0}, 1);
  CHECK(s.x == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(std::abs(s.v) < 1e-14);
}

TEST_CASE("closed form: k = 0 returns the initial state") {
  Rng rng(3);
  for (auto regime : {Regime::undamped, Regime::underdamped, Regime::critical, Regime::overdamped}) {
    const OscParams p = draw_params(regime, rng);
    CHECK(closed_form_state(p, 0) == State{p.x0, p.v0});
  }
}

TEST_CASE("closed form matches RK4 oracle on the reference underdamped case") {
  const OscParams p{2.0, 0.5, 0.1, 0.3, -0.2};
  const State s = closed_form_state(p, 10);
  const auto [x, v] = oracle::rk4(p.omega0, p.gamma, p.x0, p.v0, 1.0, 100000);
  CHECK(std::abs(s.x - x) < 1e-8);
  CHECK(std::abs(s.v - v) < 1e-8);
}

TEST_CASE("closed form agrees with RK4 over 65 steps in every regime") {
  Rng rng(11);
  for (auto regime : {Regime::undamped, Regime::underdamped, Regime::critical, Regime::overdamped}) {
    double worst = 0.0;
    for (int draw = 0; draw < 100; ++draw) {
      const OscParams p = draw_params(regime, rng);
      REQUIRE(p.regime() == regime);
      const long sub = rk4_substeps(p);
      double x = p.x0, v = p.v0;
      for (int k = 1; k <= 64; ++k) {
        std::tie(x, v) = oracle::rk4(p.omega0, p.gamma, x, v, p.dt, sub);
        const State s = closed_form_state(p, k);
        worst = std::max({worst, std::abs(s.x - x), std::abs(s.v - v)});
      }
    }
    INFO("regime " << to_string(regime) << " worst " << worst);
    CHECK(worst < 1e-7);
  }
}

TEST_CASE("undamped energy is conserved") {
  Rng rng(5);
  for (int draw = 0; draw < 50; ++draw) {
    const OscParams p = draw_params(Regime::undamped, rng);
    const double e0 = p.v0 * p.v0 + p.omega0 * p.omega0 * p.x0 * p.x0;
    for (int k = 1; k < 65; ++k) {
      const State s = closed_form_state(p, k);
      const double e = s.v * s.v + p.omega0 * p.omega0 * s.x * s.x;
      CHECK(std::abs(e - e0) <= 1e-9 * e0);
    }
  }
}

TEST_CASE("underdamped amplitude times e^{gamma t} is conserved") {
  // With the damped frequency w = sqrt(omega0^2 - gamma^2):
  // (w x)^2 + (v + gamma x)^2 = e^{-2 gamma t} ((w x0)^2 + (v0 + gamma x0)^2).
  Rng rng(6);
  for (int draw = 0; draw < 50; ++draw) {
    const OscParams p = draw_params(Regime::underdamped, rng);
    const double w = std::sqrt(p.omega0 * p.omega0 - p.gamma * p.gamma);
    auto amplitude = [&](const State& s) {
      return std::hypot(w * s.x, s.v + p.gamma * s.x);
    };
    const double a0 = amplitude({p.x0, p.v0});
    for (int k = 1; k < 65; ++k) {
      const double a = amplitude(closed_form_state(p, k)) * std::exp(p.gamma * k * p.dt);
      CHECK(std::abs(a - a0) <= 1e-8 * std::max(1.0, a0));
    }
  }
}

TEST_CASE("overdamped envelope bound") {
  Rng rng(7);
  for (int draw = 0; draw < 50; ++draw) {
    const OscParams p = draw_params(Regime::overdamped, rng);
    const double w = std::sqrt(p.gamma * p.gamma - p.omega0 * p.omega0);
    const double c =
        std::abs(p.x0) + (std::abs(p.v0) + p.gamma * std::abs(p.x0) + w * std::abs(p.x0)) / w;
    for (int k = 0; k < 65; ++k) {
      const State s = closed_form_state(p, k);
      CHECK(std::abs(s.x) <= c * std::exp((w - p.gamma) * k * p.dt) * (1 + 1e-12));
    }
  }
}

TEST_CASE("critical damping is continuous with its neighbours") {
  const double omega0 = 1.3;
  for (double rel : {1e-7, 1e-5}) {
    const OscParams below{omega0, omega0 * (1 - rel), 0.2, 0.7, -0.4};
    const OscParams at{omega0, omega0, 0.2, 0.7, -0.4};
    const OscParams above{omega0, omega0 * (1 + rel), 0.2, 0.7, -0.4};
    for (int k : {1, 10, 40}) {
      const State a = closed_form_state(at, k);
      const State b = closed_form_state(below, k);
      const State c = closed_form_state(above, k);
      CHECK(std::abs(a.x - b.x) < 10 * rel);
      CHECK(std::abs(a.x - c.x) < 10 * rel);
      CHECK(std::abs(a.v - b.v) < 10 * rel);
      CHECK(std::abs(a.v - c.v) < 10 * rel);
    }
  }
}

TEST_CASE("closed form errors") {
  CHECK_THROWS_AS(closed_form_state({1.0, 0.0, 0.1, 0, 0}, -1), UsageError);
  CHECK_THROWS_AS(closed_form_state({1.0, 3.0, 0.1, 1e308, 1e308}, 3), GenerationError);
}

TEST_CASE("generate_linreg: standard-sized dataset") {
  const Dataset ds = generate_linreg(5000, 65, {-0.75, 0.75}, {-0.75, 0.75}, 42);
  REQUIRE(ds.size() == 5000);
  CHECK(ds.length() == 65);
  for (const auto& s : ds.regressions) {
    CHECK(s.w >= -0.75);
    CHECK(s.w <= 0.75);
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      CHECK(std::abs(s.ys[i] - s.w * s.xs[i]) <= 1e-12);
      CHECK(std::abs(s.xs[i]) <= 0.75);
    }
  }
}

TEST_CASE("generate_linreg: degenerate ranges") {
  const Dataset ds = generate_linreg(1, 1, {0.5, 0.5}, {2.0, 2.0}, 9);
  REQUIRE(ds.size() == 1);
  CHECK(ds.regressions[0].w == 0.5);
  CHECK(ds.regressions[0].xs[0] == 2.0);
  CHECK(ds.regressions[0].ys[0] == 1.0);
}

TEST_CASE("generate_linreg: out-of-distribution weights stay in band") {
  LinregConfig cfg = LinregConfig::standard(Split::ood_test);
  cfg.n_series = 2000;
  const Dataset ds = generate_linreg(cfg, 4);
  std::size_t positive = 0;
  for (const auto& s : ds.regressions) {
    CHECK(std::abs(s.w) >= 0.75);
    CHECK(std::abs(s.w) <= 1.0);
    positive += s.w > 0;
  }
  CHECK(positive > 900);
  CHECK(positive < 1100);
  CHECK_THROWS_AS(generate_linreg(0, 5, {0, 1}, {0, 1}, 1), UsageError);
  CHECK_THROWS_AS(generate_linreg(5, 5, {1, 0}, {0, 1}, 1), UsageError);
}

TEST_CASE("generate_sho: undamped standard configuration") {
  const Dataset ds = generate_sho(ShoConfig::standard(DatasetKind::sho_undamped, Split::train), 1);
  REQUIRE(ds.size() == 5000);
  CHECK(ds.length() == 65);
  for (const auto& tr : ds.trajectories) {
    CHECK(tr.params.gamma == 0.0);
    CHECK(tr.params.omega0 >= pi / 4);
    CHECK(tr.params.omega0 <= 5 * pi / 4);
    CHECK(tr.params.dt <= 2 * pi / tr.params.omega0);
    CHECK(tr.states[0] == State{tr.params.x0, tr.params.v0});
    CHECK(std::abs(tr.params.x0) <= 1.0);
    CHECK(std::abs(tr.params.v0) <= 1.0);
  }
}

TEST_CASE("generate_sho: damped regimes") {
  auto cfg = ShoConfig::standard(DatasetKind::sho_underdamped, Split::train);
  cfg.n_series = 1000;
  const Dataset under = generate_sho(cfg, 2);
  CHECK(under.length() == 32);
  for (const auto& tr : under.trajectories) {
    CHECK(tr.params.gamma >= 0.0);
    CHECK(tr.params.gamma < tr.params.omega0);
    CHECK(tr.params.dt <= 2 * pi / (13 * tr.params.omega0));
  }
  cfg.kind = DatasetKind::sho_overdamped;
  const Dataset over = generate_sho(cfg, 2);
  for (const auto& tr : over.trajectories) {
    CHECK(tr.params.gamma > tr.params.omega0);
    CHECK(tr.params.gamma <= 1.5 * pi);
  }
  cfg.kind = DatasetKind::sho_damped_mixed;
  const Dataset mixed = generate_sho(cfg, 2);
  const auto n_under = std::count_if(mixed.trajectories.begin(), mixed.trajectories.end(),
                                     [](const Trajectory& t) { return t.params.gamma < t.params.omega0; });
  CHECK(n_under > 420);
  CHECK(n_under < 580);
}

TEST_CASE("generate_sho: OOD omega0 is uniform over the two flanking bands") {
  auto cfg = ShoConfig::standard(DatasetKind::sho_undamped, Split::ood_test);
  cfg.n_series = 4000;
  const Dataset ds = generate_sho(cfg, 8);
  std::size_t low = 0;
  for (const auto& tr : ds.trajectories) {
    const double w = tr.params.omega0;
    const bool in_low = w > 0.0 && w <= pi / 4;
    const bool in_high = w >= 5 * pi / 4 && w <= 1.5 * pi;
    CHECK((in_low || in_high));
    low += in_low;
  }
  CHECK(std::abs(static_cast<double>(low) / 4000.0 - 0.5) < 0.03);
}

TEST_CASE("generation is a pure function of (config, seed)") {
  auto cfg = ShoConfig::standard(DatasetKind::sho_damped_mixed, Split::train);
  cfg.n_series = 300;
  const Dataset a = generate_sho(cfg, 77);
  const Dataset b = generate_sho(cfg, 77);
  REQUIRE(a.size() == b.size());
  for (std::size_t s = 0; s < a.size(); ++s) {
    CHECK(a.trajectories[s].params == b.trajectories[s].params);
    CHECK(a.trajectories[s].states == b.trajectories[s].states);
  }
  // Per-series seed splitting: a prefix of a larger dataset is the smaller one.
  cfg.n_series = 20;
  const Dataset prefix = generate_sho(cfg, 77);
  for (std::size_t s = 0; s < prefix.size(); ++s) {
    CHECK(prefix.trajectories[s].params == a.trajectories[s].params);
  }
  const Dataset other = generate_sho(cfg, 78);
  CHECK_FALSE(other.trajectories[0].params == a.trajectories[0].params);
}

TEST_CASE("tiny dt draws are counted") {
  ShoConfig cfg = ShoConfig::standard(DatasetKind::sho_undamped, Split::train);
  cfg.n_series = 50;
  cfg.dt_span = 1e-7;  // every draw lands below 1e-6
  const Dataset ds = generate_sho(cfg, 3);
  CHECK(ds.tiny_dt_count == 50);
}

TEST_CASE("tokenize: linear regression interleaves x and y") {
  Dataset ds;
  ds.kind = DatasetKind::linreg;
  ds.regressions.push_back({0.5, {0.2, -0.4}, {0.1, -0.2}});
  const TokenizedDataset td = tokenize(ds);
  CHECK(td.token_dim == 1);
  CHECK(td.seq_len == 4);
  CHECK(td.tokens == AlignedBuffer{0.2, 0.1, -0.4, -0.2});
  CHECK(td.masked_positions() == std::vector<std::size_t>{0, 2});
}

TEST_CASE("tokenize: trajectories are 2-vectors with next-state mask") {
  auto cfg = ShoConfig::standard(DatasetKind::sho_undamped, Split::train);
  cfg.n_series = 3;
  const Dataset ds = generate_sho(cfg, 1);
  const TokenizedDataset td = tokenize(ds);
  CHECK(td.token_dim == 2);
  CHECK(td.seq_len == 65);
  const auto pos = td.masked_positions();
  REQUIRE(pos.size() == 64);
  CHECK(pos.front() == 0);
  CHECK(pos.back() == 63);
  CHECK(td.series(2)(5, 0) == ds.trajectories[2].states[5].x);
  CHECK(td.series(2)(5, 1) == ds.trajectories[2].states[5].v);
  for (std::size_t len = 2; len < 6; ++len) {
    cfg.length = len;
    CHECK_FALSE(tokenize(generate_sho(cfg, 1)).masked_positions().empty());
    CHECK_FALSE(tokenize(generate_linreg(2, len, {-1, 1}, {-1, 1}, 1)).masked_positions().empty());
  }
}

TEST_CASE("context positions") {
  CHECK(context_position(DatasetKind::linreg, 32) == 64);
  CHECK(context_position(DatasetKind::sho_undamped, 32) == 32);
}

TEST_CASE("dataset CSV round trip preserves every value") {
  const auto dir = std::filesystem::temp_directory_path() / "oscilloprobe_test_dynamics";
  std::filesystem::create_directories(dir);

  auto cfg = ShoConfig::standard(DatasetKind::sho_damped_mixed, Split::ood_test);
  cfg.n_series = 40;
  const Dataset sho = generate_sho(cfg, 123);
  write_dataset_csv(sho, dir / "sho.csv");
  const Dataset sho2 = read_dataset_csv(dir / "sho.csv");
  CHECK(sho2.kind == sho.kind);
  CHECK(sho2.split == sho.split);
  CHECK(sho2.seed == sho.seed);
  CHECK(ShoConfig::from_json(sho2.config_json).to_json() == cfg.to_json());
  REQUIRE(sho2.size() == sho.size());
  for (std::size_t s = 0; s < sho.size(); ++s) {
    CHECK(sho2.trajectories[s].params == sho.trajectories[s].params);
    CHECK(sho2.trajectories[s].states == sho.trajectories[s].states);
  }

  const Dataset lin = generate_linreg(LinregConfig::standard(Split::train), 5);
  write_dataset_csv(lin, dir / "lin.csv");
  const Dataset lin2 = read_dataset_csv(dir / "lin.csv");
  REQUIRE(lin2.size() == lin.size());
  for (std::size_t s = 0; s < lin.size(); ++s) {
    CHECK(lin2.regressions[s].w == lin.regressions[s].w);
    CHECK(lin2.regressions[s].xs == lin.regressions[s].xs);
    CHECK(lin2.regressions[s].ys == lin.regressions[s].ys);
  }
  std::filesystem::remove_all(dir);
}
