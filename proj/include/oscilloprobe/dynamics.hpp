#pragma once

#include "oscilloprobe/common.hpp"

#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

namespace oscilloprobe {

enum class Regime { undamped, underdamped, critical, overdamped };

std::string_view to_string(Regime r);

// |gamma - omega0| at or below this fraction of omega0 is treated as critical.
inline constexpr double kCriticalTolerance = 1e-9;

struct State {
  double x = 0.0;
  double v = 0.0;
  friend bool operator==(const State&, const State&) = default;
};

struct OscParams {
  double omega0 = 1.0;
  double gamma = 0.0;
  double dt = 0.0;
  double x0 = 0.0;
  double v0 = 0.0;

  Regime regime() const;
  // Throws UsageError when omega0 <= 0, gamma < 0, dt < 0 or anything is non-finite.
  void validate() const;
  friend bool operator==(const OscParams&, const OscParams&) = default;
};

// Exact state at t = k * dt for the oscillator x'' + 2 gamma x' + omega0^2 x = 0.
// Throws GenerationError if the result is not finite.
State closed_form_state(const OscParams& params, std::int64_t k);

struct Trajectory {
  OscParams params;
  std::vector<State> states;
  std::size_t length() const { return states.size(); }
};

Trajectory make_trajectory(const OscParams& params, std::size_t length);

struct RegressionSeries {
  double w = 0.0;
  std::vector<double> xs;
  std::vector<double> ys;
};

enum class DatasetKind { linreg, sho_undamped, sho_underdamped, sho_overdamped, sho_damped_mixed };
enum class Split { train, ood_test };

std::string_view to_string(DatasetKind k);
std::string_view to_string(Split s);
DatasetKind parse_dataset_kind(std::string_view s);
Split parse_split(std::string_view s);
inline bool is_sho(DatasetKind k) { return k != DatasetKind::linreg; }

// Closed interval; a list of them is sampled uniformly over their union.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
};
using Bands = std::vector<Interval>;

struct LinregConfig {
  std::size_t n_series = 5000;
  std::size_t length = 65;
  Bands w{{-0.75, 0.75}};
  Bands x{{-0.75, 0.75}};
  Split split = Split::train;

  // In-distribution: w, x ~ U[-0.75, 0.75]. OOD: 0.75 <= |w| <= 1.
  static LinregConfig standard(Split split);
  std::string to_json() const;
  static LinregConfig from_json(const std::string& json);
};

struct ShoConfig {
  DatasetKind kind = DatasetKind::sho_undamped;
  Split split = Split::train;
  std::size_t n_series = 5000;
  std::size_t length = 65;
  Bands omega0{{std::numbers::pi / 4, 5 * std::numbers::pi / 4}};
  // dt ~ U[0, dt_span / omega0]
  double dt_span = 2 * std::numbers::pi;
  // Overdamped gamma ~ U[omega0, gamma_max].
  double gamma_max = 1.5 * std::numbers::pi;
  Interval x0{-1.0, 1.0};
  Interval v0{-1.0, 1.0};

  // Undamped: 65 steps, dt up to one period. Damped kinds: 32 steps,
  // dt up to 1/13 of a period. OOD widens omega0 to the flanking bands.
  static ShoConfig standard(DatasetKind kind, Split split);
  std::string to_json() const;
  static ShoConfig from_json(const std::string& json);
};

struct Dataset {
  DatasetKind kind = DatasetKind::linreg;
  Split split = Split::train;
  std::uint64_t seed = 0;
  std::string config_json;
  std::vector<Trajectory> trajectories;
  std::vector<RegressionSeries> regressions;
  // Draws with dt < 1e-6; these give (nearly) constant trajectories.
  std::size_t tiny_dt_count = 0;

  bool is_linreg() const { return kind == DatasetKind::linreg; }
  std::size_t size() const { return is_linreg() ? regressions.size() : trajectories.size(); }
  std::size_t length() const;
};

Dataset generate_linreg(std::size_t n_series, std::size_t length, Interval w_range,
                        Interval x_range, std::uint64_t seed);
Dataset generate_linreg(const LinregConfig& config, std::uint64_t seed);
Dataset generate_sho(const ShoConfig& config, std::uint64_t seed);

// Sampled parameters of series `index` (pure function of config, seed, index).
OscParams sample_sho_params(const ShoConfig& config, std::uint64_t seed, std::uint64_t index);

// Model input for a dataset. Token i predicts token i+1 at positions where
// mask[i] is set; the mask is the same for every series.
struct TokenizedDataset {
  std::size_t n_series = 0;
  std::size_t seq_len = 0;
  std::size_t token_dim = 0;
  AlignedBuffer tokens;  // n_series * seq_len * token_dim, row-major
  std::vector<bool> mask;      // seq_len

  // View of one series as a seq_len x token_dim matrix.
  Eigen::Map<const RowMatrix> series(std::size_t s) const {
    return {tokens.data() + s * seq_len * token_dim, static_cast<Eigen::Index>(seq_len),
            static_cast<Eigen::Index>(token_dim)};
  }
  std::vector<std::size_t> masked_positions() const;
};

TokenizedDataset tokenize(const Dataset& dataset);

// Context length c (number of complete examples seen) to the token position
// whose prediction it scores: 2c for linear regression, c for trajectories.
std::size_t context_position(DatasetKind kind, std::size_t context_length);
std::size_t context_count(const Dataset& dataset);

void write_dataset_csv(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset_csv(const std::filesystem::path& path);

}  // namespace oscilloprobe
