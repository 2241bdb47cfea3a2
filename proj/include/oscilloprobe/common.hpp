#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace oscilloprobe {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Buffers viewed through Eigen::Map. A fixed alignment keeps vectorized
// reductions (and so results) independent of where the allocator put them.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

// Caller violated a documented precondition (bad shapes, empty masks, ...).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dataset generation produced something unusable (non-finite states).
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged or hit a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file or schema mismatch when reading persisted artifacts.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

inline bool is_undefined(double v) { return v != v; }

// Shortest decimal string that parses back to the same double.
std::string format_double(double v);

// Strict parse of a full string as a double; throws FormatError.
double parse_double(const std::string& s);

// Writes `text` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_file(const std::filesystem::path& path);

}  // namespace oscilloprobe
