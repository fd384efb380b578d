#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace bifair {

using Index = std::uint32_t;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-user item index lists, sorted ascending.
using ItemLists = std::vector<std::vector<Index>>;

// Every module reports contract violations and I/O failures through this type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised for invalid configuration values; the CLI maps it to exit status 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Seed fan-out: every random stream derives from one top-level seed plus a
// fixed role offset, so changing one role never perturbs another.
namespace seed_role {
inline constexpr std::uint64_t kBenchmark = 0;
inline constexpr std::uint64_t kPreprocess = 1;
inline constexpr std::uint64_t kEmbeddings = 2;
inline constexpr std::uint64_t kProjectorInit = 3;
inline constexpr std::uint64_t kBatching = 4;
}  // namespace seed_role

// Offsets are multiples of a large odd constant so that nearby top-level
// seeds never share a stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t role) {
  return seed + role * 0x9E3779B97F4A7C15ULL;
}

// Verbosity from BIFAIR_LOG (0 = quiet, 1 = info, 2 = debug). Default 1.
int log_level();
void log_info(const std::string& msg);
void log_warn(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace bifair
