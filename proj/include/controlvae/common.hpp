#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

// The library is compiled twice: once with 32-bit reals (the production
// build) and once with 64-bit reals for finite-difference gradient checks.
// Each flavour lives in its own inline namespace so both can be linked into
// the same binary.
#ifdef CONTROLVAE_DOUBLE
#define CONTROLVAE_PRECISION_NS f64
#else
#define CONTROLVAE_PRECISION_NS f32
#endif

#define CONTROLVAE_NAMESPACE_BEGIN \
  namespace controlvae {           \
  inline namespace CONTROLVAE_PRECISION_NS {
#define CONTROLVAE_NAMESPACE_END \
  }                              \
  }

CONTROLVAE_NAMESPACE_BEGIN

#ifdef CONTROLVAE_DOUBLE
using Real = double;
#else
using Real = float;
#endif

// Error categories. The CLI maps these onto exit codes
// (validation = 1, numeric = 2, io = 3).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SimulationDiverged : public NumericError {
 public:
  using NumericError::NumericError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Seeded random source. Normal draws use the polar method without caching
// the spare value, so the full generator state is the engine state alone and
// can be serialized for bit-exact resume.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent sub-stream derived from a root seed and a stream name.
  static Rng stream(std::uint64_t seed, std::string_view name);

  double uniform();                 // [0, 1)
  double uniform(double lo, double hi);
  double normal();                  // N(0, 1)
  int uniform_int(int n);           // [0, n)
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t next_u64() { return engine_(); }

  std::string serialize() const;
  void deserialize(const std::string& text);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t hash_string(std::string_view text);
std::uint64_t splitmix64(std::uint64_t x);

constexpr double kPi = 3.14159265358979323846;

// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

// Code version string echoed into run directories.
std::string_view version_string();

CONTROLVAE_NAMESPACE_END
