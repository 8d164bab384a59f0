#include "controlvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

CONTROLVAE_NAMESPACE_BEGIN

Tensor Tensor::from_rows(int r, int c, std::initializer_list<Real> values) {
  if (values.size() != static_cast<std::size_t>(r) * c) {
    throw ConfigError("Tensor::from_rows: value count does not match shape");
  }
  Tensor t(r, c);
  std::copy(values.begin(), values.end(), t.data.begin());
  return t;
}

Tensor Tensor::row_vector(std::span<const Real> values) {
  Tensor t(1, static_cast<int>(values.size()));
  std::copy(values.begin(), values.end(), t.data.begin());
  return t;
}

void Tensor::fill(Real v) { std::fill(data.begin(), data.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(),
                     [](Real x) { return std::isfinite(x); });
}

void zero_grads(const ParameterList& params) {
  for (Parameter* p : params) p->zero_grad();
}

std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->value.size();
  return n;
}

std::uint64_t parameter_hash(const ParameterList& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Parameter* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data.data());
    const std::size_t n = p->value.data.size() * sizeof(Real);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

CONTROLVAE_NAMESPACE_END
