#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "controlvae/common.hpp"

CONTROLVAE_NAMESPACE_BEGIN

// Row-major matrix of reals. Batches are rows, features are columns.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<Real> data;

  Tensor() = default;
  Tensor(int r, int c, Real fill = Real(0))
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  static Tensor from_rows(int r, int c, std::initializer_list<Real> values);
  static Tensor row_vector(std::span<const Real> values);

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Tensor& o) const {
    return rows == o.rows && cols == o.cols;
  }

  Real& operator()(int r, int c) {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
  Real operator()(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }

  Real* row_ptr(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const Real* row_ptr(int r) const {
    return data.data() + static_cast<std::size_t>(r) * cols;
  }
  std::span<Real> row(int r) { return {row_ptr(r), static_cast<std::size_t>(cols)}; }
  std::span<const Real> row(int r) const {
    return {row_ptr(r), static_cast<std::size_t>(cols)};
  }

  void fill(Real v);
  void zero() { fill(Real(0)); }
  bool all_finite() const;
};

// Learnable (or frozen) tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.rows, value.cols),
        trainable(train) {}

  void zero_grad() { grad.zero(); }
};

using ParameterList = std::vector<Parameter*>;

void zero_grads(const ParameterList& params);
std::size_t parameter_count(const ParameterList& params);

// FNV hash over the raw parameter bytes; used for frozen-parameter audits.
std::uint64_t parameter_hash(const ParameterList& params);

CONTROLVAE_NAMESPACE_END
