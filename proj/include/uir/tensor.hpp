#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "uir/errors.hpp"

namespace uir {

// Dense row-major tensor of doubles. Activations are (C,H,W), conv kernels
// (Cout,Cin,kh,kw), biases (C).
struct Tensor {
  std::vector<int> dims;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> d) : dims(std::move(d)), data(numel_of(dims), 0.0) {}
  Tensor(std::vector<int> d, double fill) : dims(std::move(d)), data(numel_of(dims), fill) {}

  static int64_t numel_of(const std::vector<int>& d) {
    int64_t n = 1;
    for (int v : d) n *= v;
    return n;
  }

  static Tensor zeros(std::vector<int> d) { return Tensor(std::move(d)); }
  static Tensor full(std::vector<int> d, double v) { return Tensor(std::move(d), v); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(dims.size()); }
  int dim(int i) const { return dims[static_cast<size_t>(i)]; }

  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }

  // 3-D accessors (C,H,W)
  double& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * dims[1] + y) * dims[2] + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * dims[1] + y) * dims[2] + x];
  }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline bool same_dims(const std::vector<int>& a, const std::vector<int>& b) { return a == b; }

inline std::string shape_string(const std::vector<int>& d) {
  std::string s = "(";
  for (size_t i = 0; i < d.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(d[i]);
  }
  return s + ")";
}

}  // namespace uir
