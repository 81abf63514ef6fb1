#include "arthro/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace arthro {

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::min() const {
  return *std::min_element(data.begin(), data.end());
}

double Tensor::max() const {
  return *std::max_element(data.begin(), data.end());
}

static void check_same(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("tensor shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  check_same(a, b);
  Tensor r = a;
  for (int64_t i = 0; i < r.numel(); ++i) r.data[i] += b.data[i];
  return r;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  check_same(a, b);
  Tensor r = a;
  for (int64_t i = 0; i < r.numel(); ++i) r.data[i] -= b.data[i];
  return r;
}

Tensor operator*(const Tensor& a, const Tensor& b) {
  check_same(a, b);
  Tensor r = a;
  for (int64_t i = 0; i < r.numel(); ++i) r.data[i] *= b.data[i];
  return r;
}

}  // namespace arthro
