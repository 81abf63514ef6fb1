#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace arthro {

// Dense row-major double tensor. Network activations use NCHW; 2-D grids
// (disparity, masks) use {H, W} or {1, 1, H, W} as convenient.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
  Tensor(std::vector<int> s, double fill) : shape(std::move(s)), data(numel_of(shape), fill) {}

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  // 4-D accessors (NCHW)
  double& at(int n, int c, int y, int x) {
    return data[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  double at(int n, int c, int y, int x) const {
    return data[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  // 2-D accessors
  double& at(int y, int x) { return data[static_cast<int64_t>(y) * shape[1] + x]; }
  double at(int y, int x) const { return data[static_cast<int64_t>(y) * shape[1] + x]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const;
  double min() const;
  double max() const;

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + ")";
  }
};

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);

// Deterministic RNG used everywhere randomness is needed. `fork` derives an
// independent stream so worker count cannot perturb the main sequence.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean, double sd) {
    return std::normal_distribution<double>(mean, sd)(gen_);
  }
  int64_t randint(int64_t lo, int64_t hi) {  // inclusive bounds
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
  }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(gen_); }

  Rng fork(uint64_t stream_id) {
    uint64_t s = gen_();
    return Rng(s ^ (0x9e3779b97f4a7c15ULL * (stream_id + 1)));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(randint(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace arthro
