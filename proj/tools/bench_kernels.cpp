// Times the serial reference kernels against the OpenMP ones on
// convolution shapes representative of the model, and verifies the two
// backends agree bitwise on every case.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include <omp.h>

#include "arthro/kernels.hpp"
#include "arthro/types.hpp"

using namespace arthro;
using Clock = std::chrono::steady_clock;

namespace {

struct Case {
  const char* name;
  int N, Ci, Co, H, W, k, stride, pad;
};

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor t(shape);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : t.data) v = u(rng.engine());
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(),
                     a.data.size() * sizeof(double)) == 0;
}

}  // namespace

int main(int argc, char** argv) {
  int reps = 5;
  if (argc > 1) reps = std::atoi(argv[1]);
  if (reps < 1) reps = 1;

  const std::vector<Case> cases = {
      {"stem 3->64 /2", 1, 3, 64, 192, 192, 3, 2, 1},
      {"mid 64->64", 1, 64, 64, 48, 48, 3, 1, 1},
      {"deep 256->256", 1, 256, 256, 12, 12, 3, 1, 1},
      {"proj 1x1 256->64", 1, 256, 64, 24, 24, 1, 1, 0},
  };

  std::printf("threads: %d, reps per case: %d\n", omp_get_max_threads(), reps);
  std::printf("%-20s %-16s %12s %12s %9s %6s\n", "case", "op", "serial_ms",
              "omp_ms", "speedup", "match");

  Rng rng(42);
  bool all_match = true;
  for (const auto& c : cases) {
    Tensor x = random_tensor({c.N, c.Ci, c.H, c.W}, rng);
    Tensor w = random_tensor({c.Co, c.Ci, c.k, c.k}, rng);
    Tensor b = random_tensor({c.Co}, rng);

    Tensor ys, yo;
    kernels::serial::conv2d_forward(x, w, &b, c.stride, c.pad, ys);
    Tensor gy = random_tensor(ys.shape, rng);

    struct Op {
      const char* name;
      std::function<void()> serial, omp;
      const Tensor *lhs, *rhs;
    };

    Tensor gxs(x.shape), gxo(x.shape);
    Tensor gws(w.shape), gwo(w.shape);
    Tensor gbs({c.Co}), gbo({c.Co});
    std::vector<Op> ops = {
        {"forward",
         [&] { kernels::serial::conv2d_forward(x, w, &b, c.stride, c.pad, ys); },
         [&] { kernels::omp::conv2d_forward(x, w, &b, c.stride, c.pad, yo); },
         &ys, &yo},
        {"backward_input",
         [&] {
           std::fill(gxs.data.begin(), gxs.data.end(), 0.0);
           kernels::serial::conv2d_backward_input(w, gy, c.stride, c.pad, c.H, c.W, gxs);
         },
         [&] {
           std::fill(gxo.data.begin(), gxo.data.end(), 0.0);
           kernels::omp::conv2d_backward_input(w, gy, c.stride, c.pad, c.H, c.W, gxo);
         },
         &gxs, &gxo},
        {"backward_params",
         [&] {
           std::fill(gws.data.begin(), gws.data.end(), 0.0);
           std::fill(gbs.data.begin(), gbs.data.end(), 0.0);
           kernels::serial::conv2d_backward_params(x, gy, c.stride, c.pad, gws, &gbs);
         },
         [&] {
           std::fill(gwo.data.begin(), gwo.data.end(), 0.0);
           std::fill(gbo.data.begin(), gbo.data.end(), 0.0);
           kernels::omp::conv2d_backward_params(x, gy, c.stride, c.pad, gwo, &gbo);
         },
         &gws, &gwo},
    };

    for (auto& op : ops) {
      op.serial();  // warm caches and produce the reference output
      op.omp();
      const bool match = bitwise_equal(*op.lhs, *op.rhs);
      all_match = all_match && match;

      auto t0 = Clock::now();
      for (int r = 0; r < reps; ++r) op.serial();
      const double serial_ms = ms_since(t0) / reps;
      t0 = Clock::now();
      for (int r = 0; r < reps; ++r) op.omp();
      const double omp_ms = ms_since(t0) / reps;

      std::printf("%-20s %-16s %12.3f %12.3f %8.2fx %6s\n", c.name, op.name,
                  serial_ms, omp_ms, serial_ms / omp_ms, match ? "yes" : "NO");
    }
  }

  if (!all_match) {
    std::printf("backend outputs diverged\n");
    return 1;
  }
  return 0;
}
