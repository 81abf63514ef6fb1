#include "arthro/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "arthro/kernels.hpp"

namespace arthro::ag {

namespace {

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backfn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backfn = std::move(backfn);
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.shape != b->value.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a->value.shape_str() + " vs " + b->value.shape_str());
}

// Elementwise unary helper: fwd(v) and dfdx given (x, y).
template <typename F, typename D>
Var unary(const Var& a, F fwd, D dydx) {
  Tensor out = a->value;
  for (auto& v : out.data) v = fwd(v);
  return make(std::move(out), {a}, [a, dydx](Node& n) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
    for (int64_t i = 0; i < n.value.numel(); ++i)
      ga.data[i] += n.grad.data[i] * dydx(a->value.data[i], n.value.data[i]);
  });
}

}  // namespace

Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

Var leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return n;
}

void backward(const Var& root) {
  if (root->value.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  // Iterative post-order DFS.
  std::vector<Node*> topo;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  root->grad = Tensor(root->value.shape, 1.0);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backfn && !n->grad.shape.empty()) n->backfn(*n);
  }
}

void zero_grad(const std::vector<Var>& params) {
  for (const auto& p : params) p->grad = Tensor();
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value + b->value;
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = a->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) ga.data[i] += n.grad.data[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) gb.data[i] += n.grad.data[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value - b->value;
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = a->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) ga.data[i] += n.grad.data[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) gb.data[i] -= n.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value * b->value;
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = a->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        ga.data[i] += n.grad.data[i] * b->value.data[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        gb.data[i] += n.grad.data[i] * a->value.data[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] /= b->value.data[i];
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = a->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        ga.data[i] += n.grad.data[i] / b->value.data[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->g();
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        const double bv = b->value.data[i];
        gb.data[i] -= n.grad.data[i] * a->value.data[i] / (bv * bv);
      }
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (auto& v : out.data) v *= s;
  return make(std::move(out), {a}, [a, s](Node& n) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
    for (int64_t i = 0; i < n.grad.numel(); ++i) ga.data[i] += n.grad.data[i] * s;
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (auto& v : out.data) v += s;
  return make(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
    for (int64_t i = 0; i < n.grad.numel(); ++i) ga.data[i] += n.grad.data[i];
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var abs_v(const Var& a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x >= 0.0 ? 1.0 : -1.0; });
}

Var exp_v(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log_v(const Var& a) {
  return unary(a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var sqrt_v(const Var& a) {
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

Var sigmoid_v(const Var& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var relu_v(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var clamp_v(const Var& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- reductions

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a->value.data) s += v;
  Tensor out({1});
  out.data[0] = s;
  return make(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
    const double g = n.grad.data[0];
    for (auto& v : ga.data) v += g;
  });
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel())); }

Var channel_mean(const Var& a) {
  const int N = a->value.shape[0], C = a->value.shape[1];
  const int H = a->value.shape[2], W = a->value.shape[3];
  const double inv = 1.0 / (static_cast<double>(N) * H * W);
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) s += a->value.at(n, c, y, x);
    out.data[c] = s * inv;
  }
  return make(std::move(out), {a}, [a, N, C, H, W, inv](Node& nd) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
    for (int c = 0; c < C; ++c) {
      const double g = nd.grad.data[c] * inv;
      for (int n = 0; n < N; ++n)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) ga.at(n, c, y, x) += g;
    }
  });
}

Var broadcast_channel(const Var& c, int N, int H, int W) {
  const int C = static_cast<int>(c->value.numel());
  Tensor out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int ch = 0; ch < C; ++ch) {
      const double v = c->value.data[ch];
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out.at(n, ch, y, x) = v;
    }
  return make(std::move(out), {c}, [c, N, C, H, W](Node& nd) {
    if (!c->requires_grad) return;
    Tensor& gc = c->g();
    for (int ch = 0; ch < C; ++ch) {
      double s = 0.0;
      for (int n = 0; n < N; ++n)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) s += nd.grad.at(n, ch, y, x);
      gc.data[ch] += s;
    }
  });
}

Var mean_over_channels(const Var& a) {
  const int N = a->value.shape[0], C = a->value.shape[1];
  const int H = a->value.shape[2], W = a->value.shape[3];
  const double inv = 1.0 / C;
  Tensor out({N, 1, H, W});
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += a->value.at(n, c, y, x);
        out.at(n, 0, y, x) = s * inv;
      }
  return make(std::move(out), {a}, [a, N, C, H, W, inv](Node& nd) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double g = nd.grad.at(n, 0, y, x) * inv;
          for (int c = 0; c < C; ++c) ga.at(n, c, y, x) += g;
        }
  });
}

// ---------------------------------------------------------------- structured

Var softmax_channels(const Var& a) {
  const int N = a->value.shape[0], C = a->value.shape[1];
  const int H = a->value.shape[2], W = a->value.shape[3];
  Tensor out(a->value.shape);
#pragma omp parallel for schedule(static)
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double m = a->value.at(n, 0, y, x);
        for (int c = 1; c < C; ++c) m = std::max(m, a->value.at(n, c, y, x));
        double z = 0.0;
        for (int c = 0; c < C; ++c) {
          const double e = std::exp(a->value.at(n, c, y, x) - m);
          out.at(n, c, y, x) = e;
          z += e;
        }
        for (int c = 0; c < C; ++c) out.at(n, c, y, x) /= z;
      }
  return make(std::move(out), {a}, [a, N, C, H, W](Node& nd) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double dot = 0.0;
          for (int c = 0; c < C; ++c)
            dot += nd.grad.at(n, c, y, x) * nd.value.at(n, c, y, x);
          for (int c = 0; c < C; ++c)
            ga.at(n, c, y, x) +=
                nd.value.at(n, c, y, x) * (nd.grad.at(n, c, y, x) - dot);
        }
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int N = parts[0]->value.shape[0];
  const int H = parts[0]->value.shape[2], W = parts[0]->value.shape[3];
  int C = 0;
  for (const auto& p : parts) {
    if (p->value.shape[0] != N || p->value.shape[2] != H || p->value.shape[3] != W)
      throw std::invalid_argument("concat: incompatible shapes");
    C += p->value.shape[1];
  }
  Tensor out({N, C, H, W});
  int off = 0;
  for (const auto& p : parts) {
    const int pc = p->value.shape[1];
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < pc; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) out.at(n, off + c, y, x) = p->value.at(n, c, y, x);
    off += pc;
  }
  auto parts_copy = parts;
  return make(std::move(out), parts_copy, [parts_copy, N, H, W](Node& nd) {
    int off2 = 0;
    for (const auto& p : parts_copy) {
      const int pc = p->value.shape[1];
      if (p->requires_grad) {
        Tensor& gp = p->g();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < pc; ++c)
            for (int y = 0; y < H; ++y)
              for (int x = 0; x < W; ++x) gp.at(n, c, y, x) += nd.grad.at(n, off2 + c, y, x);
      }
      off2 += pc;
    }
  });
}

Var slice_channels(const Var& a, int c0, int c1) {
  const int N = a->value.shape[0], C = a->value.shape[1];
  const int H = a->value.shape[2], W = a->value.shape[3];
  if (c0 < 0 || c1 > C || c0 >= c1) throw std::invalid_argument("slice_channels: bad range");
  Tensor out({N, c1 - c0, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = c0; c < c1; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out.at(n, c - c0, y, x) = a->value.at(n, c, y, x);
  return make(std::move(out), {a}, [a, c0, c1, N, H, W](Node& nd) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
    for (int n = 0; n < N; ++n)
      for (int c = c0; c < c1; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) ga.at(n, c, y, x) += nd.grad.at(n, c - c0, y, x);
  });
}

Var forward_diff_x(const Var& a) {
  const int N = a->value.shape[0], C = a->value.shape[1];
  const int H = a->value.shape[2], W = a->value.shape[3];
  Tensor out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W - 1; ++x)
          out.at(n, c, y, x) = a->value.at(n, c, y, x + 1) - a->value.at(n, c, y, x);
  return make(std::move(out), {a}, [a, N, C, H, W](Node& nd) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W - 1; ++x) {
            const double g = nd.grad.at(n, c, y, x);
            ga.at(n, c, y, x + 1) += g;
            ga.at(n, c, y, x) -= g;
          }
  });
}

Var forward_diff_y(const Var& a) {
  const int N = a->value.shape[0], C = a->value.shape[1];
  const int H = a->value.shape[2], W = a->value.shape[3];
  Tensor out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H - 1; ++y)
        for (int x = 0; x < W; ++x)
          out.at(n, c, y, x) = a->value.at(n, c, y + 1, x) - a->value.at(n, c, y, x);
  return make(std::move(out), {a}, [a, N, C, H, W](Node& nd) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H - 1; ++y)
          for (int x = 0; x < W; ++x) {
            const double g = nd.grad.at(n, c, y, x);
            ga.at(n, c, y + 1, x) += g;
            ga.at(n, c, y, x) -= g;
          }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  Tensor out;
  kernels::conv2d_forward(x->value, w->value, b ? &b->value : nullptr, stride, pad, out);
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make(std::move(out), parents, [x, w, b, stride, pad](Node& nd) {
    if (x->requires_grad)
      kernels::conv2d_backward_input(w->value, nd.grad, stride, pad,
                                     x->value.shape[2], x->value.shape[3], x->g());
    if (w->requires_grad || (b && b->requires_grad))
      kernels::conv2d_backward_params(x->value, nd.grad, stride, pad, w->g(),
                                      (b && b->requires_grad) ? &b->g() : nullptr);
  });
}

Var maxpool2x2(const Var& x) {
  const int N = x->value.shape[0], C = x->value.shape[1];
  const int H = x->value.shape[2], W = x->value.shape[3];
  const int Ho = H / 2, Wo = W / 2;
  Tensor out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<int32_t>>(out.numel());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double best = -1e300;
          int best_off = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double v = x->value.at(n, c, 2 * oy + dy, 2 * ox + dx);
              if (v > best) {
                best = v;
                best_off = dy * 2 + dx;
              }
            }
          out.at(n, c, oy, ox) = best;
          (*argmax)[((static_cast<int64_t>(n) * C + c) * Ho + oy) * Wo + ox] = best_off;
        }
  return make(std::move(out), {x}, [x, argmax, N, C, Ho, Wo](Node& nd) {
    if (!x->requires_grad) return;
    Tensor& gx = x->g();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            const int off = (*argmax)[((static_cast<int64_t>(n) * C + c) * Ho + oy) * Wo + ox];
            gx.at(n, c, 2 * oy + off / 2, 2 * ox + off % 2) += nd.grad.at(n, c, oy, ox);
          }
  });
}

Var resize_bilinear(const Var& x, int Ho, int Wo) {
  const int N = x->value.shape[0], C = x->value.shape[1];
  const int H = x->value.shape[2], W = x->value.shape[3];
  Tensor out({N, C, Ho, Wo});
  const double sy = static_cast<double>(H) / Ho, sx = static_cast<double>(W) / Wo;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double fy = (oy + 0.5) * sy - 0.5, fx = (ox + 0.5) * sx - 0.5;
          fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
          fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
          const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
          const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
          const double ty = fy - y0, tx = fx - x0;
          out.at(n, c, oy, ox) =
              (1 - ty) * ((1 - tx) * x->value.at(n, c, y0, x0) + tx * x->value.at(n, c, y0, x1)) +
              ty * ((1 - tx) * x->value.at(n, c, y1, x0) + tx * x->value.at(n, c, y1, x1));
        }
  return make(std::move(out), {x}, [x, N, C, H, W, Ho, Wo, sy, sx](Node& nd) {
    if (!x->requires_grad) return;
    Tensor& gx = x->g();
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            double fy = (oy + 0.5) * sy - 0.5, fx = (ox + 0.5) * sx - 0.5;
            fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
            fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
            const double ty = fy - y0, tx = fx - x0;
            const double g = nd.grad.at(n, c, oy, ox);
            gx.at(n, c, y0, x0) += g * (1 - ty) * (1 - tx);
            gx.at(n, c, y0, x1) += g * (1 - ty) * tx;
            gx.at(n, c, y1, x0) += g * ty * (1 - tx);
            gx.at(n, c, y1, x1) += g * ty * tx;
          }
  });
}

Var warp_horizontal(const Var& src, const Var& disp, int direction) {
  const Tensor& s = src->value;
  const Tensor& d = disp->value;
  if (s.ndim() != 4 || d.ndim() != 4 || d.shape[1] != 1)
    throw std::invalid_argument("warp: src must be NCHW, disp N1HW");
  if (s.shape[0] != d.shape[0] || s.shape[2] != d.shape[2] || s.shape[3] != d.shape[3])
    throw std::invalid_argument("warp: shape mismatch " + s.shape_str() + " vs " + d.shape_str());
  if (!s.all_finite() || !d.all_finite())
    throw std::invalid_argument("warp: non-finite input");
  const int N = s.shape[0], C = s.shape[1], H = s.shape[2], W = s.shape[3];
  Tensor out({N, C, H, W});
#pragma omp parallel for schedule(static)
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double xs = x + direction * d.at(n, 0, y, x) * W;
        xs = std::min(std::max(xs, 0.0), static_cast<double>(W - 1));
        const int x0 = static_cast<int>(xs);
        const int x1 = std::min(x0 + 1, W - 1);
        const double t = xs - x0;
        for (int c = 0; c < C; ++c)
          out.at(n, c, y, x) = (1 - t) * s.at(n, c, y, x0) + t * s.at(n, c, y, x1);
      }
  return make(std::move(out), {src, disp}, [src, disp, direction, N, C, H, W](Node& nd) {
    const Tensor& s2 = src->value;
    const Tensor& d2 = disp->value;
    Tensor* gs = src->requires_grad ? &src->g() : nullptr;
    Tensor* gd = disp->requires_grad ? &disp->g() : nullptr;
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double raw = x + direction * d2.at(n, 0, y, x) * W;
          const bool clamped = raw <= 0.0 || raw >= W - 1;
          const double xs = std::min(std::max(raw, 0.0), static_cast<double>(W - 1));
          const int x0 = static_cast<int>(xs);
          const int x1 = std::min(x0 + 1, W - 1);
          const double t = xs - x0;
          double ddisp = 0.0;
          for (int c = 0; c < C; ++c) {
            const double g = nd.grad.at(n, c, y, x);
            if (gs) {
              gs->at(n, c, y, x0) += g * (1 - t);
              gs->at(n, c, y, x1) += g * t;
            }
            ddisp += g * (s2.at(n, c, y, x1) - s2.at(n, c, y, x0));
          }
          if (gd && !clamped) gd->at(n, 0, y, x) += ddisp * direction * W;
        }
  });
}

Var box_mean3(const Var& a) {
  const int N = a->value.shape[0], C = a->value.shape[1];
  const int H = a->value.shape[2], W = a->value.shape[3];
  Tensor out({N, C, H, W});
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double s = 0.0;
          int cnt = 0;
          for (int dy = -1; dy <= 1; ++dy) {
            const int yy = y + dy;
            if (yy < 0 || yy >= H) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const int xx = x + dx;
              if (xx < 0 || xx >= W) continue;
              s += a->value.at(n, c, yy, xx);
              ++cnt;
            }
          }
          out.at(n, c, y, x) = s / cnt;
        }
  return make(std::move(out), {a}, [a, N, C, H, W](Node& nd) {
    if (!a->requires_grad) return;
    Tensor& ga = a->g();
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            double s = 0.0;
            for (int dy = -1; dy <= 1; ++dy) {
              const int yy = y + dy;
              if (yy < 0 || yy >= H) continue;
              for (int dx = -1; dx <= 1; ++dx) {
                const int xx = x + dx;
                if (xx < 0 || xx >= W) continue;
                const int cnt = (std::min(yy + 1, H - 1) - std::max(yy - 1, 0) + 1) *
                                (std::min(xx + 1, W - 1) - std::max(xx - 1, 0) + 1);
                s += nd.grad.at(n, c, yy, xx) / cnt;
              }
            }
            ga.at(n, c, y, x) += s;
          }
  });
}

// ---------------------------------------------------------------- gradcheck

GradCheck check_gradients(const std::function<Var(const std::vector<Var>&)>& f,
                          const std::vector<Tensor>& inputs,
                          double step, double rel_tol, double abs_floor) {
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(leaf(t));
  Var root = f(leaves);
  backward(root);

  auto eval = [&](const std::vector<Tensor>& ts) {
    std::vector<Var> ls;
    ls.reserve(ts.size());
    for (const auto& t : ts) ls.push_back(constant(t));
    return f(ls)->value.data[0];
  };

  GradCheck r;
  r.ok = true;
  std::vector<Tensor> pert = inputs;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (int64_t i = 0; i < inputs[k].numel(); ++i) {
      const double orig = pert[k].data[i];
      pert[k].data[i] = orig + step;
      const double fp = eval(pert);
      pert[k].data[i] = orig - step;
      const double fm = eval(pert);
      pert[k].data[i] = orig;
      const double numeric = (fp - fm) / (2 * step);
      const double analytic =
          leaves[k]->grad.shape.empty() ? 0.0 : leaves[k]->grad.data[i];
      const double err = std::fabs(analytic - numeric);
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), abs_floor});
      r.max_abs_err = std::max(r.max_abs_err, err);
      r.max_rel_err = std::max(r.max_rel_err, err / denom);
      if (err > rel_tol * std::max(std::fabs(analytic), std::fabs(numeric)) + abs_floor)
        r.ok = false;
    }
  }
  return r;
}

}  // namespace arthro::ag
