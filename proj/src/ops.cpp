#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "mcas/errors.hpp"
#include "mcas/tape.hpp"

namespace mcas {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// a (r x c, row-major) copied into aligned storage. Eigen's vector paths peel by
// address, so products of maps over arbitrary heap buffers round differently
// from run to run; owned operands make every product depend on shapes only.
RowMat owned(std::span<const double> a, std::size_t r, std::size_t c) { return ConstMap(a.data(), r, c); }

RowMat product(const RowMat& a, bool ta, const RowMat& b, bool tb) {
  RowMat c;
  if (ta && tb) c.noalias() = a.transpose() * b.transpose();
  else if (ta) c.noalias() = a.transpose() * b;
  else if (tb) c.noalias() = a * b.transpose();
  else c.noalias() = a * b;
  return c;
}

Tape& tape_of(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
  return a.tape();
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank(const char* op, Var a, std::size_t rank) {
  if (a.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
  }
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class F, class D>
Var unary(const char* op, Var a, F f, D dfdx) {
  auto x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const auto ia = a.id();
  return a.tape().record(op, a.shape(), std::move(out), {a}, [ia, dfdx](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto x = t.value_of(ia);
    auto y = t.value_of(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n) = product(owned(a.value(), m, k), false, owned(b.value(), k, n), false);
  tape.add_macs(m * k * n);
  const auto ia = a.id(), ib = b.id();
  return tape.record("matmul", {m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const RowMat g = owned(t.grad_of(self), m, n);
    if (t.needs_grad(ia)) MutMap(t.grad_buffer(ia).data(), m, k) += product(g, false, owned(t.value_of(ib), k, n), true);
    if (t.needs_grad(ib)) MutMap(t.grad_buffer(ib).data(), k, n) += product(owned(t.value_of(ia), m, k), true, g, false);
  });
}

Var transpose(Var a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(a.value().data(), m, n).transpose();
  const auto ia = a.id();
  return a.tape().record("transpose", {n, m}, std::move(out), {a}, [ia, m, n](Tape& t, std::size_t self) {
    MutMap(t.grad_buffer(ia).data(), m, n) += ConstMap(t.grad_of(self).data(), n, m).transpose();
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("add", a, b);
  auto x = a.value(), y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  const auto ia = a.id(), ib = b.id();
  return tape.record("add", a.shape(), std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    for (auto id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      auto gi = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("sub", a, b);
  auto x = a.value(), y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  const auto ia = a.id(), ib = b.id();
  return tape.record("sub", a.shape(), std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape("mul", a, b);
  auto x = a.value(), y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  const auto ia = a.id(), ib = b.id();
  return tape.record("mul", a.shape(), std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      auto y = t.value_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (t.needs_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      auto x = t.value_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var broadcast_add(Var a, Var v) {
  Tape& tape = tape_of(a, v);
  const std::size_t c = a.shape().back();
  if (v.size() != c) {
    throw DimensionError("broadcast_add: vector of " + std::to_string(v.size()) + " values cannot broadcast over " +
                         shape_string(a.shape()));
  }
  auto x = a.value(), y = v.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % c];
  const auto ia = a.id(), iv = v.id();
  return tape.record("broadcast_add", a.shape(), std::move(out), {a, v}, [ia, iv, c](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(iv)) {
      auto gv = t.grad_buffer(iv);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % c] += g[i];
    }
  });
}

Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  auto x = a.value();
  std::vector<double> out(x.begin(), x.end());
  const auto ia = a.id();
  return a.tape().record("reshape", std::move(shape), std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var sin(Var a) {
  return unary("sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(Var a) {
  return unary("cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var relu(Var a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  // tanh approximation
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))); },
      [](double x, double) {
        const double th = std::tanh(kC * (x + kA * x * x * x));
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * x * x);
      });
}

Var sigmoid(Var a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
  return unary(
      "softplus", a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Var linear(Var x, Var w, Var bias) {
  Tape& tape = tape_of(x, w);
  require_rank("linear", w, 2);
  const std::size_t cin = w.shape()[0], cout = w.shape()[1];
  if (x.shape().back() != cin) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(w.shape()));
  }
  if (bias.valid()) {
    tape_of(x, bias);
    if (bias.size() != cout) {
      throw DimensionError("linear: bias " + shape_string(bias.shape()) + " incompatible with weight " +
                           shape_string(w.shape()));
    }
  }
  const std::size_t m = x.size() / cin;
  std::vector<double> out(m * cout);
  MutMap y(out.data(), m, cout);
  y = product(owned(x.value(), m, cin), false, owned(w.value(), cin, cout), false);
  if (bias.valid()) {
    const auto bv = bias.value();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < cout; ++c) out[r * cout + c] += bv[c];
  }
  tape.add_macs(m * cin * cout);
  Shape shape = x.shape();
  shape.back() = cout;
  const auto ix = x.id(), iw = w.id();
  const bool has_bias = bias.valid();
  const auto ib = has_bias ? bias.id() : 0;
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return tape.record("linear", std::move(shape), std::move(out), std::span<const Var>(inputs),
                     [ix, iw, ib, has_bias, m, cin, cout](Tape& t, std::size_t self) {
                       const RowMat g = owned(t.grad_of(self), m, cout);
                       if (t.needs_grad(ix)) {
                         MutMap(t.grad_buffer(ix).data(), m, cin) +=
                             product(g, false, owned(t.value_of(iw), cin, cout), true);
                       }
                       if (t.needs_grad(iw)) {
                         MutMap(t.grad_buffer(iw).data(), cin, cout) +=
                             product(owned(t.value_of(ix), m, cin), true, g, false);
                       }
                       if (has_bias && t.needs_grad(ib)) {
                         auto gb = t.grad_buffer(ib);
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < cout; ++c) gb[c] += g(r, c);
                       }
                     });
}

Var mean_pool(Var x, std::size_t y0, std::size_t x0, std::size_t y1, std::size_t x1) {
  require_rank("mean_pool", x, 3);
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  if (!(y0 < y1 && x0 < x1 && y1 <= h && x1 <= w)) {
    throw ContractError("mean_pool: region rows [" + std::to_string(y0) + "," + std::to_string(y1) + ") cols [" +
                        std::to_string(x0) + "," + std::to_string(x1) + ") invalid for map " +
                        shape_string(x.shape()));
  }
  const double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
  auto v = x.value();
  std::vector<double> out(c, 0.0);
  for (std::size_t yy = y0; yy < y1; ++yy)
    for (std::size_t xx = x0; xx < x1; ++xx)
      for (std::size_t ch = 0; ch < c; ++ch) out[ch] += v[(yy * w + xx) * c + ch];
  for (auto& o : out) o *= inv;
  const auto ix = x.id();
  return x.tape().record("mean_pool", {1, 1, c}, std::move(out), {x},
                         [ix, y0, x0, y1, x1, w, c, inv](Tape& t, std::size_t self) {
                           auto g = t.grad_of(self);
                           auto gx = t.grad_buffer(ix);
                           for (std::size_t yy = y0; yy < y1; ++yy)
                             for (std::size_t xx = x0; xx < x1; ++xx)
                               for (std::size_t ch = 0; ch < c; ++ch) gx[(yy * w + xx) * c + ch] += g[ch] * inv;
                         });
}

Var avg_pool(Var x, std::size_t factor) {
  require_rank("avg_pool", x, 3);
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  if (factor == 0 || h % factor || w % factor) {
    throw DimensionError("avg_pool: factor " + std::to_string(factor) + " does not tile " + shape_string(x.shape()));
  }
  const std::size_t oh = h / factor, ow = w / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  auto v = x.value();
  std::vector<double> out(oh * ow * c, 0.0);
  for (std::size_t yy = 0; yy < h; ++yy)
    for (std::size_t xx = 0; xx < w; ++xx) {
      double* o = &out[((yy / factor) * ow + xx / factor) * c];
      const double* in = &v[(yy * w + xx) * c];
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] += in[ch] * inv;
    }
  const auto ix = x.id();
  return x.tape().record("avg_pool", {oh, ow, c}, std::move(out), {x},
                         [ix, h, w, c, ow, factor, inv](Tape& t, std::size_t self) {
                           auto g = t.grad_of(self);
                           auto gx = t.grad_buffer(ix);
                           for (std::size_t yy = 0; yy < h; ++yy)
                             for (std::size_t xx = 0; xx < w; ++xx) {
                               const double* go = &g[((yy / factor) * ow + xx / factor) * c];
                               double* gi = &gx[(yy * w + xx) * c];
                               for (std::size_t ch = 0; ch < c; ++ch) gi[ch] += go[ch] * inv;
                             }
                         });
}

namespace {

Var conv_dense(Var x, Var w) {
  Tape& tape = tape_of(x, w);
  const std::size_t h = x.shape()[0], wd = x.shape()[1], cin = x.shape()[2];
  const std::size_t k = w.shape()[0], cout = w.shape()[3];
  const std::size_t pad = (k - 1) / 2;
  const std::size_t patch = k * k * cin;
  // im2col: one row per output pixel
  std::vector<double> cols(h * wd * patch, 0.0);
  auto v = x.value();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < wd; ++xx) {
      double* row = &cols[(y * wd + xx) * patch];
      for (std::size_t dy = 0; dy < k; ++dy) {
        const long sy = static_cast<long>(y + dy) - static_cast<long>(pad);
        if (sy < 0 || sy >= static_cast<long>(h)) continue;
        for (std::size_t dx = 0; dx < k; ++dx) {
          const long sx = static_cast<long>(xx + dx) - static_cast<long>(pad);
          if (sx < 0 || sx >= static_cast<long>(wd)) continue;
          std::copy_n(&v[(static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx)) * cin], cin,
                      row + (dy * k + dx) * cin);
        }
      }
    }
  std::vector<double> out(h * wd * cout);
  MutMap(out.data(), h * wd, cout) =
      product(owned(cols, h * wd, patch), false, owned(w.value(), patch, cout), false);
  tape.add_macs(h * wd * patch * cout);
  const auto ix = x.id(), iw = w.id();
  return tape.record(
      "conv2d", {h, wd, cout}, std::move(out), {x, w},
      [ix, iw, h, wd, cin, k, cout, pad, patch, cols = std::move(cols)](Tape& t, std::size_t self) {
        const RowMat g = owned(t.grad_of(self), h * wd, cout);
        if (t.needs_grad(iw)) {
          MutMap(t.grad_buffer(iw).data(), patch, cout) += product(owned(cols, h * wd, patch), true, g, false);
        }
        if (t.needs_grad(ix)) {
          RowMat dcols = product(g, false, owned(t.value_of(iw), patch, cout), true);
          auto gx = t.grad_buffer(ix);
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < wd; ++xx) {
              const double* row = dcols.data() + (y * wd + xx) * patch;
              for (std::size_t dy = 0; dy < k; ++dy) {
                const long sy = static_cast<long>(y + dy) - static_cast<long>(pad);
                if (sy < 0 || sy >= static_cast<long>(h)) continue;
                for (std::size_t dx = 0; dx < k; ++dx) {
                  const long sx = static_cast<long>(xx + dx) - static_cast<long>(pad);
                  if (sx < 0 || sx >= static_cast<long>(wd)) continue;
                  double* dst = &gx[(static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx)) * cin];
                  const double* src = row + (dy * k + dx) * cin;
                  for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
                }
              }
            }
        }
      });
}

Var conv_depthwise(Var x, Var w) {
  Tape& tape = tape_of(x, w);
  const std::size_t h = x.shape()[0], wd = x.shape()[1], c = x.shape()[2];
  const std::size_t k = w.shape()[0];
  const long pad = static_cast<long>((k - 1) / 2);
  auto v = x.value();
  auto kern = w.value();
  std::vector<double> out(h * wd * c, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < wd; ++xx) {
      double* o = &out[(y * wd + xx) * c];
      for (std::size_t dy = 0; dy < k; ++dy) {
        const long sy = static_cast<long>(y + dy) - pad;
        if (sy < 0 || sy >= static_cast<long>(h)) continue;
        for (std::size_t dx = 0; dx < k; ++dx) {
          const long sx = static_cast<long>(xx + dx) - pad;
          if (sx < 0 || sx >= static_cast<long>(wd)) continue;
          const double* in = &v[(static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx)) * c];
          const double* kk = &kern[(dy * k + dx) * c];
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] += in[ch] * kk[ch];
        }
      }
    }
  tape.add_macs(h * wd * k * k * c);
  const auto ix = x.id(), iw = w.id();
  return tape.record("depthwise_conv2d", {h, wd, c}, std::move(out), {x, w},
                     [ix, iw, h, wd, c, k, pad](Tape& t, std::size_t self) {
                       auto g = t.grad_of(self);
                       auto v = t.value_of(ix);
                       auto kern = t.value_of(iw);
                       const bool gx_on = t.needs_grad(ix), gw_on = t.needs_grad(iw);
                       std::span<double> gx, gw;
                       if (gx_on) gx = t.grad_buffer(ix);
                       if (gw_on) gw = t.grad_buffer(iw);
                       for (std::size_t y = 0; y < h; ++y)
                         for (std::size_t xx = 0; xx < wd; ++xx) {
                           const double* go = &g[(y * wd + xx) * c];
                           for (std::size_t dy = 0; dy < k; ++dy) {
                             const long sy = static_cast<long>(y + dy) - pad;
                             if (sy < 0 || sy >= static_cast<long>(h)) continue;
                             for (std::size_t dx = 0; dx < k; ++dx) {
                               const long sx = static_cast<long>(xx + dx) - pad;
                               if (sx < 0 || sx >= static_cast<long>(wd)) continue;
                               const std::size_t base =
                                   (static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx)) * c;
                               const std::size_t kb = (dy * k + dx) * c;
                               if (gx_on)
                                 for (std::size_t ch = 0; ch < c; ++ch) gx[base + ch] += go[ch] * kern[kb + ch];
                               if (gw_on)
                                 for (std::size_t ch = 0; ch < c; ++ch) gw[kb + ch] += go[ch] * v[base + ch];
                             }
                           }
                         }
                     });
}

}  // namespace

Var conv2d_same(Var x, Var w, bool depthwise) {
  require_rank("conv2d_same", x, 3);
  const std::size_t cin = x.shape()[2];
  const auto& ws = w.shape();
  if (ws.size() < 2 || ws[0] != ws[1]) {
    throw DimensionError("conv2d_same: kernel must be k x k x ..., got " + shape_string(ws));
  }
  if (ws[0] % 2 == 0) {
    throw ConfigError("conv2d_same: kernel size must be odd, got " + std::to_string(ws[0]));
  }
  if (depthwise) {
    if (ws.size() != 3 || ws[2] != cin) {
      throw DimensionError("conv2d_same: depthwise kernel " + shape_string(ws) + " does not match input " +
                           shape_string(x.shape()));
    }
    return conv_depthwise(x, w);
  }
  if (ws.size() != 4 || ws[2] != cin) {
    throw DimensionError("conv2d_same: kernel " + shape_string(ws) + " does not match input " +
                         shape_string(x.shape()));
  }
  return conv_dense(x, w);
}

Var repeat_channels(Var x, std::size_t times) {
  require_rank("repeat_channels", x, 3);
  if (times == 0) throw DimensionError("repeat_channels: times must be positive");
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  auto v = x.value();
  std::vector<double> out(h * w * c * times);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < times; ++j) out[(p * c + ch) * times + j] = v[p * c + ch];
  const auto ix = x.id();
  return x.tape().record("repeat_channels", {h, w, c * times}, std::move(out), {x},
                         [ix, h, w, c, times](Tape& t, std::size_t self) {
                           auto g = t.grad_of(self);
                           auto gx = t.grad_buffer(ix);
                           for (std::size_t p = 0; p < h * w; ++p)
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               double s = 0.0;
                               for (std::size_t j = 0; j < times; ++j) s += g[(p * c + ch) * times + j];
                               gx[p * c + ch] += s;
                             }
                         });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& tape = tape_of(x, gamma);
  tape_of(x, beta);
  const std::size_t c = x.shape().back();
  if (gamma.size() != c || beta.size() != c) {
    throw DimensionError("layer_norm: scale/offset of " + std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) + " values for feature width " + std::to_string(c));
  }
  const std::size_t m = x.size() / c;
  auto v = x.value();
  auto gm = gamma.value();
  auto bt = beta.value();
  std::vector<double> xhat(v.size()), inv_std(m), out(v.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = &v[r * c];
    double mu = 0.0;
    for (std::size_t i = 0; i < c; ++i) mu += row[i];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      xhat[r * c + i] = (row[i] - mu) * is;
      out[r * c + i] = gm[i] * xhat[r * c + i] + bt[i];
    }
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape.record(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [ix, ig, ib, m, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        auto g = t.grad_of(self);
        auto gm = t.value_of(ig);
        if (t.needs_grad(ig) || t.needs_grad(ib)) {
          std::span<double> gg, gb;
          if (t.needs_grad(ig)) gg = t.grad_buffer(ig);
          if (t.needs_grad(ib)) gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t i = 0; i < c; ++i) {
              if (!gg.empty()) gg[i] += g[r * c + i] * xhat[r * c + i];
              if (!gb.empty()) gb[i] += g[r * c + i];
            }
        }
        if (t.needs_grad(ix)) {
          auto gx = t.grad_buffer(ix);
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t r = 0; r < m; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
              const double d = g[r * c + i] * gm[i];
              s1 += d;
              s2 += d * xhat[r * c + i];
            }
            for (std::size_t i = 0; i < c; ++i) {
              const double d = g[r * c + i] * gm[i];
              gx[r * c + i] += inv_std[r] * (d - inv_c * s1 - xhat[r * c + i] * inv_c * s2);
            }
          }
        }
      });
}

std::vector<double> softmax_values(std::span<const double> v) {
  if (v.empty()) throw DimensionError("softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (auto& o : out) o /= z;
  return out;
}

Var softmax(Var v) {
  auto out = softmax_values(v.value());
  const auto iv = v.id();
  return v.tape().record("softmax", v.shape(), std::move(out), {v}, [iv](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto y = t.value_of(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
    auto gv = t.grad_buffer(iv);
    for (std::size_t i = 0; i < g.size(); ++i) gv[i] += y[i] * (g[i] - dot);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value()) s += x;
  const auto ia = a.id();
  return a.tape().record("sum", {1}, {s}, {a}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    for (auto& x : t.grad_buffer(ia)) x += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var gather(Var v, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DimensionError("gather: no indices");
  auto x = v.value();
  std::vector<double> out(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= x.size()) {
      throw DimensionError("gather: index " + std::to_string(indices[j]) + " out of range for " +
                           shape_string(v.shape()));
    }
    out[j] = x[indices[j]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const auto iv = v.id();
  return v.tape().record("gather", {idx.size()}, std::move(out), {v}, [iv, idx](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto gv = t.grad_buffer(iv);
    for (std::size_t j = 0; j < idx.size(); ++j) gv[idx[j]] += g[j];
  });
}

Var element(Var v, std::size_t index) {
  const std::size_t idx[1] = {index};
  return gather(v, idx);
}

Var stack(std::span<const Var> scalars) {
  if (scalars.empty()) throw DimensionError("stack: no inputs");
  Tape& tape = scalars[0].tape();
  std::vector<double> out(scalars.size());
  std::vector<std::size_t> ids(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].size() != 1) throw DimensionError("stack: input " + std::to_string(i) + " is not a scalar");
    out[i] = scalars[i].value()[0];
    ids[i] = scalars[i].id();
  }
  return tape.record("stack", {ids.size()}, std::move(out), scalars, [ids](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (t.needs_grad(ids[i])) t.grad_buffer(ids[i])[0] += g[i];
  });
}

Var mix(Var weights, std::span<const Var> items) {
  if (items.empty() || weights.size() != items.size()) {
    throw DimensionError("mix: " + std::to_string(weights.size()) + " weights for " + std::to_string(items.size()) +
                         " items");
  }
  Tape& tape = weights.tape();
  const Shape& shape = items[0].shape();
  auto w = weights.value();
  std::vector<double> out(items[0].size(), 0.0);
  std::vector<Var> inputs{weights};
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < items.size(); ++k) {
    tape_of(weights, items[k]);
    if (items[k].shape() != shape) {
      throw DimensionError("mix: item " + std::to_string(k) + " has shape " + shape_string(items[k].shape()) +
                           ", expected " + shape_string(shape));
    }
    auto x = items[k].value();
    const double wk = w[k];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wk * x[i];
    inputs.push_back(items[k]);
    ids.push_back(items[k].id());
  }
  const auto iw = weights.id();
  return tape.record("mix", shape, std::move(out), std::span<const Var>(inputs), [iw, ids](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto w = t.value_of(iw);
    const bool need_w = t.needs_grad(iw);
    std::span<double> gw;
    if (need_w) gw = t.grad_buffer(iw);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (need_w) {
        auto x = t.value_of(ids[k]);
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * x[i];
        gw[k] += dot;
      }
      if (t.needs_grad(ids[k])) {
        auto gx = t.grad_buffer(ids[k]);
        const double wk = w[k];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += wk * g[i];
      }
    }
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const std::size_t c = a.shape().back();
  const std::size_t m = a.size() / c;
  if (rows.empty()) throw DimensionError("gather_rows: no rows");
  auto v = a.value();
  std::vector<double> out(rows.size() * c);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(&v[rows[r] * c], c, &out[r * c]);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const auto ia = a.id();
  return a.tape().record("gather_rows", {idx.size(), c}, std::move(out), {a}, [ia, idx, c](Tape& t, std::size_t self) {
    auto g = t.grad_of(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t i = 0; i < c; ++i) ga[idx[r] * c + i] += g[r * c + i];
  });
}

}  // namespace mcas
