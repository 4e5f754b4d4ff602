#include "dualnorm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "dualnorm/error.hpp"

namespace dualnorm::ops {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("op on unbound Var");
  return *a.tape;
}

void require_same(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": inputs on different tapes");
  require_same_shape(a.value(), b.value(), op);
}

struct ConvGeom {
  std::size_t cin, cout, k, stride, pad, h, w, ho, wo;
  std::size_t patch() const { return cin * k * k; }
  std::size_t out_plane() const { return ho * wo; }
};

// Output columns [lo, hi) whose stride-1 tap kx lands inside the input row.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeom& g, std::size_t kx) {
  const std::size_t lo = kx < g.pad ? g.pad - kx : 0;
  const std::size_t hi = g.w + g.pad > kx ? std::min(g.wo, g.w + g.pad - kx) : 0;
  return {std::min(lo, hi), hi};
}

// col is (cin*k*k) x (ho*wo), row-major.
void im2col(const float* x, const ConvGeom& g, float* col) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        float* row = col + ((ci * g.k + ky) * g.k + kx) * g.out_plane();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          float* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0f);
            continue;
          }
          const float* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          if (g.stride == 1) {
            const auto [lo, hi] = valid_columns(g, kx);
            std::fill(dst, dst + lo, 0.0f);
            std::copy(src + lo + kx - g.pad, src + hi + kx - g.pad, dst + lo);
            std::fill(dst + hi, dst + g.wo, 0.0f);
            continue;
          }
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0f : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeom& g, float* dx) {
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const float* row = col + ((ci * g.k + ky) * g.k + kx) * g.out_plane();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          float* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const float* src = row + oy * g.wo;
          if (g.stride == 1) {
            const auto [lo, hi] = valid_columns(g, kx);
            float* d = dst + kx - g.pad;
            for (std::size_t ox = lo; ox < hi; ++ox) d[ox] += src[ox];
            continue;
          }
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

Var conv2d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding) {
  Tape& tape = tape_of(x);
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square, got " + ws.str());
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                     std::to_string(ws.c) + " (weight " + ws.str() + ")");
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (bias.valid() && !(bias.shape() == Shape{1, ws.n, 1, 1})) {
    throw ShapeError("conv2d: bias must be (1," + std::to_string(ws.n) + ",1,1), got " +
                     bias.shape().str());
  }
  const long span_h = static_cast<long>(xs.h + 2 * padding) - static_cast<long>(ws.h);
  const long span_w = static_cast<long>(xs.w + 2 * padding) - static_cast<long>(ws.w);
  if (span_h < 0 || span_w < 0 || xs.n == 0) {
    throw ShapeError("conv2d: zero-sized output for input " + xs.str() + " and kernel " +
                     ws.str());
  }
  ConvGeom g{xs.c, ws.n, ws.h, stride, padding, xs.h, xs.w,
             static_cast<std::size_t>(span_h) / stride + 1,
             static_cast<std::size_t>(span_w) / stride + 1};

  Tensor out(Shape{xs.n, g.cout, g.ho, g.wo});
  std::vector<float> col(is_pointwise(g) ? 0 : g.patch() * g.out_plane());
  MapConstMat wmat(weight.value().ptr(), g.cout, g.patch());
  for (std::size_t n = 0; n < xs.n; ++n) {
    const float* xn = x.value().ptr() + n * xs.c * xs.h * xs.w;
    const float* colp = xn;
    if (!is_pointwise(g)) {
      im2col(xn, g, col.data());
      colp = col.data();
    }
    MapConstMat cm(colp, g.patch(), g.out_plane());
    MapMat om(out.ptr() + n * g.cout * g.out_plane(), g.cout, g.out_plane());
    om.noalias() = wmat * cm;
    if (bias.valid()) {
      const float* b = bias.value().ptr();
      for (std::size_t co = 0; co < g.cout; ++co) om.row(co).array() += b[co];
    }
  }

  const std::size_t xi = x.id, wi = weight.id;
  const bool has_bias = bias.valid();
  const std::size_t bi = bias.id;
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return tape.record(
      std::move(out), inputs,
      [xi, wi, bi, has_bias, g](Tape& t, const Tensor& gout, const Tensor&) {
        const Tensor& xv = t.value(xi);
        const Tensor& wv = t.value(wi);
        const std::size_t n_batch = xv.shape().n;
        Tensor* dx = t.grad_sink(xi);
        Tensor* dw = t.grad_sink(wi);
        Tensor* db = has_bias ? t.grad_sink(bi) : nullptr;
        std::vector<float> col(g.patch() * g.out_plane());
        MapConstMat wmat(wv.ptr(), g.cout, g.patch());
        for (std::size_t n = 0; n < n_batch; ++n) {
          MapConstMat gm(gout.ptr() + n * g.cout * g.out_plane(), g.cout, g.out_plane());
          const float* xn = xv.ptr() + n * g.cin * g.h * g.w;
          if (dw != nullptr) {
            const float* colp = xn;
            if (!is_pointwise(g)) {
              im2col(xn, g, col.data());
              colp = col.data();
            }
            MapConstMat cm(colp, g.patch(), g.out_plane());
            MapMat dwm(dw->ptr(), g.cout, g.patch());
            dwm.noalias() += gm * cm.transpose();
          }
          if (db != nullptr) {
            for (std::size_t co = 0; co < g.cout; ++co) (*db)[co] += gm.row(co).sum();
          }
          if (dx != nullptr) {
            float* dxn = dx->ptr() + n * g.cin * g.h * g.w;
            if (is_pointwise(g)) {
              MapMat dxm(dxn, g.cin, g.out_plane());
              dxm.noalias() += wmat.transpose() * gm;
            } else {
              MapMat dcol(col.data(), g.patch(), g.out_plane());
              dcol.noalias() = wmat.transpose() * gm;
              col2im_add(col.data(), g, dxn);
            }
          }
        }
      },
      "conv2d");
}

Var relu(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  const std::size_t xi = x.id;
  return tape.record(
      std::move(out), {x},
      [xi](Tape& t, const Tensor& g, const Tensor&) {
        if (Tensor* dx = t.grad_sink(xi)) {
          const Tensor& xv = t.value(xi);
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > 0.0f) (*dx)[i] += g[i];
          }
        }
      },
      "relu");
}

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  out.add_inplace(b.value());
  const std::size_t ai = a.id, bi = b.id;
  return tape_of(a).record(
      std::move(out), {a, b},
      [ai, bi](Tape& t, const Tensor& g, const Tensor&) {
        if (Tensor* da = t.grad_sink(ai)) da->add_inplace(g);
        if (Tensor* db = t.grad_sink(bi)) db->add_inplace(g);
      },
      "add");
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return tape_of(a).record(
      std::move(out), {a, b},
      [ai, bi](Tape& t, const Tensor& g, const Tensor&) {
        if (Tensor* da = t.grad_sink(ai)) da->add_inplace(g);
        if (Tensor* db = t.grad_sink(bi)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
        }
      },
      "sub");
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return tape_of(a).record(
      std::move(out), {a, b},
      [ai, bi](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& av = t.value(ai);
        const Tensor& bv2 = t.value(bi);
        if (Tensor* da = t.grad_sink(ai)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv2[i];
        }
        if (Tensor* db = t.grad_sink(bi)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
        }
      },
      "mul");
}

Var scale(Var x, float s) {
  Tensor out = x.value();
  for (float& v : out.data()) v *= s;
  const std::size_t xi = x.id;
  return tape_of(x).record(
      std::move(out), {x},
      [xi, s](Tape& t, const Tensor& g, const Tensor&) {
        if (Tensor* dx = t.grad_sink(xi)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += s * g[i];
        }
      },
      "scale");
}

Var upsample_nearest2x(Var x) {
  const Shape s = x.shape();
  Tensor out(Shape{s.n, s.c, s.h * 2, s.w * 2});
  const Tensor& xv = x.value();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const float* src = xv.ptr() + p * s.plane();
    float* dst = out.ptr() + p * s.plane() * 4;
    for (std::size_t y = 0; y < s.h * 2; ++y) {
      for (std::size_t xx = 0; xx < s.w * 2; ++xx) dst[y * s.w * 2 + xx] = src[(y / 2) * s.w + xx / 2];
    }
  }
  const std::size_t xi = x.id;
  return tape_of(x).record(
      std::move(out), {x},
      [xi, s](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* dx = t.grad_sink(xi);
        if (dx == nullptr) return;
        for (std::size_t p = 0; p < s.n * s.c; ++p) {
          const float* src = g.ptr() + p * s.plane() * 4;
          float* dst = dx->ptr() + p * s.plane();
          for (std::size_t y = 0; y < s.h * 2; ++y) {
            for (std::size_t xx = 0; xx < s.w * 2; ++xx) dst[(y / 2) * s.w + xx / 2] += src[y * s.w * 2 + xx];
          }
        }
      },
      "upsample_nearest2x");
}

Var maxpool2x(Var x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0) {
    throw ShapeError("maxpool2x: spatial dims must be positive and even, got " + s.str());
  }
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor out(os);
  std::vector<std::size_t> argmax(os.numel());
  const Tensor& xv = x.value();
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    for (std::size_t y = 0; y < os.h; ++y) {
      for (std::size_t xx = 0; xx < os.w; ++xx) {
        std::size_t best = p * s.plane() + (2 * y) * s.w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * s.plane() + (2 * y + dy) * s.w + 2 * xx + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = p * os.plane() + y * os.w + xx;
        out[o] = xv[best];
        argmax[o] = best;
      }
    }
  }
  const std::size_t xi = x.id;
  return tape_of(x).record(
      std::move(out), {x},
      [xi, argmax = std::move(argmax)](Tape& t, const Tensor& g, const Tensor&) {
        if (Tensor* dx = t.grad_sink(xi)) {
          for (std::size_t o = 0; o < g.size(); ++o) (*dx)[argmax[o]] += g[o];
        }
      },
      "maxpool2x");
}

Var softmax_channel(Var x) {
  const Shape s = x.shape();
  const Tensor& xv = x.value();
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < s.plane(); ++p) {
      const std::size_t base = n * s.c * s.plane() + p;
      float m = -std::numeric_limits<float>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) m = std::max(m, xv[base + c * s.plane()]);
      float z = 0.0f;
      for (std::size_t c = 0; c < s.c; ++c) {
        const float e = std::exp(xv[base + c * s.plane()] - m);
        out[base + c * s.plane()] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) out[base + c * s.plane()] /= z;
    }
  }
  const std::size_t xi = x.id;
  return tape_of(x).record(
      std::move(out), {x},
      [xi, s](Tape& t, const Tensor& g, const Tensor& y) {
        Tensor* dx = t.grad_sink(xi);
        if (dx == nullptr) return;
        for (std::size_t n = 0; n < s.n; ++n) {
          for (std::size_t p = 0; p < s.plane(); ++p) {
            const std::size_t base = n * s.c * s.plane() + p;
            float dot = 0.0f;
            for (std::size_t c = 0; c < s.c; ++c) dot += g[base + c * s.plane()] * y[base + c * s.plane()];
            for (std::size_t c = 0; c < s.c; ++c) {
              const std::size_t i = base + c * s.plane();
              (*dx)[i] += y[i] * (g[i] - dot);
            }
          }
        }
      },
      "softmax_channel");
}

Var concat_channels(Var a, Var b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: incompatible " + as.str() + " and " + bs.str());
  }
  const Shape os{as.n, as.c + bs.c, as.h, as.w};
  Tensor out(os);
  const std::size_t asz = as.c * as.plane(), bsz = bs.c * bs.plane();
  for (std::size_t n = 0; n < as.n; ++n) {
    std::copy_n(a.value().ptr() + n * asz, asz, out.ptr() + n * (asz + bsz));
    std::copy_n(b.value().ptr() + n * bsz, bsz, out.ptr() + n * (asz + bsz) + asz);
  }
  const std::size_t ai = a.id, bi = b.id;
  return tape_of(a).record(
      std::move(out), {a, b},
      [ai, bi, asz, bsz, nb = as.n](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* da = t.grad_sink(ai);
        Tensor* db = t.grad_sink(bi);
        for (std::size_t n = 0; n < nb; ++n) {
          const float* src = g.ptr() + n * (asz + bsz);
          if (da != nullptr) {
            for (std::size_t i = 0; i < asz; ++i) (*da)[n * asz + i] += src[i];
          }
          if (db != nullptr) {
            for (std::size_t i = 0; i < bsz; ++i) (*db)[n * bsz + i] += src[asz + i];
          }
        }
      },
      "concat_channels");
}

namespace {

Shape reduced_shape(const Shape& s, unsigned axes) {
  return Shape{(axes & kAxisN) ? 1 : s.n, (axes & kAxisC) ? 1 : s.c, (axes & kAxisH) ? 1 : s.h,
               (axes & kAxisW) ? 1 : s.w};
}

std::size_t reduced_index(const Shape& s, const Shape& rs, std::size_t i) {
  std::size_t w = i % s.w;
  std::size_t rest = i / s.w;
  std::size_t h = rest % s.h;
  rest /= s.h;
  std::size_t c = rest % s.c;
  std::size_t n = rest / s.c;
  if (rs.n == 1) n = 0;
  if (rs.c == 1) c = 0;
  if (rs.h == 1) h = 0;
  if (rs.w == 1) w = 0;
  return ((n * rs.c + c) * rs.h + h) * rs.w + w;
}

Var reduce_scaled(Var x, unsigned axes, bool mean) {
  const Shape s = x.shape();
  const Shape rs = reduced_shape(s, axes);
  const float factor = mean ? static_cast<float>(rs.numel()) / static_cast<float>(s.numel()) : 1.0f;
  std::vector<double> acc(rs.numel(), 0.0);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) acc[reduced_index(s, rs, i)] += xv[i];
  Tensor out(rs);
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] * factor);
  const std::size_t xi = x.id;
  return tape_of(x).record(
      std::move(out), {x},
      [xi, s, rs, factor](Tape& t, const Tensor& g, const Tensor&) {
        if (Tensor* dx = t.grad_sink(xi)) {
          for (std::size_t i = 0; i < s.numel(); ++i) (*dx)[i] += factor * g[reduced_index(s, rs, i)];
        }
      },
      mean ? "reduce_mean" : "reduce_sum");
}

}  // namespace

Var reduce_sum(Var x, unsigned axes) { return reduce_scaled(x, axes, false); }
Var reduce_mean(Var x, unsigned axes) { return reduce_scaled(x, axes, true); }
Var sum_all(Var x) { return reduce_scaled(x, kAxisAll, false); }

namespace {

// Standardizes x over index sets. group_of maps (n, c) to a statistic slot;
// each slot covers `count` elements.
struct Standardized {
  Tensor out;
  std::vector<float> inv_std;  // per slot
  std::vector<float> mean;
  std::vector<float> var;
};

template <typename SlotFn>
Standardized standardize_slots(const Tensor& x, std::size_t slots, SlotFn slot_of, float eps) {
  const Shape s = x.shape();
  std::vector<double> sum(slots, 0.0), count(slots, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t k = slot_of(n, c);
      const float* p = x.ptr() + (n * s.c + c) * s.plane();
      for (std::size_t i = 0; i < s.plane(); ++i) sum[k] += p[i];
      count[k] += static_cast<double>(s.plane());
    }
  }
  std::vector<double> mean(slots);
  for (std::size_t k = 0; k < slots; ++k) mean[k] = count[k] > 0 ? sum[k] / count[k] : 0.0;
  std::vector<double> sq(slots, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t k = slot_of(n, c);
      const float* p = x.ptr() + (n * s.c + c) * s.plane();
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const double d = p[i] - mean[k];
        sq[k] += d * d;
      }
    }
  }
  Standardized r{Tensor(s), std::vector<float>(slots), std::vector<float>(slots),
                 std::vector<float>(slots)};
  for (std::size_t k = 0; k < slots; ++k) {
    const double var = count[k] > 0 ? sq[k] / count[k] : 0.0;
    r.mean[k] = static_cast<float>(mean[k]);
    r.var[k] = static_cast<float>(var);
    r.inv_std[k] = static_cast<float>(1.0 / std::sqrt(var + eps));
  }
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t k = slot_of(n, c);
      const float* p = x.ptr() + (n * s.c + c) * s.plane();
      float* o = r.out.ptr() + (n * s.c + c) * s.plane();
      const double m = mean[k];
      const double is = r.inv_std[k];
      for (std::size_t i = 0; i < s.plane(); ++i) o[i] = static_cast<float>((p[i] - m) * is);
    }
  }
  return r;
}

// dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)), means taken per slot.
template <typename SlotFn>
void standardize_backward(const Tensor& xhat, const Tensor& g, const std::vector<float>& inv_std,
                          SlotFn slot_of, Tensor& dx) {
  const Shape s = xhat.shape();
  const std::size_t slots = inv_std.size();
  std::vector<double> sg(slots, 0.0), sgx(slots, 0.0), count(slots, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t k = slot_of(n, c);
      const std::size_t base = (n * s.c + c) * s.plane();
      for (std::size_t i = 0; i < s.plane(); ++i) {
        sg[k] += g[base + i];
        sgx[k] += static_cast<double>(g[base + i]) * xhat[base + i];
      }
      count[k] += static_cast<double>(s.plane());
    }
  }
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t k = slot_of(n, c);
      const std::size_t base = (n * s.c + c) * s.plane();
      const double mg = sg[k] / count[k];
      const double mgx = sgx[k] / count[k];
      for (std::size_t i = 0; i < s.plane(); ++i) {
        dx[base + i] += static_cast<float>(inv_std[k] * (g[base + i] - mg - xhat[base + i] * mgx));
      }
    }
  }
}

}  // namespace

Var batch_standardize(Var x, float eps, ChannelStats* stats_out) {
  const Shape s = x.shape();
  if (s.n * s.plane() == 0) throw ShapeError("batch_standardize: empty batch " + s.str());
  auto slot = [](std::size_t, std::size_t c) { return c; };
  Standardized r = standardize_slots(x.value(), s.c, slot, eps);
  if (stats_out != nullptr) {
    stats_out->mean = r.mean;
    stats_out->var = r.var;
  }
  const std::size_t xi = x.id;
  return tape_of(x).record(
      std::move(r.out), {x},
      [xi, inv = std::move(r.inv_std), slot](Tape& t, const Tensor& g, const Tensor& xhat) {
        if (Tensor* dx = t.grad_sink(xi)) standardize_backward(xhat, g, inv, slot, *dx);
      },
      "batch_standardize");
}

Var standardize_with(Var x, const ChannelStats& stats, float eps) {
  const Shape s = x.shape();
  if (stats.mean.size() != s.c || stats.var.size() != s.c) {
    throw ShapeError("standardize_with: stats for " + std::to_string(stats.mean.size()) +
                     " channels, input " + s.str());
  }
  std::vector<float> inv(s.c);
  for (std::size_t c = 0; c < s.c; ++c) inv[c] = 1.0f / std::sqrt(stats.var[c] + eps);
  Tensor out(s);
  const Tensor& xv = x.value();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * s.plane();
      for (std::size_t i = 0; i < s.plane(); ++i) out[base + i] = (xv[base + i] - stats.mean[c]) * inv[c];
    }
  }
  const std::size_t xi = x.id;
  return tape_of(x).record(
      std::move(out), {x},
      [xi, inv, s](Tape& t, const Tensor& g, const Tensor&) {
        if (Tensor* dx = t.grad_sink(xi)) {
          for (std::size_t n = 0; n < s.n; ++n) {
            for (std::size_t c = 0; c < s.c; ++c) {
              const std::size_t base = (n * s.c + c) * s.plane();
              for (std::size_t i = 0; i < s.plane(); ++i) (*dx)[base + i] += g[base + i] * inv[c];
            }
          }
        }
      },
      "standardize_with");
}

Var group_standardize(Var x, std::size_t groups, float eps) {
  const Shape s = x.shape();
  if (groups == 0 || s.c % groups != 0) {
    throw ConfigError("group_standardize: group count " + std::to_string(groups) +
                      " does not divide " + std::to_string(s.c) + " channels");
  }
  const std::size_t per = s.c / groups;
  auto slot = [groups, per](std::size_t n, std::size_t c) { return n * groups + c / per; };
  Standardized r = standardize_slots(x.value(), s.n * groups, slot, eps);
  const std::size_t xi = x.id;
  return tape_of(x).record(
      std::move(r.out), {x},
      [xi, inv = std::move(r.inv_std), slot](Tape& t, const Tensor& g, const Tensor& xhat) {
        if (Tensor* dx = t.grad_sink(xi)) standardize_backward(xhat, g, inv, slot, *dx);
      },
      "group_standardize");
}

Var channel_affine(Var x, Var gamma, Var beta) {
  const Shape s = x.shape();
  const Shape ps{1, s.c, 1, 1};
  if (!(gamma.shape() == ps) || !(beta.shape() == ps)) {
    throw ShapeError("channel_affine: gamma/beta must be " + ps.str() + ", got " +
                     gamma.shape().str() + " and " + beta.shape().str());
  }
  Tensor out(s);
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * s.plane();
      for (std::size_t i = 0; i < s.plane(); ++i) out[base + i] = gv[c] * xv[base + i] + bv[c];
    }
  }
  const std::size_t xi = x.id, gi = gamma.id, bi = beta.id;
  return tape_of(x).record(
      std::move(out), {x, gamma, beta},
      [xi, gi, bi, s](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& xv2 = t.value(xi);
        const Tensor& gv2 = t.value(gi);
        Tensor* dx = t.grad_sink(xi);
        Tensor* dg = t.grad_sink(gi);
        Tensor* db = t.grad_sink(bi);
        for (std::size_t c = 0; c < s.c; ++c) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t base = (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) {
              sg += g[base + i];
              sgx += static_cast<double>(g[base + i]) * xv2[base + i];
              if (dx != nullptr) (*dx)[base + i] += gv2[c] * g[base + i];
            }
          }
          if (dg != nullptr) (*dg)[c] += static_cast<float>(sgx);
          if (db != nullptr) (*db)[c] += static_cast<float>(sg);
        }
      },
      "channel_affine");
}

}  // namespace dualnorm::ops
