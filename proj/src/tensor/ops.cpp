#include "dana/tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace dana {

namespace {

Tensor finish(Tensor out, const std::vector<Tensor>& inputs, VjpFn vjp) {
  if (Tape* tape = common_tape(inputs)) return tape->record(std::move(out), inputs, std::move(vjp));
  return out;
}

[[noreturn]] void mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// Broadcast layout of two same-rank operands.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

Broadcast broadcast_layout(std::string_view op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) mismatch(op, a, b);
  Broadcast bc;
  bc.same = a == b;
  bc.out.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) mismatch(op, a, b);
    bc.out[i] = std::max(a[i], b[i]);
  }
  auto strides = [&](const Shape& s) {
    std::vector<std::size_t> st(s.size(), 0);
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
      st[i] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  bc.stride_a = strides(a);
  bc.stride_b = strides(b);
  return bc;
}

// Calls fn(out_index, a_index, b_index) over the broadcast output.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t n = numel_of(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * idx[d];
      ib -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class Arith { kAdd, kSub, kMul };

Tensor elementwise(Arith kind, const Tensor& a, const Tensor& b) {
  static constexpr std::string_view names[] = {"add", "sub", "mul"};
  auto bc = broadcast_layout(names[static_cast<int>(kind)], a.shape(), b.shape());
  Tensor out(bc.out);
  auto o = out.mutable_data();
  auto av = a.data();
  auto bv = b.data();
  switch (kind) {
    case Arith::kAdd:
      for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] + bv[ib]; });
      break;
    case Arith::kSub:
      for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] - bv[ib]; });
      break;
    case Arith::kMul:
      for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] * bv[ib]; });
      break;
  }
  auto sa = a.storage();
  auto sb = b.storage();
  return finish(std::move(out), {a, b}, [kind, bc, sa, sb](std::span<const double> g, GradSpans& gi) {
    auto& ga = gi[0];
    auto& gb = gi[1];
    const double sign_b = kind == Arith::kSub ? -1.0 : 1.0;
    for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (kind == Arith::kMul) {
        if (!ga.empty()) ga[ia] += g[i] * (*sb)[ib];
        if (!gb.empty()) gb[ib] += g[i] * (*sa)[ia];
      } else {
        if (!ga.empty()) ga[ia] += g[i];
        if (!gb.empty()) gb[ib] += sign_b * g[i];
      }
    });
  });
}

// outer x n x inner decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(std::string_view op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

// Four-tap bilinear sample positions shared by resize and roi_align.
struct Tap {
  std::size_t idx[4];
  double w[4];
};

Tap bilinear_tap(double v, double u, std::size_t h, std::size_t w) {
  v = std::clamp(v, 0.0, static_cast<double>(h - 1));
  u = std::clamp(u, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(v));
  const auto x0 = static_cast<std::size_t>(std::floor(u));
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double ly = v - static_cast<double>(y0);
  const double lx = u - static_cast<double>(x0);
  return Tap{{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
             {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx}};
}

Tensor sample_taps(const Tensor& x, std::vector<Tap> taps, std::size_t out_h, std::size_t out_w) {
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2), out_plane = out_h * out_w;
  Tensor out(Shape{c, out_h, out_w});
  auto o = out.mutable_data();
  auto xv = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = xv.data() + ch * plane;
    for (std::size_t p = 0; p < out_plane; ++p) {
      const Tap& t = taps[p];
      o[ch * out_plane + p] = t.w[0] * src[t.idx[0]] + t.w[1] * src[t.idx[1]] +
                              t.w[2] * src[t.idx[2]] + t.w[3] * src[t.idx[3]];
    }
  }
  return finish(std::move(out), {x}, [taps = std::move(taps), c, plane, out_plane](std::span<const double> g, GradSpans& gi) {
    if (gi[0].empty()) return;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* dst = gi[0].data() + ch * plane;
      for (std::size_t p = 0; p < out_plane; ++p) {
        const Tap& t = taps[p];
        const double gv = g[ch * out_plane + p];
        for (int k = 0; k < 4; ++k) dst[t.idx[k]] += t.w[k] * gv;
      }
    }
  });
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose2d: return "transpose2d";
    case OpKind::kConcatChannels: return "concat_channels";
    case OpKind::kSoftmaxAxis: return "softmax_axis";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kMeanAxis: return "mean_axis";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kBilinearResize: return "bilinear_resize";
    case OpKind::kSmoothL1: return "smooth_l1";
    case OpKind::kBceWithLogits: return "bce_with_logits";
    case OpKind::kSum: return "sum";
    case OpKind::kSliceChannels: return "slice_channels";
    case OpKind::kRoiAlign: return "roi_align";
  }
  return "unknown";
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  auto o = out.mutable_data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = o.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto sa = a.storage();
  auto sb = b.storage();
  return finish(std::move(out), {a, b}, [sa, sb, m, k, n](std::span<const double> g, GradSpans& gi) {
    if (!gi[0].empty()) {  // dA = G B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g.data() + i * n;
          const double* brow = sb->data() + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          gi[0][i * k + p] += acc;
        }
    }
    if (!gi[1].empty()) {  // dB = A^T G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = (*sa)[i * k + p];
          const double* grow = g.data() + i * n;
          double* dbrow = gi[1].data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
        }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Arith::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Arith::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Arith::kMul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * av[i];
  return finish(std::move(out), {a}, [factor](std::span<const double> g, GradSpans& gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += factor * g[i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  Tensor out = a.with_shape(std::move(shape));
  return finish(std::move(out), {a}, [](std::span<const double> g, GradSpans& gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
  });
}

Tensor transpose2d(const Tensor& a) {
  require_rank("transpose2d", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out(Shape{c, r});
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = av[i * c + j];
  return finish(std::move(out), {a}, [r, c](std::span<const double> g, GradSpans& gi) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j * r + i];
  });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw ShapeError("concat_channels: 0-d input");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      mismatch("concat_channels", shape, p.shape());
    channels += p.dim(0);
  }
  shape[0] = channels;
  Tensor out(shape);
  auto o = out.mutable_data();
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.numel();
  }
  return finish(std::move(out), parts, [offsets](std::span<const double> g, GradSpans& gi) {
    for (std::size_t k = 0; k < gi.size(); ++k) {
      if (gi[k].empty()) continue;
      for (std::size_t i = 0; i < gi[k].size(); ++i) gi[k][i] += g[offsets[k] + i];
    }
  });
}

Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin >= end || end > a.dim(0)) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  const std::size_t row = a.numel() / shape[0];
  shape[0] = end - begin;
  const std::size_t off = begin * row;
  std::vector<double> values(a.data().begin() + static_cast<std::ptrdiff_t>(off),
                             a.data().begin() + static_cast<std::ptrdiff_t>(end * row));
  Tensor out(shape, std::move(values));
  return finish(std::move(out), {a}, [off](std::span<const double> g, GradSpans& gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][off + i] += g[i];
  });
}

Tensor softmax_axis(const Tensor& a, std::size_t axis) {
  const auto sp = split_axis("softmax_axis", a.shape(), axis);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t u = 0; u < sp.outer; ++u)
    for (std::size_t v = 0; v < sp.inner; ++v) {
      const std::size_t base = u * sp.n * sp.inner + v;
      double mx = av[base];
      for (std::size_t i = 1; i < sp.n; ++i) mx = std::max(mx, av[base + i * sp.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i) {
        const double e = std::exp(av[base + i * sp.inner] - mx);
        o[base + i * sp.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < sp.n; ++i) o[base + i * sp.inner] /= total;
    }
  auto so = out.storage();
  return finish(std::move(out), {a}, [so, sp](std::span<const double> g, GradSpans& gi) {
    const auto& y = *so;
    for (std::size_t u = 0; u < sp.outer; ++u)
      for (std::size_t v = 0; v < sp.inner; ++v) {
        const std::size_t base = u * sp.n * sp.inner + v;
        double dot = 0.0;
        for (std::size_t i = 0; i < sp.n; ++i) dot += g[base + i * sp.inner] * y[base + i * sp.inner];
        for (std::size_t i = 0; i < sp.n; ++i) {
          const std::size_t k = base + i * sp.inner;
          gi[0][k] += y[k] * (g[k] - dot);
        }
      }
  });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] > 0 ? av[i] : slope * av[i];
  auto sa = a.storage();
  return finish(std::move(out), {a}, [sa, slope](std::span<const double> g, GradSpans& gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += (*sa)[i] > 0 ? g[i] : slope * g[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double x = av[i];
    o[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  auto so = out.storage();
  return finish(std::move(out), {a}, [so](std::span<const double> g, GradSpans& gi) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = (*so)[i];
      gi[0][i] += g[i] * y * (1.0 - y);
    }
  });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  const auto sp = split_axis("mean_axis", a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = 1;
  Tensor out(shape);
  auto o = out.mutable_data();
  auto av = a.data();
  const double inv = 1.0 / static_cast<double>(sp.n);
  for (std::size_t u = 0; u < sp.outer; ++u)
    for (std::size_t v = 0; v < sp.inner; ++v) {
      double acc = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i) acc += av[(u * sp.n + i) * sp.inner + v];
      o[u * sp.inner + v] = acc * inv;
    }
  return finish(std::move(out), {a}, [sp, inv](std::span<const double> g, GradSpans& gi) {
    for (std::size_t u = 0; u < sp.outer; ++u)
      for (std::size_t v = 0; v < sp.inner; ++v) {
        const double gv = g[u * sp.inner + v] * inv;
        for (std::size_t i = 0; i < sp.n; ++i) gi[0][(u * sp.n + i) * sp.inner + v] += gv;
      }
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return finish(Tensor::scalar(acc), {a}, [](std::span<const double> g, GradSpans& gi) {
    for (auto& v : gi[0]) v += g[0];
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", w, 4);
  require_rank("conv2d", b, 1);
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k) mismatch("conv2d", x.shape(), w.shape());
  if (b.dim(0) != cout) mismatch("conv2d", w.shape(), b.shape());
  if (h + 2 * padding < k || wd + 2 * padding < k) mismatch("conv2d", x.shape(), w.shape());
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - k) / stride + 1;

  // im2col: row r = (ci, ky, kx), column p = (oy, ox); src < 0 marks padding.
  const std::size_t rows = cin * k * k, np = oh * ow;
  auto src = std::make_shared<std::vector<std::ptrdiff_t>>(rows * np, -1);
  auto cols = std::make_shared<std::vector<double>>(rows * np, 0.0);
  auto xv = x.data();
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::size_t r = (ci * k + ky) * k + kx;
        std::ptrdiff_t* srow = src->data() + r * np;
        double* crow = cols->data() + r * np;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
            const auto idx = (static_cast<std::ptrdiff_t>(ci) * static_cast<std::ptrdiff_t>(h) + iy) *
                                 static_cast<std::ptrdiff_t>(wd) + ix;
            srow[oy * ow + ox] = idx;
            crow[oy * ow + ox] = xv[static_cast<std::size_t>(idx)];
          }
        }
      }

  Tensor out(Shape{cout, oh, ow});
  auto o = out.mutable_data();
  auto wv = w.data();
  auto bv = b.data();
  for (std::size_t co = 0; co < cout; ++co) {
    double* orow = o.data() + co * np;
    std::fill(orow, orow + np, bv[co]);
    for (std::size_t r = 0; r < rows; ++r) {
      const double wt = wv[co * rows + r];
      const double* crow = cols->data() + r * np;
      for (std::size_t p = 0; p < np; ++p) orow[p] += wt * crow[p];
    }
  }
  auto sw = w.storage();
  return finish(std::move(out), {x, w, b}, [=](std::span<const double> g, GradSpans& gi) {
    auto& gx = gi[0];
    auto& gw = gi[1];
    auto& gb = gi[2];
    for (std::size_t co = 0; co < cout; ++co) {
      const double* grow = g.data() + co * np;
      if (!gb.empty()) {
        double acc = 0.0;
        for (std::size_t p = 0; p < np; ++p) acc += grow[p];
        gb[co] += acc;
      }
      if (!gw.empty()) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* crow = cols->data() + r * np;
          double acc = 0.0;
          for (std::size_t p = 0; p < np; ++p) acc += grow[p] * crow[p];
          gw[co * rows + r] += acc;
        }
      }
    }
    if (gx.empty()) return;
    std::vector<double> gcol(np);
    for (std::size_t r = 0; r < rows; ++r) {
      std::fill(gcol.begin(), gcol.end(), 0.0);
      for (std::size_t co = 0; co < cout; ++co) {
        const double wt = (*sw)[co * rows + r];
        const double* grow = g.data() + co * np;
        for (std::size_t p = 0; p < np; ++p) gcol[p] += wt * grow[p];
      }
      const std::ptrdiff_t* srow = src->data() + r * np;
      for (std::size_t p = 0; p < np; ++p)
        if (srow[p] >= 0) gx[static_cast<std::size_t>(srow[p])] += gcol[p];
    }
  });
}

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank("bilinear_resize", x, 3);
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: empty output size");
  const std::size_t h = x.dim(1), w = x.dim(2);
  std::vector<Tap> taps;
  taps.reserve(out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j) {
      taps.push_back(bilinear_tap((static_cast<double>(i) + 0.5) * sy - 0.5,
                                  (static_cast<double>(j) + 0.5) * sx - 0.5, h, w));
    }
  return sample_taps(x, std::move(taps), out_h, out_w);
}

Tensor roi_align(const Tensor& x, const std::array<double, 4>& box, double spatial_scale,
                 std::size_t out_h, std::size_t out_w) {
  require_rank("roi_align", x, 3);
  if (out_h == 0 || out_w == 0) throw ShapeError("roi_align: empty output size");
  const std::size_t h = x.dim(1), w = x.dim(2);
  const double bw = (box[2] - box[0]) / static_cast<double>(out_w);
  const double bh = (box[3] - box[1]) / static_cast<double>(out_h);
  std::vector<Tap> taps;
  taps.reserve(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j) {
      const double iy = box[1] + (static_cast<double>(i) + 0.5) * bh;
      const double ix = box[0] + (static_cast<double>(j) + 0.5) * bw;
      taps.push_back(bilinear_tap(iy * spatial_scale - 0.5, ix * spatial_scale - 0.5, h, w));
    }
  return sample_taps(x, std::move(taps), out_h, out_w);
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta) {
  if (pred.shape() != target.shape()) mismatch("smooth_l1", pred.shape(), target.shape());
  Tensor out(pred.shape());
  auto o = out.mutable_data();
  auto pv = pred.data();
  auto tv = target.data();
  std::vector<double> deriv(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double d = pv[i] - tv[i];
    const double ad = std::abs(d);
    if (ad < beta) {
      o[i] = 0.5 * d * d / beta;
      deriv[i] = d / beta;
    } else {
      o[i] = ad - 0.5 * beta;
      deriv[i] = d > 0 ? 1.0 : -1.0;
    }
  }
  return finish(std::move(out), {pred, target}, [deriv = std::move(deriv)](std::span<const double> g, GradSpans& gi) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!gi[0].empty()) gi[0][i] += g[i] * deriv[i];
      if (!gi[1].empty()) gi[1][i] -= g[i] * deriv[i];
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) mismatch("bce_with_logits", logits.shape(), targets.shape());
  Tensor out(logits.shape());
  auto o = out.mutable_data();
  auto xv = logits.data();
  auto tv = targets.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double x = xv[i];
    o[i] = std::max(x, 0.0) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
  }
  auto sx = logits.storage();
  auto st = targets.storage();
  return finish(std::move(out), {logits, targets}, [sx, st](std::span<const double> g, GradSpans& gi) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = (*sx)[i];
      const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      if (!gi[0].empty()) gi[0][i] += g[i] * (s - (*st)[i]);
      if (!gi[1].empty()) gi[1][i] -= g[i] * x;
    }
  });
}

Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
  };
  auto out_hw = [&]() {
    if (attrs.shape.size() != 2) throw ShapeError(std::string(op_name(kind)) + ": attrs.shape must be (h, w)");
    return std::pair{attrs.shape[0], attrs.shape[1]};
  };
  switch (kind) {
    case OpKind::kMatmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::kAdd: need(2); return add(inputs[0], inputs[1]);
    case OpKind::kSub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::kMul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::kScale: need(1); return scale(inputs[0], attrs.factor);
    case OpKind::kReshape: need(1); return reshape(inputs[0], attrs.shape);
    case OpKind::kTranspose2d: need(1); return transpose2d(inputs[0]);
    case OpKind::kConcatChannels: return concat_channels(inputs);
    case OpKind::kSoftmaxAxis: need(1); return softmax_axis(inputs[0], attrs.axis);
    case OpKind::kLeakyRelu: need(1); return leaky_relu(inputs[0], attrs.slope);
    case OpKind::kSigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::kMeanAxis: need(1); return mean_axis(inputs[0], attrs.axis);
    case OpKind::kConv2d: need(3); return conv2d(inputs[0], inputs[1], inputs[2], attrs.stride, attrs.padding);
    case OpKind::kBilinearResize: {
      need(1);
      auto [h, w] = out_hw();
      return bilinear_resize(inputs[0], h, w);
    }
    case OpKind::kSmoothL1: need(2); return smooth_l1(inputs[0], inputs[1], attrs.beta);
    case OpKind::kBceWithLogits: need(2); return bce_with_logits(inputs[0], inputs[1]);
    case OpKind::kSum: need(1); return sum(inputs[0]);
    case OpKind::kSliceChannels: need(1); return slice_channels(inputs[0], attrs.begin, attrs.end);
    case OpKind::kRoiAlign: {
      need(1);
      auto [h, w] = out_hw();
      return roi_align(inputs[0], attrs.box, attrs.spatial_scale, h, w);
    }
  }
  throw std::invalid_argument("unknown op kind");
}

}  // namespace dana
