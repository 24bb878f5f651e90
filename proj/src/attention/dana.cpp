#include "dana/attention/dana.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "dana/tensor/ops.hpp"

namespace dana::attention {

namespace {

void require_map(std::string_view what, const Tensor& t) {
  if (t.rank() != 3) {
    throw ShapeError(std::string(what) + ": expected C x H x W map, got " + shape_str(t.shape()));
  }
}

// C x H x W -> C x (H*W)
Tensor as_matrix(const Tensor& map) { return reshape(map, Shape{map.dim(0), map.dim(1) * map.dim(2)}); }

// Sums with a fixed, input-order-independent association: sort, then reduce
// pairwise.
double pairwise_sum(std::span<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  while (n > 1) {
    std::size_t half = 0;
    for (std::size_t i = 0; i + 1 < n; i += 2) v[half++] = v[i] + v[i + 1];
    if (n % 2) v[half++] = v[n - 1];
    n = half;
  }
  return n ? v[0] : 0.0;
}

}  // namespace

std::string_view to_string(FuseMode mode) { return mode == FuseMode::kConcat ? "concat" : "product"; }

std::string_view to_string(Denoise mode) {
  switch (mode) {
    case Denoise::kNone: return "none";
    case Denoise::kMask: return "mask";
    case Denoise::kBA: return "ba";
  }
  return "none";
}

FuseMode parse_fuse_mode(std::string_view s) {
  if (s == "concat") return FuseMode::kConcat;
  if (s == "product") return FuseMode::kProduct;
  throw std::invalid_argument("unknown fuse mode '" + std::string(s) + "' (concat|product)");
}

Denoise parse_denoise(std::string_view s) {
  if (s == "none") return Denoise::kNone;
  if (s == "mask") return Denoise::kMask;
  if (s == "ba") return Denoise::kBA;
  throw std::invalid_argument("unknown denoise mode '" + std::string(s) + "' (none|mask|ba)");
}

Tensor ba_attention_weights(const Tensor& y, const Tensor& w_e) {
  require_map("ba_attention_weights", y);
  if (w_e.shape() != Shape{y.dim(0), 1}) {
    throw ShapeError("ba_attention_weights: W_e must be " + shape_str({y.dim(0), 1}) + ", got " +
                     shape_str(w_e.shape()));
  }
  Tensor logits = matmul(transpose2d(w_e), as_matrix(y));
  return softmax_axis(logits, 1);
}

Tensor ba_aggregate(const Tensor& y, const Tensor& weights) {
  require_map("ba_aggregate", y);
  return matmul(as_matrix(y), transpose2d(weights));
}

Tensor ba_apply(const Tensor& y, const Tensor& g, double alpha) {
  require_map("ba_apply", y);
  if (g.numel() != y.dim(0)) {
    throw ShapeError("ba_apply: G has " + std::to_string(g.numel()) + " entries for C = " +
                     std::to_string(y.dim(0)));
  }
  Tensor shift = scale(leaky_relu(reshape(g, Shape{y.dim(0), 1, 1})), alpha);
  return add(y, shift);
}

Tensor ba_block(const Tensor& y, const BAParams& params) {
  Tensor weights = ba_attention_weights(y, params.w_e);
  Tensor g = ba_aggregate(y, weights);
  return ba_apply(y, g, params.alpha);
}

Tensor cisa_similarity(const Tensor& x, const Tensor& z, const Tensor& w_q, const Tensor& w_k) {
  require_map("cisa_similarity", x);
  require_map("cisa_similarity", z);
  if (x.dim(0) != z.dim(0)) throw ShapeError("cisa_similarity: X and Z channel counts differ");
  if (w_q.rank() != 2 || w_k.shape() != w_q.shape() || w_q.dim(0) != x.dim(0)) {
    throw ShapeError("cisa_similarity: W_q " + shape_str(w_q.shape()) + " / W_k " +
                     shape_str(w_k.shape()) + " do not fit C = " + std::to_string(x.dim(0)));
  }
  Tensor q = matmul(transpose2d(w_q), as_matrix(x));
  Tensor k = matmul(transpose2d(w_k), as_matrix(z));
  Tensor qc = sub(q, mean_axis(q, 1));
  Tensor kc = sub(k, mean_axis(k, 1));
  return softmax_axis(matmul(transpose2d(qc), kc), 1);
}

Tensor cisa_attention(const Tensor& x, const Tensor& z, const CISAParams& params) {
  Tensor delta = cisa_similarity(x, z, params.w_q, params.w_k);
  if (params.w_r.shape() != Shape{z.dim(0), 1}) {
    throw ShapeError("cisa_attention: W_r must be " + shape_str({z.dim(0), 1}) + ", got " +
                     shape_str(params.w_r.shape()));
  }
  Tensor self_term = matmul(transpose2d(params.w_r), as_matrix(z));
  return add(delta, scale(self_term, params.beta));
}

Tensor qpa_map(const Tensor& a, const Tensor& z, std::size_t query_h, std::size_t query_w) {
  require_map("qpa_map", z);
  const std::size_t support_pixels = z.dim(1) * z.dim(2);
  if (a.rank() != 2 || a.dim(1) != support_pixels || a.dim(0) != query_h * query_w) {
    throw ShapeError("qpa_map: attention " + shape_str(a.shape()) + " does not match support " +
                     shape_str(z.shape()) + " and query grid " + std::to_string(query_h) + "x" +
                     std::to_string(query_w));
  }
  Tensor p = matmul(as_matrix(z), transpose2d(a));
  return reshape(p, Shape{z.dim(0), query_h, query_w});
}

Tensor qpa_average(std::span<const Tensor> maps) {
  if (maps.empty()) throw std::invalid_argument("qpa_average: empty shot list");
  const Shape& shape = maps.front().shape();
  for (const auto& m : maps) {
    if (m.shape() != shape) {
      throw ShapeError("qpa_average: shot shapes differ " + shape_str(shape) + " vs " + shape_str(m.shape()));
    }
  }
  if (maps.size() == 1) return maps.front();
  const std::size_t k = maps.size();
  const double inv = 1.0 / static_cast<double>(k);
  Tensor out(shape);
  auto o = out.mutable_data();
  std::vector<double> column(k);
  for (std::size_t i = 0; i < o.size(); ++i) {
    for (std::size_t s = 0; s < k; ++s) column[s] = maps[s][i];
    o[i] = pairwise_sum(column) * inv;
  }
  std::vector<Tensor> inputs(maps.begin(), maps.end());
  if (Tape* tape = common_tape(inputs)) {
    return tape->record(std::move(out), inputs, [inv](std::span<const double> g, GradSpans& gi) {
      for (auto& gs : gi) {
        if (gs.empty()) continue;
        for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i] * inv;
      }
    });
  }
  return out;
}

FusedMap fuse(const Tensor& p, const Tensor& x, FuseMode mode) {
  require_map("fuse", x);
  if (p.shape() != x.shape()) {
    throw ShapeError("fuse: P " + shape_str(p.shape()) + " and X " + shape_str(x.shape()) + " differ");
  }
  if (mode == FuseMode::kConcat) return {concat_channels({p, x}), mode};
  return {mul(p, x), mode};
}

FusedMap global_pool_baseline(std::span<const Tensor> supports, const Tensor& x) {
  require_map("global_pool_baseline", x);
  if (supports.empty()) throw std::invalid_argument("global_pool_baseline: no supports");
  std::vector<Tensor> pooled;
  pooled.reserve(supports.size());
  for (const auto& y : supports) {
    require_map("global_pool_baseline", y);
    if (y.dim(0) != x.dim(0)) throw ShapeError("global_pool_baseline: support/query channel mismatch");
    pooled.push_back(reshape(mean_axis(as_matrix(y), 1), Shape{y.dim(0), 1, 1}));
  }
  Tensor v = qpa_average(pooled);
  Tensor tiled = add(Tensor(x.shape(), 0.0), v);
  return {concat_channels({tiled, x}), FuseMode::kConcat};
}

Tensor mask_denoise_baseline(const Tensor& y, const MaskParams& params) {
  require_map("mask_denoise_baseline", y);
  Tensor mask = sigmoid(conv2d(y, params.weight, params.bias, 1, 0));
  return mul(y, mask);
}

Tensor denoise_support(const Tensor& y, const DenoiseParams& params) {
  switch (params.mode) {
    case Denoise::kNone: return y;
    case Denoise::kMask: return mask_denoise_baseline(y, params.mask);
    case Denoise::kBA: return ba_block(y, params.ba);
  }
  return y;
}

Tensor dana_qpa_from_z(const Tensor& x, std::span<const Tensor> z_maps, const CISAParams& cisa,
                       std::vector<Tensor>* attention_out) {
  require_map("dana_qpa", x);
  if (z_maps.empty()) throw std::invalid_argument("dana_qpa: no support maps");
  std::vector<Tensor> per_shot;
  per_shot.reserve(z_maps.size());
  for (const auto& z : z_maps) {
    Tensor a = cisa_attention(x, z, cisa);
    if (attention_out) attention_out->push_back(a);
    per_shot.push_back(qpa_map(a, z, x.dim(1), x.dim(2)));
  }
  return qpa_average(per_shot);
}

Tensor dana_qpa(const Tensor& x, std::span<const Tensor> supports, const DenoiseParams& denoise,
                const CISAParams& cisa, std::vector<Tensor>* attention_out) {
  std::vector<Tensor> z_maps;
  z_maps.reserve(supports.size());
  for (const auto& y : supports) z_maps.push_back(denoise_support(y, denoise));
  return dana_qpa_from_z(x, z_maps, cisa, attention_out);
}

}  // namespace dana::attention
