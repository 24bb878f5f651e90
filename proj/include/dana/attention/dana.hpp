#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "dana/tensor/tensor.hpp"

// Dual-awareness attention: background attenuation (BA) on support maps,
// cross-image spatial attention (CISA) from query positions onto support
// pixels, query-position-aware (QPA) aggregation, multi-shot averaging and
// fusion with the query map.
//
// Shape conventions: feature maps are C x H x W. Spatial pixels are
// flattened row-major, so a map viewed as a matrix is C x (H*W). Query
// pixels index rows of an attention matrix, support pixels its columns.

namespace dana::attention {

inline constexpr double kDefaultAlpha = 0.5;
inline constexpr double kDefaultBeta = 0.1;

struct BAParams {
  Tensor w_e;  // C x 1
  double alpha = kDefaultAlpha;
};

struct CISAParams {
  Tensor w_q;  // C x C'
  Tensor w_k;  // C x C'
  Tensor w_r;  // C x 1
  double beta = kDefaultBeta;
};

/// 1x1 convolution + sigmoid producing a soft spatial mask.
struct MaskParams {
  Tensor weight;  // 1 x C x 1 x 1
  Tensor bias;    // 1
};

enum class FuseMode { kConcat, kProduct };
enum class Denoise { kNone, kMask, kBA };

std::string_view to_string(FuseMode mode);
std::string_view to_string(Denoise mode);
FuseMode parse_fuse_mode(std::string_view s);
Denoise parse_denoise(std::string_view s);

/// Fused query representation fed to the proposal head.
struct FusedMap {
  Tensor map;  // 2C x H x W (concat) or C x H x W (product)
  FuseMode mode = FuseMode::kConcat;
};

/// Softmax over support pixels of W_e^T y_i. Returns 1 x (H*W).
Tensor ba_attention_weights(const Tensor& y, const Tensor& w_e);
/// G = sum_i weight_i * y_i. Returns C x 1.
Tensor ba_aggregate(const Tensor& y, const Tensor& weights);
/// Z = Y + alpha * LeakyReLU(G), G broadcast over all pixels.
Tensor ba_apply(const Tensor& y, const Tensor& g, double alpha);
Tensor ba_block(const Tensor& y, const BAParams& params);

/// delta = softmax_j((Q - mu_Q)^T (K - mu_K)) with Q = W_q^T X, K = W_k^T Z.
/// Means are taken over the pixels of each map. Returns (Hq*Wq) x (Hs*Ws).
Tensor cisa_similarity(const Tensor& x, const Tensor& z, const Tensor& w_q, const Tensor& w_k);
/// A = delta + beta * W_r^T Z, the second term shared by every row.
Tensor cisa_attention(const Tensor& x, const Tensor& z, const CISAParams& params);
/// p_i = sum_j A[i, j] z_j, laid out as C x Hq x Wq.
Tensor qpa_map(const Tensor& a, const Tensor& z, std::size_t query_h, std::size_t query_w);
/// Elementwise mean over shots. Each element is summed in sorted order, so
/// the result is bit-identical under any permutation of `maps`.
Tensor qpa_average(std::span<const Tensor> maps);

FusedMap fuse(const Tensor& p, const Tensor& x, FuseMode mode);

/// Global-vector baseline: global-average-pool every support, average over
/// shots, tile over the query grid and concatenate in front of X.
FusedMap global_pool_baseline(std::span<const Tensor> supports, const Tensor& x);

/// Y * sigmoid(conv1x1(Y)), the mask broadcast over channels.
Tensor mask_denoise_baseline(const Tensor& y, const MaskParams& params);

/// Support denoising stage selected by `mode`.
struct DenoiseParams {
  Denoise mode = Denoise::kBA;
  BAParams ba;
  MaskParams mask;
};
Tensor denoise_support(const Tensor& y, const DenoiseParams& params);

/// Per-shot denoise + CISA + QPA, then the multi-shot average.
/// `attention_out`, when given, receives each shot's attention matrix.
Tensor dana_qpa(const Tensor& x, std::span<const Tensor> supports, const DenoiseParams& denoise,
                const CISAParams& cisa, std::vector<Tensor>* attention_out = nullptr);

/// Same as dana_qpa, but over support maps that are already denoised.
Tensor dana_qpa_from_z(const Tensor& x, std::span<const Tensor> z_maps, const CISAParams& cisa,
                       std::vector<Tensor>* attention_out = nullptr);

}  // namespace dana::attention
