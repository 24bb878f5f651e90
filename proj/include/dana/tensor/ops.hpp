#pragma once

#include <array>
#include <string_view>
#include <vector>

#include "dana/tensor/tensor.hpp"

namespace dana {

/// Differentiable op kinds. Every kind has a hand-written VJP rule and is
/// covered by the finite-difference suite.
enum class OpKind {
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kReshape,
  kTranspose2d,
  kConcatChannels,
  kSoftmaxAxis,
  kLeakyRelu,
  kSigmoid,
  kMeanAxis,
  kConv2d,
  kBilinearResize,
  kSmoothL1,
  kBceWithLogits,
  kSum,
  kSliceChannels,
  kRoiAlign,
};

inline constexpr std::array kAllOpKinds = {
    OpKind::kMatmul,        OpKind::kAdd,           OpKind::kSub,
    OpKind::kMul,           OpKind::kScale,         OpKind::kReshape,
    OpKind::kTranspose2d,   OpKind::kConcatChannels, OpKind::kSoftmaxAxis,
    OpKind::kLeakyRelu,     OpKind::kSigmoid,       OpKind::kMeanAxis,
    OpKind::kConv2d,        OpKind::kBilinearResize, OpKind::kSmoothL1,
    OpKind::kBceWithLogits, OpKind::kSum,           OpKind::kSliceChannels,
    OpKind::kRoiAlign,
};

std::string_view op_name(OpKind kind);

inline constexpr double kLeakySlope = 0.01;

/// Attributes for apply(); each kind reads only the fields it needs.
struct OpAttrs {
  double factor = 1.0;           // scale
  double slope = kLeakySlope;    // leaky_relu
  double beta = 1.0;             // smooth_l1 transition point
  std::size_t axis = 0;          // softmax_axis, mean_axis
  std::size_t stride = 1;        // conv2d
  std::size_t padding = 0;       // conv2d
  std::size_t begin = 0, end = 0;  // slice_channels
  Shape shape;                   // reshape target; bilinear_resize / roi_align output (h, w)
  std::array<double, 4> box{};   // roi_align box in input coordinates (x1, y1, x2, y2)
  double spatial_scale = 1.0;    // roi_align
};

/// Generic entry point: dispatches `kind` on `inputs`.
Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

// 2-D matrix product [m,k] x [k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise with broadcasting: equal rank, each dim equal or 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose2d(const Tensor& a);
/// Concatenate along axis 0; trailing dims must agree.
Tensor concat_channels(const std::vector<Tensor>& parts);
/// Rows [begin, end) along axis 0.
Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t end);

Tensor softmax_axis(const Tensor& a, std::size_t axis);
Tensor leaky_relu(const Tensor& a, double slope = kLeakySlope);
Tensor sigmoid(const Tensor& a);
/// Mean over `axis`, keeping it with size 1.
Tensor mean_axis(const Tensor& a, std::size_t axis);
/// Sum of all entries as a 0-d tensor.
Tensor sum(const Tensor& a);

/// x: [Cin,H,W], w: [Cout,Cin,k,k], b: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding);

/// Half-pixel-center bilinear resize of [C,H,W] to [C,out_h,out_w].
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Bilinear samples of x [C,H,W] at the centers of an out_h x out_w grid of
/// cells covering `box` (image coordinates, mapped by spatial_scale into
/// feature coordinates with pixel centers at +0.5). Samples outside the map
/// are clamped to the border.
Tensor roi_align(const Tensor& x, const std::array<double, 4>& box, double spatial_scale,
                 std::size_t out_h, std::size_t out_w);

/// Elementwise smooth-L1 (Huber with transition `beta`) of pred - target.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta = 1.0);
/// Elementwise numerically stable binary cross-entropy on logits.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

}  // namespace dana
