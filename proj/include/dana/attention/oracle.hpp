#pragma once

#include <cstddef>
#include <vector>

// Scalar-loop reference for the attention pipeline. Deliberately independent
// of the tensor engine: plain vectors in, plain vectors out, every sum
// written as an explicit loop.

namespace dana::attention::oracle {

struct Map {
  std::size_t c = 0, h = 0, w = 0;
  std::vector<double> v;  // c-major, then row-major pixels

  double at(std::size_t ch, std::size_t pixel) const { return v[ch * h * w + pixel]; }
  std::size_t pixels() const { return h * w; }
};

struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

enum class Denoise { kNone, kMask, kBA };

struct Params {
  Denoise denoise = Denoise::kBA;
  std::vector<double> w_e;                  // C
  double alpha = 0.5;
  std::vector<double> mask_w;               // C
  double mask_b = 0.0;
  Matrix w_q, w_k;                          // C x C'
  std::vector<double> w_r;                  // C
  double beta = 0.1;
};

std::vector<double> ba_weights(const Map& y, const std::vector<double>& w_e);
std::vector<double> ba_aggregate(const Map& y, const std::vector<double>& weights);
Map ba_apply(const Map& y, const std::vector<double>& g, double alpha);
Map ba_block(const Map& y, const std::vector<double>& w_e, double alpha);
Map mask_denoise(const Map& y, const std::vector<double>& mask_w, double mask_b);
Matrix cisa_similarity(const Map& x, const Map& z, const Matrix& w_q, const Matrix& w_k);
Matrix cisa_attention(const Map& x, const Map& z, const Params& p);
Map qpa_map(const Matrix& a, const Map& z, std::size_t query_h, std::size_t query_w);

/// Full multi-shot pipeline: denoise each support, CISA + QPA per shot,
/// then the shot mean.
Map dana(const Map& x, const std::vector<Map>& supports, const Params& p);

/// Mean-pooled supports tiled in front of X (2C channels).
Map global_pool(const std::vector<Map>& supports, const Map& x);

}  // namespace dana::attention::oracle
