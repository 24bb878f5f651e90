#pragma once

#include <random>

#include "dana/attention/dana.hpp"
#include "dana/attention/oracle.hpp"
#include "dana/tensor/tensor.hpp"

namespace dana::testing {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = d(rng);
  return t;
}

inline attention::oracle::Map to_map(const Tensor& t) {
  return {t.dim(0), t.dim(1), t.dim(2), std::vector<double>(t.data().begin(), t.data().end())};
}

inline attention::oracle::Matrix to_matrix(const Tensor& t) {
  return {t.dim(0), t.dim(1), std::vector<double>(t.data().begin(), t.data().end())};
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Random attention problem: query X, K supports, all parameters.
struct AttentionCase {
  Tensor x;
  std::vector<Tensor> supports;
  attention::DenoiseParams denoise;
  attention::CISAParams cisa;
};

inline AttentionCase random_attention_case(std::mt19937_64& rng, std::size_t c, std::size_t c_prime,
                                           std::size_t qh, std::size_t qw, std::size_t sh, std::size_t sw,
                                           std::size_t shots, attention::Denoise mode) {
  AttentionCase k;
  k.x = random_tensor(rng, {c, qh, qw});
  for (std::size_t s = 0; s < shots; ++s) k.supports.push_back(random_tensor(rng, {c, sh, sw}));
  k.denoise.mode = mode;
  k.denoise.ba = {random_tensor(rng, {c, 1}), attention::kDefaultAlpha};
  k.denoise.mask = {random_tensor(rng, {1, c, 1, 1}), random_tensor(rng, {1})};
  k.cisa = {random_tensor(rng, {c, c_prime}), random_tensor(rng, {c, c_prime}), random_tensor(rng, {c, 1}),
            attention::kDefaultBeta};
  return k;
}

inline attention::oracle::Params oracle_params(const AttentionCase& k) {
  attention::oracle::Params p;
  p.denoise = static_cast<attention::oracle::Denoise>(static_cast<int>(k.denoise.mode));
  p.w_e = to_vec(k.denoise.ba.w_e);
  p.alpha = k.denoise.ba.alpha;
  p.mask_w = to_vec(k.denoise.mask.weight);
  p.mask_b = k.denoise.mask.bias[0];
  p.w_q = to_matrix(k.cisa.w_q);
  p.w_k = to_matrix(k.cisa.w_k);
  p.w_r = to_vec(k.cisa.w_r);
  p.beta = k.cisa.beta;
  return p;
}

}  // namespace dana::testing
