#include "dana/attention/oracle.hpp"

#include <cmath>

namespace dana::attention::oracle {

namespace {

double leaky(double v) { return v > 0 ? v : 0.01 * v; }

std::vector<double> softmax(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double l : logits) mx = l > mx ? l : mx;
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    total += out[i];
  }
  for (double& o : out) o /= total;
  return out;
}

// Embedding e[c'][pixel] = sum_c W[c][c'] * m[c][pixel], then mean-centered
// over pixels.
std::vector<std::vector<double>> centered_embedding(const Map& m, const Matrix& w) {
  std::vector<std::vector<double>> e(w.cols, std::vector<double>(m.pixels(), 0.0));
  for (std::size_t k = 0; k < w.cols; ++k) {
    for (std::size_t p = 0; p < m.pixels(); ++p) {
      double acc = 0.0;
      for (std::size_t c = 0; c < m.c; ++c) acc += w.at(c, k) * m.at(c, p);
      e[k][p] = acc;
    }
    double mean = 0.0;
    for (std::size_t p = 0; p < m.pixels(); ++p) mean += e[k][p];
    mean /= static_cast<double>(m.pixels());
    for (std::size_t p = 0; p < m.pixels(); ++p) e[k][p] -= mean;
  }
  return e;
}

}  // namespace

std::vector<double> ba_weights(const Map& y, const std::vector<double>& w_e) {
  std::vector<double> logits(y.pixels(), 0.0);
  for (std::size_t p = 0; p < y.pixels(); ++p) {
    for (std::size_t c = 0; c < y.c; ++c) logits[p] += w_e[c] * y.at(c, p);
  }
  return softmax(logits);
}

std::vector<double> ba_aggregate(const Map& y, const std::vector<double>& weights) {
  std::vector<double> g(y.c, 0.0);
  for (std::size_t c = 0; c < y.c; ++c) {
    for (std::size_t p = 0; p < y.pixels(); ++p) g[c] += weights[p] * y.at(c, p);
  }
  return g;
}

Map ba_apply(const Map& y, const std::vector<double>& g, double alpha) {
  Map z = y;
  for (std::size_t c = 0; c < y.c; ++c) {
    for (std::size_t p = 0; p < y.pixels(); ++p) z.v[c * y.pixels() + p] = y.at(c, p) + alpha * leaky(g[c]);
  }
  return z;
}

Map ba_block(const Map& y, const std::vector<double>& w_e, double alpha) {
  return ba_apply(y, ba_aggregate(y, ba_weights(y, w_e)), alpha);
}

Map mask_denoise(const Map& y, const std::vector<double>& mask_w, double mask_b) {
  Map out = y;
  for (std::size_t p = 0; p < y.pixels(); ++p) {
    double logit = mask_b;
    for (std::size_t c = 0; c < y.c; ++c) logit += mask_w[c] * y.at(c, p);
    const double m = 1.0 / (1.0 + std::exp(-logit));
    for (std::size_t c = 0; c < y.c; ++c) out.v[c * y.pixels() + p] = y.at(c, p) * m;
  }
  return out;
}

Matrix cisa_similarity(const Map& x, const Map& z, const Matrix& w_q, const Matrix& w_k) {
  const auto q = centered_embedding(x, w_q);
  const auto k = centered_embedding(z, w_k);
  Matrix delta{x.pixels(), z.pixels(), std::vector<double>(x.pixels() * z.pixels())};
  for (std::size_t i = 0; i < x.pixels(); ++i) {
    std::vector<double> row(z.pixels(), 0.0);
    for (std::size_t j = 0; j < z.pixels(); ++j) {
      for (std::size_t e = 0; e < w_q.cols; ++e) row[j] += q[e][i] * k[e][j];
    }
    row = softmax(row);
    for (std::size_t j = 0; j < z.pixels(); ++j) delta.v[i * z.pixels() + j] = row[j];
  }
  return delta;
}

Matrix cisa_attention(const Map& x, const Map& z, const Params& p) {
  Matrix a = cisa_similarity(x, z, p.w_q, p.w_k);
  for (std::size_t j = 0; j < z.pixels(); ++j) {
    double r = 0.0;
    for (std::size_t c = 0; c < z.c; ++c) r += p.w_r[c] * z.at(c, j);
    for (std::size_t i = 0; i < a.rows; ++i) a.v[i * a.cols + j] += p.beta * r;
  }
  return a;
}

Map qpa_map(const Matrix& a, const Map& z, std::size_t query_h, std::size_t query_w) {
  Map p{z.c, query_h, query_w, std::vector<double>(z.c * query_h * query_w, 0.0)};
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t c = 0; c < z.c; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < a.cols; ++j) acc += a.at(i, j) * z.at(c, j);
      p.v[c * a.rows + i] = acc;
    }
  }
  return p;
}

Map dana(const Map& x, const std::vector<Map>& supports, const Params& p) {
  Map out{x.c, x.h, x.w, std::vector<double>(x.v.size(), 0.0)};
  for (const auto& y : supports) {
    Map z = y;
    if (p.denoise == Denoise::kBA) z = ba_block(y, p.w_e, p.alpha);
    if (p.denoise == Denoise::kMask) z = mask_denoise(y, p.mask_w, p.mask_b);
    Map shot = qpa_map(cisa_attention(x, z, p), z, x.h, x.w);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += shot.v[i];
  }
  for (double& v : out.v) v /= static_cast<double>(supports.size());
  return out;
}

Map global_pool(const std::vector<Map>& supports, const Map& x) {
  std::vector<double> mean(x.c, 0.0);
  for (const auto& y : supports) {
    for (std::size_t c = 0; c < y.c; ++c) {
      double acc = 0.0;
      for (std::size_t p = 0; p < y.pixels(); ++p) acc += y.at(c, p);
      mean[c] += acc / static_cast<double>(y.pixels());
    }
  }
  Map out{2 * x.c, x.h, x.w, std::vector<double>(2 * x.v.size(), 0.0)};
  for (std::size_t c = 0; c < x.c; ++c) {
    for (std::size_t p = 0; p < x.pixels(); ++p) {
      out.v[c * x.pixels() + p] = mean[c] / static_cast<double>(supports.size());
      out.v[(x.c + c) * x.pixels() + p] = x.at(c, p);
    }
  }
  return out;
}

}  // namespace dana::attention::oracle
