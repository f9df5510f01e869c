#pragma once

// Plain-loop reference implementations used as independent oracles. Nothing
// here goes through the tape or the shared kernels.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "cdl/tensor.hpp"
#include "cdl/vit.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat from_tensor(const cdl::Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

inline Mat add_bias(Mat a, const cdl::Tensor& bias) {
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  return a;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

inline std::vector<double> softmax(const std::vector<double>& x, double tau = 1.0) {
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> y(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (y[i] = std::exp((x[i] - mx) / tau));
  for (double& v : y) v /= s;
  return y;
}

inline Mat layer_norm(const Mat& x, const cdl::Tensor& g, const cdl::Tensor& b, double eps = 1e-6) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mean = 0.0, var = 0.0;
    for (double v : x[i]) mean += v;
    mean /= n;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

struct Prefix {
  Mat cl_k, cl_v, kd_k, kd_v;  // empty when absent
};

// Multi-head attention with prefix rows on K and V, written head by head with
// explicit score rows.
inline Mat attention(const Mat& hn, const cdl::BlockWeights& w, int heads, const Prefix& p,
                     std::vector<Mat>* probs = nullptr) {
  Mat q = add_bias(matmul(hn, from_tensor(w.wq.value)), w.bq.value);
  Mat k = add_bias(matmul(hn, from_tensor(w.wk.value)), w.bk.value);
  Mat v = add_bias(matmul(hn, from_tensor(w.wv.value)), w.bv.value);
  Mat kf, vf;
  kf.insert(kf.end(), p.cl_k.begin(), p.cl_k.end());
  kf.insert(kf.end(), k.begin(), k.end());
  kf.insert(kf.end(), p.kd_k.begin(), p.kd_k.end());
  vf.insert(vf.end(), p.cl_v.begin(), p.cl_v.end());
  vf.insert(vf.end(), v.begin(), v.end());
  vf.insert(vf.end(), p.kd_v.begin(), p.kd_v.end());
  const std::size_t d = q[0].size(), dh = d / heads;
  Mat out(q.size(), std::vector<double>(d, 0.0));
  for (int h = 0; h < heads; ++h) {
    Mat ph;
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> scores(kf.size());
      for (std::size_t j = 0; j < kf.size(); ++j) {
        double s = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q[i][c] * kf[j][c];
        scores[j] = s / std::sqrt(static_cast<double>(dh));
      }
      auto a = softmax(scores);
      for (std::size_t j = 0; j < kf.size(); ++j)
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) out[i][c] += a[j] * vf[j][c];
      ph.push_back(a);
    }
    if (probs) probs->push_back(ph);
  }
  return add_bias(matmul(out, from_tensor(w.wo.value)), w.bo.value);
}

inline Mat block(const Mat& h, const cdl::BlockWeights& w, int heads, const Prefix& p) {
  Mat h1 = add(h, attention(layer_norm(h, w.ln1_g.value, w.ln1_b.value), w, heads, p));
  Mat z = add_bias(matmul(layer_norm(h1, w.ln2_g.value, w.ln2_b.value), from_tensor(w.w1.value)), w.b1.value);
  for (auto& row : z)
    for (double& x : row) x = gelu(x);
  return add(h1, add_bias(matmul(z, from_tensor(w.w2.value)), w.b2.value));
}

// Tokens after patch embedding: class token then patches in raster order.
inline Mat embed(const cdl::BackboneWeights& w, const std::vector<double>& image) {
  const auto& c = w.config;
  Mat seq{from_tensor(w.cls_token.value)[0]};
  const Mat pw = from_tensor(w.patch_w.value);
  for (int gy = 0; gy < c.grid(); ++gy)
    for (int gx = 0; gx < c.grid(); ++gx) {
      std::vector<double> tok(c.dim);
      for (int j = 0; j < c.dim; ++j) tok[j] = w.patch_b.value[j];
      int idx = 0;
      for (int ch = 0; ch < c.channels; ++ch)
        for (int y = 0; y < c.patch; ++y)
          for (int x = 0; x < c.patch; ++x, ++idx) {
            const double px = image[(ch * c.image_size + gy * c.patch + y) * c.image_size + gx * c.patch + x];
            for (int j = 0; j < c.dim; ++j) tok[j] += px * pw[idx][j];
          }
      seq.push_back(tok);
    }
  const Mat pos = from_tensor(w.pos_embed.value);
  for (std::size_t i = 0; i < seq.size(); ++i)
    for (int j = 0; j < c.dim; ++j) seq[i][j] += pos[i][j];
  return seq;
}

// Whole-model forward; returns the final normed sequence (KD token last).
inline Mat forward(const cdl::BackboneWeights& w, const std::vector<double>& image, const std::vector<Prefix>& prefixes,
                   const std::optional<std::vector<double>>& kd_token = std::nullopt) {
  Mat h = embed(w, image);
  for (int b = 0; b < w.config.blocks; ++b) {
    h = block(h, w.blocks[b], w.config.heads, prefixes.empty() ? Prefix{} : prefixes[b]);
    if (b == 0 && kd_token) h.push_back(*kd_token);
  }
  return layer_norm(h, w.norm_g.value, w.norm_b.value);
}

}  // namespace oracle
