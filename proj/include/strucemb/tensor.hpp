#ifndef STRUCEMB_TENSOR_HPP
#define STRUCEMB_TENSOR_HPP

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace strucemb {

/// Dense row-major float matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const float> row(std::size_t i) const {
    return {data.data() + i * cols, cols};
  }
  float& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  float operator()(std::size_t i, std::size_t j) const {
    return data[i * cols + j];
  }

  bool operator==(const Matrix&) const = default;
};

namespace kernels {

/// out[T x n] = x[T x k] * w[k x n]
inline Matrix matmul(const Matrix& x, const Matrix& w) {
  assert(x.cols == w.rows);
  Matrix out(x.rows, w.cols);
  for (std::size_t t = 0; t < x.rows; ++t) {
    float* dst = out.data.data() + t * w.cols;
    const float* src = x.data.data() + t * x.cols;
    for (std::size_t k = 0; k < x.cols; ++k) {
      const float a = src[k];
      const float* wrow = w.data.data() + k * w.cols;
      for (std::size_t j = 0; j < w.cols; ++j) dst[j] += a * wrow[j];
    }
  }
  return out;
}

inline void rms_norm(std::span<const float> x, std::span<const float> gain,
                     std::span<float> out, float eps = 1e-6f) {
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float inv = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

inline Matrix rms_norm_rows(const Matrix& x, std::span<const float> gain) {
  Matrix out(x.rows, x.cols);
  for (std::size_t t = 0; t < x.rows; ++t) rms_norm(x.row(t), gain, out.row(t));
  return out;
}

/// tanh-approximated GELU.
inline float gelu(float x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

/// Rotates consecutive (even, odd) pairs of every head of `row` by the angle
/// position * base^(-2i/d_head). Angles are formed in double so large
/// positions keep full float accuracy after rotation.
inline void apply_rope(std::span<float> row, std::size_t n_heads,
                       std::size_t d_head, std::size_t position,
                       double base) {
  const std::size_t half = d_head / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double inv_freq =
        std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
    const double angle = static_cast<double>(position) * inv_freq;
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    for (std::size_t h = 0; h < n_heads; ++h) {
      float* p = row.data() + h * d_head + 2 * i;
      const float x0 = p[0];
      const float x1 = p[1];
      p[0] = x0 * c - x1 * s;
      p[1] = x0 * s + x1 * c;
    }
  }
}

}  // namespace kernels

inline double dot(std::span<const float> a, std::span<const float> b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

inline double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; 0 when either side has zero norm.
inline double cosine(std::span<const float> a, std::span<const float> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline double cosine_distance(std::span<const float> a,
                              std::span<const float> b) {
  return 1.0 - cosine(a, b);
}

}  // namespace strucemb

#endif  // STRUCEMB_TENSOR_HPP
