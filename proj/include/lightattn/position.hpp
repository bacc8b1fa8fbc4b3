#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "lightattn/tensor.hpp"

namespace lightattn {

// Periods of the 6-row position matrix. T covers the whole (down-sampled)
// sequence; M1 and M2 give word- and phone-scale resolution.
struct PositionConfig {
  int T = 512;
  int M1 = 4;
  int M2 = 2;

  void validate() const {
    if (M2 < 1 || M1 <= M2 || T <= M1) {
      throw ParameterError("position config requires M2 < M1 < T with M2 >= 1");
    }
  }
};

enum class PositionKind { light, sinusoidal };

// A d_p x L stack of position vectors, one column per time step.
struct PositionMatrix {
  Tensor values;  // [d_p x L]
  PositionKind kind = PositionKind::light;
  PositionConfig config;
  bool aliased = false;  // set when length > T on the light encoding
};

namespace detail {
inline void light_column(double t, const PositionConfig& c, double* out6) {
  const double two_pi = 2.0 * M_PI;
  out6[0] = std::cos(two_pi * t / c.T);
  out6[1] = std::sin(two_pi * t / c.T);
  out6[2] = std::cos(two_pi * t / c.M1);
  out6[3] = std::sin(two_pi * t / c.M1);
  out6[4] = std::cos(two_pi * t / c.M2);
  out6[5] = std::sin(two_pi * t / c.M2);
}
}  // namespace detail

// The 6 x length light encoding: (cos, sin) pairs at periods T, M1, M2.
// Lengths beyond T alias; the matrix is still produced and flagged.
inline PositionMatrix light_position(int length, const PositionConfig& config) {
  if (length < 1) throw ParameterError("light_position: length must be >= 1");
  config.validate();
  PositionMatrix pm;
  pm.kind = PositionKind::light;
  pm.config = config;
  pm.aliased = length > config.T;
  pm.values = Tensor::zeros({6, length});
  double col[6];
  for (int t = 0; t < length; ++t) {
    detail::light_column(static_cast<double>(t), config, col);
    for (int r = 0; r < 6; ++r) pm.values.at(r, t) = col[r];
  }
  return pm;
}

// Classic sinusoidal table: PE(t, 2i) = sin(t / T^(2i/d_x)),
// PE(t, 2i+1) = cos(t / T^(2i/d_x)); rows are the embedding axis.
inline PositionMatrix sinusoidal_position(int length, int d_x, int T) {
  if (length < 1) throw ParameterError("sinusoidal_position: length must be >= 1");
  if (d_x < 2 || d_x % 2 != 0) {
    throw ParameterError("sinusoidal_position: d_x must be even and >= 2");
  }
  if (T < 1) throw ParameterError("sinusoidal_position: T must be >= 1");
  PositionMatrix pm;
  pm.kind = PositionKind::sinusoidal;
  pm.config.T = T;
  pm.values = Tensor::zeros({d_x, length});
  for (int i = 0; 2 * i < d_x; ++i) {
    double denom = std::pow(static_cast<double>(T), (2.0 * i) / d_x);
    for (int t = 0; t < length; ++t) {
      double arg = t / denom;
      pm.values.at(2 * i, t) = std::sin(arg);
      pm.values.at(2 * i + 1, t) = std::cos(arg);
    }
  }
  return pm;
}

// Light formulas evaluated at t = delta. Negative offsets flip the sine rows
// and keep the cosine rows, so left and right context stay distinguishable.
inline std::array<double, 6> relative_position(int delta, const PositionConfig& config) {
  config.validate();
  std::array<double, 6> v;
  detail::light_column(static_cast<double>(delta), config, v.data());
  return v;
}

// Columns are offsets -radius..radius, each a light 6-vector.
inline Tensor relative_position_block(int radius, const PositionConfig& config) {
  if (radius < 0) throw ParameterError("relative_position_block: radius must be >= 0");
  const int n = 2 * radius + 1;
  Tensor out = Tensor::zeros({6, n});
  for (int c = 0; c < n; ++c) {
    auto col = relative_position(c - radius, config);
    for (int r = 0; r < 6; ++r) out.at(r, c) = col[r];
  }
  return out;
}

// Sinusoidal embeddings over offsets -radius..radius (for the additive
// relative baseline, where d_p matches the model width).
inline Tensor sinusoidal_relative_block(int radius, int d_p, int T) {
  const int n = 2 * radius + 1;
  Tensor out = Tensor::zeros({d_p, n});
  for (int i = 0; 2 * i < d_p; ++i) {
    double denom = std::pow(static_cast<double>(T), (2.0 * i) / d_p);
    for (int c = 0; c < n; ++c) {
      double arg = (c - radius) / denom;
      out.at(2 * i, c) = std::sin(arg);
      out.at(2 * i + 1, c) = std::cos(arg);
    }
  }
  return out;
}

// True iff the light vectors for t in [0, length) are pairwise distinct.
inline bool check_aliasing(const PositionConfig& config, int length) {
  config.validate();
  if (length < 1) throw ParameterError("check_aliasing: length must be >= 1");
  std::vector<std::array<double, 6>> cols(length);
  for (int t = 0; t < length; ++t) {
    detail::light_column(static_cast<double>(t), config, cols[t].data());
  }
  for (int a = 0; a < length; ++a) {
    for (int b = a + 1; b < length; ++b) {
      double dist = 0.0;
      for (int r = 0; r < 6; ++r) dist = std::max(dist, std::fabs(cols[a][r] - cols[b][r]));
      if (dist < 1e-12) return false;
    }
  }
  return true;
}

}  // namespace lightattn
