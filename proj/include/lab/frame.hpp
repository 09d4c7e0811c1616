#pragma once

#include <vector>

#include "lab/tensor.hpp"

namespace lab {

// Synthetic top-down renders: 16x16 grid, 3 channels, row-major [y][x][c].
constexpr int kObsSize = 16;
constexpr int kObsChannels = 3;
constexpr int kObsValues = kObsSize * kObsSize * kObsChannels;

// Quantized render as stored in dataset files (0..255 per value).
using Frame = std::vector<unsigned char>;

inline std::vector<real> frame_to_real(const Frame& f) {
  std::vector<real> out(f.size());
  for (size_t i = 0; i < f.size(); ++i) out[i] = f[i] / 255.0;
  return out;
}

}  // namespace lab
