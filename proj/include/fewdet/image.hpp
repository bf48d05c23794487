#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fewdet/errors.hpp"

namespace fewdet {

// Planar CHW float image, values in [0,1].
struct Image {
  int channels = 0, height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0f) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

// Row-major binary bitmap.
struct BitMask {
  int height = 0, width = 0;
  std::vector<std::uint8_t> data;

  BitMask() = default;
  BitMask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  int count() const {
    int n = 0;
    for (auto v : data) n += v ? 1 : 0;
    return n;
  }
};

// Run-length encoding of a bitmap: alternating run lengths starting with the
// number of leading zeros, row-major. Sum of counts equals height*width.
inline std::vector<int> rle_encode(const BitMask& m) {
  std::vector<int> counts;
  std::uint8_t cur = 0;
  int run = 0;
  for (auto v : m.data) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit == cur) {
      ++run;
    } else {
      counts.push_back(run);
      cur = bit;
      run = 1;
    }
  }
  counts.push_back(run);
  return counts;
}

inline BitMask rle_decode(const std::vector<int>& counts, int h, int w) {
  BitMask m(h, w);
  std::size_t pos = 0;
  std::uint8_t cur = 0;
  for (int c : counts) {
    if (c < 0 || pos + static_cast<std::size_t>(c) > m.data.size())
      throw data_error("rle_decode: counts exceed mask size");
    for (int i = 0; i < c; ++i) m.data[pos++] = cur;
    cur = cur ? 0 : 1;
  }
  if (pos != m.data.size()) throw data_error("rle_decode: counts do not cover mask");
  return m;
}

inline Image resize_bilinear(const Image& src, int oh, int ow) {
  Image out(src.channels, oh, ow);
  const float sy = static_cast<float>(src.height) / static_cast<float>(oh);
  const float sx = static_cast<float>(src.width) / static_cast<float>(ow);
  for (int c = 0; c < src.channels; ++c)
    for (int y = 0; y < oh; ++y) {
      float fy = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
      fy = std::min(std::max(fy, 0.0f), static_cast<float>(src.height - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, src.height - 1);
      const float wy = fy - static_cast<float>(y0);
      for (int x = 0; x < ow; ++x) {
        float fx = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
        fx = std::min(std::max(fx, 0.0f), static_cast<float>(src.width - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, src.width - 1);
        const float wx = fx - static_cast<float>(x0);
        out.at(c, y, x) = src.at(c, y0, x0) * (1 - wy) * (1 - wx) + src.at(c, y0, x1) * (1 - wy) * wx +
                          src.at(c, y1, x0) * wy * (1 - wx) + src.at(c, y1, x1) * wy * wx;
      }
    }
  return out;
}

inline BitMask resize_nearest(const BitMask& src, int oh, int ow) {
  BitMask out(oh, ow);
  for (int y = 0; y < oh; ++y) {
    int sy = static_cast<int>((static_cast<float>(y) + 0.5f) * static_cast<float>(src.height) /
                              static_cast<float>(oh));
    sy = std::min(sy, src.height - 1);
    for (int x = 0; x < ow; ++x) {
      int sx = static_cast<int>((static_cast<float>(x) + 0.5f) * static_cast<float>(src.width) /
                                static_cast<float>(ow));
      sx = std::min(sx, src.width - 1);
      out.at(y, x) = src.at(sy, sx) ? 1 : 0;
    }
  }
  return out;
}

}  // namespace fewdet
