#pragma once

#include <cstddef>
#include <vector>

namespace addp {

/// RGB clip stored channel-major as [3, T, H, W] with values in [0, 1].
struct Video {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Video() = default;
  Video(int t, int h, int w) : frames(t), height(h), width(w), data(std::size_t(3) * t * h * w, 0.0f) {}

  std::size_t plane() const { return std::size_t(height) * width; }
  std::size_t channel_stride() const { return std::size_t(frames) * plane(); }
  std::size_t index(int c, int t, int y, int x) const {
    return std::size_t(c) * channel_stride() + std::size_t(t) * plane() + std::size_t(y) * width + x;
  }
  float& at(int c, int t, int y, int x) { return data[index(c, t, y, x)]; }
  float at(int c, int t, int y, int x) const { return data[index(c, t, y, x)]; }
};

}  // namespace addp
