#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fewdet/errors.hpp"

namespace fewdet {

// Axis-aligned box in pixel coordinates, x2/y2 exclusive: the box covers
// [x1,x2) × [y1,y2), so area = (x2-x1)*(y2-y1).
struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() * height(); }
  float cx() const { return 0.5f * (x1 + x2); }
  float cy() const { return 0.5f * (y1 + y2); }

  Box clipped(float w, float h) const {
    Box b;
    b.x1 = std::min(std::max(x1, 0.0f), w);
    b.y1 = std::min(std::max(y1, 0.0f), h);
    b.x2 = std::min(std::max(x2, 0.0f), w);
    b.y2 = std::min(std::max(y2, 0.0f), h);
    return b;
  }
};

// |a∩b| / |a∪b|; both empty -> 0.
inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, static_cast<double>(std::min(a.x2, b.x2)) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, static_cast<double>(std::min(a.y2, b.y2)) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

// Standard R-CNN box parameterization relative to a reference box:
// (dx, dy) = center offset over reference size, (dw, dh) = log size ratios.
inline std::array<float, 4> box_encode(const Box& gt, const Box& ref) {
  const double rw = ref.width(), rh = ref.height();
  if (rw <= 0.0 || rh <= 0.0) throw dimension_error("box_encode: non-positive reference area");
  const double gw = gt.width(), gh = gt.height();
  if (gw <= 0.0 || gh <= 0.0) throw dimension_error("box_encode: non-positive target area");
  return {static_cast<float>((gt.cx() - ref.cx()) / rw), static_cast<float>((gt.cy() - ref.cy()) / rh),
          static_cast<float>(std::log(gw / rw)), static_cast<float>(std::log(gh / rh))};
}

// Inverse of box_encode. dw/dh are capped so a wild regression output cannot
// overflow exp(); pass clip_w/clip_h > 0 to clamp the result to image bounds.
inline Box box_decode(const std::array<float, 4>& d, const Box& ref, float clip_w = -1,
                      float clip_h = -1) {
  const double rw = ref.width(), rh = ref.height();
  if (rw <= 0.0 || rh <= 0.0) throw dimension_error("box_decode: non-positive reference area");
  constexpr double kMaxLogScale = 4.0;
  const double dw = std::min(static_cast<double>(d[2]), kMaxLogScale);
  const double dh = std::min(static_cast<double>(d[3]), kMaxLogScale);
  const double cx = ref.cx() + d[0] * rw;
  const double cy = ref.cy() + d[1] * rh;
  const double w = rw * std::exp(dw);
  const double h = rh * std::exp(dh);
  Box out{static_cast<float>(cx - 0.5 * w), static_cast<float>(cy - 0.5 * h),
          static_cast<float>(cx + 0.5 * w), static_cast<float>(cy + 0.5 * h)};
  if (clip_w > 0 && clip_h > 0) out = out.clipped(clip_w, clip_h);
  return out;
}

// Greedy descending-score suppression at IoU > threshold; equal scores keep
// the lower index first. Returns kept indices in pick order.
inline std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<float>& scores,
                            double iou_threshold) {
  if (boxes.size() != scores.size()) throw dimension_error("nms: boxes/scores length mismatch");
  std::vector<int> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  std::vector<int> kept;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int i : order) {
    if (suppressed[static_cast<std::size_t>(i)]) continue;
    kept.push_back(i);
    for (int j : order) {
      if (j == i || suppressed[static_cast<std::size_t>(j)]) continue;
      if (iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) > iou_threshold)
        suppressed[static_cast<std::size_t>(j)] = 1;
    }
  }
  return kept;
}

}  // namespace fewdet
