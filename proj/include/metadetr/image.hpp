#pragma once
#include <cstdint>
#include <string>
#include <vector>

namespace metadetr {

// 8-bit RGB raster, row-major HWC. Model inputs are produced on demand by
// scaling to [0, 1] doubles.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<uint8_t> data;

  static Image filled(int h, int w, uint8_t r, uint8_t g, uint8_t b);
  uint8_t& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  uint8_t at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// Axis-aligned box in normalized image coordinates, center + extent form.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
  double x0() const { return cx - w / 2; }
  double y0() const { return cy - h / 2; }
  double x1() const { return cx + w / 2; }
  double y1() const { return cy + h / 2; }
  double area() const { return w * h; }
};

double iou(const Box& a, const Box& b);

// Overlay helpers for detection visualizations.
void draw_box(Image& img, const Box& box, uint8_t r, uint8_t g, uint8_t b, bool dashed = false);

}  // namespace metadetr
