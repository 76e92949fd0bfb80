#include "metadetr/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace metadetr {

Image Image::filled(int h, int w, uint8_t r, uint8_t g, uint8_t b) {
  Image img;
  img.height = h;
  img.width = w;
  img.data.resize(static_cast<size_t>(h) * w * 3);
  for (size_t i = 0; i < img.data.size(); i += 3) {
    img.data[i] = r;
    img.data[i + 1] = g;
    img.data[i + 2] = b;
  }
  return img;
}

void write_png(const std::string& path, const Image& img) {
  if (img.channels != 3) throw std::invalid_argument("write_png: expected 3 channels");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.data.data() + static_cast<size_t>(y) * img.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Image read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image img;
  img.height = static_cast<int>(h);
  img.width = static_cast<int>(w);
  img.data.resize(static_cast<size_t>(h) * w * 3);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = img.data.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

double iou(const Box& a, const Box& b) {
  double ix0 = std::max(a.x0(), b.x0());
  double iy0 = std::max(a.y0(), b.y0());
  double ix1 = std::min(a.x1(), b.x1());
  double iy1 = std::min(a.y1(), b.y1());
  double iw = std::max(0.0, ix1 - ix0);
  double ih = std::max(0.0, iy1 - iy0);
  double inter = iw * ih;
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {
void put_px(Image& img, int x, int y, uint8_t r, uint8_t g, uint8_t b) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  img.at(y, x, 0) = r;
  img.at(y, x, 1) = g;
  img.at(y, x, 2) = b;
}
}  // namespace

void draw_box(Image& img, const Box& box, uint8_t r, uint8_t g, uint8_t b, bool dashed) {
  int x0 = static_cast<int>(box.x0() * img.width);
  int x1 = static_cast<int>(box.x1() * img.width);
  int y0 = static_cast<int>(box.y0() * img.height);
  int y1 = static_cast<int>(box.y1() * img.height);
  auto on = [dashed](int t) { return !dashed || (t / 4) % 2 == 0; };
  for (int x = x0; x <= x1; ++x) {
    if (on(x - x0)) {
      put_px(img, x, y0, r, g, b);
      put_px(img, x, y1, r, g, b);
    }
  }
  for (int y = y0; y <= y1; ++y) {
    if (on(y - y0)) {
      put_px(img, x0, y, r, g, b);
      put_px(img, x1, y, r, g, b);
    }
  }
}

}  // namespace metadetr
