#include "dseg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace dseg {

namespace {

struct PngReader {
  FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;

  explicit PngReader(const std::string& path) {
    fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open " + path);
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) throw IoError("libpng init failed for " + path);
  }
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

ImageU8 read_png_impl(const std::string& path, bool want_rgb) {
  PngReader r(path);
  if (setjmp(png_jmpbuf(r.png))) throw IoError("failed decoding " + path);
  png_init_io(r.png, r.fp);
  png_read_info(r.png, r.info);

  const png_uint_32 width = png_get_image_width(r.png, r.info);
  const png_uint_32 height = png_get_image_height(r.png, r.info);
  const int color = png_get_color_type(r.png, r.info);
  const int depth = png_get_bit_depth(r.png, r.info);

  if (want_rgb) {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
      png_set_gray_to_rgb(r.png);
    if (depth == 16) png_set_strip_16(r.png);
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
    png_set_strip_alpha(r.png);
  } else {
    if (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_PALETTE)
      throw IoError(path + ": index mask must be 8-bit grayscale or palette PNG");
    if (depth == 16) png_set_strip_16(r.png);
    if (depth < 8 && color == PNG_COLOR_TYPE_GRAY) png_set_expand_gray_1_2_4_to_8(r.png);
    if (depth < 8 && color == PNG_COLOR_TYPE_PALETTE) png_set_packing(r.png);
  }
  png_read_update_info(r.png, r.info);

  const int channels = static_cast<int>(png_get_channels(r.png, r.info));
  if ((want_rgb && channels != 3) || (!want_rgb && channels != 1))
    throw IoError(path + ": unexpected channel count after decode");

  ImageU8 img;
  img.width = static_cast<int>(width);
  img.height = static_cast<int>(height);
  img.channels = channels;
  img.pixels.resize(static_cast<size_t>(width) * height * channels);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y)
    rows[y] = img.pixels.data() + static_cast<size_t>(y) * width * channels;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
  return img;
}

struct PngWriter {
  FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;

  explicit PngWriter(const std::string& path) {
    fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open " + path + " for writing");
    png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) throw IoError("libpng init failed for " + path);
  }
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

}  // namespace

ImageU8 read_png_rgb(const std::string& path) { return read_png_impl(path, true); }
ImageU8 read_png_index(const std::string& path) { return read_png_impl(path, false); }

void write_png(const std::string& path, const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError("write_png: channels must be 1 or 3");
  PngWriter w(path);
  if (setjmp(png_jmpbuf(w.png))) throw IoError("failed encoding " + path);
  png_init_io(w.png, w.fp);
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<size_t>(y)] = const_cast<png_bytep>(
        img.pixels.data() + static_cast<size_t>(y) * img.width * img.channels);
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
}

TensorF image_to_tensor(const ImageU8& img) {
  if (img.channels != 3) throw IoError("image_to_tensor: expected RGB");
  TensorF t(Shape4(1, 3, img.height, img.width));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.at(0, c, y, x) = static_cast<float>(img.at(y, x, c)) / 255.0f;
  return t;
}

ImageU8 tensor_to_image(const TensorF& t) {
  if (t.shape().n != 1 || t.shape().c != 3)
    throw ShapeError("tensor_to_image: expected (1,3,h,w), got " + t.shape().str());
  ImageU8 img;
  img.width = static_cast<int>(t.shape().w);
  img.height = static_cast<int>(t.shape().h);
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(t.at(0, c, y, x), 0.0f, 1.0f);
        img.pixels[(static_cast<size_t>(y) * img.width + x) * 3 + c] =
            static_cast<uint8_t>(std::lround(v * 255.0f));
      }
  return img;
}

LabelMask mask_to_labels(const ImageU8& mask) {
  if (mask.channels != 1) throw IoError("mask_to_labels: expected single channel");
  LabelMask m(Shape4(1, 1, mask.height, mask.width));
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) m.at(0, 0, y, x) = mask.at(y, x, 0);
  return m;
}

ImageU8 labels_to_mask(const LabelMask& labels) {
  ImageU8 img;
  img.width = static_cast<int>(labels.shape().w);
  img.height = static_cast<int>(labels.shape().h);
  img.channels = 1;
  img.pixels.resize(static_cast<size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int32_t v = labels.at(0, 0, y, x);
      if (v < 0 || v > 255) throw ShapeError("labels_to_mask: label out of byte range");
      img.pixels[static_cast<size_t>(y) * img.width + x] = static_cast<uint8_t>(v);
    }
  return img;
}

TensorF bilinear_resize(const TensorF& src, int64_t out_h, int64_t out_w) {
  const Shape4 in = src.shape();
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: bad target");
  if (in.h == out_h && in.w == out_w) return src;
  TensorF dst(Shape4(in.n, in.c, out_h, out_w));
  const double sy = static_cast<double>(in.h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in.w) / static_cast<double>(out_w);
  for (int64_t n = 0; n < in.n; ++n)
    for (int64_t c = 0; c < in.c; ++c) {
      const float* sp = src.data() + (n * in.c + c) * in.plane();
      float* dp = dst.data() + (n * in.c + c) * out_h * out_w;
      for (int64_t y = 0; y < out_h; ++y) {
        const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(fy)), 0, in.h - 1);
        const int64_t y1 = std::min<int64_t>(y0 + 1, in.h - 1);
        const double wy = std::clamp(fy - static_cast<double>(y0), 0.0, 1.0);
        for (int64_t x = 0; x < out_w; ++x) {
          const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
          const int64_t x0 =
              std::clamp<int64_t>(static_cast<int64_t>(std::floor(fx)), 0, in.w - 1);
          const int64_t x1 = std::min<int64_t>(x0 + 1, in.w - 1);
          const double wx = std::clamp(fx - static_cast<double>(x0), 0.0, 1.0);
          const double v00 = sp[y0 * in.w + x0], v01 = sp[y0 * in.w + x1];
          const double v10 = sp[y1 * in.w + x0], v11 = sp[y1 * in.w + x1];
          dp[y * out_w + x] = static_cast<float>((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                                 wy * ((1 - wx) * v10 + wx * v11));
        }
      }
    }
  return dst;
}

LabelMask nearest_resize(const LabelMask& src, int64_t out_h, int64_t out_w) {
  const Shape4 in = src.shape();
  if (out_h < 1 || out_w < 1) throw ShapeError("nearest_resize: bad target");
  if (in.h == out_h && in.w == out_w) return src;
  LabelMask dst(Shape4(in.n, in.c, out_h, out_w));
  const double sy = static_cast<double>(in.h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in.w) / static_cast<double>(out_w);
  for (int64_t n = 0; n < in.n; ++n)
    for (int64_t c = 0; c < in.c; ++c)
      for (int64_t y = 0; y < out_h; ++y)
        for (int64_t x = 0; x < out_w; ++x) {
          const int64_t iy = std::clamp<int64_t>(
              static_cast<int64_t>(std::floor((static_cast<double>(y) + 0.5) * sy)), 0,
              in.h - 1);
          const int64_t ix = std::clamp<int64_t>(
              static_cast<int64_t>(std::floor((static_cast<double>(x) + 0.5) * sx)), 0,
              in.w - 1);
          dst.at(n, c, y, x) = src.at(n, c, iy, ix);
        }
  return dst;
}

void class_color(int label, uint8_t rgb[3]) {
  if (label == kIgnoreLabel) {
    rgb[0] = rgb[1] = rgb[2] = 224;
    return;
  }
  uint8_t r = 0, g = 0, b = 0;
  int id = label;
  for (int shift = 7; shift >= 0 && id > 0; --shift) {
    r = static_cast<uint8_t>(r | ((id >> 0 & 1) << shift));
    g = static_cast<uint8_t>(g | ((id >> 1 & 1) << shift));
    b = static_cast<uint8_t>(b | ((id >> 2 & 1) << shift));
    id >>= 3;
  }
  rgb[0] = r;
  rgb[1] = g;
  rgb[2] = b;
}

ImageU8 colorize_labels(const LabelMask& labels) {
  ImageU8 img;
  img.width = static_cast<int>(labels.shape().w);
  img.height = static_cast<int>(labels.shape().h);
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      uint8_t rgb[3];
      class_color(labels.at(0, 0, y, x), rgb);
      for (int c = 0; c < 3; ++c)
        img.pixels[(static_cast<size_t>(y) * img.width + x) * 3 + c] = rgb[c];
    }
  return img;
}

ImageU8 overlay_labels(const ImageU8& image, const LabelMask& labels) {
  if (image.channels != 3) throw IoError("overlay_labels: expected RGB image");
  if (image.height != labels.shape().h || image.width != labels.shape().w)
    throw ShapeError("overlay_labels: extents differ");
  ImageU8 out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const int32_t l = labels.at(0, 0, y, x);
      if (l == 0) continue;  // keep background pixels as the input image
      uint8_t rgb[3];
      class_color(l, rgb);
      for (int c = 0; c < 3; ++c) {
        auto& px = out.pixels[(static_cast<size_t>(y) * image.width + x) * 3 + c];
        px = static_cast<uint8_t>((static_cast<int>(px) + 2 * rgb[c]) / 3);
      }
    }
  return out;
}

}  // namespace dseg
