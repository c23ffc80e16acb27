#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dseg/layers.hpp"
#include "dseg/tensor.hpp"

namespace dseg {

// 8-bit interleaved image buffer; channels is 1 (gray / index) or 3 (RGB).
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

// Any color type is expanded to RGB; alpha is stripped.
ImageU8 read_png_rgb(const std::string& path);
// Index masks: grayscale or palette PNGs read as raw 8-bit index values.
ImageU8 read_png_index(const std::string& path);

void write_png(const std::string& path, const ImageU8& img);

// Image <-> tensor plumbing. Images become (1, 3, H, W) tensors in [0, 1].
TensorF image_to_tensor(const ImageU8& img);
ImageU8 tensor_to_image(const TensorF& t);  // clamps to [0, 1]

LabelMask mask_to_labels(const ImageU8& mask);
ImageU8 labels_to_mask(const LabelMask& labels);

// Pixel-center resampling (src = (dst + 0.5) * scale - 0.5). Bilinear for
// real-valued maps, nearest for categorical masks.
TensorF bilinear_resize(const TensorF& src, int64_t out_h, int64_t out_w);
LabelMask nearest_resize(const LabelMask& src, int64_t out_h, int64_t out_w);

// VOC-style class colormap (bit-reversal construction).
void class_color(int label, uint8_t rgb[3]);
ImageU8 colorize_labels(const LabelMask& labels);
ImageU8 overlay_labels(const ImageU8& image, const LabelMask& labels);

}  // namespace dseg
