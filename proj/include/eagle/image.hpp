#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eagle/tensor.hpp"

namespace eagle::img {

// Images are planar RGB tensors of shape (3, H, W), values 0..255.
using Image = Tensor<std::uint8_t>;

Image read_image(const std::string& path);  // PNG or JPEG by magic bytes
void write_png(const std::string& path, const Image& im);

Image resize_bilinear(const Image& im, int out_h, int out_w);
Image center_crop(const Image& im, int out_h, int out_w);

// All PNG/JPEG files directly under `dir`, resized (shorter-side scale +
// center crop) to (h, w). Sorted by filename for determinism.
std::vector<Image> load_image_dir(const std::string& dir, int h, int w);

}  // namespace eagle::img
