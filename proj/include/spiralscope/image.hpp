#pragma once

#include "spiralscope/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace spiralscope {

/// 8-bit interleaved RGB image, the on-disk representation.
struct Image8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  bool operator==(const Image8&) const = default;
};

/// Images in compute form are Tensor<float> of shape [3 x H x W], values in [0, 1].
using ImageTensor = Tensor<float>;

ImageTensor to_tensor(const Image8& image);
/// Clamps to [0, 1] and rounds to the nearest 8-bit level.
Image8 to_image8(const ImageTensor& image);

/// Binary PPM (P6, maxval 255).
std::vector<std::uint8_t> encode_ppm(const Image8& image);
Image8 decode_ppm(std::span<const std::uint8_t> bytes);
void write_ppm(const Image8& image, const std::filesystem::path& path);
Image8 read_ppm(const std::filesystem::path& path);

/// Stacks images into a batch [N x 3 x H x W], standardizing each channel of
/// each image to zero mean and unit variance (variance floored at 1e-4).
Tensor<float> make_batch(std::span<const ImageTensor> images);

}  // namespace spiralscope
