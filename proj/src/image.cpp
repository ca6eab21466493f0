#include "spiralscope/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>

namespace spiralscope {

ImageTensor to_tensor(const Image8& image) {
  const Index plane = static_cast<Index>(image.width) * image.height;
  if (static_cast<Index>(image.rgb.size()) != 3 * plane) {
    throw std::invalid_argument("image buffer size does not match its dimensions");
  }
  Tensor<float>::Array v(3 * plane);
  for (Index i = 0; i < plane; ++i) {
    for (Index c = 0; c < 3; ++c) v[c * plane + i] = static_cast<float>(image.rgb[3 * i + c]) / 255.0f;
  }
  return ImageTensor({3, image.height, image.width}, std::move(v));
}

Image8 to_image8(const ImageTensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("expected image [3 x H x W], got " + shape_string(image.shape()));
  }
  Image8 out;
  out.height = static_cast<int>(image.dim(1));
  out.width = static_cast<int>(image.dim(2));
  const Index plane = image.dim(1) * image.dim(2);
  out.rgb.resize(static_cast<std::size_t>(3 * plane));
  for (Index i = 0; i < plane; ++i) {
    for (Index c = 0; c < 3; ++c) {
      const float v = std::clamp(image[c * plane + i], 0.0f, 1.0f);
      out.rgb[3 * i + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_ppm(const Image8& image) {
  const std::string header =
      "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.rgb.begin(), image.rgb.end());
  return out;
}

Image8 decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw std::runtime_error("malformed PPM header");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1 << 20) throw std::runtime_error("PPM dimension too large");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw std::runtime_error("not a binary PPM (P6)");
  pos = 2;
  Image8 image;
  image.width = static_cast<int>(number());
  image.height = static_cast<int>(number());
  if (number() != 255) throw std::runtime_error("only 8-bit PPM (maxval 255) is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw std::runtime_error("malformed PPM header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height * 3;
  if (bytes.size() - pos < n) throw std::runtime_error("PPM pixel data truncated");
  image.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return image;
}

void write_ppm(const Image8& image, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Image8 read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_ppm(bytes);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

namespace {
constexpr float kMinStd = 1e-2f;
}

Tensor<float> make_batch(std::span<const ImageTensor> images) {
  if (images.empty()) throw std::invalid_argument("make_batch needs at least one image");
  const Shape& first = images.front().shape();
  const Index n = static_cast<Index>(images.size()), per = images.front().numel();
  Tensor<float>::Array v(n * per);
  for (Index i = 0; i < n; ++i) {
    if (images[i].shape() != first) {
      throw ShapeError("batch images differ in shape: " + shape_string(first) + " vs " +
                       shape_string(images[i].shape()));
    }
    const Index channels = first.front(), plane = per / channels;
    for (Index c = 0; c < channels; ++c) {
      const auto x = images[i].values().segment(c * plane, plane);
      const float mean = x.mean();
      const float std = std::sqrt((x - mean).square().mean());
      v.segment(i * per + c * plane, plane) = (x - mean) / std::max(std, kMinStd);
    }
  }
  Shape shape{n};
  shape.insert(shape.end(), first.begin(), first.end());
  return Tensor<float>(std::move(shape), std::move(v));
}

}  // namespace spiralscope
