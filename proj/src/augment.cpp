#include "spiralscope/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace spiralscope {
namespace {

void require_image(const ImageTensor& image) {
  if (image.rank() != 3) throw ShapeError("expected image [C x H x W], got " + shape_string(image.shape()));
}

bool bernoulli(Rng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

}  // namespace

void AugmentConfig::validate() const {
  for (double p : {p_hflip, p_contrast, p_zoomcrop}) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("augmentation probabilities must lie in [0, 1]");
  }
  if (contrast_factor_range.first > contrast_factor_range.second) {
    throw std::invalid_argument("contrast_factor_range must be ordered");
  }
  if (zoom_range.first < 1.0 || zoom_range.second < zoom_range.first) {
    throw std::invalid_argument("zoom_range must be ordered with minimum >= 1");
  }
  if (resize_target < 8) throw std::invalid_argument("resize_target must be >= 8");
}

nlohmann::json to_json(const AugmentConfig& c) {
  return {{"p_hflip", c.p_hflip},
          {"p_contrast", c.p_contrast},
          {"p_zoomcrop", c.p_zoomcrop},
          {"contrast_factor_range", {c.contrast_factor_range.first, c.contrast_factor_range.second}},
          {"zoom_range", {c.zoom_range.first, c.zoom_range.second}},
          {"resize_target", c.resize_target}};
}

AugmentConfig augment_config_from_json(const nlohmann::json& j) {
  AugmentConfig c;
  c.p_hflip = j.value("p_hflip", c.p_hflip);
  c.p_contrast = j.value("p_contrast", c.p_contrast);
  c.p_zoomcrop = j.value("p_zoomcrop", c.p_zoomcrop);
  if (j.contains("contrast_factor_range")) {
    c.contrast_factor_range = {j["contrast_factor_range"].at(0).get<double>(),
                               j["contrast_factor_range"].at(1).get<double>()};
  }
  if (j.contains("zoom_range")) {
    c.zoom_range = {j["zoom_range"].at(0).get<double>(), j["zoom_range"].at(1).get<double>()};
  }
  c.resize_target = j.value("resize_target", c.resize_target);
  c.validate();
  return c;
}

ImageTensor flip_horizontal(const ImageTensor& image) {
  require_image(image);
  const Index rows = image.dim(0) * image.dim(1), width = image.dim(2);
  Eigen::Map<const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> src(
      image.data(), rows, width);
  Tensor<float>::Array v(image.numel());
  Eigen::Map<Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(v.data(), rows, width) =
      src.rowwise().reverse();
  return ImageTensor(image.shape(), std::move(v));
}

ImageTensor adjust_contrast(const ImageTensor& image, double factor) {
  require_image(image);
  if (factor == 1.0) return image.clone();
  const float c = static_cast<float>(factor);
  Tensor<float>::Array v = (0.5f + c * (image.values() - 0.5f)).max(0.0f).min(1.0f);
  return ImageTensor(image.shape(), std::move(v));
}

std::pair<int, int> zoom_crop_slack(const ImageTensor& image, double zoom) {
  require_image(image);
  const auto h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  const int zh = std::max(h, static_cast<int>(std::floor(zoom * h)));
  const int zw = std::max(w, static_cast<int>(std::floor(zoom * w)));
  return {zh - h, zw - w};
}

ImageTensor zoom_crop(const ImageTensor& image, double zoom, int offset_y, int offset_x) {
  require_image(image);
  if (zoom < 1.0) throw std::invalid_argument("zoom must be >= 1");
  const Index channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto [slack_y, slack_x] = zoom_crop_slack(image, zoom);
  if (offset_y < 0 || offset_x < 0 || offset_y > slack_y || offset_x > slack_x) {
    throw std::invalid_argument("zoom_crop offset outside the zoomed canvas");
  }
  const Index zh = h + slack_y, zw = w + slack_x;
  std::vector<Index> col_src(static_cast<std::size_t>(w));
  for (Index x = 0; x < w; ++x) col_src[x] = ((x + offset_x) * w) / zw;
  Tensor<float>::Array v(image.numel());
  for (Index c = 0; c < channels; ++c) {
    for (Index y = 0; y < h; ++y) {
      const Index sy = ((y + offset_y) * h) / zh;
      const float* src = image.data() + (c * h + sy) * w;
      float* dst = v.data() + (c * h + y) * w;
      for (Index x = 0; x < w; ++x) dst[x] = src[col_src[x]];
    }
  }
  return ImageTensor(image.shape(), std::move(v));
}

ImageTensor resize_nn(const ImageTensor& image, int target) {
  require_image(image);
  if (target < 1) throw std::invalid_argument("resize target must be >= 1");
  const Index channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == target && w == target) return image.clone();
  std::vector<Index> col_src(static_cast<std::size_t>(target));
  for (Index x = 0; x < target; ++x) col_src[x] = (x * w) / target;
  Tensor<float>::Array v(channels * target * target);
  for (Index c = 0; c < channels; ++c) {
    for (Index y = 0; y < target; ++y) {
      const float* src = image.data() + (c * h + (y * h) / target) * w;
      float* dst = v.data() + (c * target + y) * target;
      for (Index x = 0; x < target; ++x) dst[x] = src[col_src[x]];
    }
  }
  return ImageTensor({channels, target, target}, std::move(v));
}

ImageTensor hflip(const ImageTensor& image, const AugmentConfig& config, Rng& rng, AugmentTrace* trace) {
  const bool apply = bernoulli(rng, config.p_hflip);
  if (trace) trace->flipped = apply;
  return apply ? flip_horizontal(image) : image;
}

ImageTensor contrast(const ImageTensor& image, const AugmentConfig& config, Rng& rng,
                     AugmentTrace* trace) {
  const bool apply = bernoulli(rng, config.p_contrast);
  if (trace) trace->contrasted = apply;
  if (!apply) return image;
  const double factor = uniform(rng, config.contrast_factor_range.first, config.contrast_factor_range.second);
  if (trace) trace->contrast_factor = factor;
  return adjust_contrast(image, factor);
}

ImageTensor zoom_crop(const ImageTensor& image, const AugmentConfig& config, Rng& rng,
                      AugmentTrace* trace) {
  const bool apply = bernoulli(rng, config.p_zoomcrop);
  if (trace) trace->zoomed = apply;
  if (!apply) return image;
  const double zoom = uniform(rng, config.zoom_range.first, config.zoom_range.second);
  const auto [slack_y, slack_x] = zoom_crop_slack(image, zoom);
  const int oy = static_cast<int>(rng() % static_cast<std::uint64_t>(slack_y + 1));
  const int ox = static_cast<int>(rng() % static_cast<std::uint64_t>(slack_x + 1));
  if (trace) {
    trace->zoom = zoom;
    trace->offset_y = oy;
    trace->offset_x = ox;
  }
  return zoom_crop(image, zoom, oy, ox);
}

ImageTensor augment_pipeline(const ImageTensor& image, const AugmentConfig& config, Rng& rng,
                             AugmentTrace* trace) {
  ImageTensor out = hflip(image, config, rng, trace);
  out = contrast(out, config, rng, trace);
  out = zoom_crop(out, config, rng, trace);
  return resize_nn(out, config.resize_target);
}

ImageTensor prepare_image(const ImageTensor& image, const AugmentConfig& config, PipelineMode mode,
                          Rng& rng, AugmentTrace* trace) {
  if (mode == PipelineMode::Eval) return resize_nn(image, config.resize_target);
  return augment_pipeline(image, config, rng, trace);
}

}  // namespace spiralscope
