#pragma once

#include "spiralscope/image.hpp"
#include "spiralscope/seeding.hpp"

#include <json.hpp>

#include <utility>

namespace spiralscope {

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_contrast = 0.1;
  double p_zoomcrop = 0.75;
  std::pair<double, double> contrast_factor_range{0.5, 1.5};
  std::pair<double, double> zoom_range{1.0, 1.15};
  int resize_target = 96;

  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
};

nlohmann::json to_json(const AugmentConfig& config);
AugmentConfig augment_config_from_json(const nlohmann::json& j);

/// What one pass of the random augmentations actually did.
struct AugmentTrace {
  bool flipped = false;
  bool contrasted = false;
  double contrast_factor = 1.0;
  bool zoomed = false;
  double zoom = 1.0;
  int offset_x = 0;
  int offset_y = 0;
};

// Deterministic building blocks.

/// Reverses column order in every channel.
ImageTensor flip_horizontal(const ImageTensor& image);
/// clamp(0.5 + factor * (pixel - 0.5)).
ImageTensor adjust_contrast(const ImageTensor& image, double factor);
/// Nearest-neighbour upscale by `zoom` to floor(zoom * side), then crop the
/// original size at (offset_y, offset_x).
ImageTensor zoom_crop(const ImageTensor& image, double zoom, int offset_y, int offset_x);
/// Largest valid crop offsets (y, x) for a given zoom.
std::pair<int, int> zoom_crop_slack(const ImageTensor& image, double zoom);
/// Exact nearest-neighbour resize: source index = floor(dest * src / target).
ImageTensor resize_nn(const ImageTensor& image, int target);

// Random wrappers, each applied with its configured probability. Every call
// consumes one Bernoulli draw from `rng`, plus parameter draws when applied.

ImageTensor hflip(const ImageTensor& image, const AugmentConfig& config, Rng& rng,
                  AugmentTrace* trace = nullptr);
ImageTensor contrast(const ImageTensor& image, const AugmentConfig& config, Rng& rng,
                     AugmentTrace* trace = nullptr);
ImageTensor zoom_crop(const ImageTensor& image, const AugmentConfig& config, Rng& rng,
                      AugmentTrace* trace = nullptr);

/// hflip -> contrast -> zoom_crop -> resize_nn on one rng stream.
ImageTensor augment_pipeline(const ImageTensor& image, const AugmentConfig& config, Rng& rng,
                             AugmentTrace* trace = nullptr);

enum class PipelineMode { Train, Eval };

/// Training images get the full augmentation pipeline; evaluation images are
/// only resized.
ImageTensor prepare_image(const ImageTensor& image, const AugmentConfig& config, PipelineMode mode,
                          Rng& rng, AugmentTrace* trace = nullptr);

}  // namespace spiralscope
