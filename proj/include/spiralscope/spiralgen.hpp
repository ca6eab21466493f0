#pragma once

#include "spiralscope/image.hpp"
#include "spiralscope/seeding.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace spiralscope {

enum class Diagnosis : std::uint8_t { PD = 0, ET = 1, Control = 2 };

std::string_view to_string(Diagnosis d);
Diagnosis diagnosis_from_string(std::string_view name);
inline constexpr std::array<Diagnosis, 3> kDiagnoses{Diagnosis::PD, Diagnosis::ET, Diagnosis::Control};

/// n x 2 matrix of (x, y) pixel coordinates.
using Polyline = Eigen::Matrix<double, Eigen::Dynamic, 2>;

/// Archimedean spiral r = a + b * theta around `center`.
struct SpiralParams {
  double a = 6.0;
  double b = 5.0;
  double turns = 4.0;
  int n_points = 2000;
  Eigen::Vector2d center{150.0, 150.0};

  double theta_max() const;
  double radius_at(double theta) const { return a + b * theta; }
};

/// Class-conditional tremor. Frequencies are in cycles per drawn revolution,
/// amplitudes in pixels.
struct TremorModel {
  Diagnosis diagnosis = Diagnosis::Control;
  double f_lo = 1.0;
  double f_hi = 2.0;
  double amplitude = 0.0;
  double amplitude_growth = 0.0;
  double drift = 0.0;
  double jitter = 0.0;

  /// Stable 16-hex-digit digest of the parameters.
  std::string digest() const;
};

struct RasterConfig {
  int width = 300;
  int height = 300;
  double stroke_width = 4.0;
  std::array<float, 3> background{0.96f, 0.95f, 0.90f};
  std::array<float, 3> foreground{0.08f, 0.10f, 0.32f};
  double paper_texture_noise = 0.02;
  /// Peak-to-peak strength of a linear illumination ramp in a random direction.
  double illumination_gradient = 0.04;
};

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Point i sits at theta_i = i * 2 pi turns / (n_points - 1). Throws
/// GeometryError if the curve leaves the canvas minus `margin_fraction`.
Polyline ideal_spiral(const SpiralParams& params, int width, int height,
                      double margin_fraction = 0.05);

struct TremorTrace {
  Polyline trace;
  /// Signed offset of each point along the local normal of the ideal curve.
  Eigen::VectorXd displacement;
  double frequency = 0.0;
  double phase = 0.0;
  bool clamped = false;
};

/// Displaces each point along the local normal by
///   amplitude * (r / r_max)^growth * sin(f * theta + phi)
///   + drift * sin(f_drift * theta + phi_drift) + jitter * N(0, 1)
/// with f ~ U(f_lo, f_hi), f_drift ~ U(0.25, 0.75), phases uniform. Points
/// pushed off-canvas are clamped and the trace is flagged.
TremorTrace apply_tremor(const Polyline& trace, const SpiralParams& params, const TremorModel& model,
                         std::uint64_t seed, int width, int height);

/// Draws the stroke by stamping discs along the densely resampled polyline,
/// then adds illumination ramp and paper noise. Values in [0, 1].
ImageTensor rasterize(const Polyline& trace, const RasterConfig& config, std::uint64_t seed);
ImageTensor rasterize_strokes(std::span<const Polyline> strokes, const RasterConfig& config,
                              std::uint64_t seed);

/// Binary ink mask [H x W] of the strokes before shading, 1 = ink.
Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> ink_mask(
    std::span<const Polyline> strokes, int width, int height, double stroke_width);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double draw(Rng& rng) const { return uniform(rng, lo, hi); }
};

struct ClassProfile {
  double f_lo = 1.0;
  double f_hi = 2.0;
  Range amplitude;
  Range growth;
  Range drift;
  Range jitter;
};

/// Every distribution the generator samples from.
struct GeneratorConfig {
  RasterConfig raster;
  ClassProfile pd;
  ClassProfile et;
  ClassProfile control;
  Range inner_radius{4.0, 6.0};
  /// Outer radius of the ideal spiral as a fraction of min(width, height).
  Range extent{0.37, 0.42};
  std::vector<int> turns{4};
  int n_points = 2000;
  double center_jitter = 3.0;
  Range stroke_width{3.5, 4.5};
  /// Control amplitudes must stay below this (pixels).
  double visibility_threshold = 0.5;
  double margin_fraction = 0.05;

  const ClassProfile& profile(Diagnosis d) const;
  void validate() const;
};

GeneratorConfig default_generator_config();
nlohmann::json to_json(const GeneratorConfig& config);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

struct ClassCounts {
  int pd = 370;
  int et = 669;
  int control = 357;

  int operator[](Diagnosis d) const;
  int total() const { return pd + et + control; }
};

struct SpiralSample {
  Diagnosis label = Diagnosis::Control;
  int index = 0;
  std::uint64_t seed = 0;
  SpiralParams spiral;
  TremorModel tremor;
  RasterConfig raster;
  double frequency = 0.0;
  double phase = 0.0;
  bool clamped = false;
  Polyline ideal;
  TremorTrace perturbed;
  ImageTensor image;
};

/// Per-sample seed derived from (global seed, class, index).
std::uint64_t sample_seed(std::uint64_t global_seed, Diagnosis label, int index);

SpiralSample generate_sample(Diagnosis label, int index, const GeneratorConfig& config,
                             std::uint64_t global_seed);

/// All samples in manifest order (PD, then ET, then Control). Parallel over
/// `threads`; output is independent of the thread count.
std::vector<SpiralSample> generate_samples(const ClassCounts& counts, const GeneratorConfig& config,
                                           std::uint64_t global_seed, int threads = 1);

struct ManifestEntry {
  std::string path;
  Diagnosis label = Diagnosis::Control;
  int index = 0;
  std::uint64_t seed = 0;
  SpiralParams spiral;
  TremorModel tremor;
  std::string tremor_digest;
  double frequency = 0.0;
  bool clamped = false;
};

struct DatasetManifest {
  int format_version = 1;
  std::uint64_t global_seed = 0;
  ClassCounts counts;
  GeneratorConfig generator;
  std::vector<ManifestEntry> entries;
};

ManifestEntry manifest_entry(const SpiralSample& sample);
nlohmann::json to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Writes one PPM per sample plus `manifest.json` into `out_dir`. On failure
/// the files written so far are removed and the error names the failing path.
DatasetManifest generate_dataset(const ClassCounts& counts, const GeneratorConfig& config,
                                 std::uint64_t global_seed, const std::filesystem::path& out_dir,
                                 int threads = 1);

/// Parallel-for over [0, n) on up to `threads` workers.
void parallel_for(int n, int threads, const std::function<void(int)>& body);

}  // namespace spiralscope
