#include "spiralscope/spiralgen.hpp"

#include "spiralscope/digest.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <thread>

namespace spiralscope {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

nlohmann::json range_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }
Range range_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

nlohmann::json profile_json(const ClassProfile& p) {
  return {{"freq_band", {p.f_lo, p.f_hi}},
          {"amplitude", range_json(p.amplitude)},
          {"growth", range_json(p.growth)},
          {"drift", range_json(p.drift)},
          {"jitter", range_json(p.jitter)}};
}

ClassProfile profile_from(const nlohmann::json& j) {
  ClassProfile p;
  p.f_lo = j.at("freq_band").at(0).get<double>();
  p.f_hi = j.at("freq_band").at(1).get<double>();
  p.amplitude = range_from(j.at("amplitude"));
  p.growth = range_from(j.at("growth"));
  p.drift = range_from(j.at("drift"));
  p.jitter = range_from(j.at("jitter"));
  return p;
}

nlohmann::json raster_json(const RasterConfig& r) {
  return {{"width", r.width},
          {"height", r.height},
          {"channels", 3},
          {"stroke_width", r.stroke_width},
          {"background", r.background},
          {"foreground", r.foreground},
          {"paper_texture_noise", r.paper_texture_noise},
          {"illumination_gradient", r.illumination_gradient}};
}

RasterConfig raster_from(const nlohmann::json& j) {
  RasterConfig r;
  r.width = j.at("width").get<int>();
  r.height = j.at("height").get<int>();
  r.stroke_width = j.at("stroke_width").get<double>();
  r.background = j.at("background").get<std::array<float, 3>>();
  r.foreground = j.at("foreground").get<std::array<float, 3>>();
  r.paper_texture_noise = j.at("paper_texture_noise").get<double>();
  r.illumination_gradient = j.at("illumination_gradient").get<double>();
  return r;
}

nlohmann::json spiral_json(const SpiralParams& s) {
  return {{"a", s.a},
          {"b", s.b},
          {"turns", s.turns},
          {"n_points", s.n_points},
          {"center", {s.center.x(), s.center.y()}}};
}

SpiralParams spiral_from(const nlohmann::json& j) {
  SpiralParams s;
  s.a = j.at("a").get<double>();
  s.b = j.at("b").get<double>();
  s.turns = j.at("turns").get<double>();
  s.n_points = j.at("n_points").get<int>();
  s.center = {j.at("center").at(0).get<double>(), j.at("center").at(1).get<double>()};
  return s;
}

nlohmann::json tremor_json(const TremorModel& t) {
  return {{"class", std::string(to_string(t.diagnosis))},
          {"freq_band", {t.f_lo, t.f_hi}},
          {"amplitude", t.amplitude},
          {"amplitude_growth", t.amplitude_growth},
          {"drift", t.drift},
          {"jitter", t.jitter}};
}

TremorModel tremor_from(const nlohmann::json& j) {
  TremorModel t;
  t.diagnosis = diagnosis_from_string(j.at("class").get<std::string>());
  t.f_lo = j.at("freq_band").at(0).get<double>();
  t.f_hi = j.at("freq_band").at(1).get<double>();
  t.amplitude = j.at("amplitude").get<double>();
  t.amplitude_growth = j.at("amplitude_growth").get<double>();
  t.drift = j.at("drift").get<double>();
  t.jitter = j.at("jitter").get<double>();
  return t;
}

std::string file_stem(Diagnosis d) {
  switch (d) {
    case Diagnosis::PD:
      return "pd";
    case Diagnosis::ET:
      return "et";
    case Diagnosis::Control:
      return "control";
  }
  return "unknown";
}

std::string sample_filename(Diagnosis d, int index) {
  char name[64];
  std::snprintf(name, sizeof(name), "%s_%04d.ppm", file_stem(d).c_str(), index);
  return name;
}

}  // namespace

std::string_view to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::PD:
      return "PD";
    case Diagnosis::ET:
      return "ET";
    case Diagnosis::Control:
      return "Control";
  }
  return "?";
}

Diagnosis diagnosis_from_string(std::string_view name) {
  if (name == "PD") return Diagnosis::PD;
  if (name == "ET") return Diagnosis::ET;
  if (name == "Control") return Diagnosis::Control;
  throw std::invalid_argument("unknown diagnosis '" + std::string(name) + "'");
}

double SpiralParams::theta_max() const { return kTwoPi * turns; }

std::string TremorModel::digest() const { return hex64(fnv1a(tremor_json(*this).dump())); }

Polyline ideal_spiral(const SpiralParams& p, int width, int height, double margin_fraction) {
  if (!(p.b > 0.0)) throw GeometryError("spiral growth b must be positive");
  if (p.turns < 2.0 || p.turns > 6.0) throw GeometryError("spiral turns must lie in [2, 6]");
  if (p.n_points < 2) throw GeometryError("spiral needs at least 2 points");
  const double margin = margin_fraction * std::min(width, height);
  Polyline out(p.n_points, 2);
  const double step = p.theta_max() / static_cast<double>(p.n_points - 1);
  for (int i = 0; i < p.n_points; ++i) {
    const double theta = i * step;
    const double r = p.radius_at(theta);
    out(i, 0) = p.center.x() + r * std::cos(theta);
    out(i, 1) = p.center.y() + r * std::sin(theta);
    if (out(i, 0) < margin || out(i, 0) > width - margin || out(i, 1) < margin ||
        out(i, 1) > height - margin) {
      throw GeometryError("spiral leaves the canvas margin at theta " + std::to_string(theta) +
                          "; use a smaller growth b (currently " + std::to_string(p.b) + ")");
    }
  }
  return out;
}

TremorTrace apply_tremor(const Polyline& trace, const SpiralParams& params, const TremorModel& model,
                         std::uint64_t seed, int width, int height) {
  const Index n = trace.rows();
  Rng rng(seed);
  TremorTrace out;
  out.frequency = uniform(rng, model.f_lo, model.f_hi);
  out.phase = uniform(rng, 0.0, kTwoPi);
  const double drift_freq = uniform(rng, 0.25, 0.75);
  const double drift_phase = uniform(rng, 0.0, kTwoPi);

  out.trace = trace;
  out.displacement = Eigen::VectorXd::Zero(n);
  if (n < 2) return out;
  const double step = params.theta_max() / static_cast<double>(n - 1);
  const double r_max = params.radius_at(params.theta_max());
  for (Index i = 0; i < n; ++i) {
    const double theta = static_cast<double>(i) * step;
    const double envelope = std::pow(params.radius_at(theta) / r_max, model.amplitude_growth);
    const double d = model.amplitude * envelope * std::sin(out.frequency * theta + out.phase) +
                     model.drift * std::sin(drift_freq * theta + drift_phase) +
                     model.jitter * standard_normal(rng);
    const Index lo = std::max<Index>(i - 1, 0), hi = std::min<Index>(i + 1, n - 1);
    const Eigen::Vector2d tangent = (trace.row(hi) - trace.row(lo)).transpose();
    const Eigen::Vector2d normal = Eigen::Vector2d(-tangent.y(), tangent.x()).normalized();
    Eigen::Vector2d p = trace.row(i).transpose() + d * normal;
    if (p.x() < 0.0 || p.y() < 0.0 || p.x() > width - 1.0 || p.y() > height - 1.0) {
      p.x() = std::clamp(p.x(), 0.0, width - 1.0);
      p.y() = std::clamp(p.y(), 0.0, height - 1.0);
      out.clamped = true;
    }
    out.trace.row(i) = p.transpose();
    out.displacement[i] = d;
  }
  return out;
}

Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> ink_mask(
    std::span<const Polyline> strokes, int width, int height, double stroke_width) {
  Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mask =
      decltype(mask)::Zero(height, width);
  const double radius = std::max(stroke_width / 2.0, 0.71);
  const double r2 = radius * radius;
  auto stamp = [&](double cx, double cy) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + radius)));
    for (int y = y0; y <= y1; ++y) {
      const double dy = y - cy;
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - cx;
        if (dx * dx + dy * dy <= r2) mask(y, x) = 1;
      }
    }
  };
  for (const Polyline& line : strokes) {
    if (line.rows() == 0) continue;
    stamp(line(0, 0), line(0, 1));
    for (Index i = 1; i < line.rows(); ++i) {
      const Eigen::RowVector2d a = line.row(i - 1), b = line.row(i);
      const int steps = std::max(1, static_cast<int>(std::ceil((b - a).norm() / 0.25)));
      for (int k = 1; k <= steps; ++k) {
        const Eigen::RowVector2d p = a + (b - a) * (static_cast<double>(k) / steps);
        stamp(p.x(), p.y());
      }
    }
  }
  return mask;
}

ImageTensor rasterize_strokes(std::span<const Polyline> strokes, const RasterConfig& config,
                              std::uint64_t seed) {
  const int w = config.width, h = config.height;
  if (w < 64 || h < 64) throw std::invalid_argument("raster canvas must be at least 64x64");
  if (config.stroke_width < 1.0) throw std::invalid_argument("stroke_width must be >= 1");
  const auto mask = ink_mask(strokes, w, h, config.stroke_width);

  Rng rng(seed);
  const double angle = uniform(rng, 0.0, kTwoPi);
  const double gx = config.illumination_gradient * std::cos(angle);
  const double gy = config.illumination_gradient * std::sin(angle);
  const Index plane = static_cast<Index>(w) * h;
  Tensor<float>::Array v(3 * plane);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double light =
          1.0 + gx * (x / (w - 1.0) - 0.5) + gy * (y / (h - 1.0) - 0.5);
      const auto& color = mask(y, x) ? config.foreground : config.background;
      for (int c = 0; c < 3; ++c) {
        double value = color[c] * light;
        if (config.paper_texture_noise > 0.0) value += config.paper_texture_noise * standard_normal(rng);
        v[c * plane + static_cast<Index>(y) * w + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return ImageTensor({3, h, w}, std::move(v));
}

ImageTensor rasterize(const Polyline& trace, const RasterConfig& config, std::uint64_t seed) {
  return rasterize_strokes(std::span<const Polyline>(&trace, 1), config, seed);
}

const ClassProfile& GeneratorConfig::profile(Diagnosis d) const {
  switch (d) {
    case Diagnosis::PD:
      return pd;
    case Diagnosis::ET:
      return et;
    case Diagnosis::Control:
      return control;
  }
  return control;
}

void GeneratorConfig::validate() const {
  for (Diagnosis d : kDiagnoses) {
    const ClassProfile& p = profile(d);
    const std::string name(to_string(d));
    if (!(p.f_lo < p.f_hi)) throw std::invalid_argument(name + ": freq_band needs f_lo < f_hi");
    if (p.amplitude.lo < 0.0 || p.amplitude.hi < p.amplitude.lo) {
      throw std::invalid_argument(name + ": amplitude range must be non-negative and ordered");
    }
  }
  if (control.amplitude.hi >= visibility_threshold) {
    throw std::invalid_argument("Control amplitude must stay below the visibility threshold");
  }
  if (turns.empty()) throw std::invalid_argument("generator needs at least one turn count");
  if (raster.width < 64 || raster.height < 64) throw std::invalid_argument("canvas must be >= 64x64");
}

GeneratorConfig default_generator_config() {
  GeneratorConfig c;
  c.pd = {10.0, 16.0, {4.0, 6.0}, {0.0, 0.2}, {0.0, 0.5}, {0.2, 0.4}};
  c.et = {5.0, 8.0, {6.0, 10.0}, {0.8, 1.2}, {0.0, 0.8}, {0.2, 0.4}};
  c.control = {1.0, 2.0, {0.0, 0.3}, {0.0, 0.0}, {0.0, 1.0}, {0.15, 0.35}};
  return c;
}

nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"raster", raster_json(c.raster)},
          {"profiles",
           {{"PD", profile_json(c.pd)}, {"ET", profile_json(c.et)}, {"Control", profile_json(c.control)}}},
          {"inner_radius", range_json(c.inner_radius)},
          {"extent", range_json(c.extent)},
          {"turns", c.turns},
          {"n_points", c.n_points},
          {"center_jitter", c.center_jitter},
          {"stroke_width", range_json(c.stroke_width)},
          {"visibility_threshold", c.visibility_threshold},
          {"margin_fraction", c.margin_fraction}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c = default_generator_config();
  if (j.contains("raster")) c.raster = raster_from(j.at("raster"));
  if (j.contains("profiles")) {
    const auto& p = j.at("profiles");
    if (p.contains("PD")) c.pd = profile_from(p.at("PD"));
    if (p.contains("ET")) c.et = profile_from(p.at("ET"));
    if (p.contains("Control")) c.control = profile_from(p.at("Control"));
  }
  if (j.contains("inner_radius")) c.inner_radius = range_from(j.at("inner_radius"));
  if (j.contains("extent")) c.extent = range_from(j.at("extent"));
  if (j.contains("turns")) c.turns = j.at("turns").get<std::vector<int>>();
  if (j.contains("n_points")) c.n_points = j.at("n_points").get<int>();
  if (j.contains("center_jitter")) c.center_jitter = j.at("center_jitter").get<double>();
  if (j.contains("stroke_width")) c.stroke_width = range_from(j.at("stroke_width"));
  if (j.contains("visibility_threshold")) c.visibility_threshold = j.at("visibility_threshold").get<double>();
  if (j.contains("margin_fraction")) c.margin_fraction = j.at("margin_fraction").get<double>();
  c.validate();
  return c;
}

int ClassCounts::operator[](Diagnosis d) const {
  switch (d) {
    case Diagnosis::PD:
      return pd;
    case Diagnosis::ET:
      return et;
    case Diagnosis::Control:
      return control;
  }
  return 0;
}

std::uint64_t sample_seed(std::uint64_t global_seed, Diagnosis label, int index) {
  return mix_seed({global_seed, static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(index)});
}

SpiralSample generate_sample(Diagnosis label, int index, const GeneratorConfig& config,
                             std::uint64_t global_seed) {
  SpiralSample s;
  s.label = label;
  s.index = index;
  s.seed = sample_seed(global_seed, label, index);
  Rng rng(s.seed);

  const int w = config.raster.width, h = config.raster.height;
  s.spiral.turns = config.turns[static_cast<std::size_t>(rng() % config.turns.size())];
  s.spiral.n_points = config.n_points;
  s.spiral.a = config.inner_radius.draw(rng);
  const double outer = config.extent.draw(rng) * std::min(w, h);
  s.spiral.b = (outer - s.spiral.a) / s.spiral.theta_max();
  s.spiral.center = {w / 2.0 + uniform(rng, -config.center_jitter, config.center_jitter),
                     h / 2.0 + uniform(rng, -config.center_jitter, config.center_jitter)};

  const ClassProfile& p = config.profile(label);
  s.tremor.diagnosis = label;
  s.tremor.f_lo = p.f_lo;
  s.tremor.f_hi = p.f_hi;
  s.tremor.amplitude = p.amplitude.draw(rng);
  s.tremor.amplitude_growth = p.growth.draw(rng);
  s.tremor.drift = p.drift.draw(rng);
  s.tremor.jitter = p.jitter.draw(rng);

  s.raster = config.raster;
  s.raster.stroke_width = config.stroke_width.draw(rng);

  s.ideal = ideal_spiral(s.spiral, w, h, config.margin_fraction);
  s.perturbed = apply_tremor(s.ideal, s.spiral, s.tremor, mix_seed({s.seed, 1}), w, h);
  s.frequency = s.perturbed.frequency;
  s.phase = s.perturbed.phase;
  s.clamped = s.perturbed.clamped;
  s.image = rasterize(s.perturbed.trace, s.raster, mix_seed({s.seed, 2}));
  return s;
}

void parallel_for(int n, int threads, const std::function<void(int)>& body) {
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&] {
        for (int i = next++; i < n; i = next++) {
          try {
            body(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = n;
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

namespace {

std::vector<std::pair<Diagnosis, int>> sample_order(const ClassCounts& counts) {
  std::vector<std::pair<Diagnosis, int>> order;
  for (Diagnosis d : kDiagnoses) {
    if (counts[d] < 0) throw std::invalid_argument("class counts must be non-negative");
    for (int i = 0; i < counts[d]; ++i) order.emplace_back(d, i);
  }
  if (order.empty()) throw std::invalid_argument("class counts must not all be zero");
  return order;
}

}  // namespace

std::vector<SpiralSample> generate_samples(const ClassCounts& counts, const GeneratorConfig& config,
                                           std::uint64_t global_seed, int threads) {
  config.validate();
  const auto order = sample_order(counts);
  std::vector<SpiralSample> out(order.size());
  parallel_for(static_cast<int>(order.size()), threads, [&](int i) {
    out[i] = generate_sample(order[i].first, order[i].second, config, global_seed);
  });
  return out;
}

ManifestEntry manifest_entry(const SpiralSample& s) {
  ManifestEntry e;
  e.path = sample_filename(s.label, s.index);
  e.label = s.label;
  e.index = s.index;
  e.seed = s.seed;
  e.spiral = s.spiral;
  e.tremor = s.tremor;
  e.tremor_digest = s.tremor.digest();
  e.frequency = s.frequency;
  e.clamped = s.clamped;
  return e;
}

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const ManifestEntry& e : m.entries) {
    entries.push_back({{"path", e.path},
                       {"label", std::string(to_string(e.label))},
                       {"index", e.index},
                       {"seed", e.seed},
                       {"spiral", spiral_json(e.spiral)},
                       {"tremor", tremor_json(e.tremor)},
                       {"tremor_digest", e.tremor_digest},
                       {"frequency", e.frequency},
                       {"clamped", e.clamped}});
  }
  return {{"format_version", m.format_version},
          {"global_seed", m.global_seed},
          {"counts", {{"PD", m.counts.pd}, {"ET", m.counts.et}, {"Control", m.counts.control}}},
          {"generator", to_json(m.generator)},
          {"entries", std::move(entries)}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != 1) {
    throw std::runtime_error("unsupported manifest version " + std::to_string(m.format_version));
  }
  m.global_seed = j.at("global_seed").get<std::uint64_t>();
  m.counts.pd = j.at("counts").at("PD").get<int>();
  m.counts.et = j.at("counts").at("ET").get<int>();
  m.counts.control = j.at("counts").at("Control").get<int>();
  m.generator = generator_config_from_json(j.at("generator"));
  for (const auto& je : j.at("entries")) {
    ManifestEntry e;
    e.path = je.at("path").get<std::string>();
    e.label = diagnosis_from_string(je.at("label").get<std::string>());
    e.index = je.at("index").get<int>();
    e.seed = je.at("seed").get<std::uint64_t>();
    e.spiral = spiral_from(je.at("spiral"));
    e.tremor = tremor_from(je.at("tremor"));
    e.tremor_digest = je.at("tremor_digest").get<std::string>();
    e.frequency = je.at("frequency").get<double>();
    e.clamped = je.at("clamped").get<bool>();
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << to_json(manifest).dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  try {
    return manifest_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed manifest " + path.string() + ": " + e.what());
  }
}

DatasetManifest generate_dataset(const ClassCounts& counts, const GeneratorConfig& config,
                                 std::uint64_t global_seed, const std::filesystem::path& out_dir,
                                 int threads) {
  config.validate();
  const auto order = sample_order(counts);
  std::filesystem::create_directories(out_dir);

  DatasetManifest manifest;
  manifest.global_seed = global_seed;
  manifest.counts = counts;
  manifest.generator = config;
  manifest.entries.resize(order.size());
  try {
    parallel_for(static_cast<int>(order.size()), threads, [&](int i) {
      SpiralSample s = generate_sample(order[i].first, order[i].second, config, global_seed);
      ManifestEntry e = manifest_entry(s);
      const auto path = out_dir / e.path;
      try {
        write_ppm(to_image8(s.image), path);
      } catch (const std::exception& ex) {
        throw std::runtime_error("writing " + path.string() + " failed: " + ex.what());
      }
      manifest.entries[i] = std::move(e);
    });
    write_manifest(manifest, out_dir / "manifest.json");
  } catch (...) {
    std::error_code ec;
    for (const auto& [label, index] : order) {
      std::filesystem::remove(out_dir / sample_filename(label, index), ec);
    }
    std::filesystem::remove(out_dir / "manifest.json", ec);
    throw;
  }
  return manifest;
}

}  // namespace spiralscope
