#include "spiralscope/pipeline.hpp"

#include "training.hpp"

#include <cmath>
#include <numbers>

namespace spiralscope {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

Polyline closed_polygon(const Eigen::Vector2d& center, std::span<const double> radii, double rotation) {
  const auto n = static_cast<Index>(radii.size());
  Polyline p(n + 1, 2);
  for (Index i = 0; i <= n; ++i) {
    const double t = rotation + kTwoPi * static_cast<double>(i % n) / static_cast<double>(n);
    p(i, 0) = center.x() + radii[i % n] * std::cos(t);
    p(i, 1) = center.y() + radii[i % n] * std::sin(t);
  }
  return p;
}

Polyline circle(const Eigen::Vector2d& center, double radius) {
  std::vector<double> radii(160, radius);
  return closed_polygon(center, radii, 0.0);
}

std::vector<Polyline> grating(const Eigen::Vector2d& center, double half, double angle, Rng& rng) {
  const int lines = 4 + static_cast<int>(rng() % 4);
  const Eigen::Vector2d along(std::cos(angle), std::sin(angle));
  const Eigen::Vector2d across(-along.y(), along.x());
  std::vector<Polyline> out;
  for (int i = 0; i < lines; ++i) {
    const double offset = -half + 2.0 * half * (i + 0.5) / lines;
    const Eigen::Vector2d mid = center + offset * across;
    Polyline p(2, 2);
    p.row(0) = (mid - half * along).transpose();
    p.row(1) = (mid + half * along).transpose();
    out.push_back(std::move(p));
  }
  return out;
}

struct SurrogateData {
  std::vector<ImageTensor> images;
  std::vector<int> labels;
};

SurrogateData make_surrogate_data(const SurrogateConfig& cfg, std::span<const int> ids) {
  SurrogateData out;
  out.images.resize(ids.size());
  out.labels.resize(ids.size());
  parallel_for(static_cast<int>(ids.size()), cfg.threads, [&](int i) {
    const int id = ids[i], label = id % kSurrogateClasses;
    Rng rng = make_rng({cfg.seed, 0x73757272, static_cast<std::uint64_t>(id)});
    RasterConfig raster = cfg.raster;
    raster.stroke_width = uniform(rng, 3.0, 5.0);
    const auto strokes = surrogate_shape(label, raster, rng);
    out.images[i] = resize_nn(rasterize_strokes(strokes, raster, rng()), cfg.input_side);
    out.labels[i] = label;
  });
  return out;
}

}  // namespace

std::string_view surrogate_class_name(int label) {
  static constexpr std::array<std::string_view, kSurrogateClasses> names{
      "circle", "rings", "triangle", "square", "pentagon", "hexagon", "star", "grating_h", "grating_v", "grating_d"};
  if (label < 0 || label >= kSurrogateClasses) throw std::out_of_range("surrogate label out of range");
  return names[label];
}

std::vector<Polyline> surrogate_shape(int label, const RasterConfig& raster, Rng& rng) {
  if (label < 0 || label >= kSurrogateClasses) throw std::out_of_range("surrogate label out of range");
  const double side = std::min(raster.width, raster.height);
  const Eigen::Vector2d center(raster.width / 2.0 + uniform(rng, -0.08, 0.08) * side,
                               raster.height / 2.0 + uniform(rng, -0.08, 0.08) * side);
  const double radius = uniform(rng, 0.22, 0.36) * side;
  const double rotation = uniform(rng, 0.0, kTwoPi);
  const double tilt = uniform(rng, -0.14, 0.14);

  switch (label) {
    case 0:
      return {circle(center, radius)};
    case 1: {
      std::vector<Polyline> rings;
      const int count = 2 + static_cast<int>(rng() % 2);
      for (int i = 0; i < count; ++i) rings.push_back(circle(center, radius * (1.0 - 0.32 * i)));
      return rings;
    }
    case 2:
    case 3:
    case 4:
    case 5: {
      std::vector<double> radii(static_cast<std::size_t>(label + 1), radius);
      return {closed_polygon(center, radii, rotation)};
    }
    case 6: {
      std::vector<double> radii(10);
      for (std::size_t i = 0; i < radii.size(); ++i) radii[i] = i % 2 ? 0.42 * radius : radius;
      return {closed_polygon(center, radii, rotation)};
    }
    case 7:
      return grating(center, radius, tilt, rng);
    case 8:
      return grating(center, radius, std::numbers::pi / 2 + tilt, rng);
    default:
      return grating(center, radius, (rng() % 2 ? 0.25 : 0.75) * std::numbers::pi + tilt, rng);
  }
}

nlohmann::json to_json(const SurrogateConfig& c) {
  return {{"per_class", c.per_class},
          {"input_side", c.input_side},
          {"widths", c.widths},
          {"blocks_per_stage", c.blocks_per_stage},
          {"max_epochs", c.max_epochs},
          {"max_lr", c.max_lr},
          {"clip_norm", c.clip_norm},
          {"batch_size", c.batch_size},
          {"target_accuracy", c.target_accuracy},
          {"holdout_fraction", c.holdout_fraction},
          {"seed", c.seed},
          {"threads", c.threads}};
}

SurrogateConfig surrogate_config_from_json(const nlohmann::json& j, SurrogateConfig c) {
  c.per_class = j.value("per_class", c.per_class);
  c.input_side = j.value("input_side", c.input_side);
  if (j.contains("widths")) c.widths = j["widths"].get<std::array<int, 3>>();
  c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.max_lr = j.value("max_lr", c.max_lr);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.target_accuracy = j.value("target_accuracy", c.target_accuracy);
  c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  return c;
}

SurrogateResult pretrain_surrogate(const SurrogateConfig& cfg) {
  if (cfg.per_class < 2) throw std::invalid_argument("per_class must be >= 2");
  if (cfg.max_epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("max_epochs and batch_size must be >= 1");
  if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0)) {
    throw std::invalid_argument("holdout_fraction must be in (0, 1)");
  }

  const int holdout_per_class = std::max(1, static_cast<int>(std::lround(cfg.per_class * cfg.holdout_fraction)));
  std::vector<int> train_ids, holdout_ids;
  for (int i = 0; i < cfg.per_class; ++i) {
    for (int c = 0; c < kSurrogateClasses; ++c) {
      (i < holdout_per_class ? holdout_ids : train_ids).push_back(i * kSurrogateClasses + c);
    }
  }
  const SurrogateData train = make_surrogate_data(cfg, train_ids);
  const SurrogateData holdout = make_surrogate_data(cfg, holdout_ids);

  ModelConfig mc;
  mc.n_classes = kSurrogateClasses;
  mc.input_side = cfg.input_side;
  mc.widths = cfg.widths;
  mc.blocks_per_stage = cfg.blocks_per_stage;
  mc.seed = cfg.seed;
  mc.head_seed = mix_seed({cfg.seed, 1});
  SurrogateResult result{build_model(mc), {}, {}, 0.0};
  Model& model = result.model;

  const int n = static_cast<int>(train.labels.size());
  const long steps = (n + cfg.batch_size - 1) / cfg.batch_size;
  const Schedule schedule = make_cyclical(GroupLRConfig::uniform(cfg.max_lr), std::max(2L, steps));
  OptimizerState state;
  state.clip_norm = cfg.clip_norm;
  AugmentConfig augment;
  augment.p_contrast = 0.0;
  augment.resize_target = cfg.input_side;

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[i] = i;
  bool reached = false;
  for (int epoch = 0; epoch < cfg.max_epochs && !reached; ++epoch) {
    Rng order_rng = make_rng({cfg.seed, 0x6f726472, static_cast<std::uint64_t>(epoch)});
    detail::shuffle(order, order_rng);
    double loss_sum = 0.0;
    int correct = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(n, start + cfg.batch_size);
      std::vector<ImageTensor> images;
      std::vector<int> labels;
      for (int i = start; i < end; ++i) {
        Rng rng = make_rng({cfg.seed, 0x61756780, static_cast<std::uint64_t>(epoch),
                            static_cast<std::uint64_t>(order[i])});
        images.push_back(augment_pipeline(train.images[order[i]], augment, rng));
        labels.push_back(train.labels[order[i]]);
      }
      std::vector<int> preds;
      loss_sum += detail::train_step(model, state, schedule, make_batch(images), labels, &preds) * (end - start);
      for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];
    }
    result.losses.push_back(loss_sum / n);
    result.train_accuracy.push_back(static_cast<double>(correct) / n);
    reached = result.train_accuracy.back() >= cfg.target_accuracy;
  }
  if (!reached) {
    throw PretrainError("surrogate pretraining stayed below training accuracy " + std::to_string(cfg.target_accuracy) +
                            " after " + std::to_string(cfg.max_epochs) + " epochs",
                        result.train_accuracy);
  }

  int correct = 0;
  for (std::size_t start = 0; start < holdout.images.size(); start += 64) {
    const std::size_t end = std::min(holdout.images.size(), start + 64);
    const auto preds = detail::argmax_rows(
        model.forward(make_batch(std::span<const ImageTensor>(holdout.images.data() + start, end - start))));
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == holdout.labels[start + i];
  }
  result.holdout_accuracy = static_cast<double>(correct) / static_cast<double>(holdout.images.size());
  return result;
}

}  // namespace spiralscope
