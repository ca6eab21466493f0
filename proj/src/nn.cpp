#include "spiralscope/nn.hpp"

#include "spiralscope/ops.hpp"
#include "spiralscope/seeding.hpp"

#include <cmath>

namespace spiralscope {
namespace {

constexpr std::uint64_t kBodyStream = 0x626f6479;  // "body"
constexpr std::uint64_t kHeadStream = 0x68656164;  // "head"

Tensor<float> he_normal(Shape shape, Index fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor<float>::Array v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(stddev * standard_normal(rng));
  return Tensor<float>(std::move(shape), std::move(v));
}

std::string block_prefix(int stage, int block) {
  return "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block) + ".";
}

LayerGroup stage_group(int stage) {
  switch (stage) {
    case 0:
      return LayerGroup::Early;
    case 1:
      return LayerGroup::Middle;
    default:
      return LayerGroup::Late;
  }
}

bool block_downsamples(int stage, int block) { return stage > 0 && block == 0; }

void validate(const ModelConfig& config) {
  if (config.n_classes < 2) {
    throw std::invalid_argument("model needs at least 2 classes, got " +
                                std::to_string(config.n_classes));
  }
  if (config.input_side <= 0 || config.input_side % config.side_multiple() != 0) {
    throw std::invalid_argument("input_side " + std::to_string(config.input_side) +
                                " must be a positive multiple of " +
                                std::to_string(config.side_multiple()));
  }
  for (int w : config.widths) {
    if (w <= 0) throw std::invalid_argument("channel widths must be positive");
  }
  if (config.blocks_per_stage < 1) throw std::invalid_argument("blocks_per_stage must be >= 1");
}

// Shapes of every parameter the architecture defines, in canonical order.
struct ParameterSlot {
  std::string name;
  Shape shape;
  Index fan_in;
  LayerGroup group;
  bool bias;
};

std::vector<ParameterSlot> architecture(const ModelConfig& c) {
  std::vector<ParameterSlot> slots;
  auto conv = [&](const std::string& name, Index out, Index in, Index k, LayerGroup g) {
    slots.push_back({name + ".weight", {out, in, k, k}, in * k * k, g, false});
    slots.push_back({name + ".bias", {out}, in * k * k, g, true});
  };
  conv("stem", c.widths[0], 3, 3, LayerGroup::Early);
  Index in = c.widths[0];
  for (int s = 0; s < 3; ++s) {
    const Index width = c.widths[s];
    for (int b = 0; b < c.blocks_per_stage; ++b) {
      const std::string p = block_prefix(s, b);
      conv(p + "conv1", width, in, 3, stage_group(s));
      conv(p + "conv2", width, width, 3, stage_group(s));
      if (in != width || block_downsamples(s, b)) conv(p + "proj", width, in, 1, stage_group(s));
      in = width;
    }
  }
  slots.push_back({"head.weight", {in, c.n_classes}, in, LayerGroup::Late, false});
  slots.push_back({"head.bias", {1, c.n_classes}, in, LayerGroup::Late, true});
  return slots;
}

Tensor<float> init_slot(const ParameterSlot& slot, Rng& rng) {
  if (slot.bias) return Tensor<float>::zeros(slot.shape);
  return he_normal(slot.shape, slot.fan_in, rng);
}

}  // namespace

std::string_view to_string(LayerGroup group) {
  switch (group) {
    case LayerGroup::Early:
      return "early";
    case LayerGroup::Middle:
      return "middle";
    case LayerGroup::Late:
      return "late";
  }
  return "?";
}

Model::Model(const Model& other) : config_(other.config_), index_(other.index_) {
  params_.reserve(other.params_.size());
  for (const Parameter& p : other.params_) {
    params_.push_back({p.name, p.value.clone(), p.group, p.trainable});
  }
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Model::add_parameter(std::string name, Tensor<float> value, LayerGroup group) {
  value.set_requires_grad(true);
  index_[name] = params_.size();
  params_.push_back({std::move(name), std::move(value), group, true});
}

void Model::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
}

Parameter& Model::parameter(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return params_[it->second];
}

const Parameter& Model::parameter(std::string_view name) const {
  return const_cast<Model*>(this)->parameter(name);
}

bool Model::has_parameter(std::string_view name) const {
  return index_.contains(std::string(name));
}

Tensor<float> Model::features(const Tensor<float>& batch) const {
  const int side = config_.input_side;
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != side || batch.dim(3) != side) {
    throw ShapeError("model expects input [N x 3 x " + std::to_string(side) + " x " +
                     std::to_string(side) + "], got " + shape_string(batch.shape()) +
                     "; resize images with resize_nn first");
  }
  auto w = [&](const std::string& name) -> const Tensor<float>& { return parameter(name).value; };

  Tensor<float> x = relu(conv2d(batch, w("stem.weight"), w("stem.bias"), 1, 1));
  if (config_.stem_pool) x = avg_pool2d(x, 2, 2);
  const float branch_scale = static_cast<float>(1.0 / std::sqrt(2.0));
  for (int s = 0; s < 3; ++s) {
    for (int b = 0; b < config_.blocks_per_stage; ++b) {
      const std::string p = block_prefix(s, b);
      if (block_downsamples(s, b)) x = avg_pool2d(x, 2, 2);
      Tensor<float> h = relu(conv2d(x, w(p + "conv1.weight"), w(p + "conv1.bias"), 1, 1));
      h = scale(conv2d(h, w(p + "conv2.weight"), w(p + "conv2.bias"), 1, 1), branch_scale);
      Tensor<float> shortcut =
          has_parameter(p + "proj.weight")
              ? conv2d(x, w(p + "proj.weight"), w(p + "proj.bias"), 1, 0)
              : x;
      x = relu(add(shortcut, h));
    }
  }
  return global_avg_pool(x);
}

Tensor<float> Model::forward(const Tensor<float>& batch) const {
  Tensor<float> logits =
      add(matmul(features(batch), parameter("head.weight").value), parameter("head.bias").value);
  if (!logits.all_finite()) throw NumericError("forward produced non-finite logits");
  return logits;
}

Model build_model(const ModelConfig& config) {
  validate(config);
  Model model(config);
  Rng body = make_rng({config.seed, kBodyStream});
  Rng head = make_rng({config.head_seed, kHeadStream});
  for (const ParameterSlot& slot : architecture(config)) {
    const bool in_head = slot.name.starts_with("head.");
    model.add_parameter(slot.name, init_slot(slot, in_head ? head : body), slot.group);
  }
  return model;
}

Model build_model(int n_classes, int input_side, std::array<int, 3> widths, int blocks_per_stage,
                  std::uint64_t seed) {
  ModelConfig config;
  config.n_classes = n_classes;
  config.input_side = input_side;
  config.widths = widths;
  config.blocks_per_stage = blocks_per_stage;
  config.seed = seed;
  config.head_seed = seed;
  return build_model(config);
}

Model replace_head(const Model& model, int n_classes, std::uint64_t seed) {
  if (n_classes < 2) {
    throw std::invalid_argument("replacement head needs at least 2 classes, got " +
                                std::to_string(n_classes));
  }
  ModelConfig config = model.config();
  config.n_classes = n_classes;
  config.head_seed = seed;
  Model out(config);
  for (const Parameter& p : model.parameters()) {
    if (p.is_head()) continue;
    out.params_.push_back({p.name, p.value.clone(), p.group, p.trainable});
  }
  Rng head = make_rng({seed, kHeadStream});
  for (const ParameterSlot& slot : architecture(config)) {
    if (!slot.name.starts_with("head.")) continue;
    Tensor<float> v = init_slot(slot, head);
    v.set_requires_grad(true);
    out.params_.push_back({slot.name, std::move(v), LayerGroup::Late, true});
  }
  out.reindex();
  return out;
}

void set_trainable(Model& model, const std::set<LayerGroup>& frozen_groups,
                   bool freeze_body_keep_head) {
  for (Parameter& p : model.parameters()) {
    p.trainable = freeze_body_keep_head ? p.is_head() : !frozen_groups.contains(p.group);
    p.value.set_requires_grad(p.trainable);
    if (!p.trainable) p.value.zero_grad();
  }
}

Model assemble_model(const ModelConfig& config, std::vector<Parameter> parameters) {
  validate(config);
  const std::vector<ParameterSlot> slots = architecture(config);
  if (slots.size() != parameters.size()) {
    throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                          "architecture defines " + std::to_string(slots.size()) +
                              " tensors, checkpoint has " + std::to_string(parameters.size()));
  }
  Model model(config);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    Parameter& p = parameters[i];
    if (p.name != slots[i].name || p.value.shape() != slots[i].shape) {
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch,
                            "tensor " + p.name + " " + shape_string(p.value.shape()) +
                                " does not match expected " + slots[i].name + " " +
                                shape_string(slots[i].shape));
    }
    model.add_parameter(p.name, p.value, slots[i].group);
  }
  return model;
}

}  // namespace spiralscope
