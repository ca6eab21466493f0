#pragma once

#include "spiralscope/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace spiralscope {

enum class LayerGroup : std::uint8_t { Early = 0, Middle = 1, Late = 2 };

std::string_view to_string(LayerGroup group);

/// Architecture and initialization metadata for MicroResNet.
///
/// Layout: 3x3 stem conv (width widths[0]) optionally followed by a 2x2
/// average pool, three stages of `blocks_per_stage` residual blocks of two
/// 3x3 convs, 2x downsampling on entry to stages 2 and 3, global average pool,
/// dense head.
///
/// Downsampling blocks pool first (2x2 average) and then run stride-1 convs;
/// their shortcut is a 1x1 projection of the pooled input. This keeps every
/// convolution exactly tiling even-sized inputs.
struct ModelConfig {
  int n_classes = 2;
  int input_side = 96;
  std::array<int, 3> widths{16, 32, 64};
  int blocks_per_stage = 2;
  bool stem_pool = true;
  std::uint64_t seed = 0;
  std::uint64_t head_seed = 0;

  /// Spatial side of the stage-3 feature map.
  int feature_side() const { return input_side / ((stem_pool ? 2 : 1) * 4); }
  /// input_side must be a multiple of this.
  int side_multiple() const { return stem_pool ? 8 : 4; }
  bool operator==(const ModelConfig&) const = default;
};

struct Parameter {
  std::string name;
  Tensor<float> value;
  LayerGroup group = LayerGroup::Early;
  bool trainable = true;

  bool is_head() const { return name.starts_with("head."); }
};

/// MicroResNet classifier. Copies are deep.
class Model {
 public:
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;
  bool has_parameter(std::string_view name) const;

  /// [N x 3 x S x S] -> logits [N x n_classes]. Records onto the active tape
  /// for every trainable parameter.
  Tensor<float> forward(const Tensor<float>& batch) const;

  /// Pooled stage-3 features [N x widths[2]].
  Tensor<float> features(const Tensor<float>& batch) const;

 private:
  friend Model build_model(const ModelConfig& config);
  friend Model replace_head(const Model& model, int n_classes, std::uint64_t seed);
  friend Model assemble_model(const ModelConfig&, std::vector<Parameter>);

  explicit Model(ModelConfig config) : config_(config) {}
  void add_parameter(std::string name, Tensor<float> value, LayerGroup group);
  void reindex();

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Builds a He-initialized model; deterministic in `config.seed` (body) and
/// `config.head_seed` (dense head).
Model build_model(const ModelConfig& config);

Model build_model(int n_classes, int input_side, std::array<int, 3> widths, int blocks_per_stage,
                  std::uint64_t seed);

/// Copy of `model` with a freshly initialized `n_classes`-way head.
Model replace_head(const Model& model, int n_classes, std::uint64_t seed);

/// Marks parameters trainable. With `freeze_body_keep_head` only the dense
/// head trains; otherwise every parameter outside `frozen_groups` trains.
void set_trainable(Model& model, const std::set<LayerGroup>& frozen_groups,
                   bool freeze_body_keep_head);

/// Rebuilds a model from metadata plus parameter values, validating names and
/// shapes against the architecture the metadata describes.
Model assemble_model(const ModelConfig& config, std::vector<Parameter> parameters);

// ---- checkpoints ----

/// Checkpoint file layout, all integers little-endian:
///
///   char[8]  magic "SSTCKPT1"
///   u32      format version (1)
///   u32      metadata length, then that many bytes of JSON model metadata
///   u32      tensor count
///   per tensor: u32 name length, name bytes, u32 rank, u64 extents[rank],
///               u64 byte offset into the payload
///   u64      payload length, then raw little-endian float32 values
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, VersionMismatch, Truncated, ShapeMismatch, Malformed };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace spiralscope
