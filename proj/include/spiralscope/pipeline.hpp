#pragma once

#include "spiralscope/augment.hpp"
#include "spiralscope/nn.hpp"
#include "spiralscope/optim.hpp"
#include "spiralscope/spiralgen.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace spiralscope {

enum class Task { PdVsControl, PdEtControl };

std::string_view to_string(Task task);
/// Accepts "pd-vs-control" / "pd-et-control".
Task task_from_string(std::string_view name);
int task_classes(Task task);
std::vector<std::string> task_class_names(Task task);
/// Class index of `d` under `task`, or nullopt when the task excludes it
/// (ET is dropped for PD vs Control).
std::optional<int> task_label(Task task, Diagnosis d);

struct TrainConfig {
  Task task = Task::PdEtControl;
  int head_epochs = 5;
  int finetune_epochs = 3;
  double head_lr = 1e-2;
  GroupLRConfig group_lrs;
  /// Master switch for the learning-rate policies. Off means one constant
  /// `baseline_lr` for every group in both phases.
  bool hpo = true;
  bool cyclical = true;
  bool discriminative = true;
  double baseline_lr = 1e-2;
  double base_ratio = 0.1;
  double momentum = 0.9;
  /// Global gradient-norm ceiling for both phases; 0 disables clipping.
  double clip_norm = 1.0;
  int batch_size = 32;
  int k = 5;
  int repeats = 1;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Labeled images for one task, kept in 8-bit form.
struct Dataset {
  std::vector<Image8> images;
  std::vector<int> labels;
  int n_classes = 0;
  std::vector<std::string> class_names;

  int size() const { return static_cast<int>(labels.size()); }
};

Dataset make_task_dataset(const std::vector<SpiralSample>& samples, Task task);
Dataset load_task_dataset(const DatasetManifest& manifest, const std::filesystem::path& dir, Task task);

// ---- splitting and metrics ----

struct Split {
  std::vector<int> train;
  std::vector<int> test;
};

/// Stratified k-fold split: each class is shuffled and dealt round-robin into
/// the folds, continuing the rotation across classes so fold sizes differ by
/// at most one. Throws if a present class has fewer than k samples.
std::vector<Split> kfold_split(int n, int k, std::uint64_t seed, std::span<const int> labels);

std::string split_digest(const Split& split);

struct ConfusionMatrix {
  Eigen::MatrixXi counts;
  /// Row-normalized by true-label totals; empty rows stay zero.
  Eigen::MatrixXd normalized;
  std::vector<bool> empty_rows;
};

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels,
                                 int n_classes);

// ---- training ----

struct FoldReport {
  int fold = 0;
  int repeat = 0;
  int n_train = 0;
  int n_test = 0;
  double accuracy = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  Eigen::MatrixXi confusion;
  std::string split_digest;
  std::string augment_digest;
  std::vector<double> head_losses;
  std::vector<double> finetune_losses;
};

enum class Phase { Head, Finetune };

/// Optional hooks into transfer_train, used by tests and diagnostics.
struct TrainObserver {
  std::function<void(Phase, const Model&)> before_phase;
  std::function<void(Phase, const Model&)> after_phase;
  std::function<void(Phase, long step, const Model&)> after_step;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TransferResult {
  Model model;
  FoldReport report;
};

/// Learning-rate schedules for both phases given the config and epoch length.
std::pair<Schedule, Schedule> phase_schedules(const TrainConfig& config, long steps_per_epoch);

/// Replace head -> freeze body -> train head -> unfreeze -> fine-tune with
/// per-group rates -> evaluate on `test`.
TransferResult transfer_train(const Model& body, const Dataset& data, const Split& split,
                              const TrainConfig& config, std::uint64_t fold_seed,
                              const TrainObserver* observer = nullptr);

/// Predicted class for every index, evaluation preprocessing only.
std::vector<int> predict(const Model& model, const Dataset& data, std::span<const int> indices,
                         const AugmentConfig& augment, int batch_size = 64);

struct CVReport {
  TrainConfig config;
  std::vector<std::string> class_names;
  std::vector<FoldReport> folds;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::vector<double> repeat_means;
  double repeat_std = 0.0;
  Eigen::MatrixXd normalized_confusion;
  double elapsed_seconds = 0.0;
};

/// Produces predictions for one fold. The default runner is transfer_train;
/// tests substitute stubs.
using FoldRunner = std::function<FoldReport(const Dataset&, const Split&, const TrainConfig&,
                                            std::uint64_t fold_seed)>;

FoldReport fold_report_from_predictions(std::span<const int> predictions, const Dataset& data,
                                        const Split& split);

std::uint64_t fold_seed(std::uint64_t seed, int repeat, int fold);

CVReport cross_validate(const Dataset& data, const TrainConfig& config, const FoldRunner& runner);
CVReport cross_validate(const Dataset& data, const Model& body, const TrainConfig& config);

/// Fold-level aggregation shared by cross_validate and report loading.
void summarize(CVReport& report);

struct AblationReport {
  CVReport with_hpo;
  CVReport without_hpo;
  double delta = 0.0;
  bool splits_identical = false;
  bool augment_identical = false;
};

/// Arm A: cyclical + discriminative rates. Arm B: make_unoptimized_baseline.
/// Seeds, splits and augmentation streams are shared.
AblationReport ablate(const Dataset& data, const TrainConfig& config, const FoldRunner& runner);
AblationReport ablate(const Dataset& data, const Model& body, const TrainConfig& config);

// ---- surrogate pretraining ----

inline constexpr int kSurrogateClasses = 10;

struct SurrogateConfig {
  int per_class = 100;
  int input_side = 96;
  std::array<int, 3> widths{16, 32, 64};
  int blocks_per_stage = 2;
  RasterConfig raster;
  int max_epochs = 30;
  double max_lr = 0.05;
  double clip_norm = 1.0;
  int batch_size = 32;
  double target_accuracy = 0.9;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
  int threads = 1;
};

nlohmann::json to_json(const SurrogateConfig& config);
SurrogateConfig surrogate_config_from_json(const nlohmann::json& j, SurrogateConfig base = {});

/// Strokes for one primitive-shape image of class `label` in [0, 10):
/// circle, concentric rings, triangle, square, pentagon, hexagon, star,
/// horizontal / vertical / diagonal line gratings.
std::vector<Polyline> surrogate_shape(int label, const RasterConfig& raster, Rng& rng);
std::string_view surrogate_class_name(int label);

struct SurrogateResult {
  Model model;
  std::vector<double> train_accuracy;
  std::vector<double> losses;
  double holdout_accuracy = 0.0;
};

class PretrainError : public std::runtime_error {
 public:
  PretrainError(const std::string& what, std::vector<double> curve)
      : std::runtime_error(what), curve_(std::move(curve)) {}
  const std::vector<double>& learning_curve() const { return curve_; }

 private:
  std::vector<double> curve_;
};

/// Trains MicroResNet on the primitive-shape task until training accuracy
/// reaches `target_accuracy`; throws PretrainError with the learning curve if
/// `max_epochs` is exhausted first.
SurrogateResult pretrain_surrogate(const SurrogateConfig& config);

}  // namespace spiralscope
