#include "spiralscope/pipeline.hpp"

#include "spiralscope/digest.hpp"
#include "spiralscope/ops.hpp"
#include "training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <sstream>

namespace spiralscope {

namespace detail {

double train_step(Model& model, OptimizerState& state, const Schedule& schedule,
                  const Tensor<float>& batch, std::span<const int> labels, std::vector<int>* predictions) {
  Tape<float> tape;
  double loss_value = 0.0;
  {
    TapeScope<float> scope(tape);
    Tensor<float> logits = model.forward(batch);
    if (predictions) *predictions = argmax_rows(logits);
    Tensor<float> loss = softmax_cross_entropy(logits, labels);
    loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw NumericError("loss is " + std::to_string(loss_value) + " at step " + std::to_string(state.step));
    }
    backward(tape, loss);
  }
  sgd_step(model, state, schedule);
  return loss_value;
}

std::vector<int> argmax_rows(const Tensor<float>& logits) {
  const Index n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const float* row = logits.data() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

void shuffle(std::vector<int>& values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(values[i - 1], values[j]);
  }
}

}  // namespace detail

namespace {

constexpr std::uint64_t kHeadTag = 0x68656164;
constexpr std::uint64_t kShuffleTag = 0x73687566;
constexpr std::uint64_t kAugmentTag = 0x61756780;

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

std::uint64_t hash_trace(const AugmentTrace& t, std::uint64_t h) {
  auto bits = [](double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, sizeof u);
    return u;
  };
  h = fnv1a_value(static_cast<std::uint64_t>(t.flipped) | (static_cast<std::uint64_t>(t.contrasted) << 1) |
                      (static_cast<std::uint64_t>(t.zoomed) << 2),
                  h);
  h = fnv1a_value(bits(t.contrast_factor), h);
  h = fnv1a_value(bits(t.zoom), h);
  h = fnv1a_value(static_cast<std::uint64_t>(t.offset_x), h);
  return fnv1a_value(static_cast<std::uint64_t>(t.offset_y), h);
}

struct EpochContext {
  const Dataset& data;
  const TrainConfig& config;
  std::uint64_t fold_seed;
  Phase phase;
  const TrainObserver* observer;
};

/// One pass over `train` in a fold- and epoch-specific order. Returns the
/// mean batch loss and folds the augmentation draws into `digest`.
double run_epoch(Model& model, OptimizerState& state, const Schedule& schedule, const EpochContext& ctx,
                 const std::vector<int>& train, int epoch, std::uint64_t& digest) {
  const auto phase_tag = static_cast<std::uint64_t>(ctx.phase);
  std::vector<int> order = train;
  Rng order_rng = make_rng({ctx.fold_seed, kShuffleTag, phase_tag, static_cast<std::uint64_t>(epoch)});
  detail::shuffle(order, order_rng);

  double loss_sum = 0.0;
  int batches = 0;
  const auto batch_size = static_cast<std::size_t>(ctx.config.batch_size);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<ImageTensor> images;
    std::vector<int> labels;
    images.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      const int idx = order[i];
      Rng rng = make_rng({ctx.fold_seed, kAugmentTag, phase_tag, static_cast<std::uint64_t>(epoch),
                          static_cast<std::uint64_t>(idx)});
      AugmentTrace trace;
      images.push_back(prepare_image(to_tensor(ctx.data.images[idx]), ctx.config.augment,
                                     PipelineMode::Train, rng, &trace));
      digest = fnv1a_value(static_cast<std::uint64_t>(idx), hash_trace(trace, digest));
      labels.push_back(ctx.data.labels[idx]);
    }
    try {
      loss_sum += detail::train_step(model, state, schedule, make_batch(images), labels);
    } catch (const NumericError& e) {
      std::ostringstream msg;
      msg << "training diverged in " << (ctx.phase == Phase::Head ? "head" : "fine-tune") << " phase, epoch "
          << epoch << ", batch " << batches << ": " << e.what();
      throw TrainingError(msg.str());
    }
    ++batches;
    if (ctx.observer && ctx.observer->after_step) ctx.observer->after_step(ctx.phase, state.step, model);
  }
  return batches ? loss_sum / batches : 0.0;
}

void require_disjoint(const Split& split, int n) {
  std::vector<char> in_test(static_cast<std::size_t>(n), 0);
  for (int i : split.test) {
    if (i < 0 || i >= n) throw std::out_of_range("split index " + std::to_string(i) + " out of range");
    in_test[i] = 1;
  }
  for (int i : split.train) {
    if (i < 0 || i >= n) throw std::out_of_range("split index " + std::to_string(i) + " out of range");
    if (in_test[i]) throw std::invalid_argument("index " + std::to_string(i) + " is in both train and test");
  }
}

}  // namespace

// ---- tasks ----

std::string_view to_string(Task task) {
  return task == Task::PdVsControl ? "pd-vs-control" : "pd-et-control";
}

Task task_from_string(std::string_view name) {
  if (name == "pd-vs-control" || name == "PD_vs_Control") return Task::PdVsControl;
  if (name == "pd-et-control" || name == "PD_ET_Control") return Task::PdEtControl;
  throw std::invalid_argument("unknown task '" + std::string(name) + "' (expected pd-vs-control or pd-et-control)");
}

int task_classes(Task task) { return task == Task::PdVsControl ? 2 : 3; }

std::vector<std::string> task_class_names(Task task) {
  if (task == Task::PdVsControl) return {"PD", "Control"};
  return {"PD", "ET", "Control"};
}

std::optional<int> task_label(Task task, Diagnosis d) {
  if (task == Task::PdEtControl) return static_cast<int>(d);
  switch (d) {
    case Diagnosis::PD:
      return 0;
    case Diagnosis::Control:
      return 1;
    case Diagnosis::ET:
      return std::nullopt;
  }
  return std::nullopt;
}

// ---- config ----

void TrainConfig::validate() const {
  if (head_epochs < 1) throw std::invalid_argument("head_epochs must be >= 1");
  if (finetune_epochs < 0) throw std::invalid_argument("finetune_epochs must be >= 0");
  if (k < 2) throw std::invalid_argument("k must be >= 2");
  if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
  for (double lr : {head_lr, group_lrs.early, group_lrs.middle, group_lrs.late, baseline_lr}) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rates must be positive");
  }
  if (!(base_ratio > 0.0 && base_ratio <= 1.0)) throw std::invalid_argument("base_ratio must be in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip_norm must be >= 0");
  augment.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"task", std::string(to_string(c.task))},
          {"head_epochs", c.head_epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"head_lr", c.head_lr},
          {"group_lrs", {{"early", c.group_lrs.early}, {"middle", c.group_lrs.middle}, {"late", c.group_lrs.late}}},
          {"hpo", c.hpo},
          {"cyclical", c.cyclical},
          {"discriminative", c.discriminative},
          {"baseline_lr", c.baseline_lr},
          {"base_ratio", c.base_ratio},
          {"momentum", c.momentum},
          {"clip_norm", c.clip_norm},
          {"batch_size", c.batch_size},
          {"k", c.k},
          {"repeats", c.repeats},
          {"augment", to_json(c.augment)},
          {"seed", c.seed},
          {"threads", c.threads}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (j.contains("task")) c.task = task_from_string(j["task"].get<std::string>());
  c.head_epochs = j.value("head_epochs", c.head_epochs);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.head_lr = j.value("head_lr", c.head_lr);
  if (j.contains("group_lrs")) {
    const auto& g = j["group_lrs"];
    c.group_lrs.early = g.value("early", c.group_lrs.early);
    c.group_lrs.middle = g.value("middle", c.group_lrs.middle);
    c.group_lrs.late = g.value("late", c.group_lrs.late);
  }
  c.hpo = j.value("hpo", c.hpo);
  c.cyclical = j.value("cyclical", c.cyclical);
  c.discriminative = j.value("discriminative", c.discriminative);
  c.baseline_lr = j.value("baseline_lr", c.baseline_lr);
  c.base_ratio = j.value("base_ratio", c.base_ratio);
  c.momentum = j.value("momentum", c.momentum);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.k = j.value("k", c.k);
  c.repeats = j.value("repeats", c.repeats);
  if (j.contains("augment")) {
    nlohmann::json merged = to_json(c.augment);
    merged.update(j["augment"]);
    c.augment = augment_config_from_json(merged);
  }
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  c.validate();
  return c;
}

// ---- datasets ----

Dataset make_task_dataset(const std::vector<SpiralSample>& samples, Task task) {
  Dataset out;
  out.n_classes = task_classes(task);
  out.class_names = task_class_names(task);
  for (const SpiralSample& s : samples) {
    if (auto label = task_label(task, s.label)) {
      out.images.push_back(to_image8(s.image));
      out.labels.push_back(*label);
    }
  }
  return out;
}

Dataset load_task_dataset(const DatasetManifest& manifest, const std::filesystem::path& dir, Task task) {
  Dataset out;
  out.n_classes = task_classes(task);
  out.class_names = task_class_names(task);
  for (const ManifestEntry& e : manifest.entries) {
    if (auto label = task_label(task, e.label)) {
      out.images.push_back(read_ppm(dir / e.path));
      out.labels.push_back(*label);
    }
  }
  if (out.images.empty()) throw std::invalid_argument("manifest has no samples for task " + std::string(to_string(task)));
  return out;
}

// ---- splitting and metrics ----

std::vector<Split> kfold_split(int n, int k, std::uint64_t seed, std::span<const int> labels) {
  if (k < 2) throw std::invalid_argument("k must be >= 2");
  if (n < k) throw std::invalid_argument("need n >= k (n=" + std::to_string(n) + ", k=" + std::to_string(k) + ")");
  if (static_cast<int>(labels.size()) != n) throw std::invalid_argument("labels must have n entries");

  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
  for (const auto& [label, members] : by_class) {
    if (static_cast<int>(members.size()) < k) {
      throw std::invalid_argument("class " + std::to_string(label) + " has " + std::to_string(members.size()) +
                                  " samples, fewer than k=" + std::to_string(k));
    }
  }

  std::vector<int> fold_of(static_cast<std::size_t>(n));
  Rng rng = make_rng({seed, kShuffleTag});
  int dealt = 0;
  for (auto& [label, members] : by_class) {
    detail::shuffle(members, rng);
    for (int idx : members) fold_of[idx] = dealt++ % k;
  }

  std::vector<Split> splits(static_cast<std::size_t>(k));
  for (int i = 0; i < n; ++i) {
    for (int f = 0; f < k; ++f) (fold_of[i] == f ? splits[f].test : splits[f].train).push_back(i);
  }
  return splits;
}

std::string split_digest(const Split& split) {
  std::uint64_t h = fnv1a("split");
  for (int i : split.train) h = fnv1a_value(static_cast<std::uint64_t>(i), h);
  h = fnv1a("|", h);
  for (int i : split.test) h = fnv1a_value(static_cast<std::uint64_t>(i), h);
  return hex64(h);
}

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels, int n_classes) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("predictions and labels differ in length (" + std::to_string(predictions.size()) +
                                " vs " + std::to_string(labels.size()) + ")");
  }
  if (n_classes < 1) throw std::invalid_argument("n_classes must be positive");
  ConfusionMatrix m;
  m.counts = Eigen::MatrixXi::Zero(n_classes, n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || t >= n_classes || p < 0 || p >= n_classes) {
      throw std::out_of_range("class index outside [0, " + std::to_string(n_classes) + ") at position " +
                              std::to_string(i));
    }
    ++m.counts(t, p);
  }
  m.normalized = Eigen::MatrixXd::Zero(n_classes, n_classes);
  m.empty_rows.assign(static_cast<std::size_t>(n_classes), false);
  for (int r = 0; r < n_classes; ++r) {
    const int total = m.counts.row(r).sum();
    if (total == 0) {
      m.empty_rows[r] = true;
      continue;
    }
    m.normalized.row(r) = m.counts.row(r).cast<double>() / static_cast<double>(total);
  }
  return m;
}

// ---- training ----

std::pair<Schedule, Schedule> phase_schedules(const TrainConfig& c, long steps_per_epoch) {
  if (!c.hpo) {
    const FixedSchedule fixed = make_unoptimized_baseline(c.baseline_lr);
    return {fixed, fixed};
  }
  const long cycle = std::max(2L, steps_per_epoch);
  const GroupLRConfig head = GroupLRConfig::uniform(c.head_lr);
  const GroupLRConfig tune = c.discriminative ? c.group_lrs : GroupLRConfig::uniform(c.group_lrs.late);
  if (c.cyclical) return {make_cyclical(head, cycle, c.base_ratio), make_cyclical(tune, cycle, c.base_ratio)};
  return {FixedSchedule{head}, FixedSchedule{tune}};
}

std::vector<int> predict(const Model& model, const Dataset& data, std::span<const int> indices,
                         const AugmentConfig& augment, int batch_size) {
  std::vector<int> out;
  out.reserve(indices.size());
  Rng unused(0);
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<ImageTensor> images;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(prepare_image(to_tensor(data.images[indices[i]]), augment, PipelineMode::Eval, unused));
    }
    const auto preds = detail::argmax_rows(model.forward(make_batch(images)));
    out.insert(out.end(), preds.begin(), preds.end());
  }
  return out;
}

FoldReport fold_report_from_predictions(std::span<const int> predictions, const Dataset& data, const Split& split) {
  std::vector<int> truth;
  truth.reserve(split.test.size());
  for (int i : split.test) truth.push_back(data.labels[i]);
  const ConfusionMatrix cm = confusion_matrix(predictions, truth, data.n_classes);

  FoldReport r;
  r.n_train = static_cast<int>(split.train.size());
  r.n_test = static_cast<int>(split.test.size());
  r.confusion = cm.counts;
  r.accuracy = r.n_test ? static_cast<double>(cm.counts.trace()) / r.n_test : 0.0;
  for (int c = 0; c < data.n_classes; ++c) {
    const int tp = cm.counts(c, c), predicted = cm.counts.col(c).sum(), actual = cm.counts.row(c).sum();
    r.precision.push_back(predicted ? static_cast<double>(tp) / predicted : 0.0);
    r.recall.push_back(actual ? static_cast<double>(tp) / actual : 0.0);
  }
  r.split_digest = split_digest(split);
  return r;
}

TransferResult transfer_train(const Model& body, const Dataset& data, const Split& split, const TrainConfig& config,
                              std::uint64_t fold_seed, const TrainObserver* observer) {
  config.validate();
  require_disjoint(split, data.size());
  if (split.train.empty() || split.test.empty()) throw std::invalid_argument("train and test sets must be non-empty");
  if (body.config().input_side != config.augment.resize_target) {
    throw std::invalid_argument("model input side " + std::to_string(body.config().input_side) +
                                " differs from augment.resize_target " +
                                std::to_string(config.augment.resize_target));
  }

  Model model = replace_head(body, data.n_classes, mix_seed({fold_seed, kHeadTag}));
  const long steps_per_epoch =
      (static_cast<long>(split.train.size()) + config.batch_size - 1) / config.batch_size;
  const auto [head_schedule, tune_schedule] = phase_schedules(config, steps_per_epoch);
  std::uint64_t digest = fnv1a("augment");
  FoldReport report;

  set_trainable(model, {}, true);
  {
    if (observer && observer->before_phase) observer->before_phase(Phase::Head, model);
    OptimizerState state;
    state.momentum = config.momentum;
    state.clip_norm = config.clip_norm;
    const EpochContext ctx{data, config, fold_seed, Phase::Head, observer};
    for (int e = 0; e < config.head_epochs; ++e) {
      report.head_losses.push_back(run_epoch(model, state, head_schedule, ctx, split.train, e, digest));
    }
    if (observer && observer->after_phase) observer->after_phase(Phase::Head, model);
  }

  set_trainable(model, {}, false);
  if (config.finetune_epochs > 0) {
    if (observer && observer->before_phase) observer->before_phase(Phase::Finetune, model);
    OptimizerState state;
    state.momentum = config.momentum;
    state.clip_norm = config.clip_norm;
    const EpochContext ctx{data, config, fold_seed, Phase::Finetune, observer};
    for (int e = 0; e < config.finetune_epochs; ++e) {
      report.finetune_losses.push_back(run_epoch(model, state, tune_schedule, ctx, split.train, e, digest));
    }
    if (observer && observer->after_phase) observer->after_phase(Phase::Finetune, model);
  }

  const auto preds = predict(model, data, split.test, config.augment);
  FoldReport scored = fold_report_from_predictions(preds, data, split);
  scored.head_losses = std::move(report.head_losses);
  scored.finetune_losses = std::move(report.finetune_losses);
  scored.augment_digest = hex64(digest);
  return {std::move(model), std::move(scored)};
}

std::uint64_t fold_seed(std::uint64_t seed, int repeat, int fold) {
  return mix_seed({seed, static_cast<std::uint64_t>(repeat), static_cast<std::uint64_t>(fold)});
}

void summarize(CVReport& r) {
  std::vector<double> accs;
  std::map<int, std::vector<double>> per_repeat;
  const int c = static_cast<int>(r.class_names.size());
  r.normalized_confusion = Eigen::MatrixXd::Zero(c, c);
  for (const FoldReport& f : r.folds) {
    accs.push_back(f.accuracy);
    per_repeat[f.repeat].push_back(f.accuracy);
    Eigen::MatrixXd norm = Eigen::MatrixXd::Zero(c, c);
    for (int row = 0; row < c; ++row) {
      const int total = f.confusion.row(row).sum();
      if (total > 0) norm.row(row) = f.confusion.row(row).cast<double>() / static_cast<double>(total);
    }
    r.normalized_confusion += norm;
  }
  if (!r.folds.empty()) r.normalized_confusion /= static_cast<double>(r.folds.size());
  r.mean_accuracy = accs.empty() ? 0.0 : std::accumulate(accs.begin(), accs.end(), 0.0) / accs.size();
  r.std_accuracy = sample_std(accs);
  r.repeat_means.clear();
  for (const auto& [repeat, xs] : per_repeat) {
    r.repeat_means.push_back(std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size());
  }
  r.repeat_std = sample_std(r.repeat_means);
}

CVReport cross_validate(const Dataset& data, const TrainConfig& config, const FoldRunner& runner) {
  config.validate();
  if (data.n_classes != task_classes(config.task)) {
    throw std::invalid_argument("dataset has " + std::to_string(data.n_classes) + " classes but task " +
                                std::string(to_string(config.task)) + " needs " +
                                std::to_string(task_classes(config.task)));
  }
  const auto started = std::chrono::steady_clock::now();
  const int k = config.k;
  std::vector<std::vector<Split>> splits;
  for (int r = 0; r < config.repeats; ++r) {
    splits.push_back(kfold_split(data.size(), k, mix_seed({config.seed, static_cast<std::uint64_t>(r)}), data.labels));
  }

  CVReport report;
  report.config = config;
  report.class_names = data.class_names;
  report.folds.resize(static_cast<std::size_t>(k * config.repeats));
  parallel_for(k * config.repeats, config.threads, [&](int job) {
    const int r = job / k, f = job % k;
    const Split& split = splits[r][f];
    FoldReport fr;
    try {
      fr = runner(data, split, config, fold_seed(config.seed, r, f));
    } catch (const std::exception& e) {
      throw TrainingError("fold " + std::to_string(f) + " (repeat " + std::to_string(r) + "): " + e.what());
    }
    fr.fold = f;
    fr.repeat = r;
    if (fr.split_digest.empty()) fr.split_digest = split_digest(split);
    report.folds[job] = std::move(fr);
  });
  summarize(report);
  report.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

CVReport cross_validate(const Dataset& data, const Model& body, const TrainConfig& config) {
  return cross_validate(data, config, [&body](const Dataset& d, const Split& s, const TrainConfig& c, std::uint64_t seed) {
    return transfer_train(body, d, s, c, seed).report;
  });
}

AblationReport ablate(const Dataset& data, const TrainConfig& config, const FoldRunner& runner) {
  TrainConfig arm_a = config, arm_b = config;
  arm_a.hpo = true;
  arm_a.cyclical = true;
  arm_a.discriminative = true;
  arm_b.hpo = false;

  AblationReport out;
  out.with_hpo = cross_validate(data, arm_a, runner);
  out.without_hpo = cross_validate(data, arm_b, runner);
  out.delta = out.with_hpo.mean_accuracy - out.without_hpo.mean_accuracy;
  out.splits_identical = out.with_hpo.folds.size() == out.without_hpo.folds.size();
  out.augment_identical = out.splits_identical;
  for (std::size_t i = 0; out.splits_identical && i < out.with_hpo.folds.size(); ++i) {
    const FoldReport &a = out.with_hpo.folds[i], &b = out.without_hpo.folds[i];
    out.splits_identical = a.split_digest == b.split_digest;
    out.augment_identical = out.augment_identical && a.augment_digest == b.augment_digest;
  }
  out.augment_identical = out.augment_identical && out.splits_identical;
  return out;
}

AblationReport ablate(const Dataset& data, const Model& body, const TrainConfig& config) {
  return ablate(data, config, [&body](const Dataset& d, const Split& s, const TrainConfig& c, std::uint64_t seed) {
    return transfer_train(body, d, s, c, seed).report;
  });
}

}  // namespace spiralscope
