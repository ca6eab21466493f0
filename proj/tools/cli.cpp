#include "cli.hpp"

#include "spiralscope/digest.hpp"
#include "spiralscope/pipeline.hpp"
#include "spiralscope/report.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

namespace spiralscope {
namespace {

struct CommonOptions {
  std::string out;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string config_path;
  std::vector<std::string> sets;
};

int default_threads() {
  if (const char* env = std::getenv("SPIRALSCOPE_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    std::cerr << "warning: ignoring SPIRALSCOPE_THREADS=" << env << '\n';
  }
  return 1;
}

/// Applies `key=value` overrides to a JSON document. Dotted keys address
/// nested objects; values parse as JSON when possible and as strings otherwise.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    std::string pointer = "/" + s.substr(0, eq);
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    const std::string raw = s.substr(eq + 1);
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
      value = raw;
    }
    const nlohmann::json::json_pointer ptr(pointer);
    if (!doc.contains(ptr)) throw std::invalid_argument("--set: unknown config key '" + s.substr(0, eq) + "'");
    doc[ptr] = value;
  }
}

nlohmann::json resolve(nlohmann::json defaults, const CommonOptions& opt) {
  if (!opt.config_path.empty()) defaults.merge_patch(read_json(opt.config_path));
  apply_overrides(defaults, opt.sets);
  return defaults;
}

ClassCounts parse_counts(const std::string& text) {
  std::vector<int> values;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    const int v = std::stoi(item, &used);
    if (used != item.size() || v < 0) throw std::invalid_argument("bad --counts entry '" + item + "'");
    values.push_back(v);
  }
  if (values.size() != 3) throw std::invalid_argument("--counts expects PD,ET,Control");
  return {values[0], values[1], values[2]};
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a(bytes));
}

void add_common(CLI::App* cmd, CommonOptions& opt, bool out_required = true) {
  auto* out = cmd->add_option("--out", opt.out, "Output directory");
  if (out_required) out->required();
  cmd->add_option("--seed", opt.seed, "Global seed");
  cmd->add_option("--threads", opt.threads, "Worker threads (default: SPIRALSCOPE_THREADS or 1)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--config", opt.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", opt.sets, "Override a config key, key=value (repeatable)");
}

std::filesystem::path prepare_out(const std::string& out) {
  std::filesystem::path dir(out);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_run(const std::filesystem::path& dir, const std::string& command, nlohmann::json body) {
  body["command"] = command;
  body["artifact_version"] = kArtifactVersion;
  write_json(body, dir / "run.json");
}

int cmd_generate(const CommonOptions& opt, const std::string& counts_text) {
  const ClassCounts counts = parse_counts(counts_text);
  nlohmann::json resolved = resolve(to_json(default_generator_config()), opt);
  const GeneratorConfig config = generator_config_from_json(resolved);
  const auto dir = prepare_out(opt.out);
  const DatasetManifest manifest = generate_dataset(counts, config, opt.seed, dir, opt.threads);

  write_run(dir, "generate",
            {{"seed", opt.seed},
             {"counts", {counts.pd, counts.et, counts.control}},
             {"threads", opt.threads},
             {"generator", to_json(config)},
             {"manifest_digest", file_digest(dir / "manifest.json")}});
  std::cout << "PD " << counts.pd << "\nET " << counts.et << "\nControl " << counts.control << "\ntotal "
            << manifest.entries.size() << " images in " << dir.string() << '\n';
  return 0;
}

int cmd_pretrain(const CommonOptions& opt, bool seed_given) {
  nlohmann::json resolved = resolve(to_json(SurrogateConfig{}), opt);
  SurrogateConfig config = surrogate_config_from_json(resolved);
  if (seed_given) config.seed = opt.seed;
  config.threads = opt.threads;
  const auto dir = prepare_out(opt.out);
  try {
    const SurrogateResult result = pretrain_surrogate(config);
    save_checkpoint(result.model, dir / "surrogate.ckpt");
    write_run(dir, "pretrain",
              {{"config", to_json(config)},
               {"train_accuracy", result.train_accuracy},
               {"losses", result.losses},
               {"holdout_accuracy", result.holdout_accuracy},
               {"checkpoint", "surrogate.ckpt"},
               {"checkpoint_digest", file_digest(dir / "surrogate.ckpt")}});
    std::cout << "surrogate trained for " << result.train_accuracy.size() << " epochs, train accuracy "
              << result.train_accuracy.back() << ", holdout accuracy " << result.holdout_accuracy << '\n'
              << "checkpoint " << (dir / "surrogate.ckpt").string() << '\n';
  } catch (const PretrainError& e) {
    std::cerr << "error: " << e.what() << "\nlearning curve:";
    for (double a : e.learning_curve()) std::cerr << ' ' << a;
    std::cerr << '\n';
    return 1;
  }
  return 0;
}

struct TrainOptions {
  std::string data;
  std::string checkpoint;
  bool from_scratch = false;
  std::string task;
  int k = 0;
  int repeats = 0;
};

struct TrainInputs {
  TrainConfig config;
  Dataset data;
  Model body;
  nlohmann::json echo;
};

TrainInputs load_train_inputs(const CommonOptions& opt, const TrainOptions& t, bool seed_given) {
  nlohmann::json resolved = resolve(to_json(TrainConfig{}), opt);
  if (!t.task.empty()) resolved["task"] = std::string(to_string(task_from_string(t.task)));
  if (t.k) resolved["k"] = t.k;
  if (t.repeats) resolved["repeats"] = t.repeats;
  if (seed_given) resolved["seed"] = opt.seed;
  resolved["threads"] = opt.threads;
  TrainConfig config = train_config_from_json(resolved);

  const std::filesystem::path manifest_path = std::filesystem::path(t.data) / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw std::invalid_argument("no manifest at " + manifest_path.string() + "; run `spiralscope generate` first");
  }
  const DatasetManifest manifest = read_manifest(manifest_path);
  Dataset data = load_task_dataset(manifest, t.data, config.task);

  nlohmann::json echo{{"config", to_json(config)},
                      {"data", t.data},
                      {"manifest_digest", file_digest(manifest_path)},
                      {"from_scratch", t.from_scratch}};
  std::optional<Model> body;
  if (t.from_scratch) {
    ModelConfig mc;
    mc.n_classes = task_classes(config.task);
    mc.input_side = config.augment.resize_target;
    mc.seed = config.seed;
    body = build_model(mc);
  } else {
    body = load_checkpoint(t.checkpoint);
    echo["checkpoint"] = t.checkpoint;
    echo["checkpoint_digest"] = file_digest(t.checkpoint);
    if (body->config().input_side != config.augment.resize_target) {
      throw std::invalid_argument("checkpoint expects " + std::to_string(body->config().input_side) +
                                  "px inputs but augment.resize_target is " +
                                  std::to_string(config.augment.resize_target) +
                                  "; pass --set augment.resize_target=" +
                                  std::to_string(body->config().input_side));
    }
  }
  return {config, std::move(data), std::move(*body), std::move(echo)};
}

int cmd_cv(const CommonOptions& opt, const TrainOptions& t, bool seed_given) {
  TrainInputs in = load_train_inputs(opt, t, seed_given);
  const auto dir = prepare_out(opt.out);
  const CVReport report = cross_validate(in.data, in.body, in.config);
  const nlohmann::json j = to_json(report);
  write_json(j, dir / "cv_report.json");
  in.echo["report"] = "cv_report.json";
  in.echo["report_digest"] = content_digest(j);
  write_run(dir, "cv", in.echo);
  std::cout << render_confusion_table(report);
  return 0;
}

int cmd_ablate(const CommonOptions& opt, const TrainOptions& t, bool seed_given) {
  TrainInputs in = load_train_inputs(opt, t, seed_given);
  const auto dir = prepare_out(opt.out);
  const AblationReport report = ablate(in.data, in.body, in.config);
  const nlohmann::json j = to_json(report);
  write_json(j, dir / "ablation_report.json");
  in.echo["report"] = "ablation_report.json";
  in.echo["report_digest"] = content_digest(j);
  write_run(dir, "ablate", in.echo);
  std::cout << "with lr optimization:    " << report.with_hpo.mean_accuracy << " +/- " << report.with_hpo.std_accuracy
            << "\nwithout lr optimization: " << report.without_hpo.mean_accuracy << " +/- "
            << report.without_hpo.std_accuracy << "\ndelta " << report.delta << "\nsplits identical "
            << std::boolalpha << report.splits_identical << ", augmentation identical " << report.augment_identical
            << '\n';
  return 0;
}

int cmd_report(const CommonOptions& opt, const std::string& input, const std::string& heatmap, int cell) {
  const nlohmann::json j = read_json(input);
  std::vector<std::pair<std::string, CVReport>> reports;
  if (j.contains("with_hpo")) {
    reports.emplace_back("with lr optimization", cv_report_from_json(j.at("with_hpo")));
    reports.emplace_back("without lr optimization", cv_report_from_json(j.at("without_hpo")));
  } else {
    reports.emplace_back("", cv_report_from_json(j));
  }
  for (const auto& [title, r] : reports) {
    if (!title.empty()) std::cout << "== " << title << " ==\n";
    std::cout << render_confusion_table(r);
  }
  nlohmann::json echo{{"input", input}, {"input_digest", content_digest(j)}, {"cell_size", cell}};
  if (!heatmap.empty()) {
    write_ppm(confusion_heatmap(reports.front().second.normalized_confusion, cell), heatmap);
    echo["heatmap"] = heatmap;
  }
  write_run(prepare_out(opt.out), "report", echo);
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Synthetic spiral-drawing tremor classification"};
  app.require_subcommand(1);
  std::function<int()> action;

  CommonOptions gen_opt, pre_opt, cv_opt, abl_opt, rep_opt;
  for (CommonOptions* o : {&gen_opt, &pre_opt, &cv_opt, &abl_opt, &rep_opt}) o->threads = default_threads();

  auto* gen = app.add_subcommand("generate", "Write a synthetic spiral dataset (PPM + manifest.json)");
  add_common(gen, gen_opt);
  std::string counts = "370,669,357";
  gen->add_option("--counts", counts, "Samples per class as PD,ET,Control");
  gen->callback([&] { action = [&] { return cmd_generate(gen_opt, counts); }; });

  auto* pre = app.add_subcommand("pretrain", "Pretrain the network body on the primitive-shape task");
  add_common(pre, pre_opt);
  pre->callback([&] { action = [&] { return cmd_pretrain(pre_opt, pre->count("--seed") > 0); }; });

  TrainOptions cv_t, abl_t;
  auto add_train = [](CLI::App* cmd, TrainOptions& t) {
    cmd->add_option("--data", t.data, "Dataset directory containing manifest.json")->required();
    auto* ckpt = cmd->add_option("--checkpoint", t.checkpoint, "Pretrained body checkpoint")->check(CLI::ExistingFile);
    auto* scratch = cmd->add_flag("--from-scratch", t.from_scratch, "Start from a randomly initialized body");
    ckpt->excludes(scratch);
    cmd->add_option("--task", t.task, "pd-vs-control | pd-et-control")
        ->check(CLI::IsMember({"pd-vs-control", "pd-et-control"}));
    cmd->add_option("--k", t.k, "Number of folds (>= 2)")->check(CLI::Range(2, 1000));
    cmd->add_option("--repeats", t.repeats, "Repeat the whole cross-validation R times")->check(CLI::PositiveNumber);
  };
  auto require_body = [](const TrainOptions& t) {
    if (t.checkpoint.empty() && !t.from_scratch) {
      throw CLI::ValidationError("--checkpoint", "give --checkpoint PATH (from `spiralscope pretrain`) or --from-scratch");
    }
  };

  auto* cv = app.add_subcommand("cv", "Run k-fold cross-validation of the transfer protocol");
  add_common(cv, cv_opt);
  add_train(cv, cv_t);
  cv->callback([&] {
    require_body(cv_t);
    action = [&] { return cmd_cv(cv_opt, cv_t, cv->count("--seed") > 0); };
  });

  auto* abl = app.add_subcommand("ablate", "Cross-validate with and without learning-rate optimization");
  add_common(abl, abl_opt);
  add_train(abl, abl_t);
  abl->callback([&] {
    require_body(abl_t);
    action = [&] { return cmd_ablate(abl_opt, abl_t, abl->count("--seed") > 0); };
  });

  auto* rep = app.add_subcommand("report", "Render a report's normalized confusion matrix");
  rep_opt.out = ".";
  add_common(rep, rep_opt, false);
  std::string input, heatmap;
  int cell = 32;
  rep->add_option("--in", input, "cv_report.json or ablation_report.json")->required()->check(CLI::ExistingFile);
  rep->add_option("--png-like", heatmap, "Also write the matrix as a PPM heatmap to this path");
  rep->add_option("--cell-size", cell, "Heatmap pixels per matrix cell")->check(CLI::PositiveNumber);
  rep->callback([&] { action = [&] { return cmd_report(rep_opt, input, heatmap, cell); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return action ? action() : 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("spiralscope");
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace spiralscope
