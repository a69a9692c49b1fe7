#include "fovea/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "fovea/rng.hpp"

namespace fs = std::filesystem;

namespace fovea {

std::vector<FoveationSpec> default_foveations() {
  std::vector<FoveationSpec> v;
  auto add = [&](FoveationKind kind, int n, std::uint64_t seed) {
    FoveationSpec s;
    s.variant = kind;
    s.n = n;
    s.seed = seed;
    v.push_back(s);
  };
  add(FoveationKind::ObjectCrop, 1, 0);
  add(FoveationKind::TenCrop, 10, 0);
  add(FoveationKind::RandomCrops, 3, 11);
  add(FoveationKind::SaliencyCrops, 3, 13);
  add(FoveationKind::ShiftCrops, 10, 17);
  add(FoveationKind::ShiftCrops, 1, 19);
  add(FoveationKind::Embed, 1, 0);
  return v;
}

std::string ExperimentConfig::checkpoint_path() const {
  return checkpoint.empty() ? (fs::path(output) / "model.fovn").string() : checkpoint;
}

std::string ExperimentConfig::transfer_checkpoint_path() const {
  return transfer_checkpoint.empty() ? (fs::path(output) / "model_transfer.fovn").string() : transfer_checkpoint;
}

bool ExperimentConfig::wants(const std::string& analysis) const {
  return std::find(analyses.begin(), analyses.end(), analysis) != analyses.end();
}

namespace {

void require_creatable(const std::string& path, const std::string& what) {
  if (path.empty()) throw Error(what + ": empty path");
  fs::path p = fs::absolute(path);
  while (!p.empty() && !fs::exists(p)) {
    if (p == p.parent_path()) break;
    p = p.parent_path();
  }
  if (!fs::exists(p) || !fs::is_directory(p)) {
    throw Error(what + " '" + path + "' cannot be created under a non-directory");
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (k_top < 1) throw Error("config: k_top must be >= 1");
  if (eval_size < 1) throw Error("config: eval_size must be >= 1");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw Error("config: train_fraction must lie in (0,1)");
  if (attacks.empty()) throw Error("config: at least one attack is required");
  if (ratio_images < 0) throw Error("config: ratio_images must be >= 0");
  for (const auto& a : analyses) {
    if (std::find(kAnalyses.begin(), kAnalyses.end(), a) == kAnalyses.end()) {
      throw Error("config: unknown analysis '" + a + "'");
    }
  }
  if (std::find(linearity_c.begin(), linearity_c.end(), 0.0) == linearity_c.end() ||
      std::find(linearity_c.begin(), linearity_c.end(), 1.0) == linearity_c.end() ||
      !std::is_sorted(linearity_c.begin(), linearity_c.end())) {
    throw Error("config: linearity_c must be ascending and contain 0 and 1");
  }
  for (const auto* v : {&relative_multipliers, &l1_targets, &linf_targets, &masked_l1_targets, &masked_linf_targets}) {
    if (!std::is_sorted(v->begin(), v->end())) throw Error("config: sweep values must be ascending");
  }
  for (const auto& f : foveations) f.validate();
  synthetic.validate();
  attack.validate();
  if (attack.k_top != k_top) throw Error("config: attack k_top differs from k_top");

  if (fs::exists(dataset)) {
    if (!fs::is_directory(dataset)) throw Error("config: dataset '" + dataset + "' is not a directory");
    if (!fs::exists(fs::path(dataset) / "labels.csv") && !fs::is_empty(dataset)) {
      throw Error("config: dataset '" + dataset + "' has no labels.csv");
    }
  } else {
    require_creatable(dataset, "dataset");
  }
  for (const auto& p : {checkpoint_path(), transfer_checkpoint_path()}) {
    if (fs::exists(p)) {
      if (!fs::is_regular_file(p)) throw Error("config: checkpoint '" + p + "' is not a file");
    } else {
      require_creatable(fs::path(p).parent_path().empty() ? "." : fs::path(p).parent_path().string(), "checkpoint");
    }
  }
  require_creatable(output, "output");
}

namespace {

template <typename T>
void read_into(const YAML::Node& node, const char* key, T& out) {
  if (node[key]) out = node[key].as<T>();
}

void check_keys(const YAML::Node& node, const std::vector<std::string>& allowed, const std::string& where) {
  if (!node) return;
  if (!node.IsMap()) throw ParseError(where + " must be a map");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ParseError("unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ParseError(std::string("experiment config: ") + e.what());
  }
  if (!root || root.IsNull()) return cfg;
  try {
    check_keys(root,
               {"dataset", "checkpoint", "transfer_checkpoint", "output", "seed", "k_top", "eval_size",
                "train_fraction", "attacks", "analyses", "foveations", "synthetic", "train", "attack", "ratio_images",
                "relative_multipliers", "l1_targets", "linf_targets", "masked_l1_targets", "masked_linf_targets",
                "linearity_c"},
               "experiment config");
    read_into(root, "dataset", cfg.dataset);
    read_into(root, "checkpoint", cfg.checkpoint);
    read_into(root, "transfer_checkpoint", cfg.transfer_checkpoint);
    read_into(root, "output", cfg.output);
    read_into(root, "seed", cfg.seed);
    read_into(root, "k_top", cfg.k_top);
    read_into(root, "eval_size", cfg.eval_size);
    read_into(root, "train_fraction", cfg.train_fraction);
    read_into(root, "ratio_images", cfg.ratio_images);
    read_into(root, "relative_multipliers", cfg.relative_multipliers);
    read_into(root, "l1_targets", cfg.l1_targets);
    read_into(root, "linf_targets", cfg.linf_targets);
    read_into(root, "masked_l1_targets", cfg.masked_l1_targets);
    read_into(root, "masked_linf_targets", cfg.masked_linf_targets);
    read_into(root, "linearity_c", cfg.linearity_c);
    read_into(root, "analyses", cfg.analyses);
    if (root["attacks"]) {
      cfg.attacks.clear();
      for (const auto& a : root["attacks"]) cfg.attacks.push_back(parse_attack_kind(a.as<std::string>()));
    }
    if (root["foveations"]) {
      YAML::Emitter e;
      e << root["foveations"];
      cfg.foveations = foveation_specs_from_text(e.c_str());
    }
    if (const auto s = root["synthetic"]) {
      check_keys(s, {"num_images", "height", "width", "num_classes", "scale_min", "scale_max", "clutter_density", "seed"},
                 "synthetic");
      read_into(s, "num_images", cfg.synthetic.num_images);
      read_into(s, "height", cfg.synthetic.height);
      read_into(s, "width", cfg.synthetic.width);
      read_into(s, "num_classes", cfg.synthetic.num_classes);
      read_into(s, "scale_min", cfg.synthetic.scale_min);
      read_into(s, "scale_max", cfg.synthetic.scale_max);
      read_into(s, "clutter_density", cfg.synthetic.clutter_density);
      read_into(s, "seed", cfg.synthetic.seed);
    }
    if (const auto t = root["train"]) {
      check_keys(t, {"epochs", "lr", "momentum", "batch", "seed", "weight_decay", "min_accuracy", "max_attempts"}, "train");
      read_into(t, "epochs", cfg.train.epochs);
      read_into(t, "lr", cfg.train.lr);
      read_into(t, "momentum", cfg.train.momentum);
      read_into(t, "batch", cfg.train.batch);
      read_into(t, "seed", cfg.train.seed);
      read_into(t, "weight_decay", cfg.train.weight_decay);
      read_into(t, "min_accuracy", cfg.train.min_accuracy);
      read_into(t, "max_attempts", cfg.train.max_attempts);
    }
    if (const auto a = root["attack"]) {
      check_keys(a,
                 {"eta", "max_iters", "lbfgs_memory", "grid_min", "grid_max", "grid_factor", "hard_cap",
                  "bisection_steps", "armijo_c", "initial_step", "max_step"},
                 "attack");
      read_into(a, "eta", cfg.attack.eta);
      read_into(a, "max_iters", cfg.attack.max_iters);
      read_into(a, "lbfgs_memory", cfg.attack.lbfgs_memory);
      read_into(a, "grid_min", cfg.attack.grid.min);
      read_into(a, "grid_max", cfg.attack.grid.max);
      read_into(a, "grid_factor", cfg.attack.grid.factor);
      read_into(a, "hard_cap", cfg.attack.hard_cap);
      read_into(a, "bisection_steps", cfg.attack.bisection_steps);
      read_into(a, "armijo_c", cfg.attack.armijo_c);
      read_into(a, "initial_step", cfg.attack.initial_step);
      read_into(a, "max_step", cfg.attack.max_step);
    }
  } catch (const YAML::Exception& e) {
    throw ParseError(std::string("experiment config: ") + e.what());
  }
  cfg.attack.k_top = cfg.k_top;
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string experiment_config_to_text(const ExperimentConfig& cfg) {
  YAML::Emitter e;
  e << YAML::BeginMap;
  e << YAML::Key << "dataset" << YAML::Value << cfg.dataset;
  e << YAML::Key << "checkpoint" << YAML::Value << cfg.checkpoint;
  e << YAML::Key << "transfer_checkpoint" << YAML::Value << cfg.transfer_checkpoint;
  e << YAML::Key << "output" << YAML::Value << cfg.output;
  e << YAML::Key << "seed" << YAML::Value << cfg.seed;
  e << YAML::Key << "k_top" << YAML::Value << cfg.k_top;
  e << YAML::Key << "eval_size" << YAML::Value << cfg.eval_size;
  e << YAML::Key << "train_fraction" << YAML::Value << cfg.train_fraction;
  e << YAML::Key << "ratio_images" << YAML::Value << cfg.ratio_images;
  e << YAML::Key << "attacks" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (auto a : cfg.attacks) e << to_string(a);
  e << YAML::EndSeq;
  e << YAML::Key << "analyses" << YAML::Value << YAML::Flow << cfg.analyses;
  e << YAML::Key << "relative_multipliers" << YAML::Value << YAML::Flow << cfg.relative_multipliers;
  e << YAML::Key << "l1_targets" << YAML::Value << YAML::Flow << cfg.l1_targets;
  e << YAML::Key << "linf_targets" << YAML::Value << YAML::Flow << cfg.linf_targets;
  e << YAML::Key << "masked_l1_targets" << YAML::Value << YAML::Flow << cfg.masked_l1_targets;
  e << YAML::Key << "masked_linf_targets" << YAML::Value << YAML::Flow << cfg.masked_linf_targets;
  e << YAML::Key << "linearity_c" << YAML::Value << YAML::Flow << cfg.linearity_c;
  const auto& s = cfg.synthetic;
  e << YAML::Key << "synthetic" << YAML::Value << YAML::BeginMap << YAML::Key << "num_images" << YAML::Value
    << s.num_images << YAML::Key << "height" << YAML::Value << s.height << YAML::Key << "width" << YAML::Value
    << s.width << YAML::Key << "num_classes" << YAML::Value << s.num_classes << YAML::Key << "scale_min"
    << YAML::Value << s.scale_min << YAML::Key << "scale_max" << YAML::Value << s.scale_max << YAML::Key
    << "clutter_density" << YAML::Value << s.clutter_density << YAML::Key << "seed" << YAML::Value << s.seed
    << YAML::EndMap;
  const auto& t = cfg.train;
  e << YAML::Key << "train" << YAML::Value << YAML::BeginMap << YAML::Key << "epochs" << YAML::Value << t.epochs
    << YAML::Key << "lr" << YAML::Value << t.lr << YAML::Key << "momentum" << YAML::Value << t.momentum << YAML::Key
    << "batch" << YAML::Value << t.batch << YAML::Key << "seed" << YAML::Value << t.seed << YAML::Key
    << "weight_decay" << YAML::Value << t.weight_decay << YAML::Key << "min_accuracy" << YAML::Value
    << t.min_accuracy << YAML::Key << "max_attempts" << YAML::Value << t.max_attempts << YAML::EndMap;
  const auto& a = cfg.attack;
  e << YAML::Key << "attack" << YAML::Value << YAML::BeginMap << YAML::Key << "eta" << YAML::Value << a.eta
    << YAML::Key << "max_iters" << YAML::Value << a.max_iters << YAML::Key << "lbfgs_memory" << YAML::Value
    << a.lbfgs_memory << YAML::Key << "grid_min" << YAML::Value << a.grid.min << YAML::Key << "grid_max"
    << YAML::Value << a.grid.max << YAML::Key << "grid_factor" << YAML::Value << a.grid.factor << YAML::Key
    << "hard_cap" << YAML::Value << a.hard_cap << YAML::Key << "bisection_steps" << YAML::Value << a.bisection_steps
    << YAML::Key << "armijo_c" << YAML::Value << a.armijo_c << YAML::Key << "initial_step" << YAML::Value
    << a.initial_step << YAML::Key << "max_step" << YAML::Value << a.max_step << YAML::EndMap;
  e << YAML::EndMap;
  std::string text = std::string(e.c_str()) + "\n";
  text += "foveations:\n";
  std::istringstream fov(foveation_specs_to_text(cfg.foveations));
  for (std::string line; std::getline(fov, line);) {
    if (!line.empty()) text += "  " + line + "\n";
  }
  return text;
}

void emit_report(const std::vector<ReportRow>& rows, const std::vector<std::string>& analysis_files,
                 const std::string& outdir, const std::vector<std::string>& notes) {
  if (rows.empty()) throw Error("emit_report: no rows");
  fs::create_directories(outdir);
  {
    std::ofstream out(fs::path(outdir) / "report.csv", std::ios::binary);
    if (!out) throw Error("cannot write report.csv in " + outdir);
    out << "condition,attack,accuracy,population,exclusions\n";
    for (const auto& r : rows) {
      out << r.condition << ',' << r.attack << ',' << format4(r.accuracy) << ',' << r.population << ','
          << r.exclusions << '\n';
    }
  }
  std::size_t width = 9;
  for (const auto& r : rows) width = std::max(width, r.condition.size());
  std::ofstream out(fs::path(outdir) / "summary.txt", std::ios::binary);
  for (const auto& n : notes) out << "# " << n << '\n';
  if (!notes.empty()) out << '\n';
  char line[256];
  std::snprintf(line, sizeof line, "%-*s  %-6s  %8s  %10s  %10s\n", static_cast<int>(width), "condition", "attack",
                "accuracy", "population", "exclusions");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-*s  %-6s  %8s  %10d  %10d\n", static_cast<int>(width), r.condition.c_str(),
                  r.attack.c_str(), format4(r.accuracy).c_str(), r.population, r.exclusions);
    out << line;
  }
  if (!analysis_files.empty()) {
    out << "\nanalysis files:\n";
    for (const auto& f : analysis_files) out << "  " << f << '\n';
  }
}

std::vector<ReportRow> read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::vector<ReportRow> rows;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (number == 1 || line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() != 5) throw ParseError(path + ":" + std::to_string(number) + ": expected 5 fields");
    try {
      rows.push_back({f[0], f[1], std::stod(f[2]), std::stoi(f[3]), std::stoi(f[4])});
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(number) + ": malformed number");
    }
  }
  return rows;
}

std::vector<LabeledImage> obtain_dataset(const ExperimentConfig& cfg) {
  if (!fs::exists(fs::path(cfg.dataset) / "labels.csv")) {
    return generate_synthetic(cfg.synthetic, cfg.dataset);
  }
  IngestResult r = ingest_dataset(cfg.dataset);
  if (!r.errors.empty()) {
    throw Error("dataset '" + cfg.dataset + "': " + std::to_string(r.errors.size()) +
                " unreadable images, first: " + r.errors.front().id + ": " + r.errors.front().message);
  }
  return std::move(r.images);
}

namespace {

bool correct(const Classifier& model, const Tensor& image, int label, int k_top) {
  return top_k_error(ClassScores{model.logits(image), ScoreStage::PreSoftmax}, label, k_top) == 0;
}

}  // namespace

Workspace select_eval(const ExperimentConfig& cfg, std::vector<LabeledImage> all, const Classifier& model) {
  Workspace ws;
  ws.all = std::move(all);
  ws.split = split_dataset(ws.all, cfg.train_fraction);
  const auto& held = ws.split.heldout;
  std::vector<char> ok(held.size(), 0);
  const int n = static_cast<int>(held.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    ok[k] = correct(model, held[k].image, held[k].label, cfg.k_top);
  }
  int count = 0;
  for (std::size_t i = 0; i < held.size() && count < cfg.eval_size; ++i) {
    ws.eval.push_back(held[i]);
    ws.eval_correct.push_back(ok[i]);
    count += ok[i];
  }
  return ws;
}

AugmentFn foveation_augment() {
  return [](const LabeledImage& img, std::mt19937_64& rng) -> Tensor {
    const int H = img.height(), W = img.width();
    const std::uint64_t pick = rng() % 4;
    if (pick == 0 || img.boxes.empty()) return img.image;
    if (pick == 1) return crop_window(img.image, box_window(img.primary_box()), H, W);
    if (pick == 2) {
      const auto w = shift_windows(img.primary_box(), H, W, 1, 0.12, rng());
      return crop_window(img.image, w.front(), H, W);
    }
    const auto windows = ten_crop_windows(H, W);
    return crop_window(img.image, windows[rng() % windows.size()], H, W);
  };
}

Checkpoint obtain_model(const ExperimentConfig& cfg, const std::string& path, std::uint64_t seed, const Split& split) {
  if (fs::exists(path)) return load_checkpoint(path);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  const int k = cfg.synthetic.num_classes;
  Checkpoint ck = train(ModelSpec::desk(k), split.train, split.heldout, tc, foveation_augment());
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  save_checkpoint(ck, path);
  return ck;
}

std::vector<PerturbationRecord> attack_images(const Classifier& model, const std::vector<LabeledImage>& images,
                                              AttackKind kind, const AttackConfig& cfg) {
  std::vector<PerturbationRecord> out(images.size());
  const int n = static_cast<int>(images.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (images[k].image.size() == 0) continue;
    out[k] = run_attack(kind, model, images[k], cfg);
  }
  return out;
}

std::vector<LabeledImage> object_crops(const std::vector<LabeledImage>& images, const Shape& input_shape) {
  std::vector<LabeledImage> out;
  for (const auto& img : images) {
    LabeledImage c;
    c.id = img.id;
    c.label = img.label;
    if (!img.boxes.empty()) c.image = crop_window(img.image, box_window(img.primary_box()), input_shape.at(1), input_shape.at(2));
    out.push_back(std::move(c));
  }
  return out;
}

FoveationSpec spec_for_image(const FoveationSpec& spec, std::size_t index) {
  FoveationSpec s = spec;
  s.seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(index)});
  return s;
}

ReportRow evaluate_condition(const Classifier& model, const std::vector<LabeledImage>& images,
                             const std::vector<Tensor>& eps, const FoveationSpec& spec, AttackKind kind, int k_top) {
  if (eps.size() != images.size()) throw Error("evaluate_condition: perturbation count mismatch");
  const Shape in = model.input_shape();
  const int oh = in.at(1), ow = in.at(2);
  const int n = static_cast<int>(images.size());
  std::vector<int> status(images.size(), 0);  // 1 correct, 0 wrong, -1 excluded
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const LabeledImage& img = images[k];
    if (spec.needs_box() && img.boxes.empty()) {
      status[k] = -1;
      continue;
    }
    const FoveationSpec s = spec_for_image(spec, k);
    Tensor input;
    if (spec.uses_object_perturbation()) {
      Tensor crop = crop_window(img.image, box_window(img.primary_box()), oh, ow);
      if (eps[k].size() != 0) crop = clamped(add(crop, eps[k]), 0.0f, 255.0f);
      input = embed_crop(img, crop);
    } else {
      input = eps[k].size() != 0 ? clamped(add(img.image, eps[k]), 0.0f, 255.0f) : img.image;
    }
    std::vector<float> scores;
    if (spec.variant == FoveationKind::Embed || spec.variant == FoveationKind::Identity) {
      scores = model.logits(input);
    } else {
      FoveatedClassifier fov(model, foveation_windows(s, img, input, &model), input.shape());
      scores = fov.logits(input);
    }
    status[k] = top_k_error(ClassScores{scores, ScoreStage::PreSoftmax}, img.label, k_top) == 0 ? 1 : 0;
  }
  ReportRow row{spec.condition_name(), to_string(kind), 0.0, 0, 0};
  int ok = 0;
  for (int s : status) {
    if (s < 0) {
      ++row.exclusions;
    } else {
      ++row.population;
      ok += s;
    }
  }
  row.accuracy = row.population ? static_cast<double>(ok) / row.population : 0.0;
  return row;
}

namespace {

ReportRow plain_row(const std::string& condition, AttackKind kind, const Classifier& model,
                    const std::vector<LabeledImage>& images, const std::vector<Tensor>& eps, int k_top) {
  std::vector<int> status(images.size(), 0);
  const int n = static_cast<int>(images.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (images[k].image.size() == 0) {
      status[k] = -1;
      continue;
    }
    const Tensor x = eps[k].size() != 0 ? clamped(add(images[k].image, eps[k]), 0.0f, 255.0f) : images[k].image;
    status[k] = correct(model, x, images[k].label, k_top) ? 1 : 0;
  }
  ReportRow row{condition, to_string(kind), 0.0, 0, 0};
  int ok = 0;
  for (int s : status) {
    if (s < 0) {
      ++row.exclusions;
    } else {
      ++row.population;
      ok += s;
    }
  }
  row.accuracy = row.population ? static_cast<double>(ok) / row.population : 0.0;
  return row;
}

std::vector<Tensor> epsilons(const std::vector<PerturbationRecord>& recs) {
  std::vector<Tensor> out;
  for (const auto& r : recs) out.push_back(r.epsilon);
  return out;
}

std::vector<double> log_thresholds() {
  std::vector<double> t;
  for (int k = -16; k <= 12; ++k) t.push_back(std::pow(10.0, k / 4.0));
  return t;
}

struct Stage {
  std::string name;
  std::string status = "skipped";
  double seconds = 0.0;
  std::string error;
};

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.output);
  RunResult result;
  std::vector<Stage> stages;
  const auto start_all = std::chrono::steady_clock::now();
  nlohmann::json info;

  auto run_stage = [&](const std::string& name, const std::function<void()>& fn) {
    stages.push_back({name, "skipped", 0.0, ""});
    if (!result.ok) return;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn();
      stages.back().status = "ok";
    } catch (const std::exception& e) {
      stages.back().status = "failed";
      stages.back().error = e.what();
      result.ok = false;
    }
    stages.back().seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  auto out_file = [&](const std::string& name) {
    result.files.push_back(name);
    return (fs::path(cfg.output) / name).string();
  };

  std::vector<LabeledImage> all;
  std::optional<Checkpoint> model_a, model_b;
  Workspace ws;
  std::vector<LabeledImage> crops;
  std::vector<std::vector<PerturbationRecord>> mp(cfg.attacks.size()), mp_object(cfg.attacks.size());
  std::vector<LabeledImage> attack_set;
  std::vector<std::size_t> attack_index;

  run_stage("dataset", [&] {
    all = obtain_dataset(cfg);
    info["dataset_size"] = all.size();
  });
  run_stage("train", [&] {
    const Split split = split_dataset(all, cfg.train_fraction);
    model_a = obtain_model(cfg, cfg.checkpoint_path(), derive_seed(cfg.seed, {1, cfg.train.seed}), split);
    info["model_accuracy"] = model_a->meta.final_accuracy;
    if (cfg.wants("norm_sweep")) {
      model_b = obtain_model(cfg, cfg.transfer_checkpoint_path(), derive_seed(cfg.seed, {2, cfg.train.seed}), split);
      info["transfer_model_accuracy"] = model_b->meta.final_accuracy;
    }
  });
  std::optional<NetworkClassifier> clf;
  run_stage("clean", [&] {
    clf.emplace(model_a->network);
    ws = select_eval(cfg, std::move(all), *clf);
    for (std::size_t i = 0; i < ws.eval.size(); ++i) {
      if (ws.eval_correct[i]) {
        attack_set.push_back(ws.eval[i]);
        attack_index.push_back(i);
      }
    }
    crops = object_crops(ws.eval, clf->input_shape());
    info["eval_size"] = ws.eval.size();
    info["attack_set_size"] = attack_set.size();
  });
  run_stage("attack", [&] {
    std::vector<LabeledImage> crop_targets = crops;
    for (auto& c : crop_targets) {
      if (c.image.size() != 0 && !correct(*clf, c.image, c.label, cfg.k_top)) c.image = Tensor();
    }
    for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
      mp[a] = attack_images(*clf, ws.eval, cfg.attacks[a], cfg.attack);
      mp_object[a] = attack_images(*clf, crop_targets, cfg.attacks[a], cfg.attack);
      for (std::size_t i = 0; i < crops.size(); ++i) {
        if (crop_targets[i].image.size() == 0 && crops[i].image.size() != 0) {
          mp_object[a][i].image_id = crops[i].id;
          mp_object[a][i].epsilon = zeros_like(crops[i].image);
          mp_object[a][i].misclassified = true;
          mp_object[a][i].misclassified_from_start = true;
        }
      }
      save_records((fs::path(cfg.output) / "perturbations" / to_string(cfg.attacks[a])).string(), mp[a]);
    }
  });
  run_stage("foveate", [&] {
    for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
      const AttackKind kind = cfg.attacks[a];
      const std::vector<Tensor> none(ws.eval.size());
      const auto eps = epsilons(mp[a]);
      const auto eps_obj = epsilons(mp_object[a]);
      result.rows.push_back(plain_row("w/o MP", kind, *clf, ws.eval, none, cfg.k_top));
      result.rows.push_back(plain_row("MP", kind, *clf, ws.eval, eps, cfg.k_top));
      for (const auto& spec : cfg.foveations) {
        if (!spec.uses_object_perturbation()) {
          result.rows.push_back(evaluate_condition(*clf, ws.eval, eps, spec, kind, cfg.k_top));
        }
      }
      result.rows.push_back(plain_row("w/o MP-Object", kind, *clf, crops, none, cfg.k_top));
      result.rows.push_back(plain_row("MP-Object", kind, *clf, crops, eps_obj, cfg.k_top));
      for (const auto& spec : cfg.foveations) {
        if (spec.uses_object_perturbation()) {
          result.rows.push_back(evaluate_condition(*clf, ws.eval, eps_obj, spec, kind, cfg.k_top));
        }
      }
    }
  });

  // Attacked subsets, aligned with attack_set.
  auto attacked = [&](std::size_t a) {
    std::vector<PerturbationRecord> out;
    for (std::size_t i : attack_index) out.push_back(mp[a][i]);
    return out;
  };

  if (cfg.wants("norm_sweep")) {
    run_stage("norm_sweep", [&] {
      std::vector<SweepSeries> series;
      const NetworkClassifier other(model_b->network);
      // images both models classify correctly
      std::vector<LabeledImage> shared;
      std::vector<std::size_t> shared_pos;
      for (std::size_t i = 0; i < attack_set.size(); ++i) {
        if (correct(other, attack_set[i].image, attack_set[i].label, cfg.k_top)) {
          shared.push_back(attack_set[i]);
          shared_pos.push_back(i);
        }
      }
      for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
        const AttackKind kind = cfg.attacks[a];
        const NormKind norm = native_norm(kind);
        const std::string k = to_string(kind), nn = to_string(norm);
        const auto recs = attacked(a);
        const auto eps = epsilons(recs);
        const auto& targets = norm == NormKind::L1PerPixel ? cfg.l1_targets : cfg.linf_targets;
        series.push_back({k + " same-model", "relative", nn,
                          relative_sweep_accuracy(*clf, attack_set, eps, cfg.relative_multipliers, cfg.k_top)});
        series.push_back({k + " same-model", "absolute", nn,
                          norm_sweep_accuracy(*clf, attack_set, eps, norm, targets, cfg.k_top)});
        std::vector<Tensor> noise;
        for (std::size_t i = 0; i < attack_set.size(); ++i) {
          noise.push_back(uniform_noise(attack_set[i].image.shape(), 1.0, derive_seed(cfg.seed, {0x4015e, i})));
        }
        series.push_back({"uniform noise", "absolute", nn,
                          norm_sweep_accuracy(*clf, attack_set, noise, norm, targets, cfg.k_top)});

        // transfer: perturbations of this model evaluated on the other one,
        // against the other model's own perturbations at matched norms
        const auto own = attack_images(other, shared, kind, cfg.attack);
        std::vector<Tensor> own_eps, from_a;
        std::vector<double> ref;
        for (std::size_t j = 0; j < shared.size(); ++j) {
          own_eps.push_back(own[j].epsilon);
          from_a.push_back(eps[shared_pos[j]]);
          ref.push_back(norm_of(own[j].epsilon, norm));
        }
        series.push_back({k + " other-model own", "matched", nn,
                          matched_sweep_accuracy(other, shared, own_eps, norm, ref, cfg.relative_multipliers, cfg.k_top)});
        series.push_back({k + " transferred", "matched", nn,
                          matched_sweep_accuracy(other, shared, from_a, norm, ref, cfg.relative_multipliers, cfg.k_top)});
      }
      write_sweep_csv(out_file("fig3_norm_sweep.csv"), series);
    });
  }

  if (cfg.wants("masked")) {
    run_stage("masked", [&] {
      std::vector<SweepSeries> series;
      for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
        const AttackKind kind = cfg.attacks[a];
        const NormKind norm = native_norm(kind);
        const std::string k = to_string(kind), nn = to_string(norm);
        const auto eps = epsilons(attacked(a));
        const auto& targets = norm == NormKind::L1PerPixel ? cfg.masked_l1_targets : cfg.masked_linf_targets;
        std::vector<LabeledImage> boxed;
        std::vector<Tensor> boxed_eps;
        for (std::size_t i = 0; i < attack_set.size(); ++i) {
          if (!attack_set[i].boxes.empty()) {
            boxed.push_back(attack_set[i]);
            boxed_eps.push_back(eps[i]);
          }
        }
        series.push_back({k + " MP", "absolute", nn, norm_sweep_accuracy(*clf, boxed, boxed_eps, norm, targets, cfg.k_top)});
        series.push_back({k + " Object Masked", "absolute", nn,
                          norm_sweep_accuracy(*clf, boxed, masked_perturbations(boxed, boxed_eps, MaskMode::Object),
                                              norm, targets, cfg.k_top)});
        series.push_back({k + " Background Masked", "absolute", nn,
                          norm_sweep_accuracy(*clf, boxed, masked_perturbations(boxed, boxed_eps, MaskMode::Background),
                                              norm, targets, cfg.k_top)});
      }
      write_sweep_csv(out_file("fig4a_masked.csv"), series);
    });
  }

  if (cfg.wants("linearity")) {
    run_stage("linearity", [&] {
      std::vector<std::string> names;
      std::vector<std::vector<LinearityCurve>> curves;
      std::vector<CumulativeHistogram> hyp1, naive;
      for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
        const auto recs = attacked(a);
        std::vector<std::optional<LinearityCurve>> per(recs.size());
        const int n = static_cast<int>(recs.size());
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < n; ++i) {
          const auto k = static_cast<std::size_t>(i);
          if (recs[k].misclassified) per[k] = linearity_probe(*clf, attack_set[k], recs[k], cfg.linearity_c);
        }
        std::vector<LinearityCurve> list;
        for (auto& c : per) {
          if (c) list.push_back(std::move(*c));
        }
        const SecantErrors se = secant_errors(list);
        names.push_back(to_string(cfg.attacks[a]));
        hyp1.push_back(cumulative_histogram(se.hyp1, log_thresholds()));
        naive.push_back(cumulative_histogram(se.naive, log_thresholds()));
        curves.push_back(std::move(list));
      }
      write_curves_csv(out_file("fig4b_curves.csv"), names, curves);
      write_cumhist_csv(out_file("fig4c_cumhist.csv"), names, hyp1, naive);
    });
  }

  std::vector<FoveationSpec> crop_specs = {identity_spec()};
  for (const auto& s : cfg.foveations) {
    if (!s.uses_object_perturbation() && s.variant != FoveationKind::Identity) crop_specs.push_back(s);
  }

  if (cfg.wants("decomposition")) {
    run_stage("decomposition", [&] {
      std::vector<std::string> conditions, attacks;
      std::vector<std::vector<DecompositionRecord>> records;
      for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
        const auto recs = attacked(a);
        for (const auto& spec : crop_specs) {
          std::vector<DecompositionRecord> list(recs.size());
          const int n = static_cast<int>(recs.size());
#pragma omp parallel for schedule(dynamic)
          for (int i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(i);
            list[k] = foveation_decomposition(*clf, attack_set[k], recs[k], spec_for_image(spec, attack_index[k]));
          }
          conditions.push_back(spec.condition_name());
          attacks.push_back(to_string(cfg.attacks[a]));
          records.push_back(std::move(list));
        }
      }
      write_decomposition_csv(out_file("hyp2_decomposition.csv"), conditions, attacks, records);
    });
  }

  if (cfg.wants("norm_ratio")) {
    run_stage("norm_ratio", [&] {
      std::vector<std::string> conditions, attacks;
      std::vector<std::vector<NormRatio>> ratios;
      const std::size_t count = cfg.ratio_images > 0 ? std::min<std::size_t>(cfg.ratio_images, attack_set.size())
                                                     : attack_set.size();
      for (std::size_t a = 0; a < cfg.attacks.size(); ++a) {
        const auto recs = attacked(a);
        for (const auto& spec : crop_specs) {
          std::vector<NormRatio> list(count);
          const int n = static_cast<int>(count);
#pragma omp parallel for schedule(dynamic)
          for (int i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(i);
            list[k] = norm_ratio(*clf, attack_set[k], recs[k], cfg.attack, spec_for_image(spec, attack_index[k]));
          }
          conditions.push_back(spec.condition_name());
          attacks.push_back(to_string(cfg.attacks[a]));
          ratios.push_back(std::move(list));
        }
      }
      write_ratios_csv(out_file("table3_ratios.csv"), conditions, attacks, ratios);
    });
  }

  const std::vector<std::pair<std::string, std::string>> substitutions = {
      {"top_k", "top-" + std::to_string(cfg.k_top) + " error on the synthetic classes replaces ImageNet top-5"},
      {"saliency", "gradient-magnitude saliency of the classifier replaces the external saliency model"},
      {"dataset", "synthetic shapes over clutter replace the natural-image benchmark"},
  };
  std::vector<std::string> notes;
  for (const auto& [key, text] : substitutions) notes.push_back(key + ": " + text);
  run_stage("report", [&] { emit_report(result.rows, result.files, cfg.output, notes); });

  nlohmann::json manifest;
  manifest["seed"] = cfg.seed;
  manifest["k_top"] = cfg.k_top;
  manifest["substitutions"] = nlohmann::json::object();
  for (const auto& [key, text] : substitutions) manifest["substitutions"][key] = text;
  manifest["dataset"] = cfg.dataset;
  manifest["checkpoint"] = cfg.checkpoint_path();
  manifest["transfer_checkpoint"] = cfg.transfer_checkpoint_path();
  manifest["train_seeds"] = {derive_seed(cfg.seed, {1, cfg.train.seed}), derive_seed(cfg.seed, {2, cfg.train.seed})};
  manifest["synthetic_seed"] = cfg.synthetic.seed;
  nlohmann::json fov = nlohmann::json::array();
  for (const auto& s : cfg.foveations) fov.push_back({{"condition", s.condition_name()}, {"seed", s.seed}});
  manifest["foveations"] = fov;
  manifest["info"] = info;
  nlohmann::json st = nlohmann::json::array();
  for (const auto& s : stages) {
    nlohmann::json j = {{"name", s.name}, {"status", s.status}, {"seconds", s.seconds}};
    if (!s.error.empty()) j["error"] = s.error;
    st.push_back(j);
  }
  manifest["stages"] = st;
  manifest["files"] = result.files;
  manifest["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_all).count();
  manifest["ok"] = result.ok;
  std::ofstream(fs::path(cfg.output) / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
  std::ofstream(fs::path(cfg.output) / "config.yaml", std::ios::binary) << experiment_config_to_text(cfg);
  return result;
}

}  // namespace fovea
