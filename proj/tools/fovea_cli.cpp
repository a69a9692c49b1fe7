#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "fovea/experiment.hpp"
#include "fovea/rng.hpp"

namespace fs = std::filesystem;
using namespace fovea;

namespace {

struct Overrides {
  std::string config;
  std::string data, model, out;
  std::uint64_t seed = 0;
  int k_top = 0, eval_size = 0, epochs = 0, ratio_images = -1;
  std::vector<std::string> attacks, analyses;
  double eta = 0.0;
  std::string foveations;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config, "YAML experiment config")->check(CLI::ExistingFile);
  app->add_option("--data", o.data, "dataset directory");
  app->add_option("--model", o.model, "model checkpoint");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--seed", o.seed, "global seed");
  app->add_option("--k-top", o.k_top, "top-k for the error");
  app->add_option("--eval-size", o.eval_size, "correctly classified images to attack");
  app->add_option("--epochs", o.epochs, "training epochs");
  app->add_option("--ratio-images", o.ratio_images, "images per attack for norm ratios (0 = all)");
  app->add_option("--attacks", o.attacks, "BFGS and/or Sign")->delimiter(',');
  app->add_option("--analyses", o.analyses, "subset of: norm_sweep,masked,linearity,decomposition,norm_ratio")
      ->delimiter(',');
  app->add_option("--eta", o.eta, "L1 weight of the BFGS objective");
  app->add_option("--foveations", o.foveations, "YAML file with the foveation list")->check(CLI::ExistingFile);
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  if (!o.data.empty()) cfg.dataset = o.data;
  if (!o.model.empty()) cfg.checkpoint = o.model;
  if (!o.out.empty()) cfg.output = o.out;
  if (o.seed) cfg.seed = o.seed;
  if (o.k_top) cfg.k_top = cfg.attack.k_top = o.k_top;
  if (o.eval_size) cfg.eval_size = o.eval_size;
  if (o.epochs) cfg.train.epochs = o.epochs;
  if (o.ratio_images >= 0) cfg.ratio_images = o.ratio_images;
  if (o.eta > 0.0) cfg.attack.eta = o.eta;
  if (!o.attacks.empty()) {
    cfg.attacks.clear();
    for (const auto& a : o.attacks) cfg.attacks.push_back(parse_attack_kind(a));
  }
  if (!o.analyses.empty()) cfg.analyses = o.analyses;
  if (!o.foveations.empty()) {
    std::ifstream in(o.foveations);
    std::stringstream ss;
    ss << in.rdbuf();
    cfg.foveations = foveation_specs_from_text(ss.str());
  }
  return cfg;
}

void print_rows(const std::vector<ReportRow>& rows) {
  for (const auto& r : rows) {
    std::printf("%-22s %-5s %s  (population %d, excluded %d)\n", r.condition.c_str(), r.attack.c_str(),
                format4(r.accuracy).c_str(), r.population, r.exclusions);
  }
}

struct Loaded {
  ExperimentConfig cfg;
  Checkpoint ckpt;
  Workspace ws;
};

Loaded load_for_eval(const Overrides& o) {
  ExperimentConfig cfg = resolve(o);
  if (!fs::exists(cfg.checkpoint_path())) throw Error("no checkpoint at " + cfg.checkpoint_path());
  Checkpoint ck = load_checkpoint(cfg.checkpoint_path());
  NetworkClassifier clf(ck.network);
  Workspace ws = select_eval(cfg, obtain_dataset(cfg), clf);
  return {std::move(cfg), std::move(ck), std::move(ws)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Foveation defences against minimum-norm adversarial perturbations"};
  app.require_subcommand(1);

  SyntheticSpec gen;
  std::string gen_out = "data";
  std::string gen_config;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic dataset");
  gen_cmd->add_option("--out", gen_out, "output directory");
  gen_cmd->add_option("-c,--config", gen_config, "YAML experiment config (synthetic section)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--num-images", gen.num_images);
  gen_cmd->add_option("--height", gen.height);
  gen_cmd->add_option("--width", gen.width);
  gen_cmd->add_option("--classes", gen.num_classes);
  gen_cmd->add_option("--scale-min", gen.scale_min);
  gen_cmd->add_option("--scale-max", gen.scale_max);
  gen_cmd->add_option("--clutter", gen.clutter_density, "clutter items per 100 pixels");
  gen_cmd->add_option("--seed", gen.seed);

  Overrides train_o;
  auto* train_cmd = app.add_subcommand("train", "train the desk CNN");
  add_common(train_cmd, train_o);

  Overrides attack_o;
  std::string attack_dir;
  auto* attack_cmd = app.add_subcommand("attack", "minimum perturbations for the evaluation images");
  add_common(attack_cmd, attack_o);
  attack_cmd->add_option("--records", attack_dir, "where to write the perturbation records");

  Overrides fov_o;
  std::string fov_records;
  auto* fov_cmd = app.add_subcommand("foveate", "accuracy of each foveation on clean or perturbed images");
  add_common(fov_cmd, fov_o);
  fov_cmd->add_option("--records", fov_records, "perturbation records from `attack`");

  Overrides analyze_o;
  auto* analyze_cmd = app.add_subcommand("analyze", "run the pipeline with a subset of analyses");
  add_common(analyze_cmd, analyze_o);

  Overrides run_o;
  auto* run_cmd = app.add_subcommand("run", "full pipeline");
  add_common(run_cmd, run_o);

  std::string report_dir = "out";
  auto* report_cmd = app.add_subcommand("report", "print the report of a finished run");
  report_cmd->add_option("--from", report_dir, "run output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) {
      SyntheticSpec spec = gen;
      if (!gen_config.empty()) {
        ExperimentConfig cfg = load_experiment_config(gen_config);
        spec = cfg.synthetic;
      }
      const auto data = generate_synthetic(spec, gen_out);
      std::printf("wrote %zu images to %s\n", data.size(), gen_out.c_str());
    } else if (*train_cmd) {
      ExperimentConfig cfg = resolve(train_o);
      const auto all = obtain_dataset(cfg);
      const Split split = split_dataset(all, cfg.train_fraction);
      if (fs::exists(cfg.checkpoint_path())) fs::remove(cfg.checkpoint_path());
      const Checkpoint ck = obtain_model(cfg, cfg.checkpoint_path(), derive_seed(cfg.seed, {1, cfg.train.seed}), split);
      std::printf("held-out accuracy %s after %d attempt(s); saved %s\n", format4(ck.meta.final_accuracy).c_str(),
                  ck.meta.attempts, cfg.checkpoint_path().c_str());
    } else if (*attack_cmd) {
      Loaded l = load_for_eval(attack_o);
      NetworkClassifier clf(l.ckpt.network);
      const std::string dir = attack_dir.empty() ? (fs::path(l.cfg.output) / "perturbations").string() : attack_dir;
      for (AttackKind kind : l.cfg.attacks) {
        const auto recs = attack_images(clf, l.ws.eval, kind, l.cfg.attack);
        int attacked = 0, fooled = 0;
        std::vector<double> norms_v;
        for (std::size_t i = 0; i < recs.size(); ++i) {
          if (!l.ws.eval_correct[i]) continue;
          ++attacked;
          fooled += recs[i].misclassified;
          norms_v.push_back(recs[i].norm_value);
        }
        save_records((fs::path(dir) / to_string(kind)).string(), recs);
        std::printf("%s: %d/%d misclassified, median %s %s\n", to_string(kind).c_str(), fooled, attacked,
                    to_string(native_norm(kind)).c_str(), format4(median(norms_v)).c_str());
      }
    } else if (*fov_cmd) {
      Loaded l = load_for_eval(fov_o);
      NetworkClassifier clf(l.ckpt.network);
      std::vector<ReportRow> rows;
      for (AttackKind kind : l.cfg.attacks) {
        std::vector<Tensor> eps(l.ws.eval.size());
        std::string label = "clean";
        if (!fov_records.empty()) {
          const auto recs = load_records((fs::path(fov_records) / to_string(kind)).string());
          if (recs.size() != eps.size()) throw Error("records do not match the evaluation set");
          for (std::size_t i = 0; i < recs.size(); ++i) eps[i] = recs[i].epsilon;
        }
        for (const auto& spec : l.cfg.foveations) {
          if (spec.uses_object_perturbation() && !fov_records.empty()) continue;
          rows.push_back(evaluate_condition(clf, l.ws.eval, eps, spec, kind, l.cfg.k_top));
        }
      }
      print_rows(rows);
    } else if (*analyze_cmd || *run_cmd) {
      const ExperimentConfig cfg = resolve(*run_cmd ? run_o : analyze_o);
      const RunResult r = run_experiment(cfg);
      print_rows(r.rows);
      for (const auto& f : r.files) std::printf("wrote %s\n", (fs::path(cfg.output) / f).string().c_str());
      if (!r.ok) {
        std::fprintf(stderr, "pipeline failed; see %s\n", (fs::path(cfg.output) / "manifest.json").string().c_str());
        return 1;
      }
    } else if (*report_cmd) {
      const auto rows = read_report((fs::path(report_dir) / "report.csv").string());
      print_rows(rows);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
