#include "fovea/attack.hpp"

#include <algorithm>
#include <deque>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

namespace fovea {

std::string to_string(AttackKind kind) { return kind == AttackKind::BFGS ? "BFGS" : "Sign"; }
std::string to_string(NormKind kind) { return kind == NormKind::L1PerPixel ? "L1PerPixel" : "LInf"; }

AttackKind parse_attack_kind(const std::string& s) {
  if (s == "BFGS" || s == "bfgs") return AttackKind::BFGS;
  if (s == "Sign" || s == "sign") return AttackKind::Sign;
  throw ParseError("unknown attack kind '" + s + "'");
}

NormKind parse_norm_kind(const std::string& s) {
  if (s == "L1PerPixel" || s == "l1") return NormKind::L1PerPixel;
  if (s == "LInf" || s == "linf") return NormKind::LInf;
  throw ParseError("unknown norm kind '" + s + "'");
}

NormKind native_norm(AttackKind kind) {
  return kind == AttackKind::BFGS ? NormKind::L1PerPixel : NormKind::LInf;
}

double norm_of(const Tensor& t, NormKind kind) {
  const Norms n = norms(t);
  return kind == NormKind::L1PerPixel ? n.l1_per_pixel : n.linf;
}

std::vector<double> AlphaGrid::values(double upper) const {
  std::vector<double> v;
  for (int i = 0;; ++i) {
    const double a = min * std::pow(factor, i);
    if (a > upper * (1.0 + 1e-12)) break;
    v.push_back(a);
  }
  return v;
}

void AttackConfig::validate() const {
  if (!(eta > 0.0)) throw Error("attack config: eta must be > 0");
  if (!(grid.min > 0.0) || !(grid.factor > 1.0) || !(grid.max > grid.min)) {
    throw Error("attack config: alpha grid must be strictly increasing and positive");
  }
  if (hard_cap < grid.max) throw Error("attack config: hard cap below grid max");
  if (max_iters < 1 || lbfgs_memory < 1 || bisection_steps < 0) throw Error("attack config: bad iteration limits");
  if (!(pixel_max > pixel_min)) throw Error("attack config: empty pixel bounds");
}

void set_norms(PerturbationRecord& r) {
  const Norms n = norms(r.epsilon);
  r.l1_per_pixel = n.l1_per_pixel;
  r.linf = n.linf;
  r.norm_value = r.norm_kind == NormKind::L1PerPixel ? n.l1_per_pixel : n.linf;
}

namespace {

Tensor clamped_sum(const Tensor& x, const Tensor& eps, const AttackConfig& cfg) {
  Tensor z = add(x, eps);
  for (float& v : z.values()) v = std::clamp(v, cfg.pixel_min, cfg.pixel_max);
  return z;
}

Tensor project(const Tensor& x, const Tensor& eps, const AttackConfig& cfg) {
  return subtract(clamped_sum(x, eps, cfg), x);
}

bool label_lost(const std::vector<float>& logits, int label, int k_top) {
  return top_k_error(ClassScores{logits, ScoreStage::PreSoftmax}, label, k_top) == 1;
}

}  // namespace

HingeResult hinge_loss_and_grad(const Classifier& model, const Tensor& x, const Tensor& eps, int label,
                                const AttackConfig& cfg) {
  require_same_shape(x, eps, "hinge_loss_and_grad");
  const Tensor z = add(x, eps);
  const Tensor zc = clamped_sum(x, eps, cfg);
  HingeResult r;
  Tensor grad;
  const auto logits = model.logits_and_gradient(zc, label, grad);
  if (label_lost(logits, label, cfg.k_top)) {
    r.misclassified = true;
    r.grad = zeros_like(x);
    return r;
  }
  r.loss = logits[static_cast<std::size_t>(label)];
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (z[i] < cfg.pixel_min || z[i] > cfg.pixel_max) grad[i] = 0.0f;
  }
  r.grad = std::move(grad);
  return r;
}

bool misclassifies(const Classifier& model, const Tensor& x, const Tensor& eps, int label,
                   const AttackConfig& cfg) {
  return label_lost(model.logits(clamped_sum(x, eps, cfg)), label, cfg.k_top);
}

LineSearchResult line_search_min_norm(const Classifier& model, const Tensor& x, int label,
                                      const Tensor& direction, NormKind norm, const AttackConfig& cfg,
                                      double max_alpha, double skip_below) {
  require_same_shape(x, direction, "line_search_min_norm");
  LineSearchResult r;
  const double dn = norm_of(direction, norm);
  if (!(dn > 0.0)) throw Error("line_search_min_norm: zero direction");
  const Tensor unit = scaled(direction, static_cast<float>(1.0 / dn));
  auto hits = [&](double alpha) {
    ++r.evaluations;
    return misclassifies(model, x, scaled(unit, static_cast<float>(alpha)), label, cfg);
  };

  double lo = 0.0;
  double hi = -1.0;
  for (double a : cfg.grid.values(max_alpha)) {
    if (a <= skip_below) {
      lo = a;
      continue;
    }
    if (hits(a)) {
      hi = a;
      break;
    }
    lo = a;
  }
  if (hi < 0.0) return r;
  for (int s = 0; s < cfg.bisection_steps; ++s) {
    const double mid = 0.5 * (lo + hi);
    if (hits(mid)) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  r.found = true;
  r.alpha_star = hi;
  r.alpha_low = lo;
  r.epsilon = project(x, scaled(unit, static_cast<float>(hi)), cfg);
  return r;
}

LineSearchResult line_search_min_norm(const Classifier& model, const Tensor& x, int label,
                                      const Tensor& direction, NormKind norm, const AttackConfig& cfg) {
  return line_search_min_norm(model, x, label, direction, norm, cfg, cfg.grid.max);
}

Tensor sign_direction(const Tensor& grad) {
  Tensor d = zeros_like(grad);
  for (std::size_t i = 0; i < grad.size(); ++i) d[i] = grad[i] > 0.0f ? 1.0f : (grad[i] < 0.0f ? -1.0f : 0.0f);
  return d;
}

namespace {

PerturbationRecord start_record(AttackKind kind, const Tensor& x) {
  PerturbationRecord r;
  r.kind = kind;
  r.norm_kind = native_norm(kind);
  r.epsilon = zeros_like(x);
  return r;
}

void finish(PerturbationRecord& r, const LineSearchResult& ls) {
  r.epsilon = ls.epsilon;
  r.alpha_star = ls.alpha_star;
  r.alpha_low = ls.alpha_low;
  r.misclassified = true;
  set_norms(r);
}

// Grid scan up to the regular max, then the extension up to the hard cap.
LineSearchResult extended_search(const Classifier& model, const Tensor& x, int label, const Tensor& dir,
                                 NormKind norm, const AttackConfig& cfg) {
  LineSearchResult ls = line_search_min_norm(model, x, label, dir, norm, cfg, cfg.grid.max);
  if (!ls.found) {
    const int spent = ls.evaluations;
    ls = line_search_min_norm(model, x, label, dir, norm, cfg, cfg.hard_cap, cfg.grid.max);
    ls.evaluations += spent;
  }
  return ls;
}

double l1_sum(const Tensor& t) {
  double s = 0.0;
  for (float v : t.values()) s += std::abs(static_cast<double>(v));
  return s;
}

struct Objective {
  double value = 0.0;
  Tensor grad;
  bool misclassified = false;
};

Objective objective(const Classifier& model, const Tensor& x, const Tensor& eps, int label,
                    const AttackConfig& cfg) {
  HingeResult h = hinge_loss_and_grad(model, x, eps, label, cfg);
  Objective o;
  o.misclassified = h.misclassified;
  o.value = cfg.eta * l1_sum(eps) + h.loss;
  o.grad = std::move(h.grad);
  const float eta = static_cast<float>(cfg.eta);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    if (eps[i] > 0.0f) {
      o.grad[i] += eta;
    } else if (eps[i] < 0.0f) {
      o.grad[i] -= eta;
    }
  }
  return o;
}

double linf(const Tensor& t) { return norms(t).linf; }

}  // namespace

PerturbationRecord bfgs_perturbation(const Classifier& model, const Tensor& x, int label,
                                     const AttackConfig& cfg, std::vector<double>* objective_history) {
  cfg.validate();
  PerturbationRecord rec = start_record(AttackKind::BFGS, x);
  if (misclassifies(model, x, rec.epsilon, label, cfg)) {
    rec.misclassified = true;
    rec.misclassified_from_start = true;
    set_norms(rec);
    return rec;
  }

  Tensor eps = zeros_like(x);
  Objective cur = objective(model, x, eps, label, cfg);
  if (objective_history) objective_history->push_back(cur.value);
  std::deque<std::pair<Tensor, Tensor>> history;  // (s, y)
  std::deque<double> rho;
  Tensor after_first_step;
  bool found = false;
  double step_px = cfg.initial_step;

  for (int it = 1; it <= cfg.max_iters; ++it) {
    // two-loop recursion: d = -H g
    Tensor q = cur.grad;
    std::vector<double> coef(history.size());
    for (std::size_t k = history.size(); k-- > 0;) {
      coef[k] = rho[k] * dot(history[k].first, q);
      axpy(static_cast<float>(-coef[k]), history[k].second, q);
    }
    const double gnorm = linf(cur.grad);
    if (!(gnorm > 0.0)) break;
    if (history.empty()) {
      q = scaled(q, static_cast<float>(step_px / gnorm));
    } else {
      const auto& [s, y] = history.back();
      q = scaled(q, static_cast<float>(dot(s, y) / dot(y, y)));
    }
    for (std::size_t k = 0; k < history.size(); ++k) {
      const double b = rho[k] * dot(history[k].second, q);
      axpy(static_cast<float>(coef[k] - b), history[k].first, q);
    }
    Tensor d = scaled(q, -1.0f);
    if (dot(cur.grad, d) >= 0.0) {
      history.clear();
      rho.clear();
      d = scaled(cur.grad, static_cast<float>(-step_px / gnorm));
    }
    const double dmax = linf(d);
    if (dmax > cfg.max_step) d = scaled(d, static_cast<float>(cfg.max_step / dmax));

    bool accepted = false;
    Tensor next_eps;
    Objective next;
    double t = 1.0;
    for (int bt = 0; bt < 30; ++bt, t *= 0.5) {
      Tensor trial = eps;
      axpy(static_cast<float>(t), d, trial);
      trial = project(x, trial, cfg);
      Objective o = objective(model, x, trial, label, cfg);
      const double decrease = dot(cur.grad, subtract(trial, eps));
      if (o.value <= cur.value + cfg.armijo_c * std::min(decrease, 0.0)) {
        next_eps = std::move(trial);
        next = std::move(o);
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    rec.iterations = it;
    if (history.empty()) step_px = t == 1.0 ? std::min(cfg.max_step, 2.0 * step_px) : std::max(1e-3, t * step_px);

    Tensor s = subtract(next_eps, eps);
    Tensor y = subtract(next.grad, cur.grad);
    const double sy = dot(s, y);
    if (!next.misclassified && sy > 1e-10 * std::sqrt(dot(s, s) * dot(y, y)) && sy > 0.0) {
      history.emplace_back(std::move(s), std::move(y));
      rho.push_back(1.0 / sy);
      if (static_cast<int>(history.size()) > cfg.lbfgs_memory) {
        history.pop_front();
        rho.pop_front();
      }
    }
    eps = std::move(next_eps);
    cur = std::move(next);
    if (objective_history) objective_history->push_back(cur.value);
    if (it == 1) after_first_step = eps;
    if (cur.misclassified) {
      found = true;
      break;
    }
  }

  if (found) {
    const LineSearchResult ls = line_search_min_norm(model, x, label, eps, NormKind::L1PerPixel, cfg);
    if (ls.found) {
      finish(rec, ls);
    } else {
      rec.epsilon = eps;
      rec.misclassified = true;
      set_norms(rec);
      rec.alpha_star = rec.l1_per_pixel;
      rec.alpha_low = 0.0;
    }
    return rec;
  }

  // Fallback: direction after a single quasi-Newton step, grid extended to the cap.
  Tensor dir = after_first_step.empty() ? scaled(cur.grad, -1.0f) : after_first_step;
  if (norm_of(dir, NormKind::L1PerPixel) > 0.0) {
    const LineSearchResult ls = extended_search(model, x, label, dir, NormKind::L1PerPixel, cfg);
    if (ls.found) {
      finish(rec, ls);
      return rec;
    }
  }
  rec.epsilon = zeros_like(x);
  rec.misclassified = false;
  set_norms(rec);
  return rec;
}

PerturbationRecord sign_perturbation(const Classifier& model, const Tensor& x, int label,
                                     const AttackConfig& cfg) {
  cfg.validate();
  PerturbationRecord rec = start_record(AttackKind::Sign, x);
  const HingeResult h = hinge_loss_and_grad(model, x, rec.epsilon, label, cfg);
  if (h.misclassified) {
    rec.misclassified = true;
    rec.misclassified_from_start = true;
    set_norms(rec);
    return rec;
  }
  rec.iterations = 1;
  const Tensor d = sign_direction(h.grad);
  if (norm_of(d, NormKind::LInf) > 0.0) {
    // The hinge is the label score, so the perturbation descends it.
    const LineSearchResult ls = extended_search(model, x, label, scaled(d, -1.0f), NormKind::LInf, cfg);
    if (ls.found) {
      finish(rec, ls);
      return rec;
    }
  }
  rec.misclassified = false;
  set_norms(rec);
  return rec;
}

PerturbationRecord run_attack(AttackKind kind, const Classifier& model, const LabeledImage& img,
                              const AttackConfig& cfg) {
  PerturbationRecord r = kind == AttackKind::BFGS ? bfgs_perturbation(model, img.image, img.label, cfg)
                                                  : sign_perturbation(model, img.image, img.label, cfg);
  r.image_id = img.id;
  return r;
}

std::string to_string(Perceptibility p) {
  switch (p) {
    case Perceptibility::Imperceptible: return "imperceptible";
    case Perceptibility::Borderline: return "borderline";
    case Perceptibility::Perceptible: return "perceptible";
  }
  return "?";
}

double perceptibility_threshold(AttackKind kind, NormKind norm) {
  if (kind == AttackKind::BFGS && norm == NormKind::LInf) return 100.0;
  return 15.0;
}

Perceptibility perceptibility(AttackKind kind, NormKind norm, double value) {
  const double theta = perceptibility_threshold(kind, norm);
  if (value > theta) return Perceptibility::Perceptible;
  if (value >= 0.8 * theta) return Perceptibility::Borderline;
  return Perceptibility::Imperceptible;
}

Perceptibility perceptibility(const PerturbationRecord& record) {
  return perceptibility(record.kind, record.norm_kind, record.norm_value);
}

Tensor uniform_noise(const Shape& shape, double amplitude, std::uint64_t seed) {
  if (amplitude < 0.0) throw Error("uniform_noise: negative amplitude");
  Tensor t(shape);
  if (amplitude == 0.0) return t;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-amplitude, amplitude);
  for (float& v : t.values()) {
    v = static_cast<float>(std::clamp(dist(rng), -amplitude, amplitude));
  }
  return t;
}

namespace {

std::string record_file(const PerturbationRecord& r, std::size_t index) {
  std::string id = r.image_id.empty() ? std::to_string(index) : r.image_id;
  for (char& c : id) {
    if (c == '/' || c == '\\') c = '_';
  }
  return id + "_" + to_string(r.kind) + ".fvt";
}

}  // namespace

void save_records(const std::string& dir, const std::vector<PerturbationRecord>& records) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string file = record_file(r, i);
    save_tensor((fs::path(dir) / file).string(), r.epsilon);
    manifest.push_back({
        {"image_id", r.image_id},
        {"file", file},
        {"kind", to_string(r.kind)},
        {"norm_kind", to_string(r.norm_kind)},
        {"norm_value", r.norm_value},
        {"l1_per_pixel", r.l1_per_pixel},
        {"linf", r.linf},
        {"alpha_star", r.alpha_star},
        {"alpha_low", r.alpha_low},
        {"misclassified", r.misclassified},
        {"misclassified_from_start", r.misclassified_from_start},
        {"iterations", r.iterations},
        {"seed", r.seed},
    });
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw Error("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

std::vector<PerturbationRecord> load_records(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw Error("no manifest.json in " + dir);
  const auto manifest = nlohmann::json::parse(in, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_array()) throw ParseError("malformed manifest.json in " + dir);
  std::vector<PerturbationRecord> out;
  for (const auto& m : manifest) {
    PerturbationRecord r;
    r.image_id = m.at("image_id").get<std::string>();
    r.epsilon = load_tensor((fs::path(dir) / m.at("file").get<std::string>()).string());
    r.kind = parse_attack_kind(m.at("kind").get<std::string>());
    r.norm_kind = parse_norm_kind(m.at("norm_kind").get<std::string>());
    r.norm_value = m.at("norm_value").get<double>();
    r.l1_per_pixel = m.at("l1_per_pixel").get<double>();
    r.linf = m.at("linf").get<double>();
    r.alpha_star = m.at("alpha_star").get<double>();
    r.alpha_low = m.value("alpha_low", 0.0);
    r.misclassified = m.at("misclassified").get<bool>();
    r.misclassified_from_start = m.value("misclassified_from_start", false);
    r.iterations = m.at("iterations").get<int>();
    r.seed = m.value("seed", std::uint64_t{0});
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fovea
