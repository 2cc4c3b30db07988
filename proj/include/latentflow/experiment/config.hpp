#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentflow/classify/classifier.hpp"
#include "latentflow/classify/train.hpp"
#include "latentflow/core/error.hpp"
#include "latentflow/core/random.hpp"
#include "latentflow/data/synthetic.hpp"
#include "latentflow/flow/model.hpp"
#include "latentflow/flow/train.hpp"

// Experiment configuration as JSON. Every object is read through a
// KeyReader, which rejects keys it was not asked for, so a misspelled
// option fails validation instead of silently taking its default.

namespace latentflow {

using json = nlohmann::ordered_json;

inline constexpr int kConfigSchemaVersion = 1;

enum class Precision { f32, f64 };

inline const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

struct IdxFiles {
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t classes = 10;
  std::size_t height = 28, width = 28;
};

struct DatasetConfig {
  std::string source = "synthetic";  // "synthetic" | "idx"
  SyntheticSpec synthetic{};
  IdxFiles idx{};
  double fraction = 1.0;
  std::optional<std::uint64_t> subset_seed;
};

struct FlowConfig {
  bool enabled = true;
  bool conditional = true;
  std::size_t blocks = 12;
  std::size_t hidden = 64;
  double scale_clamp = 2.0;
  bool actnorm = true;
  bool invlinear = false;
  /// "full" trains the flow on the whole training split, "subset" on the
  /// classifier's subset only.
  std::string train_on = "full";
  FlowTrainingConfig training{};
  std::string checkpoint;  // load instead of training when set
  bool save_checkpoint = true;
  std::string dataset_label;  // for transfer: which data the checkpoint was trained on
};

struct ClassifierConfig {
  ClassifierSpec spec{};
  ClassifierTrainingConfig training{};
};

struct EvaluationConfig {
  std::vector<PerturbationSpec> attacks;
  bool frechet = true;
  std::size_t frechet_samples = 1000;
  bool perturbation_stats = true;
  std::size_t sample_grid = 0;  // rows of the image grid; 0 disables
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::string name = "experiment";
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
  std::string output_dir = "out";
  DatasetConfig dataset{};
  FlowConfig flow{};
  ClassifierConfig classifier{};
  std::vector<TrainPhase> phases{TrainPhase{}};
  EvaluationConfig evaluation{};
  /// Directory of the config file; relative paths inside it resolve here.
  std::filesystem::path base_dir;
};

// ---------------------------------------------------------------------------
// Strict reading

class KeyReader {
 public:
  KeyReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + "has the wrong type");
    }
  }

  template <class V>
  void get(const std::string& key, std::optional<V>& out) {
    V v{};
    if (!j_.contains(key)) {
      seen_.insert(key);
      return;
    }
    get(key, v);
    out = v;
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  /// Throws on any key that no getter asked for.
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown configuration key '" + path(k) + "'");
    }
  }

  std::string where(const std::string& key = "") const {
    const std::string p = key.empty() ? path_ : path(key);
    return "config" + (p.empty() ? std::string() : " '" + p + "'") + ": ";
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

namespace detail {

template <class E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> options, const std::string& where) {
  std::string names;
  for (const auto& [n, v] : options) {
    if (s == n) return v;
    names += (names.empty() ? "" : ", ") + std::string(n);
  }
  throw ConfigError(where + "unknown value '" + s + "' (expected one of " + names + ")");
}

inline OptimizerConfig read_optimizer(const json& j, const std::string& path) {
  KeyReader r(j, path);
  OptimizerConfig o;
  std::string kind = "adam";
  r.get("kind", kind);
  o.kind = parse_enum<OptimizerKind>(kind, {{"adam", OptimizerKind::adam}, {"sgd", OptimizerKind::sgd_momentum_nesterov}}, r.where("kind"));
  r.get("weight_decay", o.weight_decay);
  r.get("momentum", o.momentum);
  r.get("nesterov", o.nesterov);
  r.get("beta1", o.beta1);
  r.get("beta2", o.beta2);
  r.get("epsilon", o.epsilon);
  r.finish();
  o.validate();
  return o;
}

inline LrSchedule read_schedule(const json& j, const std::string& path) {
  KeyReader r(j, path);
  LrSchedule s;
  std::string kind = "constant";
  r.get("kind", kind);
  s.kind = parse_enum<ScheduleKind>(kind,
                                    {{"constant", ScheduleKind::constant},
                                     {"exponential", ScheduleKind::exponential},
                                     {"milestones", ScheduleKind::milestones},
                                     {"linear_warmup", ScheduleKind::linear_warmup}},
                                    r.where("kind"));
  r.get("base", s.base);
  r.get("decay_rate", s.decay_rate);
  r.get("decay_interval", s.decay_interval);
  r.get("milestones", s.milestones);
  r.get("factor", s.factor);
  r.get("warmup_steps", s.warmup_steps);
  r.finish();
  s.validate();
  return s;
}

inline PerturbationSpec read_perturbation(const json& j, const std::string& path) {
  KeyReader r(j, path);
  PerturbationSpec p;
  std::string kind = "none", norm = "l2";
  r.get("kind", kind);
  r.get("norm", norm);
  p.kind = parse_enum<AttackKind>(kind,
                                  {{"none", AttackKind::none},
                                   {"randomized_la", AttackKind::randomized_la},
                                   {"adversarial_la", AttackKind::adversarial_la},
                                   {"pgd_image", AttackKind::pgd_image}},
                                  r.where("kind"));
  p.norm = parse_enum<Norm>(norm, {{"l2", Norm::l2}, {"linf", Norm::linf}}, r.where("norm"));
  r.get("epsilon", p.epsilon);
  r.get("alpha", p.alpha);
  r.get("steps", p.steps);
  r.get("truncate", p.truncate);
  r.get("seed", p.seed);
  r.finish();
  p.validate();
  return p;
}

inline DatasetConfig read_dataset(const json& j) {
  KeyReader r(j, "dataset");
  DatasetConfig d;
  r.get("source", d.source);
  if (d.source != "synthetic" && d.source != "idx") {
    throw ConfigError(r.where("source") + "unknown value '" + d.source + "' (expected synthetic or idx)");
  }
  if (const json* s = r.child("synthetic")) {
    KeyReader sr(*s, "dataset.synthetic");
    std::string kind = "gaussian_mixture";
    sr.get("kind", kind);
    d.synthetic.kind = parse_enum<SyntheticKind>(kind,
                                                 {{"gaussian_mixture", SyntheticKind::gaussian_mixture},
                                                  {"two_arcs", SyntheticKind::two_arcs},
                                                  {"rings", SyntheticKind::rings}},
                                                 sr.where("kind"));
    sr.get("classes", d.synthetic.classes);
    sr.get("noise", d.synthetic.noise);
    sr.get("radius", d.synthetic.radius);
    sr.get("train_size", d.synthetic.train_size);
    sr.get("test_size", d.synthetic.test_size);
    sr.get("seed", d.synthetic.seed);
    sr.finish();
  }
  if (const json* s = r.child("idx")) {
    KeyReader ir(*s, "dataset.idx");
    ir.get("train_images", d.idx.train_images);
    ir.get("train_labels", d.idx.train_labels);
    ir.get("test_images", d.idx.test_images);
    ir.get("test_labels", d.idx.test_labels);
    ir.get("classes", d.idx.classes);
    ir.get("height", d.idx.height);
    ir.get("width", d.idx.width);
    ir.finish();
  }
  r.get("fraction", d.fraction);
  r.get("subset_seed", d.subset_seed);
  r.finish();
  if (!(d.fraction > 0 && d.fraction <= 1)) throw ConfigError(r.where("fraction") + "must lie in (0, 1]");
  if (d.source == "synthetic") d.synthetic.validate();
  return d;
}

inline FlowConfig read_flow(const json& j) {
  KeyReader r(j, "flow");
  FlowConfig f;
  r.get("enabled", f.enabled);
  r.get("conditional", f.conditional);
  r.get("blocks", f.blocks);
  r.get("hidden", f.hidden);
  r.get("scale_clamp", f.scale_clamp);
  r.get("actnorm", f.actnorm);
  r.get("invlinear", f.invlinear);
  r.get("train_on", f.train_on);
  if (f.train_on != "full" && f.train_on != "subset") {
    throw ConfigError(r.where("train_on") + "must be 'full' or 'subset'");
  }
  if (const json* t = r.child("training")) {
    KeyReader tr(*t, "flow.training");
    tr.get("epochs", f.training.epochs);
    tr.get("batch_size", f.training.batch_size);
    if (const json* o = tr.child("optimizer")) f.training.optimizer = read_optimizer(*o, "flow.training.optimizer");
    if (const json* s = tr.child("schedule")) f.training.schedule = read_schedule(*s, "flow.training.schedule");
    tr.get("max_grad_norm", f.training.max_grad_norm);
    tr.finish();
  }
  r.get("checkpoint", f.checkpoint);
  r.get("save_checkpoint", f.save_checkpoint);
  r.get("dataset_label", f.dataset_label);
  r.finish();
  if (f.enabled && f.blocks == 0) throw ConfigError(r.where("blocks") + "must be > 0");
  if (f.training.epochs == 0 || f.training.batch_size == 0) {
    throw ConfigError(r.where("training") + "epochs and batch_size must be > 0");
  }
  return f;
}

inline ClassifierConfig read_classifier(const json& j) {
  KeyReader r(j, "classifier");
  ClassifierConfig c;
  std::string kind = "mlp";
  r.get("kind", kind);
  c.spec.kind = parse_enum<ClassifierKind>(kind, {{"mlp", ClassifierKind::mlp}, {"lenet", ClassifierKind::lenet}},
                                           r.where("kind"));
  r.get("hidden", c.spec.hidden);
  if (const json* t = r.child("training")) {
    KeyReader tr(*t, "classifier.training");
    tr.get("batch_size", c.training.batch_size);
    if (const json* o = tr.child("optimizer")) c.training.optimizer = read_optimizer(*o, "classifier.training.optimizer");
    if (const json* s = tr.child("schedule")) c.training.schedule = read_schedule(*s, "classifier.training.schedule");
    tr.get("gradient_spot_check", c.training.gradient_spot_check);
    tr.get("spot_check_tolerance", c.training.spot_check_tolerance);
    tr.get("eval_batch_size", c.training.eval_batch_size);
    tr.get("test_eval_interval", c.training.test_eval_interval);
    tr.finish();
  }
  r.finish();
  return c;
}

inline std::vector<TrainPhase> read_phases(const json& j) {
  if (!j.is_array() || j.empty()) throw ConfigError("config 'phases': must be a non-empty array");
  std::vector<TrainPhase> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string path = "phases[" + std::to_string(i) + "]";
    KeyReader r(j[i], path);
    TrainPhase p;
    r.get("epochs", p.epochs);
    if (const json* s = r.child("perturbation")) p.perturbation = read_perturbation(*s, path + ".perturbation");
    r.finish();
    if (p.epochs == 0) throw ConfigError(r.where("epochs") + "must be > 0");
    out.push_back(p);
  }
  return out;
}

inline EvaluationConfig read_evaluation(const json& j) {
  KeyReader r(j, "evaluation");
  EvaluationConfig e;
  if (const json* a = r.child("attacks")) {
    if (!a->is_array()) throw ConfigError(r.where("attacks") + "must be an array");
    for (std::size_t i = 0; i < a->size(); ++i)
      e.attacks.push_back(read_perturbation((*a)[i], "evaluation.attacks[" + std::to_string(i) + "]"));
  }
  r.get("frechet", e.frechet);
  r.get("frechet_samples", e.frechet_samples);
  r.get("perturbation_stats", e.perturbation_stats);
  r.get("sample_grid", e.sample_grid);
  r.finish();
  if (e.frechet && e.frechet_samples < 2) throw ConfigError(r.where("frechet_samples") + "must be >= 2");
  return e;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j, std::filesystem::path base_dir = {}) {
  KeyReader r(j, "");
  ExperimentConfig c;
  c.base_dir = std::move(base_dir);
  if (!r.has("schema_version")) throw ConfigError("config: missing 'schema_version'");
  r.get("schema_version", c.schema_version);
  if (c.schema_version != kConfigSchemaVersion) {
    throw ConfigError("config: schema_version " + std::to_string(c.schema_version) + " is not supported (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  }
  r.get("name", c.name);
  r.get("seed", c.seed);
  std::string precision = "f64";
  r.get("precision", precision);
  c.precision = detail::parse_enum<Precision>(precision, {{"f32", Precision::f32}, {"f64", Precision::f64}},
                                              r.where("precision"));
  r.get("output_dir", c.output_dir);
  if (const json* d = r.child("dataset")) c.dataset = detail::read_dataset(*d);
  if (const json* f = r.child("flow")) c.flow = detail::read_flow(*f);
  if (const json* k = r.child("classifier")) c.classifier = detail::read_classifier(*k);
  if (const json* p = r.child("phases")) c.phases = detail::read_phases(*p);
  if (const json* e = r.child("evaluation")) c.evaluation = detail::read_evaluation(*e);
  r.finish();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(j, path.parent_path());
}

/// Resolves a path from the config relative to the config file.
inline std::filesystem::path resolve_path(const ExperimentConfig& c, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || c.base_dir.empty() ? path : c.base_dir / path;
}

// ---------------------------------------------------------------------------
// Seeds

/// Every random stream of a run. Each is derived from the global seed and a
/// fixed tag, so changing one consumer never shifts another.
struct SeedPlan {
  std::uint64_t global = 0;
  std::uint64_t data = 0;
  std::uint64_t subset = 0;
  std::uint64_t flow_init = 0;
  std::uint64_t flow_training = 0;
  std::uint64_t classifier_init = 0;
  std::uint64_t classifier_training = 0;
  std::uint64_t evaluation = 0;

  static SeedPlan from(const ExperimentConfig& c) {
    auto d = [&](std::uint64_t tag) { return Rng::derive(c.seed, tag).next_u64() >> 11; };
    SeedPlan s;
    s.global = c.seed;
    s.data = c.dataset.synthetic.seed;
    s.subset = c.dataset.subset_seed.value_or(d(1));
    s.flow_init = d(2);
    s.flow_training = d(3);
    s.classifier_init = d(4);
    s.classifier_training = d(5);
    s.evaluation = d(6);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Writing the resolved configuration back out

namespace detail {

inline json to_json(const OptimizerConfig& o) {
  return {{"kind", o.kind == OptimizerKind::adam ? "adam" : "sgd"},
          {"weight_decay", o.weight_decay},
          {"momentum", o.momentum},
          {"nesterov", o.nesterov},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"epsilon", o.epsilon}};
}

inline json to_json(const LrSchedule& s) {
  const char* kinds[] = {"constant", "exponential", "milestones", "linear_warmup"};
  return {{"kind", kinds[static_cast<int>(s.kind)]},
          {"base", s.base},
          {"decay_rate", s.decay_rate},
          {"decay_interval", s.decay_interval},
          {"milestones", s.milestones},
          {"factor", s.factor},
          {"warmup_steps", s.warmup_steps}};
}

}  // namespace detail

inline json to_json(const PerturbationSpec& p) {
  return {{"kind", attack_kind_name(p.kind)}, {"norm", norm_name(p.norm)}, {"epsilon", p.epsilon},
          {"alpha", p.alpha},                 {"steps", p.steps},          {"truncate", p.truncate},
          {"seed", p.seed}};
}

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["precision"] = precision_name(c.precision);
  j["output_dir"] = c.output_dir;
  const auto& d = c.dataset;
  j["dataset"] = {{"source", d.source}, {"fraction", d.fraction}};
  if (d.subset_seed) j["dataset"]["subset_seed"] = *d.subset_seed;
  if (d.source == "synthetic") {
    j["dataset"]["synthetic"] = {{"kind", synthetic_kind_name(d.synthetic.kind)},
                                 {"classes", d.synthetic.classes},
                                 {"noise", d.synthetic.noise},
                                 {"radius", d.synthetic.radius},
                                 {"train_size", d.synthetic.train_size},
                                 {"test_size", d.synthetic.test_size},
                                 {"seed", d.synthetic.seed}};
  } else {
    j["dataset"]["idx"] = {{"train_images", d.idx.train_images}, {"train_labels", d.idx.train_labels},
                           {"test_images", d.idx.test_images},   {"test_labels", d.idx.test_labels},
                           {"classes", d.idx.classes},           {"height", d.idx.height},
                           {"width", d.idx.width}};
  }
  const auto& f = c.flow;
  j["flow"] = {{"enabled", f.enabled},
               {"conditional", f.conditional},
               {"blocks", f.blocks},
               {"hidden", f.hidden},
               {"scale_clamp", f.scale_clamp},
               {"actnorm", f.actnorm},
               {"invlinear", f.invlinear},
               {"train_on", f.train_on},
               {"training",
                {{"epochs", f.training.epochs},
                 {"batch_size", f.training.batch_size},
                 {"optimizer", detail::to_json(f.training.optimizer)},
                 {"schedule", detail::to_json(f.training.schedule)},
                 {"max_grad_norm", f.training.max_grad_norm}}},
               {"checkpoint", f.checkpoint},
               {"save_checkpoint", f.save_checkpoint},
               {"dataset_label", f.dataset_label}};
  const auto& k = c.classifier;
  j["classifier"] = {{"kind", classifier_kind_name(k.spec.kind)},
                     {"hidden", k.spec.hidden},
                     {"training",
                      {{"batch_size", k.training.batch_size},
                       {"optimizer", detail::to_json(k.training.optimizer)},
                       {"schedule", detail::to_json(k.training.schedule)},
                       {"gradient_spot_check", k.training.gradient_spot_check},
                       {"spot_check_tolerance", k.training.spot_check_tolerance},
                       {"eval_batch_size", k.training.eval_batch_size},
                       {"test_eval_interval", k.training.test_eval_interval}}}};
  j["phases"] = json::array();
  for (const auto& p : c.phases) j["phases"].push_back({{"epochs", p.epochs}, {"perturbation", to_json(p.perturbation)}});
  j["evaluation"] = {{"attacks", json::array()},
                     {"frechet", c.evaluation.frechet},
                     {"frechet_samples", c.evaluation.frechet_samples},
                     {"perturbation_stats", c.evaluation.perturbation_stats},
                     {"sample_grid", c.evaluation.sample_grid}};
  for (const auto& a : c.evaluation.attacks) j["evaluation"]["attacks"].push_back(to_json(a));
  return j;
}

}  // namespace latentflow
