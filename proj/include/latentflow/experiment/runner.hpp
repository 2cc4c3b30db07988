#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentflow/classify/classifier.hpp"
#include "latentflow/classify/train.hpp"
#include "latentflow/data/idx.hpp"
#include "latentflow/data/subset.hpp"
#include "latentflow/data/synthetic.hpp"
#include "latentflow/eval/metrics.hpp"
#include "latentflow/experiment/config.hpp"
#include "latentflow/experiment/report.hpp"
#include "latentflow/flow/checkpoint.hpp"
#include "latentflow/flow/model.hpp"
#include "latentflow/flow/train.hpp"

namespace latentflow {

/// Raised by run_experiment; names the pipeline stage that failed.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error("stage '" + stage + "' failed: " + message), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Which parts of the pipeline a run executes.
enum class RunMode { full, train_flow, train_classifier, attack_eval, metrics };

inline const char* run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::full: return "run";
    case RunMode::train_flow: return "train-flow";
    case RunMode::train_classifier: return "train-classifier";
    case RunMode::attack_eval: return "attack-eval";
    case RunMode::metrics: return "metrics";
  }
  return "?";
}

struct RunResult {
  std::filesystem::path output_dir;
  nlohmann::ordered_json metrics;
  std::vector<std::filesystem::path> files;
};

inline constexpr const char* kPartialMarker = "PARTIAL";

template <class T>
struct LoadedData {
  Dataset<T> train_full;
  Dataset<T> train;  // the classifier's subset
  Dataset<T> test;
  std::vector<std::size_t> subset_indices;
};

template <class T>
LoadedData<T> load_datasets(const ExperimentConfig& c, const SeedPlan& seeds) {
  LoadedData<T> d;
  if (c.dataset.source == "synthetic") {
    d.train_full = make_synthetic<T>(c.dataset.synthetic, Split::train);
    d.test = make_synthetic<T>(c.dataset.synthetic, Split::test);
  } else {
    const auto& f = c.dataset.idx;
    d.train_full = load_idx<T>(resolve_path(c, f.train_images).string(), resolve_path(c, f.train_labels).string(),
                               f.classes, Split::train);
    d.test = load_idx<T>(resolve_path(c, f.test_images).string(), resolve_path(c, f.test_labels).string(), f.classes,
                         Split::test);
  }
  d.train_full.validate();
  d.test.validate();
  if (d.train_full.dim() != d.test.dim()) throw DataError("train and test inputs differ in width");
  d.subset_indices = subset_indices(d.train_full, c.dataset.fraction, seeds.subset);
  d.train = d.train_full.select(d.subset_indices);
  return d;
}

/// Input width and class count implied by the dataset section.
inline std::pair<std::size_t, std::size_t> data_shape(const ExperimentConfig& c) {
  if (c.dataset.source == "synthetic") return {2, c.dataset.synthetic.classes};
  return {c.dataset.idx.height * c.dataset.idx.width, c.dataset.idx.classes};
}

inline ClassifierSpec classifier_spec(const ExperimentConfig& c) {
  ClassifierSpec s = c.classifier.spec;
  std::tie(s.input_dim, s.classes) = data_shape(c);
  if (c.dataset.source == "idx") {
    s.channels = 1;
    s.height = c.dataset.idx.height;
    s.width = c.dataset.idx.width;
  }
  return s;
}

inline FlowArchitecture flow_architecture(const ExperimentConfig& c) {
  const auto [dim, classes] = data_shape(c);
  return {.dim = dim,
          .label_width = c.flow.conditional ? classes : 0,
          .blocks = c.flow.blocks,
          .hidden = c.flow.hidden,
          .scale_clamp = c.flow.scale_clamp,
          .actnorm = c.flow.actnorm,
          .invlinear = c.flow.invlinear};
}

inline bool needs_flow(const ExperimentConfig& c, RunMode mode) {
  if (mode == RunMode::train_flow) return true;
  for (const auto& p : c.phases)
    if (p.perturbation.latent()) return true;
  if (mode == RunMode::train_classifier) return false;
  for (const auto& a : c.evaluation.attacks)
    if (a.latent()) return true;
  return c.evaluation.frechet && c.flow.enabled && (mode == RunMode::full || mode == RunMode::metrics);
}

/// Checks everything that can be checked without touching data or
/// parameters: referenced files, shapes, and that latent perturbations have
/// a flow to use.
inline void validate_experiment(const ExperimentConfig& c, RunMode mode = RunMode::full) {
  namespace fs = std::filesystem;
  if (c.dataset.source == "idx") {
    const auto& f = c.dataset.idx;
    for (const auto* p : {&f.train_images, &f.train_labels, &f.test_images, &f.test_labels}) {
      if (p->empty()) throw ConfigError("config 'dataset.idx': all four file paths are required");
      if (!fs::exists(resolve_path(c, *p))) throw ConfigError("dataset file not found: " + resolve_path(c, *p).string());
    }
  }
  if (!c.flow.checkpoint.empty() && !fs::exists(resolve_path(c, c.flow.checkpoint))) {
    throw ConfigError("flow checkpoint not found: " + resolve_path(c, c.flow.checkpoint).string());
  }
  if (needs_flow(c, mode) && !c.flow.enabled) {
    throw ConfigError("config: a latent perturbation or sample metric needs a flow but 'flow.enabled' is false");
  }
  classifier_spec(c).validate();
  if (c.phases.empty()) throw ConfigError("config 'phases': at least one phase required");
}

namespace detail {

template <class T>
std::optional<Tensor<T>> flow_condition(const FlowModel<T>& flow, std::span<const std::size_t> labels) {
  if (flow.label_width() == 0) return std::nullopt;
  return one_hot<T>(labels, flow.label_width());
}

inline nlohmann::ordered_json seeds_json(const SeedPlan& s) {
  return {{"global", s.global},
          {"data", s.data},
          {"subset", s.subset},
          {"flow_init", s.flow_init},
          {"flow_training", s.flow_training},
          {"classifier_init", s.classifier_init},
          {"classifier_training", s.classifier_training},
          {"evaluation", s.evaluation}};
}

/// Attack seeds that were left at 0 are keyed to the evaluation seed so
/// that changing --seed changes them too.
inline PerturbationSpec seeded(PerturbationSpec p, std::uint64_t fallback, std::size_t index) {
  if (p.seed == 0) p.seed = Rng::derive(fallback, index).next_u64() >> 11;
  return p;
}

template <class T>
void write_grid(const std::filesystem::path& path, const ExperimentConfig& c, Classifier<T>& clf, FlowModel<T>* flow,
                const Dataset<T>& test, const std::vector<PerturbationSpec>& attacks, std::size_t rows,
                std::uint64_t seed) {
  rows = std::min(rows, test.size());
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) idx[i] = i;
  const Tensor<T> x = test.x.gather_rows(idx);
  std::vector<std::size_t> y(test.labels.begin(), test.labels.begin() + static_cast<std::ptrdiff_t>(rows));
  std::vector<Tensor<T>> columns{x};
  for (const auto& a : attacks) {
    AttackOptions opt;
    opt.throw_on_failure = false;
    columns.push_back(perturb(a, flow, clf, x, std::span<const std::size_t>(y), opt).x_tilde);
  }
  if (flow) {
    Rng rng(seed);
    columns.push_back(flow->sample(rows, rng, flow_condition(*flow, std::span<const std::size_t>(y))));
  }
  std::vector<std::vector<T>> cells;
  for (std::size_t r = 0; r < rows; ++r)
    for (const auto& col : columns) cells.emplace_back(col.row(r).begin(), col.row(r).end());
  write_pgm_grid(path, cells, rows, columns.size(), c.dataset.idx.height, c.dataset.idx.width);
}

}  // namespace detail

/// Runs the configured pipeline in precision T and writes its reports.
template <class T>
RunResult run_experiment_as(const ExperimentConfig& c, const std::filesystem::path& out_dir,
                            RunMode mode = RunMode::full) {
  namespace fs = std::filesystem;
  using ojson = nlohmann::ordered_json;
  RunResult res;
  res.output_dir = out_dir;
  ojson& m = res.metrics;
  const SeedPlan seeds = SeedPlan::from(c);
  m["mode"] = run_mode_name(mode);
  m["status"] = "running";
  m["config"] = to_json(c);
  m["seeds"] = detail::seeds_json(seeds);

  std::string stage = "validate";
  auto write_metrics = [&] {
    auto out = detail::open_out(out_dir / "metrics.json");
    out << m.dump(2) << '\n';
  };
  try {
    validate_experiment(c, mode);
    fs::create_directories(out_dir);
    fs::remove(out_dir / kPartialMarker);

    stage = "load_data";
    auto data = load_datasets<T>(c, seeds);
    m["data"] = {{"train_provenance", data.train_full.provenance},
                 {"test_provenance", data.test.provenance},
                 {"train_full_size", data.train_full.size()},
                 {"train_subset_size", data.train.size()},
                 {"test_size", data.test.size()},
                 {"fraction", c.dataset.fraction},
                 {"classes", data.train.classes}};

    // Flow: loaded from a checkpoint, trained, or absent.
    std::optional<FlowModel<T>> flow;
    if (needs_flow(c, mode)) {
      stage = "flow";
      Rng init(seeds.flow_init);
      flow = build_flow<T>(flow_architecture(c), init);
      ojson fj;
      if (!c.flow.checkpoint.empty()) {
        flow = load_checkpoint_matching<T>(resolve_path(c, c.flow.checkpoint), *flow);
        fj["source"] = "checkpoint";
        fj["checkpoint"] = c.flow.checkpoint;
        fj["trained_on"] = c.flow.dataset_label.empty() ? ojson(nullptr) : ojson(c.flow.dataset_label);
      } else {
        const Dataset<T>& fd = c.flow.train_on == "full" ? data.train_full : data.train;
        auto cfg = c.flow.training;
        cfg.seed = seeds.flow_training;
        auto h = train_flow(*flow, fd.x, cfg, detail::flow_condition(*flow, std::span<const std::size_t>(fd.labels)));
        fj["source"] = "trained";
        fj["trained_on"] = fd.provenance;
        fj["epoch_nll"] = h.epoch_nll;
        if (c.flow.save_checkpoint) {
          save_checkpoint(*flow, out_dir / "flow.ckpt");
          res.files.push_back(out_dir / "flow.ckpt");
        }
      }
      fj["parameters"] = flow->parameter_count();
      fj["test_nll"] = static_cast<double>(
          flow->nll(data.test.x, detail::flow_condition(*flow, std::span<const std::size_t>(data.test.labels))));
      fj["classifier_data"] = data.train.provenance;
      m["flow"] = fj;
    }

    if (mode != RunMode::train_flow) {
      stage = "classifier";
      Classifier<T> clf(classifier_spec(c));
      Rng init(seeds.classifier_init);
      clf.init(init);
      auto tcfg = c.classifier.training;
      tcfg.seed = seeds.classifier_training;
      auto phases = c.phases;
      for (std::size_t i = 0; i < phases.size(); ++i)
        phases[i].perturbation = detail::seeded(phases[i].perturbation, seeds.classifier_training, i);
      FlowModel<T>* fp = flow ? &*flow : nullptr;
      auto hist = train_classifier(clf, fp, data.train, &data.test, phases, tcfg);
      write_history_jsonl(out_dir / "history.jsonl", hist);
      res.files.push_back(out_dir / "history.jsonl");
      ojson cj;
      cj["parameters"] = clf.parameter_count();
      cj["epochs"] = hist.epochs.size();
      cj["phase_start"] = hist.phase_start;
      cj["grad_check_failures"] = hist.grad_check_failures;
      ojson hj = ojson::array();
      for (const auto& r : hist.epochs) hj.push_back(to_json(r));
      cj["history"] = hj;
      const auto train_eval = evaluate_classifier(clf, data.train);
      const auto test_eval = evaluate_classifier(clf, data.test);
      cj["train_accuracy"] = train_eval.accuracy;
      cj["train_loss"] = train_eval.loss;
      cj["test_accuracy"] = test_eval.accuracy;
      cj["test_loss"] = test_eval.loss;
      m["classifier"] = cj;

      CsvTable acc({"method", "train_fraction", "test_accuracy", "test_loss", "train_accuracy"});
      std::string method;
      for (const auto& p : phases) method += (method.empty() ? "" : " + ") + p.perturbation.describe();
      acc.row().cell(method).cell(c.dataset.fraction).cell(test_eval.accuracy).cell(test_eval.loss).cell(
          train_eval.accuracy);
      acc.write(out_dir / "accuracy.csv");
      res.files.push_back(out_dir / "accuracy.csv");

      if (mode == RunMode::full || mode == RunMode::attack_eval || mode == RunMode::metrics) {
        stage = "evaluate";
        std::vector<PerturbationSpec> attacks;
        for (std::size_t i = 0; i < c.evaluation.attacks.size(); ++i)
          attacks.push_back(detail::seeded(c.evaluation.attacks[i], seeds.evaluation, i));
        CsvTable rob({"attack", "clean_accuracy", "attacked_accuracy", "drop", "evaluated", "failed"});
        CsvTable size({"attack", "mean_l2", "mean_linf", "count"});
        ojson rj = ojson::array();
        for (const auto& a : attacks) {
          const auto r = robustness_eval(clf, a, fp, data.test, tcfg.eval_batch_size);
          rj.push_back({{"attack", r.attack},
                        {"spec", to_json(a)},
                        {"clean_accuracy", r.clean_acc},
                        {"attacked_accuracy", r.attacked_acc},
                        {"drop", r.drop},
                        {"evaluated", r.evaluated},
                        {"failed", r.failed},
                        {"mean_l2", r.size.mean_l2},
                        {"mean_linf", r.size.mean_linf}});
          rob.row().cell(r.attack).cell(r.clean_acc).cell(r.attacked_acc).cell(r.drop).cell(r.evaluated).cell(r.failed);
          size.row().cell(r.attack).cell(r.size.mean_l2).cell(r.size.mean_linf).cell(r.size.count);
        }
        m["robustness"] = rj;
        if (mode != RunMode::metrics) {
          rob.write(out_dir / "robustness.csv");
          res.files.push_back(out_dir / "robustness.csv");
        }
        if (mode != RunMode::attack_eval && c.evaluation.perturbation_stats) {
          size.write(out_dir / "perturbation_size.csv");
          res.files.push_back(out_dir / "perturbation_size.csv");
        }

        if (mode != RunMode::attack_eval && c.evaluation.frechet && fp) {
          // Test data against flow samples drawn with the same labels.
          const std::size_t n = std::min(c.evaluation.frechet_samples, data.test.size());
          std::vector<std::size_t> idx(n);
          for (std::size_t i = 0; i < n; ++i) idx[i] = i;
          const auto real = data.test.select(idx);
          Rng srng = Rng::derive(seeds.evaluation, 0xfd);
          const Tensor<T> gen = fp->sample(n, srng, detail::flow_condition(*fp, std::span<const std::size_t>(real.labels)));
          const auto fr = feature_frechet(classifier_features(clf), real.x, gen);
          m["frechet"] = {{"label", fr.label},
                          {"between", "test data vs flow samples"},
                          {"distance", fr.distance},
                          {"samples_a", fr.count_a},
                          {"samples_b", fr.count_b},
                          {"feature_dim", fr.dim}};
        }

        if (c.evaluation.sample_grid > 0 && c.dataset.source == "idx") {
          detail::write_grid(out_dir / "samples.pgm", c, clf, fp, data.test, attacks, c.evaluation.sample_grid,
                             seeds.evaluation);
          res.files.push_back(out_dir / "samples.pgm");
        }
      }
    }
    stage = "report";
    m["status"] = "complete";
    write_metrics();
    res.files.push_back(out_dir / "metrics.json");
    return res;
  } catch (const std::exception& e) {
    m["status"] = "failed";
    m["failed_stage"] = stage;
    m["error"] = e.what();
    try {
      fs::create_directories(out_dir);
      write_metrics();
      auto marker = detail::open_out(out_dir / kPartialMarker);
      marker << "stage: " << stage << "\nerror: " << e.what() << '\n';
    } catch (const std::exception&) {
      // The original error is the one worth reporting.
    }
    throw StageError(stage, e.what());
  }
}

/// Dispatches on the configured precision.
inline RunResult run_experiment(const ExperimentConfig& c, const std::filesystem::path& out_dir,
                                RunMode mode = RunMode::full) {
  return c.precision == Precision::f32 ? run_experiment_as<float>(c, out_dir, mode)
                                       : run_experiment_as<double>(c, out_dir, mode);
}

inline RunResult run_experiment(const ExperimentConfig& c, RunMode mode = RunMode::full) {
  return run_experiment(c, resolve_path(c, c.output_dir), mode);
}

}  // namespace latentflow
