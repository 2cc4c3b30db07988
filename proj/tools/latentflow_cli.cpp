// latentflow: command-line front end for the experiment runner.
//
//   latentflow run --config configs/quickstart.json
//   latentflow train-flow --config a.json --out out/a
//   latentflow run --config a.json --config b.json --jobs 2   (one process per config)

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "latentflow/experiment/runner.hpp"

extern char** environ;

namespace lf = latentflow;
namespace fs = std::filesystem;

namespace {

constexpr const char* kOutDirEnv = "LATENTFLOW_OUT_DIR";

struct Options {
  std::vector<std::string> configs;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string precision;
  std::string load_flow;
  unsigned jobs = 1;
};

/// Output directory precedence: --out, then the environment, then the config.
fs::path output_dir(const lf::ExperimentConfig& c, const Options& o) {
  if (!o.out.empty()) return o.out;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return lf::resolve_path(c, c.output_dir);
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void print_summary(const lf::RunResult& r) {
  const auto& m = r.metrics;
  std::cout << "status: " << m["status"].get<std::string>() << "  (" << r.output_dir.string() << ")\n";
  if (m.contains("flow")) {
    std::cout << "flow: " << m["flow"]["source"].get<std::string>()
              << ", test NLL " << fixed(m["flow"]["test_nll"].get<double>(), 4) << '\n';
  }
  if (m.contains("classifier")) {
    std::cout << "classifier: test accuracy " << fixed(m["classifier"]["test_accuracy"].get<double>())
              << "% after " << m["classifier"]["epochs"].get<std::size_t>() << " epochs\n";
  }
  if (m.contains("robustness")) {
    for (const auto& a : m["robustness"])
      std::cout << "  " << a["attack"].get<std::string>() << ": attacked "
                << fixed(a["attacked_accuracy"].get<double>()) << "%, drop "
                << fixed(a["drop"].get<double>()) << '\n';
  }
  if (m.contains("frechet")) {
    std::cout << m["frechet"]["label"].get<std::string>() << ": "
              << fixed(m["frechet"]["distance"].get<double>(), 4) << " (N = "
              << m["frechet"]["samples_a"].get<std::size_t>() << ")\n";
  }
}

int run_one(lf::RunMode mode, const Options& o) {
  auto c = lf::load_config(o.configs.front());
  if (o.seed) c.seed = *o.seed;
  if (!o.precision.empty()) c.precision = o.precision == "f32" ? lf::Precision::f32 : lf::Precision::f64;
  if (!o.load_flow.empty()) {
    c.flow.checkpoint = fs::absolute(o.load_flow).string();
    c.flow.enabled = true;
  }
  const auto out = output_dir(c, o);
  try {
    print_summary(lf::run_experiment(c, out, mode));
    return 0;
  } catch (const lf::StageError& e) {
    std::cerr << "latentflow: " << e.what() << "\n  partial report in " << out.string() << '\n';
    return 1;
  }
}

/// Re-invokes this executable once per config, at most `jobs` at a time.
int fan_out(const std::string& verb, const Options& o) {
  const std::string self = fs::read_symlink("/proc/self/exe").string();
  std::map<pid_t, std::string> running;
  int failures = 0;
  auto reap = [&] {
    int status = 0;
    const pid_t pid = ::waitpid(-1, &status, 0);
    if (pid <= 0) return;
    const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
    std::cerr << (ok ? "done: " : "FAILED: ") << running[pid] << '\n';
    failures += !ok;
    running.erase(pid);
  };
  for (const auto& cfg : o.configs) {
    while (running.size() >= o.jobs) reap();
    std::vector<std::string> args{self, verb, "--config", cfg};
    if (o.seed) args.insert(args.end(), {"--seed", std::to_string(*o.seed)});
    if (!o.out.empty()) args.insert(args.end(), {"--out", (fs::path(o.out) / fs::path(cfg).stem()).string()});
    if (!o.precision.empty()) args.insert(args.end(), {"--precision", o.precision});
    if (!o.load_flow.empty()) args.insert(args.end(), {"--load-flow", o.load_flow});
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (::posix_spawn(&pid, self.c_str(), nullptr, nullptr, argv.data(), environ) != 0) {
      std::cerr << "FAILED to start: " << cfg << '\n';
      ++failures;
      continue;
    }
    running[pid] = cfg;
  }
  while (!running.empty()) reap();
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-space perturbation experiments with normalizing flows"};
  app.require_subcommand(1);
  Options opt;

  const std::vector<std::pair<std::string, lf::RunMode>> verbs{
      {"run", lf::RunMode::full},
      {"train-flow", lf::RunMode::train_flow},
      {"train-classifier", lf::RunMode::train_classifier},
      {"attack-eval", lf::RunMode::attack_eval},
      {"metrics", lf::RunMode::metrics}};
  const std::map<std::string, std::string> help{
      {"run", "Full pipeline: train flow, train classifier, evaluate"},
      {"train-flow", "Train (or load) the flow and write its checkpoint"},
      {"train-classifier", "Train the classifier through its phase plan"},
      {"attack-eval", "Train, then write the robustness table"},
      {"metrics", "Train, then write metrics only (perturbation sizes, Frechet distance)"}};
  for (const auto& [name, mode] : verbs) {
    auto* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("--config", opt.configs, "Experiment config (JSON); repeat to fan out")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "Override the global seed");
    sub->add_option("--out", opt.out, std::string("Output directory (overrides ") + kOutDirEnv + " and the config)");
    sub->add_option("--precision", opt.precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option("--load-flow", opt.load_flow, "Use this flow checkpoint instead of training")
        ->check(CLI::ExistingFile);
    sub->add_option("--jobs", opt.jobs, "Concurrent processes when several configs are given")
        ->check(CLI::PositiveNumber);
  }
  CLI11_PARSE(app, argc, argv);

  for (const auto& [name, mode] : verbs) {
    if (!app.got_subcommand(name)) continue;
    try {
      return opt.configs.size() > 1 ? fan_out(name, opt) : run_one(mode, opt);
    } catch (const lf::Error& e) {
      std::cerr << "latentflow: " << e.what() << '\n';
      return 2;
    }
  }
  return 2;
}
