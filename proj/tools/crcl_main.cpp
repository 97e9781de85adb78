#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "crcl/errors.hpp"
#include "crcl/experiment.hpp"

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> method;
  std::optional<std::string> order;
  std::optional<std::string> resume;
};

crcl::ExperimentConfig load_with_overrides(const std::string& config_path,
                                           const Overrides& ov) {
  crcl::ExperimentConfig cfg = crcl::parse_config(config_path);
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.out) cfg.output_dir = *ov.out;
  if (ov.method) cfg.method = crcl::parse_method(*ov.method);
  if (ov.order) cfg.order = crcl::parse_task_order(*ov.order);
  return cfg;
}

void print_error(const std::string& message) {
  std::string escaped;
  for (char c : message) {
    if (c == '"' || c == '\\') escaped += '\\';
    if (c == '\n') {
      escaped += "\\n";
      continue;
    }
    escaped += c;
  }
  std::fprintf(stderr, "{\"error\": \"%s\"}\n", escaped.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crcl: replay-free class-incremental learning engine"};
  app.require_subcommand(1);

  Overrides ov;
  std::string config_path;

  auto* run = app.add_subcommand("run", "run an experiment from a config file");
  run->add_option("config", config_path, "config file path")->required();
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", ov.seed, "override stream.seed");
    cmd->add_option("--out", ov.out, "override the output directory");
    cmd->add_option("--method", ov.method, "override the method")
        ->check(CLI::IsMember({"bicrcl", "finetune", "joint"}));
    cmd->add_option("--order", ov.order, "override the task order")
        ->check(CLI::IsMember({"given", "reversed", "shuffled"}));
  };
  add_common(run);
  run->add_option("--resume", ov.resume, "checkpoint file to resume from");

  auto* validate =
      app.add_subcommand("validate", "check a config file and print issues");
  validate->add_option("config", config_path, "config file path")->required();
  add_common(validate);

  CLI11_PARSE(app, argc, argv);

  try {
    crcl::ExperimentConfig cfg = load_with_overrides(config_path, ov);
    if (validate->parsed()) {
      const auto errors = crcl::validate_config(cfg);
      if (errors.empty()) {
        std::printf("ok\n");
        return 0;
      }
      for (const auto& e : errors) std::fprintf(stderr, "%s\n", e.c_str());
      return 2;
    }
    std::optional<std::string> resume;
    if (ov.resume) resume = *ov.resume;
    const crcl::ExperimentResult result = crcl::run_experiment(cfg, resume);
    std::printf("report: %s\n", result.report_json.c_str());
    return 0;
  } catch (const crcl::Error& e) {
    print_error(e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error(e.what());
    return 1;
  }
}
