#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "crcl/errors.hpp"
#include "crcl/experiment.hpp"

using namespace crcl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("crcl_exp_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Six Gaussian blobs in 8 dimensions, written as inline-label CSV.
void write_blob_fixture(const fs::path& dir) {
  std::mt19937_64 rng(1234);
  std::normal_distribution<double> noise(0.0, 0.3);
  std::normal_distribution<double> center_dist(0.0, 2.0);
  std::vector<std::array<double, 8>> centers(6);
  for (auto& c : centers)
    for (auto& v : c) v = center_dist(rng);

  auto write_split = [&](const fs::path& p, int per_class) {
    std::ofstream os(p);
    for (int c = 0; c < 6; ++c) {
      for (int i = 0; i < per_class; ++i) {
        os << c;
        for (int j = 0; j < 8; ++j) os << ',' << centers[c][j] + noise(rng);
        os << "\n";
      }
    }
  };
  write_split(dir / "train.csv", 24);
  write_split(dir / "test.csv", 8);
  std::ofstream man(dir / "manifest.txt");
  man << "format = csv\ntrain_images = train.csv\ntest_images = test.csv\n";
}

ExperimentConfig small_config(const fs::path& dir, const fs::path& out) {
  ExperimentConfig cfg;
  cfg.manifest = (dir / "manifest.txt").string();
  cfg.tasks = 3;
  cfg.seed = 11;
  cfg.output_dir = out.string();
  cfg.backbone.hidden_dim = 16;
  cfg.backbone.embed_dim = 8;
  cfg.backbone.num_blocks = 2;
  cfg.bottleneck_dim = 4;
  cfg.train.batch_size = 16;
  cfg.train.epochs_first = 3;
  cfg.train.epochs_later = 2;
  cfg.expansion_dim = 32;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config file parsing honors sections, defaults, and comments") {
  TempDir dir;
  const fs::path p = dir.path / "cfg.txt";
  {
    std::ofstream os(p);
    os << "# comment\n[stream]\nmanifest = data/m.txt\ntasks = 5\n"
       << "order = reversed\nseed = 9\nmethod = finetune\n"
       << "[train]\nlr_init = 0.02\n[fusion]\ntau = 0.2\n";
  }
  ExperimentConfig cfg = parse_config(p.string());
  CHECK(cfg.manifest == "data/m.txt");
  CHECK(cfg.tasks == 5);
  CHECK(cfg.order == TaskOrder::reversed);
  CHECK(cfg.seed == 9);
  CHECK(cfg.method == Method::finetune);
  CHECK(cfg.train.lr_init == 0.02);
  CHECK(cfg.fusion.tau == 0.2);
  // untouched defaults
  CHECK(cfg.train.batch_size == 48);
  CHECK(cfg.train.epochs_first == 20);
  CHECK(cfg.consolidation.alpha == 0.99);
  CHECK(cfg.fusion.lambda == 0.5);
}

TEST_CASE("config parser rejects unknown keys and bad numbers") {
  TempDir dir;
  const fs::path p = dir.path / "cfg.txt";
  {
    std::ofstream os(p);
    os << "[stream]\nbogus_key = 1\n";
  }
  CHECK_THROWS_AS(parse_config(p.string()), ParseError);
  {
    std::ofstream os(p);
    os << "[stream]\ntasks = soon\n";
  }
  CHECK_THROWS_AS(parse_config(p.string()), ParseError);
}

TEST_CASE("validation aggregates every violation at once") {
  ExperimentConfig cfg;  // no manifest
  cfg.consolidation.alpha = 1.5;
  cfg.fusion.tau = 0.0;
  cfg.train.lr_init = -1.0;
  const auto errors = validate_config(cfg);
  CHECK(errors.size() >= 4);
  bool saw_manifest = false, saw_alpha = false, saw_tau = false, saw_lr = false;
  for (const auto& e : errors) {
    saw_manifest |= e.find("manifest") != std::string::npos;
    saw_alpha |= e.find("alpha") != std::string::npos;
    saw_tau |= e.find("tau") != std::string::npos;
    saw_lr |= e.find("lr_init") != std::string::npos;
  }
  CHECK(saw_manifest);
  CHECK(saw_alpha);
  CHECK(saw_tau);
  CHECK(saw_lr);
}

TEST_CASE("canonical config echo round-trips") {
  TempDir dir;
  ExperimentConfig cfg = small_config(dir.path, dir.path / "out");
  cfg.order = TaskOrder::shuffled;
  cfg.method = Method::joint;
  cfg.train.lr_init = 0.0125;
  cfg.consolidation.alpha = 0.97;
  cfg.beta = 12.5;
  const std::string text = config_to_string(cfg);
  const fs::path p = dir.path / "echo.txt";
  std::ofstream(p) << text;
  ExperimentConfig back = parse_config(p.string());
  CHECK(config_to_string(back) == text);
  CHECK(back.train.lr_init == cfg.train.lr_init);
  CHECK(back.beta == cfg.beta);
  CHECK(back.order == cfg.order);
  CHECK(back.method == cfg.method);
}

TEST_CASE("run_experiment refuses an invalid config") {
  ExperimentConfig cfg;
  cfg.manifest = "/definitely/not/here.txt";
  CHECK_THROWS_AS(run_experiment(cfg), InvalidParameterError);
}

TEST_CASE("bicrcl run is deterministic: reports are byte-identical") {
  TempDir dir;
  write_blob_fixture(dir.path);
  ExperimentConfig a = small_config(dir.path, dir.path / "out_a");
  ExperimentResult ra = run_experiment(a);
  const std::string report_a = slurp(ra.report_json);
  const std::string csv_a = slurp(dir.path / "out_a" / "sessions.csv");
  ExperimentResult rb = run_experiment(a);

  CHECK(ra.sessions.session_accuracy == rb.sessions.session_accuracy);
  CHECK(slurp(rb.report_json) == report_a);
  CHECK(slurp(dir.path / "out_a" / "sessions.csv") == csv_a);
  CHECK(ra.sessions.session_accuracy.size() == 3);
  // The blobs are easy; the engine should do well on them.
  CHECK(ra.sessions.acc_last > 60.0);
}

TEST_CASE("resume from a checkpoint reproduces the uninterrupted run") {
  TempDir dir;
  write_blob_fixture(dir.path);
  ExperimentConfig full_cfg = small_config(dir.path, dir.path / "out_full");
  ExperimentResult full = run_experiment(full_cfg);

  ExperimentConfig resumed_cfg = small_config(dir.path, dir.path / "out_res");
  const std::string ck =
      ((dir.path / "out_full") / "checkpoint_2.ck").string();
  ExperimentResult resumed = run_experiment(resumed_cfg, ck);

  REQUIRE(resumed.sessions.session_accuracy.size() == 3);
  for (int t = 0; t < 3; ++t) {
    CHECK(resumed.sessions.session_accuracy[t] ==
          full.sessions.session_accuracy[t]);
  }
  CHECK(resumed.beta == full.beta);
}

TEST_CASE("single-task stream degenerates to one learner and still reports") {
  TempDir dir;
  write_blob_fixture(dir.path);
  ExperimentConfig cfg = small_config(dir.path, dir.path / "out1");
  cfg.tasks = 1;
  ExperimentResult r = run_experiment(cfg);
  REQUIRE(r.sessions.session_accuracy.size() == 1);
  CHECK(r.sessions.acc_avg == r.sessions.acc_last);
  CHECK(r.sessions.acc_last > 60.0);
  CHECK(fs::exists(dir.path / "out1" / "report.json"));
}

TEST_CASE("finetune and joint methods produce reports") {
  TempDir dir;
  write_blob_fixture(dir.path);
  ExperimentConfig cfg = small_config(dir.path, dir.path / "out_ft");
  cfg.method = Method::finetune;
  ExperimentResult ft = run_experiment(cfg);
  CHECK(ft.sessions.session_accuracy.size() == 3);

  ExperimentConfig jcfg = small_config(dir.path, dir.path / "out_j");
  jcfg.method = Method::joint;
  ExperimentResult joint = run_experiment(jcfg);
  CHECK(joint.sessions.session_accuracy.size() == 1);
  const std::string report = slurp(joint.report_json);
  CHECK(report.find("\"acc_avg\": null") != std::string::npos);
}

TEST_CASE("prediction emission writes one row per test sample") {
  TempDir dir;
  write_blob_fixture(dir.path);
  ExperimentConfig cfg = small_config(dir.path, dir.path / "out_p");
  cfg.emit_predictions = true;
  run_experiment(cfg);
  const fs::path pred = dir.path / "out_p" / "predictions_session_3.csv";
  REQUIRE(fs::exists(pred));
  std::ifstream is(pred);
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) ++lines;
  CHECK(lines == 49);  // header + 48 cumulative test samples
}
