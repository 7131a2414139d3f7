// End-to-end tests driving the stmoge binary.

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "stmoge/archive.hpp"
#include "stmoge/checkpoint.hpp"
#include "stmoge/train.hpp"

using namespace stmoge;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kTinyModel =
    " --set model.hidden=8 --set model.blocks=1 --set model.spatial_layers=1"
    " --set model.temporal_layers=2 --set model.node_embedding=4 --set model.heads=2"
    " --set model.clusters=2 --set model.cluster_warmup_epochs=1 --set train.batch_size=16";

int run_cli(const std::string& args, std::string* out_text = nullptr,
            std::string* err_text = nullptr) {
  const fs::path out_log = fs::temp_directory_path() / "stmoge_cli_out.txt";
  const fs::path err_log = fs::temp_directory_path() / "stmoge_cli_err.txt";
  const std::string cmd = std::string(STMOGE_CLI_PATH) + " " + args + " > " + out_log.string() +
                          " 2> " + err_log.string();
  const int status = std::system(cmd.c_str());
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  if (out_text != nullptr) *out_text = slurp(out_log);
  if (err_text != nullptr) *err_text = slurp(err_log);
  return WEXITSTATUS(status);
}

fs::path fresh_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("stmoge_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int count_lines(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("synth -> train -> eval produces the contract artifacts") {
  auto dir = fresh_dir("flow");
  const std::string ds = (dir / "ds").string();
  const std::string run = (dir / "run").string();

  REQUIRE(run_cli("synth --out " + ds + " --rows 5 --cols 5 --categories 2 --days 40 --seed 3") ==
          0);
  REQUIRE(fs::exists(fs::path(ds) / "meta.json"));
  REQUIRE(fs::exists(fs::path(ds) / "rates.f64"));

  REQUIRE(run_cli("train --data " + ds + " --out " + run + " --epochs 2 --seed 5" + kTinyModel) ==
          0);
  CHECK(fs::exists(fs::path(run) / "checkpoint" / "manifest.json"));
  CHECK(fs::exists(fs::path(run) / "training_log.csv"));
  CHECK(count_lines(fs::path(run) / "training_log.csv") == 3);  // header + 2 epochs

  // Effective config and seed are echoed into the run directory.
  json cfg;
  std::ifstream cfg_in(fs::path(run) / "config.json");
  cfg_in >> cfg;
  CHECK(cfg.at("train").at("seed").get<uint64_t>() == 5);
  CHECK(cfg.at("model").at("hidden").get<int64_t>() == 8);

  const std::string report_path = (dir / "report.json").string();
  REQUIRE(run_cli("eval --checkpoint " + run + " --data " + ds + " --split test --out " +
                  report_path) == 0);
  json report;
  std::ifstream rep_in(report_path);
  rep_in >> report;
  CHECK(report.at("overall").at("mae").get<double>() >= 0.0);
  CHECK(report.at("per_category").size() == 2);
  CHECK(report.at("predictions").at("shape").size() == 3);
}

TEST_CASE("train twice from one seed reproduces the checkpoint bit-for-bit") {
  auto dir = fresh_dir("repro");
  const std::string ds = (dir / "ds").string();
  REQUIRE(run_cli("synth --out " + ds + " --rows 5 --cols 5 --categories 2 --days 36 --seed 7") ==
          0);
  for (const char* run : {"a", "b"}) {
    REQUIRE(run_cli("train --data " + ds + " --out " + (dir / run).string() +
                    " --epochs 3 --seed 11" + kTinyModel) == 0);
  }
  auto blob = [&](const char* run, const char* file) {
    std::ifstream in(dir / run / "checkpoint" / file, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  CHECK(blob("a", "params.f64") == blob("b", "params.f64"));
  CHECK(blob("a", "buffers.f64") == blob("b", "buffers.f64"));

  std::ifstream la(dir / "a" / "training_log.csv"), lb(dir / "b" / "training_log.csv");
  std::stringstream sa, sb;
  sa << la.rdbuf();
  sb << lb.rdbuf();
  CHECK(sa.str() == sb.str());
}

TEST_CASE("eval on an untrained checkpoint is no better than the trained one") {
  auto dir = fresh_dir("untrained");
  const std::string ds = (dir / "ds").string();
  REQUIRE(run_cli("synth --out " + ds + " --rows 5 --cols 5 --categories 2 --days 50 --seed 9") ==
          0);
  const std::string run = (dir / "run").string();
  REQUIRE(run_cli("train --data " + ds + " --out " + run + " --epochs 8 --seed 3" + kTinyModel) ==
          0);

  // Randomly initialized checkpoint, saved through the normal writer.
  auto archive = load_dataset(ds);
  ModelConfig cfg;
  cfg.regions = 25;
  cfg.window = 7;
  cfg.categories = archive.tensor.categories;
  cfg.expert.hidden = 8;
  cfg.expert.blocks = 1;
  cfg.expert.spatial_layers = 1;
  cfg.expert.temporal_layers = 2;
  cfg.expert.node_embedding = 4;
  cfg.heads = 2;
  cfg.clusters = 2;
  MoGEModel untrained = build_model(cfg, archive.graph, 3);
  save_checkpoint((dir / "blank").string(),
                  untrained, ClusterAssignment::single(2, 25));

  std::string trained_text, blank_text;
  REQUIRE(run_cli("eval --checkpoint " + run + " --data " + ds + " --no-predictions",
                  &trained_text) == 0);
  REQUIRE(run_cli("eval --checkpoint " + (dir / "blank").string() + " --data " + ds +
                  " --no-predictions",
                  &blank_text) == 0);
  const double trained_mae = json::parse(trained_text).at("overall").at("mae").get<double>();
  const double blank_mae = json::parse(blank_text).at("overall").at("mae").get<double>();
  CHECK(blank_mae >= trained_mae);
}

TEST_CASE("sweep emits one CSV row per value") {
  auto dir = fresh_dir("sweep");
  const std::string ds = (dir / "ds").string();
  REQUIRE(run_cli("synth --out " + ds + " --rows 4 --cols 4 --categories 2 --days 30 --seed 5") ==
          0);
  const std::string csv = (dir / "sweep.csv").string();
  REQUIRE(run_cli("sweep --data " + ds + " --out " + csv +
                  " --param d --values 4,8,16,32,64 --epochs 1 --seed 2" + kTinyModel) == 0);
  CHECK(count_lines(csv) == 6);  // header + 5 values

  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header.find("param,value,overall_mae") == 0);
}

TEST_CASE("ablate emits the five-variant table") {
  auto dir = fresh_dir("ablate");
  const std::string ds = (dir / "ds").string();
  REQUIRE(run_cli("synth --out " + ds + " --rows 4 --cols 4 --categories 2 --days 36 --seed 5") ==
          0);
  REQUIRE(run_cli("ablate --data " + ds + " --out " + (dir / "ab").string() +
                  " --seeds 1 --epochs 2" + kTinyModel) == 0);
  const auto csv = dir / "ab" / "ablation.csv";
  REQUIRE(fs::exists(csv));
  CHECK(count_lines(csv) == 6);  // header + 5 variants

  std::ifstream in(csv);
  std::string all, line;
  while (std::getline(in, line)) all += line + "\n";
  for (const char* variant :
       {"ST-MoGE", "w/o U-Expert", "w/o S-Expert", "w/o CECL", "w/o HALR"}) {
    CHECK(all.find(variant) != std::string::npos);
  }
}

TEST_CASE("export-gates writes the per-region weight tables") {
  auto dir = fresh_dir("gates");
  const std::string ds = (dir / "ds").string();
  REQUIRE(run_cli("synth --out " + ds + " --rows 4 --cols 4 --categories 2 --days 30 --seed 5") ==
          0);
  const std::string run = (dir / "run").string();
  REQUIRE(run_cli("train --data " + ds + " --out " + run + " --epochs 1 --seed 2" + kTinyModel) ==
          0);
  REQUIRE(run_cli("export-gates --checkpoint " + run + " --data " + ds +
                  " --date 2020-01-20 --out " + (dir / "exported").string()) == 0);

  CHECK(count_lines(dir / "exported" / "gates.csv") == 1 + 16 * 2);  // header + N*C
  CHECK(count_lines(dir / "exported" / "attention.csv") == 1 + 2 * 2 * 16 * 16);

  // A date without a full preceding window is a data error (exit 2).
  std::string out, err;
  CHECK(run_cli("export-gates --checkpoint " + run + " --data " + ds +
                " --date 2020-01-02 --out " + (dir / "bad").string(),
                &out, &err) == 2);
  CHECK(err.find("window") != std::string::npos);
}

TEST_CASE("usage and data errors map to exit codes 1 and 2") {
  auto dir = fresh_dir("errors");
  const std::string ds = (dir / "ds").string();
  REQUIRE(run_cli("synth --out " + ds + " --rows 4 --cols 4 --categories 1 --days 30 --seed 5") ==
          0);

  std::string out, err;
  CHECK(run_cli("train --data " + ds + " --out " + (dir / "x").string() +
                " --set model.hiden=8",
                &out, &err) == 1);
  CHECK(err.find("model.hiden") != std::string::npos);  // offending key named

  CHECK(run_cli("nonsense-verb", &out) == 1);
  CHECK(run_cli("train --data " + (dir / "missing").string() + " --out " + (dir / "y").string(),
                &out) == 2);
  CHECK(run_cli("eval --checkpoint " + (dir / "nothing").string() + " --data " + ds, &out) == 2);
}

TEST_CASE("ingest on the bundled sample conserves mass and trains") {
  auto dir = fresh_dir("ingest");
  const std::string ds = (dir / "ds").string();
  const std::string sample_csv = std::string(STMOGE_DATA_DIR) + "/sample_incidents.csv";
  const std::string sample_cfg = std::string(STMOGE_DATA_DIR) + "/sample_ingest.json";

  REQUIRE(run_cli("ingest --csv " + sample_csv + " --config " + sample_cfg + " --out " + ds) == 0);

  json report;
  std::ifstream in(fs::path(ds) / "ingest_report.json");
  in >> report;
  auto archive = load_dataset(ds);
  CHECK(archive.tensor.total() == report.at("ingested").get<int64_t>());
  CHECK(report.at("ingested").get<int64_t>() + report.at("dropped_out_of_bounds").get<int64_t>() +
            report.at("dropped_unparseable").get<int64_t>() +
            report.at("dropped_category").get<int64_t>() ==
        report.at("rows_read").get<int64_t>());

  REQUIRE(run_cli("train --data " + ds + " --out " + (dir / "run").string() +
                  " --epochs 2 --seed 1" + kTinyModel) == 0);
  CHECK(fs::exists(dir / "run" / "checkpoint" / "params.f64"));
}
