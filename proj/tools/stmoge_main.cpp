// stmoge: mixture-of-graph-experts crime forecasting pipeline.
//
// Verbs: ingest, synth, train, eval, ablate, sweep, export-gates.
// Exit codes: 0 success, 1 usage/config error, 2 data/contract error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "stmoge/archive.hpp"
#include "stmoge/checkpoint.hpp"
#include "stmoge/run_config.hpp"
#include "stmoge/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stmoge;

namespace {

struct IngestOptions {
  std::string csv;
  std::string config;
  std::string out;
};

struct SynthOptions {
  std::string out;
  std::string spec_file;
  std::string preset = "hetero";
  int64_t rows = 8, cols = 8, categories = 3, days = 200;
  uint64_t seed = 1;
};

struct TrainOptions {
  std::string data;
  std::string out;
  std::string config_file;
  std::vector<std::string> overrides;
  int64_t epochs = -1;
  int64_t seed = -1;
};

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string out;
  bool with_predictions = true;
};

struct AblateOptions {
  std::string data;
  std::string out;
  std::string config_file;
  std::vector<std::string> overrides;
  std::string seeds = "1,2,3";
  int64_t epochs = -1;
};

struct SweepOptions {
  std::string data;
  std::string out;
  std::string config_file;
  std::vector<std::string> overrides;
  std::string param = "d";
  std::string values = "4,8,16,32,64";
  int64_t epochs = -1;
  uint64_t seed = 1;
};

struct ExportOptions {
  std::string checkpoint;
  std::string data;
  std::string date;
  std::string out;
};

std::vector<int64_t> parse_int_list(const std::string& text) {
  std::vector<int64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoll(item));
  }
  if (out.empty()) throw ConfigError("empty value list: '" + text + "'");
  return out;
}

RunConfig resolve_config(const std::string& config_file,
                         const std::vector<std::string>& overrides) {
  RunConfig cfg = config_file.empty() ? RunConfig{} : RunConfig::load_file(config_file);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

std::string default_out(const std::string& given) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv("STMOGE_RUN_DIR")) return env;
  throw ConfigError("--out not given and STMOGE_RUN_DIR is unset");
}

GridConfig grid_from_json(const json& g) {
  GridConfig grid;
  grid.rows = g.at("rows").get<int64_t>();
  grid.cols = g.at("cols").get<int64_t>();
  grid.lat_min = g.at("lat_min").get<double>();
  grid.lat_max = g.at("lat_max").get<double>();
  grid.lon_min = g.at("lon_min").get<double>();
  grid.lon_max = g.at("lon_max").get<double>();
  return grid;
}

int run_ingest(const IngestOptions& opt) {
  std::ifstream in(opt.config);
  if (!in) throw DataError("cannot open ingest config: " + opt.config);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw DataError("malformed ingest config: " + std::string(e.what()));
  }
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    if (key != "columns" && key != "timestamp_format" && key != "grid" && key != "categories") {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  CsvSchema schema;
  if (doc.contains("columns")) {
    const auto& c = doc.at("columns");
    schema.timestamp_column = c.value("timestamp", schema.timestamp_column);
    schema.latitude_column = c.value("latitude", schema.latitude_column);
    schema.longitude_column = c.value("longitude", schema.longitude_column);
    schema.category_column = c.value("category", schema.category_column);
  }
  schema.timestamp_format = doc.value("timestamp_format", schema.timestamp_format);
  if (doc.contains("categories")) {
    schema.retained_categories = doc.at("categories").get<std::vector<std::string>>();
  }
  const GridConfig grid = grid_from_json(doc.at("grid"));

  auto result = ingest_csv(opt.csv, schema, grid);
  save_dataset(opt.out, result.graph, result.tensor);

  json report;
  report["rows_read"] = result.report.rows_read;
  report["ingested"] = result.report.ingested;
  report["dropped_out_of_bounds"] = result.report.dropped_out_of_bounds;
  report["dropped_unparseable"] = result.report.dropped_unparseable;
  report["dropped_category"] = result.report.dropped_category;
  report["regions"] = result.tensor.regions;
  report["slots"] = result.tensor.slots;
  report["categories"] = result.tensor.categories;
  std::ofstream rep(fs::path(opt.out) / "ingest_report.json");
  rep << report.dump(2) << "\n";
  std::cout << "ingested " << result.report.ingested << " incidents into " << opt.out << " ("
            << result.report.dropped() << " dropped)\n";
  return 0;
}

SyntheticSpec spec_from_json(const json& doc) {
  SyntheticSpec spec;
  auto hotspot = [](const json& h) {
    return Hotspot{h.at("row").get<double>(), h.at("col").get<double>(),
                   h.at("sigma").get<double>(), h.at("intensity").get<double>()};
  };
  spec.rows = doc.at("rows").get<int64_t>();
  spec.cols = doc.at("cols").get<int64_t>();
  spec.days = doc.at("days").get<int64_t>();
  spec.categories = doc.at("categories").get<std::vector<std::string>>();
  spec.shared_weight = doc.value("shared_weight", spec.shared_weight);
  spec.hetero_weight = doc.value("hetero_weight", spec.hetero_weight);
  spec.weekly_amplitude = doc.value("weekly_amplitude", spec.weekly_amplitude);
  spec.base_rate = doc.value("base_rate", spec.base_rate);
  spec.seed = doc.value("seed", spec.seed);
  for (const auto& h : doc.value("shared_hotspots", json::array())) {
    spec.shared_hotspots.push_back(hotspot(h));
  }
  for (const auto& list : doc.at("category_hotspots")) {
    std::vector<Hotspot> spots;
    for (const auto& h : list) spots.push_back(hotspot(h));
    spec.category_hotspots.push_back(std::move(spots));
  }
  return spec;
}

int run_synth(const SynthOptions& opt) {
  SyntheticSpec spec;
  if (!opt.spec_file.empty()) {
    std::ifstream in(opt.spec_file);
    if (!in) throw DataError("cannot open synth spec: " + opt.spec_file);
    json doc;
    in >> doc;
    spec = spec_from_json(doc);
  } else if (opt.preset == "hetero") {
    spec = SyntheticSpec::heterogeneous_benchmark(opt.rows, opt.cols, opt.categories, opt.days,
                                                  opt.seed);
  } else if (opt.preset == "shared") {
    spec = SyntheticSpec::shared_benchmark(opt.rows, opt.cols, opt.categories, opt.days, opt.seed);
  } else {
    throw ConfigError("unknown synth preset '" + opt.preset + "' (hetero|shared)");
  }
  auto data = generate_synthetic(spec);
  save_dataset(opt.out, data.graph, data.tensor, &data.rates);
  std::cout << "synthesized " << data.tensor.regions << " regions x " << data.tensor.slots
            << " days x " << data.tensor.category_count() << " categories into " << opt.out
            << " (total incidents " << data.tensor.total() << ")\n";
  return 0;
}

DatasetSplit split_archive(const DatasetArchive& archive, int64_t window) {
  return split_811(make_windows(archive.tensor, window));
}

int run_train(const TrainOptions& opt) {
  RunConfig config = resolve_config(opt.config_file, opt.overrides);
  if (opt.epochs > 0) config.train.epochs = opt.epochs;
  if (opt.seed >= 0) config.train.seed = static_cast<uint64_t>(opt.seed);

  const std::string out = default_out(opt.out);
  auto archive = load_dataset(opt.data);
  // Windows hold views into the tensor; keep it alive for the whole run.
  auto split = split_archive(archive, config.window);
  ModelConfig model_config =
      config.model_config(archive.tensor.regions, archive.tensor.categories);

  fs::create_directories(out);
  {
    std::ofstream cfg_out(fs::path(out) / "config.json");
    cfg_out << config.to_json().dump(2) << "\n";
  }

  auto result = train(split, archive.graph, model_config, config.train);
  write_training_log((fs::path(out) / "training_log.csv").string(), result.log,
                     archive.tensor.categories);
  save_checkpoint((fs::path(out) / "checkpoint").string(), result.model, result.assignment);

  std::cout << "trained " << result.log.size() << " epochs (best validation MAE "
            << result.best_val_mae << " at epoch " << result.best_epoch << "); run directory "
            << out << "\n";
  return 0;
}

std::string locate_checkpoint(const std::string& path) {
  if (fs::exists(fs::path(path) / "manifest.json")) return path;
  if (fs::exists(fs::path(path) / "checkpoint" / "manifest.json")) {
    return (fs::path(path) / "checkpoint").string();
  }
  throw DataError("no checkpoint manifest under " + path);
}

int run_eval(const EvalOptions& opt) {
  auto archive = load_dataset(opt.data);
  auto ckpt = load_checkpoint(locate_checkpoint(opt.checkpoint), archive.graph);
  auto split = split_archive(archive, ckpt.model.config.window);

  const std::vector<WindowSample>* samples;
  if (opt.split == "train") {
    samples = &split.train;
  } else if (opt.split == "val") {
    samples = &split.val;
  } else if (opt.split == "test") {
    samples = &split.test;
  } else {
    throw ConfigError("unknown split '" + opt.split + "' (train|val|test)");
  }

  ForecastReport report = evaluate(ckpt.model, *samples, ckpt.assignment);
  // Frequencies for the low-crime grouping come from the training period.
  const int64_t train_end = split.val.front().target_slot();
  attach_quantile_metrics(report, ckpt.model, *samples,
                          quantile_groups(archive.tensor, train_end));

  const std::string text = report_to_json(report, opt.with_predictions);
  if (opt.out.empty()) {
    std::cout << text << "\n";
  } else {
    if (fs::path(opt.out).has_parent_path()) fs::create_directories(fs::path(opt.out).parent_path());
    std::ofstream out(opt.out);
    out << text << "\n";
    std::cout << "report written to " << opt.out << " (overall MAE " << report.overall_mae
              << ")\n";
  }
  return 0;
}

int run_ablate(const AblateOptions& opt) {
  RunConfig config = resolve_config(opt.config_file, opt.overrides);
  if (opt.epochs > 0) config.train.epochs = opt.epochs;
  auto archive = load_dataset(opt.data);
  auto split = split_archive(archive, config.window);
  ModelConfig model_config =
      config.model_config(archive.tensor.regions, archive.tensor.categories);

  std::vector<uint64_t> seeds;
  for (int64_t s : parse_int_list(opt.seeds)) seeds.push_back(static_cast<uint64_t>(s));

  auto rows = ablate(split, archive.graph, model_config, config.train, seeds);

  fs::create_directories(opt.out);
  const auto path = fs::path(opt.out) / "ablation.csv";
  std::ofstream out(path);
  out << "variant";
  for (const auto& c : archive.tensor.categories) out << ",mae_" << c;
  out << ",overall_mae\n";
  for (const auto& row : rows) {
    out << row.variant;
    for (double v : row.category_mae) out << "," << v;
    out << "," << row.overall_mae << "\n";
  }
  std::cout << "ablation table (" << rows.size() << " variants, " << seeds.size()
            << " seeds) written to " << path.string() << "\n";
  for (const auto& row : rows) {
    std::cout << "  " << row.variant << ": overall MAE " << row.overall_mae << "\n";
  }
  return 0;
}

int run_sweep(const SweepOptions& opt) {
  RunConfig base = resolve_config(opt.config_file, opt.overrides);
  if (opt.epochs > 0) base.train.epochs = opt.epochs;
  base.train.seed = opt.seed;
  auto archive = load_dataset(opt.data);

  const auto values = parse_int_list(opt.values);
  if (fs::path(opt.out).has_parent_path()) {
    fs::create_directories(fs::path(opt.out).parent_path());
  }
  std::ofstream out(opt.out);
  if (!out) throw DataError("cannot write sweep CSV: " + opt.out);
  out << "param,value,overall_mae";
  for (const auto& c : archive.tensor.categories) out << ",mae_" << c;
  out << ",val_mae,seconds\n";

  for (int64_t value : values) {
    RunConfig config = base;
    if (opt.param == "d" || opt.param == "hidden") {
      config.expert.hidden = value;
    } else if (opt.param == "n_st" || opt.param == "blocks") {
      config.expert.blocks = value;
    } else if (opt.param == "n_s" || opt.param == "spatial_layers") {
      config.expert.spatial_layers = value;
    } else if (opt.param == "n_t" || opt.param == "temporal_layers") {
      config.expert.temporal_layers = value;
    } else {
      throw ConfigError("unknown sweep parameter '" + opt.param +
                        "' (d|n_st|n_s|n_t)");
    }

    auto split = split_archive(archive, config.window);
    ModelConfig model_config =
        config.model_config(archive.tensor.regions, archive.tensor.categories);
    const auto start = std::chrono::steady_clock::now();
    auto result = train(split, archive.graph, model_config, config.train);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    auto report = evaluate(result.model, split.test, result.assignment);

    out << opt.param << "," << value << "," << report.overall_mae;
    for (const auto& m : report.per_category) out << "," << m.mae;
    out << "," << result.best_val_mae << "," << seconds << "\n";
    std::cout << opt.param << "=" << value << ": test MAE " << report.overall_mae << "\n";
  }
  std::cout << "sweep written to " << opt.out << "\n";
  return 0;
}

int run_export_gates(const ExportOptions& opt) {
  auto archive = load_dataset(opt.data);
  auto ckpt = load_checkpoint(locate_checkpoint(opt.checkpoint), archive.graph);
  const int64_t window = ckpt.model.config.window;
  const int64_t target = parse_iso_date(opt.date) - archive.tensor.start_day;
  if (target < window || target >= archive.tensor.slots) {
    throw DataError("date " + opt.date + " has no complete input window in the dataset (needs " +
                    std::to_string(window) + " preceding days)");
  }

  WindowSample sample{&archive.tensor, target - window, window};
  const int64_t n = archive.tensor.regions;
  const int64_t c_count = archive.tensor.category_count();
  Tensor x({1, n, window, c_count});
  for (int64_t region = 0; region < n; ++region) {
    for (int64_t t = 0; t < window; ++t) {
      for (int64_t c = 0; c < c_count; ++c) {
        x.at(0, region, t, c) = static_cast<double>(sample.input_count(region, t, c));
      }
    }
  }
  auto out = model_forward(nullptr, ckpt.model, x, ckpt.assignment, ops::BnMode::kEval, false);
  if (out.gate_z.empty()) {
    throw ContractError("export-gates: this checkpoint has no fusion gates (ablated model)");
  }

  fs::create_directories(opt.out);
  {
    std::ofstream gates(fs::path(opt.out) / "gates.csv");
    gates << "date,category,region,gate_weight\n";
    for (int64_t c = 0; c < c_count; ++c) {
      const Tensor& z = out.gate_z[static_cast<size_t>(c)];
      const int64_t d = z.extent(2);
      for (int64_t region = 0; region < n; ++region) {
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += z.at(0, region, j);
        gates << opt.date << "," << archive.tensor.categories[static_cast<size_t>(c)] << ","
              << region << "," << mean / static_cast<double>(d) << "\n";
      }
    }
  }
  {
    std::ofstream attn(fs::path(opt.out) / "attention.csv");
    attn << "date,category,head,region,key_region,weight\n";
    for (int64_t c = 0; c < c_count; ++c) {
      for (size_t head = 0; head < out.attention[static_cast<size_t>(c)].size(); ++head) {
        const Tensor& a = out.attention[static_cast<size_t>(c)][head];
        for (int64_t i = 0; i < n; ++i) {
          for (int64_t j = 0; j < n; ++j) {
            attn << opt.date << "," << archive.tensor.categories[static_cast<size_t>(c)] << ","
                 << head << "," << i << "," << j << "," << a.at(0, i, j) << "\n";
          }
        }
      }
    }
  }
  std::cout << "gate weights for " << opt.date << " written to " << opt.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ST-MoGE: mixture-of-graph-experts multi-category event forecasting"};
  app.require_subcommand(1);

  IngestOptions ingest_opt;
  auto* ingest_cmd = app.add_subcommand("ingest", "CSV incident feed -> dataset archive");
  ingest_cmd->add_option("--csv", ingest_opt.csv, "incident CSV path")->required();
  ingest_cmd->add_option("--config", ingest_opt.config, "schema+grid JSON")->required();
  ingest_cmd->add_option("--out", ingest_opt.out, "output archive directory")->required();

  SynthOptions synth_opt;
  auto* synth_cmd = app.add_subcommand("synth", "synthetic dataset -> archive + rate fields");
  synth_cmd->add_option("--out", synth_opt.out, "output archive directory")->required();
  synth_cmd->add_option("--spec", synth_opt.spec_file, "full SyntheticSpec JSON");
  synth_cmd->add_option("--preset", synth_opt.preset, "hetero|shared");
  synth_cmd->add_option("--rows", synth_opt.rows);
  synth_cmd->add_option("--cols", synth_opt.cols);
  synth_cmd->add_option("--categories", synth_opt.categories);
  synth_cmd->add_option("--days", synth_opt.days);
  synth_cmd->add_option("--seed", synth_opt.seed);

  TrainOptions train_opt;
  auto* train_cmd = app.add_subcommand("train", "dataset archive -> checkpoint + training log");
  train_cmd->add_option("--data", train_opt.data, "dataset archive")->required();
  train_cmd->add_option("--out", train_opt.out, "run directory (or $STMOGE_RUN_DIR)");
  train_cmd->add_option("--config", train_opt.config_file, "run config JSON");
  train_cmd->add_option("--set", train_opt.overrides, "override section.key=value")
      ->take_all();
  train_cmd->add_option("--epochs", train_opt.epochs, "shortcut for train.epochs");
  train_cmd->add_option("--seed", train_opt.seed, "shortcut for train.seed");

  EvalOptions eval_opt;
  auto* eval_cmd = app.add_subcommand("eval", "checkpoint -> forecast report JSON");
  eval_cmd->add_option("--checkpoint", eval_opt.checkpoint, "run or checkpoint directory")
      ->required();
  eval_cmd->add_option("--data", eval_opt.data, "dataset archive")->required();
  eval_cmd->add_option("--split", eval_opt.split, "train|val|test (default test)");
  eval_cmd->add_option("--out", eval_opt.out, "report path (stdout when omitted)");
  eval_cmd->add_flag("!--no-predictions", eval_opt.with_predictions,
                     "omit the predictions tensor from the report");

  AblateOptions ablate_opt;
  auto* ablate_cmd = app.add_subcommand("ablate", "module ablation table");
  ablate_cmd->add_option("--data", ablate_opt.data, "dataset archive")->required();
  ablate_cmd->add_option("--out", ablate_opt.out, "output directory")->required();
  ablate_cmd->add_option("--config", ablate_opt.config_file, "run config JSON");
  ablate_cmd->add_option("--set", ablate_opt.overrides, "override section.key=value")->take_all();
  ablate_cmd->add_option("--seeds", ablate_opt.seeds, "comma list of seeds (default 1,2,3)");
  ablate_cmd->add_option("--epochs", ablate_opt.epochs, "shortcut for train.epochs");

  SweepOptions sweep_opt;
  auto* sweep_cmd = app.add_subcommand("sweep", "hyper-parameter grid sweep");
  sweep_cmd->add_option("--data", sweep_opt.data, "dataset archive")->required();
  sweep_cmd->add_option("--out", sweep_opt.out, "output CSV path")->required();
  sweep_cmd->add_option("--param", sweep_opt.param, "d|n_st|n_s|n_t");
  sweep_cmd->add_option("--values", sweep_opt.values, "comma list, e.g. 4,8,16,32,64");
  sweep_cmd->add_option("--config", sweep_opt.config_file, "run config JSON");
  sweep_cmd->add_option("--set", sweep_opt.overrides, "override section.key=value")->take_all();
  sweep_cmd->add_option("--epochs", sweep_opt.epochs, "shortcut for train.epochs");
  sweep_cmd->add_option("--seed", sweep_opt.seed);

  ExportOptions export_opt;
  auto* export_cmd = app.add_subcommand("export-gates", "gate weights + attention maps -> CSV");
  export_cmd->add_option("--checkpoint", export_opt.checkpoint, "run or checkpoint directory")
      ->required();
  export_cmd->add_option("--data", export_opt.data, "dataset archive")->required();
  export_cmd->add_option("--date", export_opt.date, "target date YYYY-MM-DD")->required();
  export_cmd->add_option("--out", export_opt.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*ingest_cmd) return run_ingest(ingest_opt);
    if (*synth_cmd) return run_synth(synth_opt);
    if (*train_cmd) return run_train(train_opt);
    if (*eval_cmd) return run_eval(eval_opt);
    if (*ablate_cmd) return run_ablate(ablate_opt);
    if (*sweep_cmd) return run_sweep(sweep_opt);
    if (*export_cmd) return run_export_gates(export_opt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
