#include "stmoge/run_config.hpp"

#include <fstream>

#include "stmoge/errors.hpp"

namespace stmoge {

namespace {

using nlohmann::json;

template <typename T>
void read_key(const json& section, const char* name, T& out) {
  if (section.contains(name)) out = section.at(name).get<T>();
}

void reject_unknown(const json& section, const char* section_name,
                    std::initializer_list<const char*> known) {
  for (const auto& [key, value] : section.items()) {
    (void)value;
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) {
      throw ConfigError("unknown config key '" + std::string(section_name) + "." + key + "'");
    }
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& doc) {
  RunConfig cfg;
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    if (key != "dataset" && key != "model" && key != "cecl" && key != "halr" && key != "train") {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  if (doc.contains("dataset")) {
    const auto& d = doc.at("dataset");
    reject_unknown(d, "dataset", {"window"});
    read_key(d, "window", cfg.window);
  }
  if (doc.contains("model")) {
    const auto& m = doc.at("model");
    reject_unknown(m, "model",
                   {"hidden", "blocks", "spatial_layers", "temporal_layers", "kernel",
                    "node_embedding", "batch_norm", "heads", "clusters", "cluster_warmup_epochs",
                    "cluster_concat_embeddings", "raw_adjacency"});
    read_key(m, "hidden", cfg.expert.hidden);
    read_key(m, "blocks", cfg.expert.blocks);
    read_key(m, "spatial_layers", cfg.expert.spatial_layers);
    read_key(m, "temporal_layers", cfg.expert.temporal_layers);
    read_key(m, "kernel", cfg.expert.kernel);
    read_key(m, "node_embedding", cfg.expert.node_embedding);
    read_key(m, "batch_norm", cfg.expert.batch_norm);
    read_key(m, "heads", cfg.heads);
    read_key(m, "clusters", cfg.clusters);
    read_key(m, "cluster_warmup_epochs", cfg.cluster_warmup_epochs);
    read_key(m, "cluster_concat_embeddings", cfg.cluster_concat_embeddings);
    read_key(m, "raw_adjacency", cfg.raw_adjacency);
  }
  if (doc.contains("cecl")) {
    const auto& c = doc.at("cecl");
    reject_unknown(c, "cecl",
                   {"temperature", "dropout", "per_region_cosine",
                    "include_positive_in_denominator"});
    read_key(c, "temperature", cfg.train.cecl.temperature);
    read_key(c, "dropout", cfg.train.cecl.dropout);
    read_key(c, "per_region_cosine", cfg.train.cecl.per_region_cosine);
    read_key(c, "include_positive_in_denominator",
             cfg.train.cecl.include_positive_in_denominator);
  }
  if (doc.contains("halr")) {
    const auto& h = doc.at("halr");
    reject_unknown(h, "halr", {"temperature", "epsilon", "warmup_epochs"});
    read_key(h, "temperature", cfg.train.halr.temperature);
    read_key(h, "epsilon", cfg.train.halr.epsilon);
    read_key(h, "warmup_epochs", cfg.train.halr.warmup_epochs);
  }
  if (doc.contains("train")) {
    const auto& t = doc.at("train");
    reject_unknown(t, "train",
                   {"epochs", "batch_size", "learning_rate", "lr_decay", "seed", "patience",
                    "lambda_pred", "lambda_contrast", "no_specific", "no_universal", "no_cecl",
                    "no_halr"});
    read_key(t, "epochs", cfg.train.epochs);
    read_key(t, "batch_size", cfg.train.batch_size);
    read_key(t, "learning_rate", cfg.train.learning_rate);
    read_key(t, "lr_decay", cfg.train.lr_decay);
    read_key(t, "seed", cfg.train.seed);
    read_key(t, "patience", cfg.train.patience);
    read_key(t, "lambda_pred", cfg.train.lambda_pred);
    read_key(t, "lambda_contrast", cfg.train.lambda_contrast);
    read_key(t, "no_specific", cfg.train.no_specific);
    read_key(t, "no_universal", cfg.train.no_universal);
    read_key(t, "no_cecl", cfg.train.no_cecl);
    read_key(t, "no_halr", cfg.train.no_halr);
  }
  return cfg;
}

RunConfig RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw DataError("malformed config JSON in " + path + ": " + e.what());
  }
  return from_json(doc);
}

json RunConfig::to_json() const {
  json doc;
  doc["dataset"]["window"] = window;
  auto& m = doc["model"];
  m["hidden"] = expert.hidden;
  m["blocks"] = expert.blocks;
  m["spatial_layers"] = expert.spatial_layers;
  m["temporal_layers"] = expert.temporal_layers;
  m["kernel"] = expert.kernel;
  m["node_embedding"] = expert.node_embedding;
  m["batch_norm"] = expert.batch_norm;
  m["heads"] = heads;
  m["clusters"] = clusters;
  m["cluster_warmup_epochs"] = cluster_warmup_epochs;
  m["cluster_concat_embeddings"] = cluster_concat_embeddings;
  m["raw_adjacency"] = raw_adjacency;
  auto& c = doc["cecl"];
  c["temperature"] = train.cecl.temperature;
  c["dropout"] = train.cecl.dropout;
  c["per_region_cosine"] = train.cecl.per_region_cosine;
  c["include_positive_in_denominator"] = train.cecl.include_positive_in_denominator;
  auto& h = doc["halr"];
  h["temperature"] = train.halr.temperature;
  h["epsilon"] = train.halr.epsilon;
  h["warmup_epochs"] = train.halr.warmup_epochs;
  auto& t = doc["train"];
  t["epochs"] = train.epochs;
  t["batch_size"] = train.batch_size;
  t["learning_rate"] = train.learning_rate;
  t["lr_decay"] = train.lr_decay;
  t["seed"] = train.seed;
  t["patience"] = train.patience;
  t["lambda_pred"] = train.lambda_pred;
  t["lambda_contrast"] = train.lambda_contrast;
  t["no_specific"] = train.no_specific;
  t["no_universal"] = train.no_universal;
  t["no_cecl"] = train.no_cecl;
  t["no_halr"] = train.no_halr;
  return doc;
}

void RunConfig::apply_override(const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string value_text = assignment.substr(eq + 1);
  const size_t dot = path.find('.');
  if (dot == std::string::npos) {
    throw ConfigError("override key '" + path + "' must be section.key");
  }
  json value;
  try {
    value = json::parse(value_text);
  } catch (const json::exception&) {
    value = value_text;  // bare strings allowed
  }
  json doc = to_json();
  const std::string section = path.substr(0, dot);
  const std::string key = path.substr(dot + 1);
  if (!doc.contains(section)) {
    throw ConfigError("unknown config key '" + path + "'");
  }
  doc[section][key] = value;
  *this = from_json(doc);  // re-validates and rejects unknown keys
}

ModelConfig RunConfig::model_config(int64_t regions, std::vector<std::string> categories) const {
  ModelConfig cfg;
  cfg.regions = regions;
  cfg.window = window;
  cfg.categories = std::move(categories);
  cfg.expert = expert;
  cfg.heads = heads;
  cfg.clusters = clusters;
  cfg.cluster_warmup_epochs = cluster_warmup_epochs;
  cfg.cluster_concat_embeddings = cluster_concat_embeddings;
  cfg.raw_adjacency = raw_adjacency;
  cfg.no_specific = train.no_specific;
  cfg.no_universal = train.no_universal;
  return cfg;
}

}  // namespace stmoge
