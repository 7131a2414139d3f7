#include "stmoge/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "stmoge/archive.hpp"
#include "stmoge/errors.hpp"

namespace stmoge {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["regions"] = cfg.regions;
  j["window"] = cfg.window;
  j["categories"] = cfg.categories;
  j["hidden"] = cfg.expert.hidden;
  j["blocks"] = cfg.expert.blocks;
  j["spatial_layers"] = cfg.expert.spatial_layers;
  j["temporal_layers"] = cfg.expert.temporal_layers;
  j["kernel"] = cfg.expert.kernel;
  j["node_embedding"] = cfg.expert.node_embedding;
  j["batch_norm"] = cfg.expert.batch_norm;
  j["heads"] = cfg.heads;
  j["clusters"] = cfg.clusters;
  j["cluster_warmup_epochs"] = cfg.cluster_warmup_epochs;
  j["cluster_concat_embeddings"] = cfg.cluster_concat_embeddings;
  j["raw_adjacency"] = cfg.raw_adjacency;
  j["no_specific"] = cfg.no_specific;
  j["no_universal"] = cfg.no_universal;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.regions = j.at("regions").get<int64_t>();
  cfg.window = j.at("window").get<int64_t>();
  cfg.categories = j.at("categories").get<std::vector<std::string>>();
  cfg.expert.hidden = j.at("hidden").get<int64_t>();
  cfg.expert.blocks = j.at("blocks").get<int64_t>();
  cfg.expert.spatial_layers = j.at("spatial_layers").get<int64_t>();
  cfg.expert.temporal_layers = j.at("temporal_layers").get<int64_t>();
  cfg.expert.kernel = j.at("kernel").get<int64_t>();
  cfg.expert.node_embedding = j.at("node_embedding").get<int64_t>();
  cfg.expert.batch_norm = j.at("batch_norm").get<bool>();
  cfg.heads = j.at("heads").get<int64_t>();
  cfg.clusters = j.at("clusters").get<int64_t>();
  cfg.cluster_warmup_epochs = j.at("cluster_warmup_epochs").get<int64_t>();
  cfg.cluster_concat_embeddings = j.at("cluster_concat_embeddings").get<bool>();
  cfg.raw_adjacency = j.at("raw_adjacency").get<bool>();
  cfg.no_specific = j.at("no_specific").get<bool>();
  cfg.no_universal = j.at("no_universal").get<bool>();
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& dir, const MoGEModel& model,
                     const ClusterAssignment& assignment) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "stmoge-checkpoint-v1";
  manifest["model"] = model_config_to_json(model.config);

  std::vector<double> params_blob;
  for (const auto& p : model.params.all()) {
    json entry;
    entry["name"] = p.name;
    entry["shape"] = p.value.shape();
    entry["offset"] = params_blob.size();
    manifest["params"].push_back(entry);
    params_blob.insert(params_blob.end(), p.value.data(), p.value.data() + p.value.size());
  }

  std::vector<double> buffer_blob;
  for (const auto& [name, state] : model.bn_states) {
    json entry;
    entry["name"] = name;
    entry["channels"] = state->running_mean.size();
    entry["offset"] = buffer_blob.size();
    entry["batches_seen"] = state->batches_seen;
    manifest["buffers"].push_back(entry);
    buffer_blob.insert(buffer_blob.end(), state->running_mean.data(),
                       state->running_mean.data() + state->running_mean.size());
    buffer_blob.insert(buffer_blob.end(), state->running_var.data(),
                       state->running_var.data() + state->running_var.size());
  }

  manifest["assignment"]["clusters"] = assignment.clusters;
  manifest["assignment"]["cluster_of"] = assignment.cluster_of;
  manifest["assignment"]["centroids"] = assignment.centroids;

  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw DataError("cannot write checkpoint manifest under " + dir);
  out << manifest.dump(2) << "\n";
  write_f64_blob((fs::path(dir) / "params.f64").string(), params_blob);
  write_f64_blob((fs::path(dir) / "buffers.f64").string(), buffer_blob);
}

Checkpoint load_checkpoint(const std::string& dir, const RegionGraph& graph) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw DataError("not a checkpoint (missing manifest.json): " + dir);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint manifest in " + dir + ": " + e.what());
  }
  if (manifest.value("format", "") != std::string("stmoge-checkpoint-v1")) {
    throw DataError("unknown checkpoint format in " + dir);
  }

  Checkpoint ckpt{build_model(model_config_from_json(manifest.at("model")), graph, 0), {}};

  size_t total = 0;
  for (const auto& entry : manifest.at("params")) {
    int64_t n = 1;
    for (int64_t e : entry.at("shape").get<std::vector<int64_t>>()) n *= e;
    total += static_cast<size_t>(n);
  }
  const auto params_blob = read_f64_blob((fs::path(dir) / "params.f64").string(), total);
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    if (!ckpt.model.params.contains(name)) {
      throw DataError("checkpoint parameter '" + name + "' unknown to the rebuilt model");
    }
    Tensor t = ckpt.model.params.get(name);  // handle shares storage
    const size_t offset = entry.at("offset").get<size_t>();
    std::copy(params_blob.begin() + static_cast<int64_t>(offset),
              params_blob.begin() + static_cast<int64_t>(offset) + t.size(), t.data());
  }

  size_t buffer_total = 0;
  for (const auto& entry : manifest.at("buffers")) {
    buffer_total += 2 * entry.at("channels").get<size_t>();
  }
  const auto buffer_blob = read_f64_blob((fs::path(dir) / "buffers.f64").string(), buffer_total);
  size_t bi = 0;
  for (const auto& entry : manifest.at("buffers")) {
    const std::string name = entry.at("name").get<std::string>();
    const size_t channels = entry.at("channels").get<size_t>();
    const size_t offset = entry.at("offset").get<size_t>();
    if (bi >= ckpt.model.bn_states.size() || ckpt.model.bn_states[bi].first != name) {
      throw DataError("checkpoint buffer '" + name + "' does not match the rebuilt model");
    }
    auto& state = *ckpt.model.bn_states[bi].second;
    std::copy(buffer_blob.begin() + static_cast<int64_t>(offset),
              buffer_blob.begin() + static_cast<int64_t>(offset + channels),
              state.running_mean.data());
    std::copy(buffer_blob.begin() + static_cast<int64_t>(offset + channels),
              buffer_blob.begin() + static_cast<int64_t>(offset + 2 * channels),
              state.running_var.data());
    state.batches_seen = entry.at("batches_seen").get<int64_t>();
    ++bi;
  }

  ckpt.assignment.clusters = manifest.at("assignment").at("clusters").get<int64_t>();
  ckpt.assignment.cluster_of =
      manifest.at("assignment").at("cluster_of").get<std::vector<std::vector<int64_t>>>();
  ckpt.assignment.centroids = manifest.at("assignment")
                                  .at("centroids")
                                  .get<std::vector<std::vector<std::vector<double>>>>();
  return ckpt;
}

}  // namespace stmoge
