#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "stmoge/moge.hpp"
#include "stmoge/train.hpp"

namespace stmoge {

/// The structured configuration document behind every training run. All keys
/// are also reachable from the command line through `--set section.key=value`
/// overrides; unknown keys are rejected naming the offender, and the fully
/// resolved document is echoed into the run directory.
struct RunConfig {
  int64_t window = 7;
  STExpertConfig expert;
  int64_t heads = 4;
  int64_t clusters = 4;
  int64_t cluster_warmup_epochs = 3;
  bool cluster_concat_embeddings = false;
  bool raw_adjacency = false;
  TrainConfig train;

  static RunConfig from_json(const nlohmann::json& doc);
  static RunConfig load_file(const std::string& path);
  nlohmann::json to_json() const;

  /// Applies one `section.key=value` override; the value is parsed as JSON.
  void apply_override(const std::string& assignment);

  ModelConfig model_config(int64_t regions, std::vector<std::string> categories) const;
};

}  // namespace stmoge
