#pragma once

#include <string>

#include "stmoge/moge.hpp"
#include "stmoge/run_config.hpp"

namespace stmoge {

// Checkpoint layout: manifest.json (model config, parameter table with
// name/shape/offset, batch-norm buffer table, cluster assignment) next to
// params.f64 and buffers.f64 little-endian blobs. Diff-able and bit-exact.

void save_checkpoint(const std::string& dir, const MoGEModel& model,
                     const ClusterAssignment& assignment);

struct Checkpoint {
  MoGEModel model;
  ClusterAssignment assignment;
};

Checkpoint load_checkpoint(const std::string& dir, const RegionGraph& graph);

}  // namespace stmoge
