#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stmoge/data.hpp"
#include "stmoge/expert.hpp"
#include "stmoge/ops.hpp"
#include "stmoge/tensor.hpp"

namespace stmoge {

struct ModelConfig {
  int64_t regions = 0;
  int64_t window = 7;
  std::vector<std::string> categories;
  STExpertConfig expert;
  int64_t heads = 4;     // attention heads M; must divide expert.hidden
  int64_t clusters = 4;  // predictor clusters K
  int64_t cluster_warmup_epochs = 3;
  bool cluster_concat_embeddings = false;  // cluster on [E1|E2] instead of E1
  bool raw_adjacency = false;              // skip self-loop row normalization
  bool no_specific = false;                // ablation: universal path only
  bool no_universal = false;               // ablation: specific experts only

  int64_t category_count() const { return static_cast<int64_t>(categories.size()); }
  void validate() const;
};

struct GateParams {
  std::vector<Tensor> wq;  // per head [d, d/M]
  std::vector<Tensor> wk;
  std::vector<Tensor> wv;
  Tensor w_merge;           // [d, d]
  Tensor fuse_w_specific;   // [d, d]
  Tensor fuse_w_universal;  // [d, d]
  Tensor fuse_bias;         // [d]
};

/// Two-layer perceptron d -> d -> 1 serving one (category, cluster) pair.
struct PredictorHead {
  Tensor w1, b1, w2, b2;
};

/// The assembled mixture: C category-specific experts, one universal expert
/// (whose parameters double as the auxiliary corruption expert), per-category
/// attentive gates, and C x K predictor heads.
struct MoGEModel {
  ModelConfig config;
  Tensor prior_adjacency;  // constant [N,N]
  std::vector<ExpertParams> specific;
  std::optional<ExpertParams> universal;
  std::vector<GateParams> gates;
  std::vector<std::vector<PredictorHead>> heads;  // [C][K]
  ParamStore params;
  std::vector<std::pair<std::string, std::shared_ptr<ops::BatchNormState>>> bn_states;
};

MoGEModel build_model(const ModelConfig& config, const RegionGraph& graph, uint64_t seed);

/// Per-category region partition used by the regional predictors.
struct ClusterAssignment {
  int64_t clusters = 1;
  std::vector<std::vector<int64_t>> cluster_of;           // [C][N]
  std::vector<std::vector<std::vector<double>>> centroids;  // [C][K][feat]

  std::vector<int64_t> regions_in(int64_t category, int64_t cluster) const;
  /// Warmup assignment: every region in cluster 0.
  static ClusterAssignment single(int64_t categories, int64_t regions);
};

/// K-means over each category's learned node embedding (k-means++ seeding,
/// Lloyd iterations, empty clusters reseeded with the farthest point).
ClusterAssignment cluster_regions(const MoGEModel& model, int64_t k, uint64_t seed);

/// The universal expert consumes all C channels jointly; identity passthrough.
Tensor universal_input(const Tensor& x);
/// Channel slice feeding category-specific expert `c`: [B,N,T,C] -> [B,N,T,1].
Tensor category_input(const Tensor& x, int64_t c);

struct GateOutput {
  Tensor recalibrated;             // [B, N, d]
  std::vector<Tensor> attention;   // per head [B, N, N], rows sum to 1
};

/// Multi-head cross-attention of the specific representation (queries) over
/// the universal representation (keys/values), heads merged by w_merge.
GateOutput attention_gate(Tape* tape, const Tensor& h_specific, const Tensor& h_universal,
                          const GateParams& gate, int64_t heads);

struct FusionOutput {
  Tensor fused;  // [B, N, d]
  Tensor z;      // [B, N, d], strictly inside (0,1)
};

/// z = sigmoid(Hs W1 + Hu W2 + b); fused = z * Hs + (1-z) * Hu.
FusionOutput gated_fusion(Tape* tape, const Tensor& h_specific, const Tensor& h_universal_hat,
                          const GateParams& gate);

/// Cluster-routed prediction heads assembled into [B, N, C] with a final
/// nonnegativity clamp (targets are counts).
Tensor regional_predict(Tape* tape, const std::vector<Tensor>& fused,
                        const ClusterAssignment& assignment,
                        const std::vector<std::vector<PredictorHead>>& heads);

struct ModelOutput {
  Tensor prediction;                           // [B, N, C]
  std::vector<Tensor> h_specific;              // [C] x [B,N,d] (empty when ablated)
  Tensor h_universal;                          // [B,N,d] (undefined when ablated)
  std::vector<Tensor> fused;                   // [C]
  std::vector<Tensor> gate_z;                  // [C] (empty when gates inactive)
  std::vector<std::vector<Tensor>> attention;  // [C][M]
};

ModelOutput model_forward(Tape* tape, const MoGEModel& model, const Tensor& x,
                          const ClusterAssignment& assignment, ops::BnMode bn_mode,
                          bool bn_update);

}  // namespace stmoge
