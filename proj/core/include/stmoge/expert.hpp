#pragma once

#include <memory>
#include <string>
#include <vector>

#include "stmoge/ops.hpp"
#include "stmoge/rng.hpp"
#include "stmoge/tensor.hpp"

namespace stmoge {

/// Architecture of one spatial-temporal graph learning expert: stacked
/// ST-blocks of dilated causal TCN layers followed by adaptive GCN layers,
/// with identity residuals around every layer and a skip projection after
/// every temporal layer.
struct STExpertConfig {
  int64_t hidden = 32;          // representation width d
  int64_t blocks = 3;           // ST-blocks
  int64_t spatial_layers = 2;   // GCN layers per block
  int64_t temporal_layers = 3;  // TCN layers per block
  int64_t kernel = 3;           // causal kernel width
  int64_t node_embedding = 16;  // width of E1/E2
  bool batch_norm = true;

  /// Doubling dilation schedule, reset per block: 1, 2, 4, ...
  int64_t dilation(int64_t layer_in_block) const { return int64_t{1} << layer_in_block; }

  /// Longest history index the stacked temporal layers can reach.
  int64_t receptive_field() const {
    int64_t field = 1;
    for (int64_t b = 0; b < blocks; ++b) {
      for (int64_t l = 0; l < temporal_layers; ++l) field += (kernel - 1) * dilation(l);
    }
    return field;
  }
};

struct TemporalLayerParams {
  Tensor kernels;  // [d, K] depthwise taps
  Tensor bias;     // [d]
  Tensor bn_gamma;
  Tensor bn_beta;
  std::shared_ptr<ops::BatchNormState> bn_state;
  Tensor skip_w;  // [d, d]
  Tensor skip_b;  // [d]
  int64_t dilation = 1;
};

struct SpatialLayerParams {
  Tensor w_adaptive;  // [d, d]
  Tensor w_prior;     // [d, d]
};

struct ExpertBlockParams {
  std::vector<TemporalLayerParams> temporal;
  std::vector<SpatialLayerParams> spatial;
};

struct ExpertParams {
  STExpertConfig config;
  Tensor e1;  // [N, d_n] node embeddings
  Tensor e2;
  Tensor in_w;  // [c_in, d]
  Tensor in_b;
  std::vector<ExpertBlockParams> blocks;
  Tensor out_w;  // [d, d]
  Tensor out_b;
  std::shared_ptr<bool> rf_warned = std::make_shared<bool>(false);
};

/// Registers all parameters under `prefix` and initializes them from `rng`:
/// node embeddings uniform in [-0.1, 0.1], weights uniform fan-in scaled,
/// biases zero.
ExpertParams build_expert(const STExpertConfig& config, int64_t regions, int64_t in_channels,
                          const std::string& prefix, ParamStore& params, Rng rng);

/// softmax_rows(relu(E1 E2^T)): rows sum to 1, differentiable in both.
Tensor adaptive_adjacency(Tape* tape, const Tensor& e1, const Tensor& e2);

/// relu(A_adp H W1 + A H W2) applied at every (batch, time) position of
/// h [B,N,T,F].
Tensor gcn_layer(Tape* tape, const Tensor& h, const Tensor& a_adaptive, const Tensor& a_prior,
                 const Tensor& w_adaptive, const Tensor& w_prior);

/// relu(BN(causal_conv(h) + b)); batch_norm skipped when use_batch_norm is
/// false (test configurations).
Tensor tcn_layer(Tape* tape, const Tensor& h, const TemporalLayerParams& layer,
                 ops::BnMode bn_mode, bool bn_update, bool use_batch_norm);

struct ExpertTrace {
  Tensor representation;  // [B, N, d] summary at the final time index
  Tensor time_resolved;   // [B, N, T, d] full output trace (causality checks)
  Tensor adjacency;       // [N, N] adaptive adjacency used in this pass
};

/// Full expert forward over input [B, N, T, c_in]. When dropout_rate > 0 and
/// an rng is supplied, dropout masks every temporal layer output (only the
/// contrastive corruption passes do this).
ExpertTrace expert_forward(Tape* tape, const ExpertParams& params, const Tensor& input,
                           const Tensor& prior_adjacency, ops::BnMode bn_mode, bool bn_update,
                           double dropout_rate = 0.0, Rng* dropout_rng = nullptr);

}  // namespace stmoge
