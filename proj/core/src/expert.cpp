#include "stmoge/expert.hpp"

#include <cmath>
#include <cstdio>

#include "stmoge/errors.hpp"

namespace stmoge {

namespace {

Tensor uniform_init(std::vector<int64_t> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(-bound, bound);
  return t;
}

Tensor fan_in_init(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  return uniform_init(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace

ExpertParams build_expert(const STExpertConfig& config, int64_t regions, int64_t in_channels,
                          const std::string& prefix, ParamStore& params, Rng rng) {
  ExpertParams expert;
  expert.config = config;
  const int64_t d = config.hidden;

  expert.e1 = params.add(prefix + ".e1", uniform_init({regions, config.node_embedding}, 0.1, rng));
  expert.e2 = params.add(prefix + ".e2", uniform_init({regions, config.node_embedding}, 0.1, rng));
  expert.in_w = params.add(prefix + ".in.w", fan_in_init({in_channels, d}, in_channels, rng));
  expert.in_b = params.add(prefix + ".in.b", Tensor::zeros({d}));

  for (int64_t b = 0; b < config.blocks; ++b) {
    ExpertBlockParams block;
    for (int64_t l = 0; l < config.temporal_layers; ++l) {
      const std::string base = prefix + ".block" + std::to_string(b) + ".t" + std::to_string(l);
      TemporalLayerParams layer;
      layer.kernels = params.add(base + ".kernels", fan_in_init({d, config.kernel},
                                                                config.kernel, rng));
      layer.bias = params.add(base + ".bias", Tensor::zeros({d}));
      layer.bn_gamma = params.add(base + ".bn.gamma", Tensor::full({d}, 1.0));
      layer.bn_beta = params.add(base + ".bn.beta", Tensor::zeros({d}));
      layer.bn_state = std::make_shared<ops::BatchNormState>(d);
      layer.skip_w = params.add(base + ".skip.w", fan_in_init({d, d}, d, rng));
      layer.skip_b = params.add(base + ".skip.b", Tensor::zeros({d}));
      layer.dilation = config.dilation(l);
      block.temporal.push_back(std::move(layer));
    }
    for (int64_t l = 0; l < config.spatial_layers; ++l) {
      const std::string base = prefix + ".block" + std::to_string(b) + ".s" + std::to_string(l);
      SpatialLayerParams layer;
      layer.w_adaptive = params.add(base + ".w1", fan_in_init({d, d}, d, rng));
      layer.w_prior = params.add(base + ".w2", fan_in_init({d, d}, d, rng));
      block.spatial.push_back(std::move(layer));
    }
    expert.blocks.push_back(std::move(block));
  }

  expert.out_w = params.add(prefix + ".out.w", fan_in_init({d, d}, d, rng));
  expert.out_b = params.add(prefix + ".out.b", Tensor::zeros({d}));
  return expert;
}

Tensor adaptive_adjacency(Tape* tape, const Tensor& e1, const Tensor& e2) {
  if (e1.shape() != e2.shape()) {
    throw DimensionError("adaptive_adjacency: embedding shapes " + e1.shape_string() + " and " +
                         e2.shape_string() + " differ");
  }
  return ops::softmax_rows(tape, ops::relu(tape, ops::matmul(tape, e1, ops::transpose(tape, e2))));
}

Tensor gcn_layer(Tape* tape, const Tensor& h, const Tensor& a_adaptive, const Tensor& a_prior,
                 const Tensor& w_adaptive, const Tensor& w_prior) {
  Tensor adaptive_term = ops::graph_matmul(tape, a_adaptive, ops::matmul(tape, h, w_adaptive));
  Tensor prior_term = ops::graph_matmul(tape, a_prior, ops::matmul(tape, h, w_prior));
  return ops::relu(tape, ops::add(tape, adaptive_term, prior_term));
}

Tensor tcn_layer(Tape* tape, const Tensor& h, const TemporalLayerParams& layer,
                 ops::BnMode bn_mode, bool bn_update, bool use_batch_norm) {
  Tensor pre = ops::add_bias(tape, ops::causal_conv(tape, h, layer.kernels, layer.dilation),
                             layer.bias);
  if (use_batch_norm) {
    pre = ops::batch_norm(tape, pre, layer.bn_gamma, layer.bn_beta, *layer.bn_state, bn_mode,
                          bn_update);
  }
  return ops::relu(tape, pre);
}

ExpertTrace expert_forward(Tape* tape, const ExpertParams& params, const Tensor& input,
                           const Tensor& prior_adjacency, ops::BnMode bn_mode, bool bn_update,
                           double dropout_rate, Rng* dropout_rng) {
  if (input.rank() != 4) {
    throw DimensionError("expert_forward: expected input [B,N,T,c], got " + input.shape_string());
  }
  const int64_t window = input.extent(2);
  if (window > params.config.receptive_field() && !*params.rf_warned) {
    std::fprintf(stderr,
                 "warning: temporal receptive field %lld < window %lld; the expert cannot see "
                 "the full history\n",
                 static_cast<long long>(params.config.receptive_field()),
                 static_cast<long long>(window));
    *params.rf_warned = true;
  }

  Tensor a_adp = adaptive_adjacency(tape, params.e1, params.e2);
  Tensor h = ops::add_bias(tape, ops::matmul(tape, input, params.in_w), params.in_b);
  Tensor skip;

  for (const auto& block : params.blocks) {
    for (const auto& layer : block.temporal) {
      Tensor out = tcn_layer(tape, h, layer, bn_mode, bn_update, params.config.batch_norm);
      if (dropout_rate > 0.0 && dropout_rng != nullptr) {
        out = ops::dropout(tape, out, dropout_rate, *dropout_rng, true);
      }
      Tensor tap = ops::add_bias(tape, ops::matmul(tape, out, layer.skip_w), layer.skip_b);
      skip = skip.defined() ? ops::add(tape, skip, tap) : tap;
      h = ops::add(tape, h, out);  // identity residual
    }
    for (const auto& layer : block.spatial) {
      Tensor out = gcn_layer(tape, h, a_adp, prior_adjacency, layer.w_adaptive, layer.w_prior);
      h = ops::add(tape, h, out);
    }
  }

  Tensor projected =
      ops::relu(tape, ops::add_bias(tape, ops::matmul(tape, skip, params.out_w), params.out_b));
  ExpertTrace trace;
  trace.time_resolved = projected;
  trace.representation = ops::select_last_time(tape, projected);
  trace.adjacency = a_adp;
  return trace;
}

}  // namespace stmoge
