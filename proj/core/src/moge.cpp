#include "stmoge/moge.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "stmoge/errors.hpp"

namespace stmoge {

void ModelConfig::validate() const {
  if (regions < 1 || window < 1 || categories.empty()) {
    throw ConfigError("model config: regions, window and categories must be set");
  }
  if (heads < 1 || expert.hidden % heads != 0) {
    throw ConfigError("model config: hidden width " + std::to_string(expert.hidden) +
                      " not divisible by " + std::to_string(heads) + " attention heads");
  }
  if (clusters < 1 || clusters > regions) {
    throw ConfigError("model config: cluster count " + std::to_string(clusters) +
                      " must lie in [1, regions]");
  }
  if (no_specific && no_universal) {
    throw ConfigError("model config: cannot disable both expert kinds");
  }
}

namespace {

Tensor fan_in_init(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(-bound, bound);
  return t;
}

GateParams build_gate(const std::string& prefix, int64_t d, int64_t heads, ParamStore& params,
                      Rng rng) {
  GateParams gate;
  const int64_t dq = d / heads;
  for (int64_t m = 0; m < heads; ++m) {
    const std::string base = prefix + ".head" + std::to_string(m);
    gate.wq.push_back(params.add(base + ".wq", fan_in_init({d, dq}, d, rng)));
    gate.wk.push_back(params.add(base + ".wk", fan_in_init({d, dq}, d, rng)));
    gate.wv.push_back(params.add(base + ".wv", fan_in_init({d, dq}, d, rng)));
  }
  gate.w_merge = params.add(prefix + ".merge", fan_in_init({d, d}, d, rng));
  gate.fuse_w_specific = params.add(prefix + ".fuse.w1", fan_in_init({d, d}, d, rng));
  gate.fuse_w_universal = params.add(prefix + ".fuse.w2", fan_in_init({d, d}, d, rng));
  gate.fuse_bias = params.add(prefix + ".fuse.b", Tensor::zeros({d}));
  return gate;
}

void collect_bn_states(const std::string& prefix, const ExpertParams& expert,
                       std::vector<std::pair<std::string, std::shared_ptr<ops::BatchNormState>>>&
                           states) {
  for (size_t b = 0; b < expert.blocks.size(); ++b) {
    for (size_t l = 0; l < expert.blocks[b].temporal.size(); ++l) {
      states.emplace_back(prefix + ".block" + std::to_string(b) + ".t" + std::to_string(l) + ".bn",
                          expert.blocks[b].temporal[l].bn_state);
    }
  }
}

}  // namespace

MoGEModel build_model(const ModelConfig& config, const RegionGraph& graph, uint64_t seed) {
  config.validate();
  if (graph.regions() != config.regions) {
    throw DimensionError("build_model: graph has " + std::to_string(graph.regions()) +
                         " regions, config expects " + std::to_string(config.regions));
  }
  MoGEModel model;
  model.config = config;
  model.prior_adjacency =
      config.raw_adjacency ? graph.adjacency.clone() : normalize_adjacency(graph.adjacency);

  const Rng root(seed);
  const int64_t c_count = config.category_count();

  if (!config.no_specific) {
    for (int64_t c = 0; c < c_count; ++c) {
      const std::string prefix = "specific" + std::to_string(c);
      model.specific.push_back(build_expert(config.expert, config.regions, 1, prefix,
                                            model.params, root.split(prefix)));
      collect_bn_states(prefix, model.specific.back(), model.bn_states);
    }
  }
  if (!config.no_universal) {
    model.universal = build_expert(config.expert, config.regions, c_count, "universal",
                                   model.params, root.split("universal"));
    collect_bn_states("universal", *model.universal, model.bn_states);
    for (int64_t c = 0; c < c_count; ++c) {
      const std::string prefix = "gate" + std::to_string(c);
      model.gates.push_back(build_gate(prefix, config.expert.hidden, config.heads, model.params,
                                       root.split(prefix)));
    }
  }
  for (int64_t c = 0; c < c_count; ++c) {
    std::vector<PredictorHead> row;
    for (int64_t k = 0; k < config.clusters; ++k) {
      const std::string base = "head" + std::to_string(c) + "_" + std::to_string(k);
      Rng rng = root.split(base);
      PredictorHead head;
      const int64_t d = config.expert.hidden;
      head.w1 = model.params.add(base + ".w1", fan_in_init({d, d}, d, rng));
      head.b1 = model.params.add(base + ".b1", Tensor::zeros({d}));
      head.w2 = model.params.add(base + ".w2", fan_in_init({d, 1}, d, rng));
      head.b2 = model.params.add(base + ".b2", Tensor::zeros({1}));
      row.push_back(std::move(head));
    }
    model.heads.push_back(std::move(row));
  }
  return model;
}

std::vector<int64_t> ClusterAssignment::regions_in(int64_t category, int64_t cluster) const {
  std::vector<int64_t> out;
  const auto& assignment = cluster_of[static_cast<size_t>(category)];
  for (size_t n = 0; n < assignment.size(); ++n) {
    if (assignment[n] == cluster) out.push_back(static_cast<int64_t>(n));
  }
  return out;
}

ClusterAssignment ClusterAssignment::single(int64_t categories, int64_t regions) {
  ClusterAssignment a;
  a.clusters = 1;
  a.cluster_of.assign(static_cast<size_t>(categories),
                      std::vector<int64_t>(static_cast<size_t>(regions), 0));
  a.centroids.assign(static_cast<size_t>(categories), {{}});
  return a;
}

namespace {

double sq_dist(const double* a, const double* b, int64_t d) {
  double acc = 0.0;
  for (int64_t i = 0; i < d; ++i) {
    const double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

struct KMeansResult {
  std::vector<int64_t> assign;
  std::vector<std::vector<double>> centroids;
};

// Deterministic k-means++ / Lloyd on row-major points [n x d].
KMeansResult kmeans(const std::vector<double>& points, int64_t n, int64_t d, int64_t k, Rng rng) {
  KMeansResult result;
  result.centroids.assign(static_cast<size_t>(k), std::vector<double>(static_cast<size_t>(d)));

  // k-means++ seeding.
  std::vector<int64_t> chosen;
  chosen.push_back(static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n))));
  std::vector<double> dist2(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  while (static_cast<int64_t>(chosen.size()) < k) {
    const double* last = points.data() + chosen.back() * d;
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      dist2[static_cast<size_t>(i)] =
          std::min(dist2[static_cast<size_t>(i)], sq_dist(points.data() + i * d, last, d));
      total += dist2[static_cast<size_t>(i)];
    }
    int64_t pick;
    if (total <= 0.0) {
      pick = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n)));
    } else {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (int64_t i = 0; i < n; ++i) {
        acc += dist2[static_cast<size_t>(i)];
        if (acc >= target) {
          pick = i;
          break;
        }
      }
    }
    chosen.push_back(pick);
  }
  for (int64_t c = 0; c < k; ++c) {
    std::copy(points.data() + chosen[static_cast<size_t>(c)] * d,
              points.data() + (chosen[static_cast<size_t>(c)] + 1) * d,
              result.centroids[static_cast<size_t>(c)].begin());
  }

  result.assign.assign(static_cast<size_t>(n), 0);
  for (int iter = 0; iter < 100; ++iter) {
    // Assign to the nearest centroid, ties to the lower index.
    for (int64_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int64_t best_c = 0;
      for (int64_t c = 0; c < k; ++c) {
        const double dd = sq_dist(points.data() + i * d, result.centroids[static_cast<size_t>(c)].data(), d);
        if (dd < best) {
          best = dd;
          best_c = c;
        }
      }
      result.assign[static_cast<size_t>(i)] = best_c;
    }
    // Repair empty clusters with the point farthest from its centroid.
    std::vector<int64_t> sizes(static_cast<size_t>(k), 0);
    for (int64_t i = 0; i < n; ++i) ++sizes[static_cast<size_t>(result.assign[static_cast<size_t>(i)])];
    for (int64_t c = 0; c < k; ++c) {
      if (sizes[static_cast<size_t>(c)] > 0) continue;
      double worst = -1.0;
      int64_t worst_i = 0;
      for (int64_t i = 0; i < n; ++i) {
        const int64_t own = result.assign[static_cast<size_t>(i)];
        if (sizes[static_cast<size_t>(own)] <= 1) continue;
        const double dd =
            sq_dist(points.data() + i * d, result.centroids[static_cast<size_t>(own)].data(), d);
        if (dd > worst) {
          worst = dd;
          worst_i = i;
        }
      }
      --sizes[static_cast<size_t>(result.assign[static_cast<size_t>(worst_i)])];
      result.assign[static_cast<size_t>(worst_i)] = c;
      sizes[static_cast<size_t>(c)] = 1;
      std::copy(points.data() + worst_i * d, points.data() + (worst_i + 1) * d,
                result.centroids[static_cast<size_t>(c)].begin());
    }
    // Recompute centroids; stop when they settle.
    double shift = 0.0;
    for (int64_t c = 0; c < k; ++c) {
      std::vector<double> mean(static_cast<size_t>(d), 0.0);
      int64_t count = 0;
      for (int64_t i = 0; i < n; ++i) {
        if (result.assign[static_cast<size_t>(i)] != c) continue;
        ++count;
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += points[i * d + j];
      }
      for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] /= static_cast<double>(count);
      shift = std::max(shift, std::sqrt(sq_dist(mean.data(),
                                                result.centroids[static_cast<size_t>(c)].data(), d)));
      result.centroids[static_cast<size_t>(c)] = std::move(mean);
    }
    if (shift < 1e-6) break;
  }
  return result;
}

}  // namespace

ClusterAssignment cluster_regions(const MoGEModel& model, int64_t k, uint64_t seed) {
  const int64_t n = model.config.regions;
  if (k < 1 || k > n) {
    throw ConfigError("cluster_regions: k = " + std::to_string(k) + " must lie in [1, " +
                      std::to_string(n) + "]");
  }
  const int64_t c_count = model.config.category_count();
  ClusterAssignment out;
  out.clusters = k;
  const Rng root = Rng(seed).split("kmeans");
  for (int64_t c = 0; c < c_count; ++c) {
    // Clustering features: the source-role embedding E1 of the category's
    // expert (the universal expert's when specific experts are ablated),
    // optionally concatenated with E2.
    const ExpertParams& expert =
        model.config.no_specific ? *model.universal : model.specific[static_cast<size_t>(c)];
    const int64_t dn = expert.config.node_embedding;
    const int64_t feat = model.config.cluster_concat_embeddings ? 2 * dn : dn;
    std::vector<double> points(static_cast<size_t>(n * feat));
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < dn; ++j) {
        points[static_cast<size_t>(i * feat + j)] = expert.e1.at(i, j);
        if (model.config.cluster_concat_embeddings) {
          points[static_cast<size_t>(i * feat + dn + j)] = expert.e2.at(i, j);
        }
      }
    }
    if (k == 1) {
      std::vector<double> mean(static_cast<size_t>(feat), 0.0);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < feat; ++j) mean[static_cast<size_t>(j)] += points[i * feat + j];
      }
      for (auto& v : mean) v /= static_cast<double>(n);
      out.cluster_of.emplace_back(static_cast<size_t>(n), 0);
      out.centroids.push_back({std::move(mean)});
      continue;
    }
    auto result = kmeans(points, n, feat, k, root.split(static_cast<uint64_t>(c)));
    out.cluster_of.push_back(std::move(result.assign));
    out.centroids.push_back(std::move(result.centroids));
  }
  return out;
}

Tensor universal_input(const Tensor& x) { return x; }

Tensor category_input(const Tensor& x, int64_t c) { return ops::slice_last(nullptr, x, c); }

GateOutput attention_gate(Tape* tape, const Tensor& h_specific, const Tensor& h_universal,
                          const GateParams& gate, int64_t heads) {
  const int64_t d = h_specific.shape().back();
  if (d % heads != 0) {
    throw ConfigError("attention_gate: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
  GateOutput out;
  std::vector<Tensor> merged;
  for (int64_t m = 0; m < heads; ++m) {
    Tensor q = ops::matmul(tape, h_specific, gate.wq[static_cast<size_t>(m)]);
    Tensor k = ops::matmul(tape, h_universal, gate.wk[static_cast<size_t>(m)]);
    Tensor v = ops::matmul(tape, h_universal, gate.wv[static_cast<size_t>(m)]);
    Tensor scores = ops::affine(tape, ops::bmm_nt(tape, q, k), scale, 0.0);
    Tensor attn = ops::softmax_rows(tape, scores);
    out.attention.push_back(attn);
    merged.push_back(ops::bmm(tape, attn, v));
  }
  out.recalibrated = ops::matmul(tape, ops::concat_last(tape, merged), gate.w_merge);
  return out;
}

FusionOutput gated_fusion(Tape* tape, const Tensor& h_specific, const Tensor& h_universal_hat,
                          const GateParams& gate) {
  if (h_specific.shape() != h_universal_hat.shape()) {
    throw DimensionError("gated_fusion: shapes " + h_specific.shape_string() + " and " +
                         h_universal_hat.shape_string() + " differ");
  }
  Tensor pre = ops::add_bias(
      tape,
      ops::add(tape, ops::matmul(tape, h_specific, gate.fuse_w_specific),
               ops::matmul(tape, h_universal_hat, gate.fuse_w_universal)),
      gate.fuse_bias);
  FusionOutput out;
  out.z = ops::sigmoid(tape, pre);
  Tensor one_minus_z = ops::affine(tape, out.z, -1.0, 1.0);
  out.fused = ops::add(tape, ops::mul(tape, out.z, h_specific),
                       ops::mul(tape, one_minus_z, h_universal_hat));
  return out;
}

Tensor regional_predict(Tape* tape, const std::vector<Tensor>& fused,
                        const ClusterAssignment& assignment,
                        const std::vector<std::vector<PredictorHead>>& heads) {
  if (fused.size() != heads.size() || assignment.cluster_of.size() != heads.size()) {
    throw ContractError("regional_predict: assignment does not cover every category");
  }
  const int64_t n = fused[0].extent(1);
  std::vector<Tensor> per_category;
  for (size_t c = 0; c < fused.size(); ++c) {
    Tensor acc;
    for (int64_t k = 0; k < assignment.clusters; ++k) {
      const auto rows = assignment.regions_in(static_cast<int64_t>(c), k);
      if (rows.empty()) continue;
      const PredictorHead& head = heads[c][static_cast<size_t>(k)];
      Tensor sub = ops::gather_regions(tape, fused[c], rows);
      Tensor hidden = ops::relu(tape, ops::add_bias(tape, ops::matmul(tape, sub, head.w1), head.b1));
      Tensor score = ops::add_bias(tape, ops::matmul(tape, hidden, head.w2), head.b2);
      Tensor scattered = ops::scatter_regions(tape, score, rows, n);
      acc = acc.defined() ? ops::add(tape, acc, scattered) : scattered;
    }
    per_category.push_back(acc);
  }
  // Counts are nonnegative; clamp the assembled predictions.
  return ops::relu(tape, ops::concat_last(tape, per_category));
}

ModelOutput model_forward(Tape* tape, const MoGEModel& model, const Tensor& x,
                          const ClusterAssignment& assignment, ops::BnMode bn_mode,
                          bool bn_update) {
  const ModelConfig& cfg = model.config;
  if (x.rank() != 4 || x.extent(1) != cfg.regions || x.extent(2) != cfg.window ||
      x.extent(3) != cfg.category_count()) {
    throw DimensionError("model_forward: input " + x.shape_string() + " does not match [B," +
                         std::to_string(cfg.regions) + "," + std::to_string(cfg.window) + "," +
                         std::to_string(cfg.category_count()) + "]");
  }
  if (static_cast<int64_t>(assignment.cluster_of.size()) != cfg.category_count()) {
    throw ContractError("model_forward: cluster assignment missing for some category");
  }

  ModelOutput out;
  if (model.universal.has_value()) {
    out.h_universal = expert_forward(tape, *model.universal, universal_input(x),
                                     model.prior_adjacency, bn_mode, bn_update)
                          .representation;
  }
  for (int64_t c = 0; c < cfg.category_count(); ++c) {
    if (!cfg.no_specific) {
      Tensor xc = ops::slice_last(tape, x, c);
      out.h_specific.push_back(expert_forward(tape, model.specific[static_cast<size_t>(c)], xc,
                                              model.prior_adjacency, bn_mode, bn_update)
                                   .representation);
    }
    if (cfg.no_universal) {
      out.fused.push_back(out.h_specific[static_cast<size_t>(c)]);
      out.attention.emplace_back();
    } else if (cfg.no_specific) {
      // Universal-only: the per-category gate recalibrates the shared
      // representation with itself as the query.
      GateOutput gate = attention_gate(tape, out.h_universal, out.h_universal,
                                       model.gates[static_cast<size_t>(c)], cfg.heads);
      out.fused.push_back(gate.recalibrated);
      out.attention.push_back(std::move(gate.attention));
    } else {
      GateOutput gate = attention_gate(tape, out.h_specific[static_cast<size_t>(c)],
                                       out.h_universal, model.gates[static_cast<size_t>(c)],
                                       cfg.heads);
      FusionOutput fusion = gated_fusion(tape, out.h_specific[static_cast<size_t>(c)],
                                         gate.recalibrated, model.gates[static_cast<size_t>(c)]);
      out.fused.push_back(fusion.fused);
      out.gate_z.push_back(fusion.z);
      out.attention.push_back(std::move(gate.attention));
    }
  }
  out.prediction = regional_predict(tape, out.fused, assignment, model.heads);
  return out;
}

}  // namespace stmoge
