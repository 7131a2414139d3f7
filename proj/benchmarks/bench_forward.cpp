#include <benchmark/benchmark.h>

#include "stmoge/data.hpp"
#include "stmoge/expert.hpp"
#include "stmoge/moge.hpp"
#include "stmoge/objectives.hpp"

using namespace stmoge;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(lo, hi);
  return t;
}

GridConfig square_grid(int64_t n) {
  int64_t rows = 1;
  for (int64_t r = n; r >= 1; --r) {
    if (n % r == 0 && r * r <= n) rows = std::max(rows, r);
  }
  return GridConfig{rows, n / rows, 0, 1, 0, 1};
}

ModelConfig bench_model(int64_t regions, int64_t categories) {
  ModelConfig cfg;
  cfg.regions = regions;
  cfg.window = 7;
  for (int64_t c = 0; c < categories; ++c) cfg.categories.push_back("c" + std::to_string(c));
  cfg.expert.hidden = 32;
  cfg.expert.blocks = 3;
  cfg.expert.spatial_layers = 2;
  cfg.expert.temporal_layers = 3;
  cfg.expert.node_embedding = 16;
  cfg.heads = 4;
  cfg.clusters = 4;
  return cfg;
}

}  // namespace

static void BM_matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  Tensor a = random_tensor({n, n}, rng);
  Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    Tensor out = ops::matmul(nullptr, a, b);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(32)->Arg(64)->Arg(128)->Arg(256);

// The O(N^2 T d) spatial aggregation dominating the complexity analysis.
static void BM_spatial_layer(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(2);
  Tensor adj = random_tensor({n, n}, rng, 0.0, 1.0 / static_cast<double>(n));
  Tensor prior = random_tensor({n, n}, rng, 0.0, 1.0 / static_cast<double>(n));
  Tensor h = random_tensor({1, n, 7, 32}, rng);
  Tensor w1 = random_tensor({32, 32}, rng);
  Tensor w2 = random_tensor({32, 32}, rng);
  for (auto _ : state) {
    Tensor out = gcn_layer(nullptr, h, adj, prior, w1, w2);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_spatial_layer)->Arg(32)->Arg(64)->Arg(128)->Arg(225);

static void BM_expert_forward(benchmark::State& state) {
  const int64_t n = state.range(0);
  ParamStore params;
  STExpertConfig cfg;
  cfg.hidden = 32;
  cfg.blocks = 3;
  cfg.spatial_layers = 2;
  cfg.temporal_layers = 3;
  cfg.node_embedding = 16;
  ExpertParams expert = build_expert(cfg, n, 1, "e", params, Rng(3));
  Tensor prior = normalize_adjacency(build_grid_graph(square_grid(n)).adjacency);
  Rng rng(4);
  Tensor x = random_tensor({1, n, 7, 1}, rng, 0.0, 3.0);
  for (auto _ : state) {
    auto trace = expert_forward(nullptr, expert, x, prior, ops::BnMode::kEval, false);
    benchmark::DoNotOptimize(trace.representation.data());
  }
}
BENCHMARK(BM_expert_forward)->Arg(64)->Arg(140)->Arg(225);

static void BM_model_forward(benchmark::State& state) {
  const int64_t n = state.range(0);
  const int64_t categories = state.range(1);
  ModelConfig cfg = bench_model(n, categories);
  MoGEModel model = build_model(cfg, build_grid_graph(square_grid(n)), 5);
  auto assignment = cluster_regions(model, cfg.clusters, 5);
  Rng rng(6);
  Tensor x = random_tensor({1, n, 7, categories}, rng, 0.0, 3.0);
  for (auto _ : state) {
    auto out = model_forward(nullptr, model, x, assignment, ops::BnMode::kEval, false);
    benchmark::DoNotOptimize(out.prediction.data());
  }
}
BENCHMARK(BM_model_forward)->Args({64, 3})->Args({140, 6})->Args({225, 6});

static void BM_train_step(benchmark::State& state) {
  const int64_t n = state.range(0);
  ModelConfig cfg = bench_model(n, 3);
  cfg.expert.hidden = 16;
  cfg.expert.blocks = 1;
  cfg.expert.node_embedding = 8;
  cfg.heads = 2;
  cfg.clusters = 2;
  MoGEModel model = build_model(cfg, build_grid_graph(square_grid(n)), 7);
  auto assignment = cluster_regions(model, cfg.clusters, 7);
  Rng rng(8);
  Tensor x({8, n, 7, 3});
  for (int64_t i = 0; i < x.size(); ++i) x.at(i) = std::floor(rng.uniform(0.0, 3.0));
  Tensor y({8, n, 3});
  for (int64_t i = 0; i < y.size(); ++i) y.at(i) = std::floor(rng.uniform(0.0, 3.0));
  const std::vector<double> cat_lambda = {1.0, 1.0, 1.0};
  const std::vector<std::vector<double>> cluster_lambda = {{1, 1}, {1, 1}, {1, 1}};
  for (auto _ : state) {
    Tape tape;
    auto out = model_forward(&tape, model, x, assignment, ops::BnMode::kTrain, false);
    auto loss = weighted_pred_loss(&tape, out.prediction, y, cat_lambda, cluster_lambda,
                                   assignment);
    backward(tape, loss.loss, model.params);
    benchmark::DoNotOptimize(loss.loss.value());
  }
}
BENCHMARK(BM_train_step)->Arg(64);

BENCHMARK_MAIN();
