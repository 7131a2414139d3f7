#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stmoge/data.hpp"
#include "stmoge/moge.hpp"
#include "stmoge/objectives.hpp"

namespace stmoge {

struct TrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 64;
  double learning_rate = 0.01;
  double lr_decay = 0.97;  // multiplied in at every epoch end
  uint64_t seed = 1;
  int64_t patience = 10;  // early stop on validation MAE
  double lambda_pred = 0.9;
  double lambda_contrast = 0.1;
  bool no_specific = false;
  bool no_universal = false;
  bool no_cecl = false;
  bool no_halr = false;
  CECLConfig cecl;
  HALRConfig halr;

  void validate() const;
  /// CECL needs the auxiliary (= universal) expert and the specific experts
  /// to contrast against; either ablation disables it.
  bool cecl_active() const {
    return !no_cecl && !no_universal && !no_specific && lambda_contrast > 0.0;
  }
};

class Adam {
 public:
  explicit Adam(ParamStore& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// One update from the gradients currently held by the parameters.
  void step(double lr);
  int64_t steps_taken() const { return t_; }

 private:
  ParamStore* params_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct EpochLog {
  int64_t epoch = 0;
  double joint_loss = 0.0;
  std::vector<double> category_loss;
  std::vector<double> category_lambda;
  std::vector<std::vector<double>> cluster_lambda;
  double learning_rate = 0.0;
  double val_mae = 0.0;
};

struct CategoryMetrics {
  double mae = 0.0;
  std::optional<double> mape;  // empty when the category has no positive targets
  int64_t entries = 0;
};

struct QuantileGroupMetrics {
  std::vector<int64_t> regions;
  CategoryMetrics metrics;
};

struct ForecastReport {
  std::vector<std::string> categories;
  std::vector<CategoryMetrics> per_category;
  double overall_mae = 0.0;
  std::optional<double> overall_mape;
  std::vector<QuantileGroupMetrics> low_quantile;  // (0.00, 0.25] per category
  std::vector<QuantileGroupMetrics> mid_quantile;  // (0.25, 0.50] per category
  Tensor predictions;  // [samples, N, C]
  std::string training_log_path;
};

struct TrainResult {
  MoGEModel model;
  ClusterAssignment assignment;
  std::vector<EpochLog> log;
  int64_t best_epoch = 0;
  double best_val_mae = 0.0;
};

/// Full training loop: per-epoch reclustering (after the warmup), seeded
/// mini-batch shuffling, joint loss with CECL and HALR, Adam updates with a
/// decaying learning rate, early stopping on validation MAE. Deterministic
/// for a fixed seed. Aborts with a diagnostic naming the first non-finite
/// tensor if the loss diverges.
TrainResult train(const DatasetSplit& split, const RegionGraph& graph, ModelConfig model_config,
                  const TrainConfig& train_config);

/// MAE over all entries; MAPE over entries with positive targets only,
/// reported as undefined when no target is positive.
CategoryMetrics compute_metrics(std::span<const double> target, std::span<const double> predicted);

/// MAE/MAPE per category over a sample list; never mutates the model.
ForecastReport evaluate(const MoGEModel& model, const std::vector<WindowSample>& samples,
                        const ClusterAssignment& assignment);

/// Region groups at the (0,0.25] and (0.25,0.5] frequency quantiles, ranked
/// per category by total count over slots [0, frequency_slots); ties broken
/// by region index.
struct QuantileGroups {
  std::vector<std::vector<int64_t>> low;  // [C] region lists
  std::vector<std::vector<int64_t>> mid;
};
QuantileGroups quantile_groups(const CrimeTensor& tensor, int64_t frequency_slots);

/// Evaluation restricted to the low-frequency region groups; frequencies are
/// taken over the training period of the split the samples came from.
void attach_quantile_metrics(ForecastReport& report, const MoGEModel& model,
                             const std::vector<WindowSample>& samples,
                             const QuantileGroups& groups);

/// Per-category MAE of always predicting zero: the sanity floor.
std::vector<double> zero_predictor_mae(const std::vector<WindowSample>& samples);

struct AblationRow {
  std::string variant;
  std::vector<double> category_mae;  // mean over seeds
  double overall_mae = 0.0;
};

/// Trains the full model and the four single-module ablations with a shared
/// seed set; test MAE averaged over seeds.
std::vector<AblationRow> ablate(const DatasetSplit& split, const RegionGraph& graph,
                                const ModelConfig& model_config, const TrainConfig& train_config,
                                const std::vector<uint64_t>& seeds);

void write_training_log(const std::string& path, const std::vector<EpochLog>& log,
                        const std::vector<std::string>& categories);

std::string report_to_json(const ForecastReport& report, bool include_predictions = true);

}  // namespace stmoge
