#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "stmoge/moge.hpp"
#include "stmoge/tensor.hpp"

namespace stmoge {

struct CECLConfig {
  double temperature = 0.05;
  double dropout = 0.1;
  /// Default similarity: cosine of region-mean-pooled vectors. The alternate
  /// pools per-region cosines instead.
  bool per_region_cosine = false;
  /// Adds the positive pair to the denominators (standard InfoNCE); off by
  /// default, keeping the literal contrastive form whose denominator holds
  /// only the cross-expert terms.
  bool include_positive_in_denominator = false;
};

struct HALRConfig {
  double temperature = 1.0;
  double epsilon = 1e-8;
  int64_t warmup_epochs = 2;
};

/// Rolling per-category and per-(category, cluster) epoch losses; only the
/// last two completed epochs are retained, which is all the re-weighting
/// ratios need.
class LossHistory {
 public:
  explicit LossHistory(int64_t categories) : categories_(categories) {}

  void append(std::vector<double> per_category, std::vector<std::vector<double>> per_cluster);

  int64_t epochs_recorded() const { return epochs_; }
  bool category_ready() const { return category_.size() == 2; }
  /// Cluster ratios need two epochs recorded under the same cluster count.
  bool cluster_ready(int64_t clusters) const;

  // history[0] = epoch t-2, history[1] = epoch t-1
  const std::vector<double>& category(int64_t age) const { return category_[static_cast<size_t>(age)]; }
  const std::vector<std::vector<double>>& cluster(int64_t age) const {
    return cluster_[static_cast<size_t>(age)];
  }
  int64_t categories() const { return categories_; }

 private:
  int64_t categories_;
  int64_t epochs_ = 0;
  std::deque<std::vector<double>> category_;
  std::deque<std::vector<std::vector<double>>> cluster_;
};

/// lambda_c = C exp(w_c/T) / sum exp(w/T) with w_c = L_c(t-1)/(L_c(t-2)+eps).
/// All ones during warmup or when history is incomplete. Weights are plain
/// numbers: no gradient flows through the schedule.
std::vector<double> halr_category_weights(const LossHistory& history, const HALRConfig& config);

/// Same ratio construction within each category across its K clusters.
std::vector<std::vector<double>> halr_cluster_weights(const LossHistory& history,
                                                      const HALRConfig& config, int64_t clusters);

struct CorruptedRepresentations {
  std::vector<Tensor> clean;      // per category [B,N,d]
  std::vector<Tensor> disturbed;  // same forward with dropout masks active
};

/// Runs the auxiliary expert (the universal expert's parameters) on each
/// category's channel broadcast into the C-channel input, once without and
/// once with dropout disturbance. Never updates batch-norm running stats.
CorruptedRepresentations corrupted_representations(Tape* tape, const MoGEModel& model,
                                                   const Tensor& x, const CECLConfig& config,
                                                   ops::BnMode bn_mode, uint64_t seed);

struct CECLLosses {
  Tensor specific;   // L_cs
  Tensor universal;  // L_cu
};

/// InfoNCE-style cross-expert losses of Eqs. (12)-(13), log-sum-exp
/// stabilized, differentiable with respect to every representation.
CECLLosses cecl_losses(Tape* tape, const std::vector<Tensor>& h_specific,
                       const Tensor& h_universal, const CorruptedRepresentations& corrupted,
                       const CECLConfig& config);

struct PredictionLoss {
  Tensor loss;  // scalar, the re-weighted objective
  /// Unweighted size-normalized squared errors, the inputs to the next
  /// epoch's re-weighting ratios.
  std::vector<double> category_values;               // [C]
  std::vector<std::vector<double>> cluster_values;   // [C][K]
};

/// sum_c lambda_c sum_k lambda_ck |X_k,c - Xhat_k,c|^2 / (|cluster| * B).
PredictionLoss weighted_pred_loss(Tape* tape, const Tensor& prediction, const Tensor& target,
                                  const std::vector<double>& category_weights,
                                  const std::vector<std::vector<double>>& cluster_weights,
                                  const ClusterAssignment& assignment);

/// lambda1 * L_pred + lambda2 * (L_cs + L_cu); the coefficients must sum to 1.
Tensor joint_loss(Tape* tape, const Tensor& pred_loss, const Tensor& l_cs, const Tensor& l_cu,
                  double lambda_pred, double lambda_contrast);

}  // namespace stmoge
