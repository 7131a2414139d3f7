#include "stmoge/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "stmoge/errors.hpp"

namespace stmoge {

void LossHistory::append(std::vector<double> per_category,
                         std::vector<std::vector<double>> per_cluster) {
  if (static_cast<int64_t>(per_category.size()) != categories_ ||
      static_cast<int64_t>(per_cluster.size()) != categories_) {
    throw ContractError("LossHistory::append: expected one entry per category");
  }
  category_.push_back(std::move(per_category));
  cluster_.push_back(std::move(per_cluster));
  while (category_.size() > 2) category_.pop_front();
  while (cluster_.size() > 2) cluster_.pop_front();
  ++epochs_;
}

bool LossHistory::cluster_ready(int64_t clusters) const {
  if (cluster_.size() != 2) return false;
  for (const auto& epoch : cluster_) {
    for (const auto& row : epoch) {
      if (static_cast<int64_t>(row.size()) != clusters) return false;
    }
  }
  return true;
}

namespace {

void check_nonnegative(const std::vector<double>& losses) {
  for (double v : losses) {
    if (v < 0.0) throw ContractError("halr_weights: loss history holds a negative value");
  }
}

// Softmax of the loss ratios, scaled so the weights sum to the group size.
std::vector<double> ratio_softmax(const std::vector<double>& last, const std::vector<double>& prev,
                                  double temperature, double epsilon) {
  check_nonnegative(last);
  check_nonnegative(prev);
  const size_t n = last.size();
  std::vector<double> w(n);
  for (size_t i = 0; i < n; ++i) w[i] = last[i] / (prev[i] + epsilon);
  const double wmax = *std::max_element(w.begin(), w.end());
  double denom = 0.0;
  for (size_t i = 0; i < n; ++i) {
    w[i] = std::exp((w[i] - wmax) / temperature);
    denom += w[i];
  }
  for (size_t i = 0; i < n; ++i) w[i] = static_cast<double>(n) * w[i] / denom;
  return w;
}

}  // namespace

std::vector<double> halr_category_weights(const LossHistory& history, const HALRConfig& config) {
  if (config.temperature <= 0.0) {
    throw ConfigError("halr: temperature must be positive");
  }
  const size_t c = static_cast<size_t>(history.categories());
  if (history.epochs_recorded() <= config.warmup_epochs || !history.category_ready()) {
    return std::vector<double>(c, 1.0);
  }
  return ratio_softmax(history.category(1), history.category(0), config.temperature,
                       config.epsilon);
}

std::vector<std::vector<double>> halr_cluster_weights(const LossHistory& history,
                                                      const HALRConfig& config, int64_t clusters) {
  if (config.temperature <= 0.0) {
    throw ConfigError("halr: temperature must be positive");
  }
  const size_t c = static_cast<size_t>(history.categories());
  if (history.epochs_recorded() <= config.warmup_epochs || !history.cluster_ready(clusters)) {
    return std::vector<std::vector<double>>(
        c, std::vector<double>(static_cast<size_t>(clusters), 1.0));
  }
  std::vector<std::vector<double>> out;
  out.reserve(c);
  for (size_t i = 0; i < c; ++i) {
    out.push_back(ratio_softmax(history.cluster(1)[i], history.cluster(0)[i], config.temperature,
                                config.epsilon));
  }
  return out;
}

CorruptedRepresentations corrupted_representations(Tape* tape, const MoGEModel& model,
                                                   const Tensor& x, const CECLConfig& config,
                                                   ops::BnMode bn_mode, uint64_t seed) {
  if (!model.universal.has_value()) {
    throw ContractError("corrupted_representations: universal expert is disabled");
  }
  const int64_t B = x.extent(0), N = x.extent(1), T = x.extent(2), C = x.extent(3);
  CorruptedRepresentations out;
  const Rng root = Rng(seed).split("cecl");
  for (int64_t c = 0; c < C; ++c) {
    // Category channel broadcast into the C-channel auxiliary input, other
    // channels zeroed. The input carries no gradient.
    Tensor input({B, N, T, C});
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t t = 0; t < T; ++t) input.at(b, n, t, c) = x.at(b, n, t, c);
      }
    }
    out.clean.push_back(expert_forward(tape, *model.universal, input, model.prior_adjacency,
                                       bn_mode, /*bn_update=*/false)
                            .representation);
    Rng rng = root.split(static_cast<uint64_t>(c));
    out.disturbed.push_back(expert_forward(tape, *model.universal, input, model.prior_adjacency,
                                           bn_mode, /*bn_update=*/false, config.dropout, &rng)
                                .representation);
  }
  return out;
}

namespace {

// Similarity of two [B,N,d] representation stacks -> per-sample [B].
Tensor representation_similarity(Tape* tape, const Tensor& a, const Tensor& b,
                                 const CECLConfig& config) {
  if (config.per_region_cosine) {
    return ops::mean_axis1(tape, ops::cosine_rows(tape, a, b));  // [B,N] -> [B]
  }
  return ops::cosine_rows(tape, ops::mean_axis1(tape, a), ops::mean_axis1(tape, b));
}

// log sum_i exp(terms_i) per sample, with a detached running maximum; the
// detachment leaves gradients exact (they reduce to the softmax weights).
Tensor log_sum_exp(Tape* tape, const std::vector<Tensor>& terms) {
  const int64_t b = terms[0].extent(0);
  Tensor m(terms[0].shape());
  for (int64_t i = 0; i < b; ++i) {
    double mx = terms[0].at(i);
    for (const Tensor& t : terms) mx = std::max(mx, t.at(i));
    m.at(i) = mx;
  }
  Tensor acc;
  for (const Tensor& t : terms) {
    Tensor e = ops::exp(tape, ops::sub(tape, t, m));
    acc = acc.defined() ? ops::add(tape, acc, e) : e;
  }
  return ops::add(tape, m, ops::log(tape, acc));
}

}  // namespace

CECLLosses cecl_losses(Tape* tape, const std::vector<Tensor>& h_specific,
                       const Tensor& h_universal, const CorruptedRepresentations& corrupted,
                       const CECLConfig& config) {
  if (config.temperature <= 0.0) {
    throw ConfigError("cecl: temperature must be positive");
  }
  const int64_t c_count = static_cast<int64_t>(corrupted.clean.size());
  const double inv_tau = 1.0 / config.temperature;

  Tensor ls_acc, lu_acc;
  for (int64_t c = 0; c < c_count; ++c) {
    const Tensor& anchor = corrupted.clean[static_cast<size_t>(c)];
    Tensor positive = ops::affine(
        tape,
        representation_similarity(tape, corrupted.disturbed[static_cast<size_t>(c)], anchor,
                                  config),
        inv_tau, 0.0);

    std::vector<Tensor> specific_terms;
    for (int64_t other = 0; other < c_count; ++other) {
      specific_terms.push_back(ops::affine(
          tape,
          representation_similarity(tape, h_specific[static_cast<size_t>(other)], anchor, config),
          inv_tau, 0.0));
    }
    std::vector<Tensor> universal_terms(
        static_cast<size_t>(c_count),
        ops::affine(tape, representation_similarity(tape, h_universal, anchor, config), inv_tau,
                    0.0));
    if (config.include_positive_in_denominator) {
      specific_terms.push_back(positive);
      universal_terms.push_back(positive);
    }

    Tensor ls_c = ops::sub(tape, log_sum_exp(tape, specific_terms), positive);
    Tensor lu_c = ops::sub(tape, log_sum_exp(tape, universal_terms), positive);
    ls_acc = ls_acc.defined() ? ops::add(tape, ls_acc, ls_c) : ls_c;
    lu_acc = lu_acc.defined() ? ops::add(tape, lu_acc, lu_c) : lu_c;
  }

  const double inv_c = 1.0 / static_cast<double>(c_count);
  CECLLosses out;
  out.specific = ops::mean(tape, ops::affine(tape, ls_acc, inv_c, 0.0));
  out.universal = ops::mean(tape, ops::affine(tape, lu_acc, inv_c, 0.0));
  return out;
}

PredictionLoss weighted_pred_loss(Tape* tape, const Tensor& prediction, const Tensor& target,
                                  const std::vector<double>& category_weights,
                                  const std::vector<std::vector<double>>& cluster_weights,
                                  const ClusterAssignment& assignment) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("weighted_pred_loss: prediction " + prediction.shape_string() +
                         " vs target " + target.shape_string());
  }
  const int64_t B = prediction.extent(0);
  const int64_t N = prediction.extent(1);
  const int64_t C = prediction.extent(2);
  if (static_cast<int64_t>(assignment.cluster_of.size()) != C) {
    throw ContractError("weighted_pred_loss: assignment does not partition the categories");
  }

  PredictionLoss out;
  out.category_values.assign(static_cast<size_t>(C), 0.0);
  Tensor total;
  for (int64_t c = 0; c < C; ++c) {
    Tensor pred_c = ops::slice_last(tape, prediction, c);
    Tensor target_c = ops::slice_last(nullptr, target, c);
    std::vector<double> cluster_row;
    for (int64_t k = 0; k < assignment.clusters; ++k) {
      const auto rows = assignment.regions_in(c, k);
      if (rows.empty()) {
        cluster_row.push_back(0.0);
        continue;
      }
      Tensor residual = ops::sub(tape, ops::gather_regions(tape, pred_c, rows),
                                 ops::gather_regions(nullptr, target_c, rows));
      Tensor sse = ops::sum_squares(tape, residual);
      const double normalizer = 1.0 / static_cast<double>(static_cast<int64_t>(rows.size()) * B);
      cluster_row.push_back(sse.value() * normalizer);
      const double w = category_weights[static_cast<size_t>(c)] *
                       cluster_weights[static_cast<size_t>(c)][static_cast<size_t>(k)] *
                       normalizer;
      Tensor term = ops::affine(tape, sse, w, 0.0);
      total = total.defined() ? ops::add(tape, total, term) : term;
    }
    double cat = 0.0;
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t b = 0; b < B; ++b) {
        const double diff = prediction.at(b, n, c) - target.at(b, n, c);
        cat += diff * diff;
      }
    }
    out.category_values[static_cast<size_t>(c)] = cat / static_cast<double>(N * B);
    out.cluster_values.push_back(std::move(cluster_row));
  }
  out.loss = total;
  return out;
}

Tensor joint_loss(Tape* tape, const Tensor& pred_loss, const Tensor& l_cs, const Tensor& l_cu,
                  double lambda_pred, double lambda_contrast) {
  if (lambda_pred < 0.0 || lambda_contrast < 0.0 ||
      std::fabs(lambda_pred + lambda_contrast - 1.0) > 1e-9) {
    throw ConfigError("joint_loss: lambda1 + lambda2 must equal 1 with both nonnegative");
  }
  Tensor contrast = ops::add(tape, l_cs, l_cu);
  return ops::add(tape, ops::affine(tape, pred_loss, lambda_pred, 0.0),
                  ops::affine(tape, contrast, lambda_contrast, 0.0));
}

}  // namespace stmoge
