#include "stmoge/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "stmoge/errors.hpp"

namespace stmoge {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train config: batch size must be >= 1");
  if (learning_rate <= 0.0) throw ConfigError("train config: learning rate must be positive");
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (lr_decay <= 0.0 || lr_decay > 1.0) {
    throw ConfigError("train config: lr decay must lie in (0, 1]");
  }
  if (lambda_pred < 0.0 || lambda_contrast < 0.0 ||
      std::fabs(lambda_pred + lambda_contrast - 1.0) > 1e-9) {
    throw ConfigError("train config: lambda_pred + lambda_contrast must equal 1");
  }
}

Adam::Adam(ParamStore& params, double beta1, double beta2, double eps)
    : params_(&params), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params.all()) {
    m_.emplace_back(static_cast<size_t>(p.value.size()), 0.0);
    v_.emplace_back(static_cast<size_t>(p.value.size()), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  size_t pi = 0;
  for (auto& p : params_->all()) {
    double* value = p.value.data();
    const double* grad = p.value.grad();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (int64_t i = 0; i < p.value.size(); ++i) {
      const double g = grad[i];
      m[static_cast<size_t>(i)] = beta1_ * m[static_cast<size_t>(i)] + (1.0 - beta1_) * g;
      v[static_cast<size_t>(i)] = beta2_ * v[static_cast<size_t>(i)] + (1.0 - beta2_) * g * g;
      const double mhat = m[static_cast<size_t>(i)] / bc1;
      const double vhat = v[static_cast<size_t>(i)] / bc2;
      value[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    ++pi;
  }
}

namespace {

// Materializes a mini-batch as [B,N,T,C] inputs and [B,N,C] targets.
void build_batch(const std::vector<WindowSample>& samples, const std::vector<int64_t>& order,
                 int64_t begin, int64_t end, Tensor& x, Tensor& y) {
  const WindowSample& first = samples[static_cast<size_t>(order[static_cast<size_t>(begin)])];
  const int64_t n = first.source->regions;
  const int64_t t = first.window;
  const int64_t c = first.source->category_count();
  const int64_t b_count = end - begin;
  x = Tensor({b_count, n, t, c});
  y = Tensor({b_count, n, c});
  for (int64_t b = 0; b < b_count; ++b) {
    const WindowSample& s = samples[static_cast<size_t>(order[static_cast<size_t>(begin + b)])];
    for (int64_t region = 0; region < n; ++region) {
      for (int64_t slot = 0; slot < t; ++slot) {
        for (int64_t cat = 0; cat < c; ++cat) {
          x.at(b, region, slot, cat) = static_cast<double>(s.input_count(region, slot, cat));
        }
      }
      for (int64_t cat = 0; cat < c; ++cat) {
        y.at(b, region, cat) = static_cast<double>(s.target_count(region, cat));
      }
    }
  }
}

struct Snapshot {
  std::vector<std::vector<double>> params;
  std::vector<std::vector<double>> bn_mean;
  std::vector<std::vector<double>> bn_var;
  std::vector<int64_t> bn_seen;
  ClusterAssignment assignment;
};

Snapshot take_snapshot(const MoGEModel& model, const ClusterAssignment& assignment) {
  Snapshot snap;
  for (const auto& p : model.params.all()) {
    snap.params.emplace_back(p.value.data(), p.value.data() + p.value.size());
  }
  for (const auto& [name, state] : model.bn_states) {
    (void)name;
    snap.bn_mean.emplace_back(state->running_mean.data(),
                              state->running_mean.data() + state->running_mean.size());
    snap.bn_var.emplace_back(state->running_var.data(),
                             state->running_var.data() + state->running_var.size());
    snap.bn_seen.push_back(state->batches_seen);
  }
  snap.assignment = assignment;
  return snap;
}

void restore_snapshot(MoGEModel& model, ClusterAssignment& assignment, const Snapshot& snap) {
  size_t i = 0;
  for (auto& p : model.params.all()) {
    std::copy(snap.params[i].begin(), snap.params[i].end(), p.value.data());
    ++i;
  }
  i = 0;
  for (auto& [name, state] : model.bn_states) {
    (void)name;
    std::copy(snap.bn_mean[i].begin(), snap.bn_mean[i].end(), state->running_mean.data());
    std::copy(snap.bn_var[i].begin(), snap.bn_var[i].end(), state->running_var.data());
    state->batches_seen = snap.bn_seen[i];
    ++i;
  }
  assignment = snap.assignment;
}

void shuffle_indices(std::vector<int64_t>& order, Rng& rng) {
  for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
}

}  // namespace

TrainResult train(const DatasetSplit& split, const RegionGraph& graph, ModelConfig model_config,
                  const TrainConfig& train_config) {
  train_config.validate();
  if (split.train.empty() || split.val.empty()) {
    throw InsufficientDataError("train: empty train or validation split");
  }
  model_config.no_specific = train_config.no_specific;
  model_config.no_universal = train_config.no_universal;

  TrainResult result;
  result.model = build_model(model_config, graph, train_config.seed);
  MoGEModel& model = result.model;
  const int64_t c_count = model_config.category_count();

  Adam adam(model.params);
  LossHistory history(c_count);
  ClusterAssignment assignment = ClusterAssignment::single(c_count, model_config.regions);
  const Rng root(train_config.seed);
  Rng shuffle_rng = root.split("shuffle");

  double lr = train_config.learning_rate;
  double best_val = std::numeric_limits<double>::infinity();
  int64_t since_best = 0;
  Snapshot best_snapshot = take_snapshot(model, assignment);
  result.best_epoch = 0;

  std::vector<int64_t> order(split.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = 1; epoch <= train_config.epochs; ++epoch) {
    // Reclustering: single shared head through the warmup, then k-means on
    // the current embeddings at the start of every epoch. When specialization
    // begins, every head forks from the warmed-up shared head so the
    // prediction function stays continuous across the handoff.
    if (epoch > model.config.cluster_warmup_epochs && model.config.clusters > 1) {
      if (epoch == model.config.cluster_warmup_epochs + 1) {
        for (auto& row : model.heads) {
          for (size_t k = 1; k < row.size(); ++k) {
            auto copy = [](const Tensor& src, Tensor dst) {
              std::copy(src.data(), src.data() + src.size(), dst.data());
            };
            copy(row[0].w1, row[k].w1);
            copy(row[0].b1, row[k].b1);
            copy(row[0].w2, row[k].w2);
            copy(row[0].b2, row[k].b2);
          }
        }
      }
      assignment = cluster_regions(model, model.config.clusters,
                                   root.split("kmeans").split(static_cast<uint64_t>(epoch))
                                       .next_u64());
    }
    const std::vector<double> cat_lambda =
        train_config.no_halr ? std::vector<double>(static_cast<size_t>(c_count), 1.0)
                             : halr_category_weights(history, train_config.halr);
    const std::vector<std::vector<double>> cluster_lambda =
        train_config.no_halr
            ? std::vector<std::vector<double>>(
                  static_cast<size_t>(c_count),
                  std::vector<double>(static_cast<size_t>(assignment.clusters), 1.0))
            : halr_cluster_weights(history, train_config.halr, assignment.clusters);

    shuffle_indices(order, shuffle_rng);

    std::vector<double> epoch_cat(static_cast<size_t>(c_count), 0.0);
    std::vector<std::vector<double>> epoch_cluster(
        static_cast<size_t>(c_count),
        std::vector<double>(static_cast<size_t>(assignment.clusters), 0.0));
    double epoch_joint = 0.0;
    int64_t batches = 0;

    for (int64_t begin = 0; begin < static_cast<int64_t>(order.size());
         begin += train_config.batch_size) {
      const int64_t end =
          std::min<int64_t>(begin + train_config.batch_size, static_cast<int64_t>(order.size()));
      Tensor x, y;
      build_batch(split.train, order, begin, end, x, y);

      Tape tape;
      ModelOutput out = model_forward(&tape, model, x, assignment, ops::BnMode::kTrain, true);
      PredictionLoss pred =
          weighted_pred_loss(&tape, out.prediction, y, cat_lambda, cluster_lambda, assignment);

      Tensor joint;
      if (train_config.cecl_active()) {
        const uint64_t cecl_seed = root.split("cecl").split(static_cast<uint64_t>(epoch))
                                       .split(static_cast<uint64_t>(begin))
                                       .next_u64();
        CorruptedRepresentations corrupted = corrupted_representations(
            &tape, model, x, train_config.cecl, ops::BnMode::kTrain, cecl_seed);
        CECLLosses contrast =
            cecl_losses(&tape, out.h_specific, out.h_universal, corrupted, train_config.cecl);
        joint = joint_loss(&tape, pred.loss, contrast.specific, contrast.universal,
                           train_config.lambda_pred, train_config.lambda_contrast);
      } else {
        joint = pred.loss;
      }

      if (!std::isfinite(joint.value())) {
        const std::string op = tape.first_nonfinite();
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                              ": first non-finite tensor produced by op '" +
                              (op.empty() ? "joint_loss" : op) + "'");
      }

      backward(tape, joint, model.params);
      adam.step(lr);

      epoch_joint += joint.value();
      for (int64_t c = 0; c < c_count; ++c) {
        epoch_cat[static_cast<size_t>(c)] += pred.category_values[static_cast<size_t>(c)];
        for (int64_t k = 0; k < assignment.clusters; ++k) {
          epoch_cluster[static_cast<size_t>(c)][static_cast<size_t>(k)] +=
              pred.cluster_values[static_cast<size_t>(c)][static_cast<size_t>(k)];
        }
      }
      ++batches;
    }

    for (auto& v : epoch_cat) v /= static_cast<double>(batches);
    for (auto& row : epoch_cluster) {
      for (auto& v : row) v /= static_cast<double>(batches);
    }
    history.append(epoch_cat, epoch_cluster);
    lr *= train_config.lr_decay;

    ForecastReport val_report = evaluate(model, split.val, assignment);

    EpochLog row;
    row.epoch = epoch;
    row.joint_loss = epoch_joint / static_cast<double>(batches);
    row.category_loss = epoch_cat;
    row.category_lambda = cat_lambda;
    row.cluster_lambda = cluster_lambda;
    row.learning_rate = lr;
    row.val_mae = val_report.overall_mae;
    result.log.push_back(std::move(row));

    if (val_report.overall_mae < best_val) {
      best_val = val_report.overall_mae;
      best_snapshot = take_snapshot(model, assignment);
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= train_config.patience) {
      break;
    }
  }

  restore_snapshot(model, assignment, best_snapshot);
  result.assignment = assignment;
  result.best_val_mae = best_val;
  return result;
}

CategoryMetrics compute_metrics(std::span<const double> target,
                                std::span<const double> predicted) {
  if (target.size() != predicted.size()) {
    throw DimensionError("compute_metrics: target and prediction lengths differ");
  }
  CategoryMetrics metrics;
  double abs_err = 0.0, pct_err = 0.0;
  int64_t positive = 0;
  for (size_t i = 0; i < target.size(); ++i) {
    abs_err += std::fabs(target[i] - predicted[i]);
    if (target[i] > 0.0) {
      pct_err += std::fabs(target[i] - predicted[i]) / target[i];
      ++positive;
    }
  }
  if (!target.empty()) metrics.mae = abs_err / static_cast<double>(target.size());
  metrics.entries = static_cast<int64_t>(target.size());
  if (positive > 0) metrics.mape = pct_err / static_cast<double>(positive);
  return metrics;
}

ForecastReport evaluate(const MoGEModel& model, const std::vector<WindowSample>& samples,
                        const ClusterAssignment& assignment) {
  if (samples.empty()) throw InsufficientDataError("evaluate: empty sample list");
  const int64_t n = model.config.regions;
  const int64_t c_count = model.config.category_count();
  const int64_t total = static_cast<int64_t>(samples.size());

  ForecastReport report;
  report.categories = model.config.categories;
  report.predictions = Tensor({total, n, c_count});

  std::vector<int64_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  constexpr int64_t kEvalBatch = 64;
  for (int64_t begin = 0; begin < total; begin += kEvalBatch) {
    const int64_t end = std::min(begin + kEvalBatch, total);
    Tensor x, y;
    build_batch(samples, order, begin, end, x, y);
    ModelOutput out = model_forward(nullptr, model, x, assignment, ops::BnMode::kEval, false);
    for (int64_t b = 0; b < end - begin; ++b) {
      for (int64_t region = 0; region < n; ++region) {
        for (int64_t c = 0; c < c_count; ++c) {
          report.predictions.at(begin + b, region, c) = out.prediction.at(b, region, c);
        }
      }
    }
  }

  double mae_sum = 0.0;
  double mape_sum = 0.0;
  int64_t mape_defined = 0;
  std::vector<double> y_flat, yhat_flat;
  for (int64_t c = 0; c < c_count; ++c) {
    y_flat.clear();
    yhat_flat.clear();
    for (int64_t s = 0; s < total; ++s) {
      for (int64_t region = 0; region < n; ++region) {
        y_flat.push_back(
            static_cast<double>(samples[static_cast<size_t>(s)].target_count(region, c)));
        yhat_flat.push_back(report.predictions.at(s, region, c));
      }
    }
    CategoryMetrics metrics = compute_metrics(y_flat, yhat_flat);
    mae_sum += metrics.mae;
    if (metrics.mape.has_value()) {
      mape_sum += *metrics.mape;
      ++mape_defined;
    }
    report.per_category.push_back(metrics);
  }
  report.overall_mae = mae_sum / static_cast<double>(c_count);
  if (mape_defined > 0) report.overall_mape = mape_sum / static_cast<double>(mape_defined);
  return report;
}

QuantileGroups quantile_groups(const CrimeTensor& tensor, int64_t frequency_slots) {
  const int64_t n = tensor.regions;
  const int64_t c_count = tensor.category_count();
  const int64_t slots = std::min(frequency_slots, tensor.slots);
  QuantileGroups groups;
  for (int64_t c = 0; c < c_count; ++c) {
    std::vector<std::pair<int64_t, int64_t>> freq;  // (count, region)
    for (int64_t region = 0; region < n; ++region) {
      int64_t acc = 0;
      for (int64_t t = 0; t < slots; ++t) acc += tensor.at(region, t, c);
      freq.emplace_back(acc, region);
    }
    std::sort(freq.begin(), freq.end());  // ascending count, ties by region index
    std::vector<int64_t> low, mid;
    for (int64_t rank = 1; rank <= n; ++rank) {
      const double q = static_cast<double>(rank) / static_cast<double>(n);
      if (q <= 0.25) {
        low.push_back(freq[static_cast<size_t>(rank - 1)].second);
      } else if (q <= 0.5) {
        mid.push_back(freq[static_cast<size_t>(rank - 1)].second);
      }
    }
    std::sort(low.begin(), low.end());
    std::sort(mid.begin(), mid.end());
    groups.low.push_back(std::move(low));
    groups.mid.push_back(std::move(mid));
  }
  return groups;
}

namespace {

CategoryMetrics metrics_over_regions(const Tensor& predictions,
                                     const std::vector<WindowSample>& samples, int64_t category,
                                     const std::vector<int64_t>& regions) {
  std::vector<double> y, yhat;
  for (int64_t s = 0; s < static_cast<int64_t>(samples.size()); ++s) {
    for (int64_t region : regions) {
      y.push_back(
          static_cast<double>(samples[static_cast<size_t>(s)].target_count(region, category)));
      yhat.push_back(predictions.at(s, region, category));
    }
  }
  return compute_metrics(y, yhat);
}

}  // namespace

void attach_quantile_metrics(ForecastReport& report, const MoGEModel& model,
                             const std::vector<WindowSample>& samples,
                             const QuantileGroups& groups) {
  (void)model;
  report.low_quantile.clear();
  report.mid_quantile.clear();
  for (size_t c = 0; c < report.categories.size(); ++c) {
    QuantileGroupMetrics low;
    low.regions = groups.low[c];
    low.metrics = metrics_over_regions(report.predictions, samples, static_cast<int64_t>(c),
                                       groups.low[c]);
    report.low_quantile.push_back(std::move(low));
    QuantileGroupMetrics mid;
    mid.regions = groups.mid[c];
    mid.metrics = metrics_over_regions(report.predictions, samples, static_cast<int64_t>(c),
                                       groups.mid[c]);
    report.mid_quantile.push_back(std::move(mid));
  }
}

std::vector<double> zero_predictor_mae(const std::vector<WindowSample>& samples) {
  if (samples.empty()) throw InsufficientDataError("zero_predictor_mae: empty sample list");
  const int64_t n = samples[0].source->regions;
  const int64_t c_count = samples[0].source->category_count();
  std::vector<double> mae(static_cast<size_t>(c_count), 0.0);
  for (const auto& s : samples) {
    for (int64_t region = 0; region < n; ++region) {
      for (int64_t c = 0; c < c_count; ++c) {
        mae[static_cast<size_t>(c)] += std::fabs(static_cast<double>(s.target_count(region, c)));
      }
    }
  }
  for (auto& v : mae) v /= static_cast<double>(samples.size() * static_cast<size_t>(n));
  return mae;
}

std::vector<AblationRow> ablate(const DatasetSplit& split, const RegionGraph& graph,
                                const ModelConfig& model_config, const TrainConfig& train_config,
                                const std::vector<uint64_t>& seeds) {
  struct Variant {
    std::string name;
    bool no_specific, no_universal, no_cecl, no_halr;
  };
  const std::vector<Variant> variants = {
      {"ST-MoGE", false, false, false, false},  {"w/o U-Expert", false, true, false, false},
      {"w/o S-Expert", true, false, false, false}, {"w/o CECL", false, false, true, false},
      {"w/o HALR", false, false, false, true},
  };

  std::vector<AblationRow> rows;
  for (const auto& variant : variants) {
    AblationRow row;
    row.variant = variant.name;
    row.category_mae.assign(model_config.categories.size(), 0.0);
    for (uint64_t seed : seeds) {
      TrainConfig cfg = train_config;
      cfg.seed = seed;
      cfg.no_specific = variant.no_specific;
      cfg.no_universal = variant.no_universal;
      cfg.no_cecl = variant.no_cecl;
      cfg.no_halr = variant.no_halr;
      if (variant.no_cecl || variant.no_specific || variant.no_universal) {
        cfg.lambda_pred = 1.0;
        cfg.lambda_contrast = 0.0;
      }
      TrainResult result = train(split, graph, model_config, cfg);
      ForecastReport report = evaluate(result.model, split.test, result.assignment);
      for (size_t c = 0; c < row.category_mae.size(); ++c) {
        row.category_mae[c] += report.per_category[c].mae;
      }
    }
    for (auto& v : row.category_mae) v /= static_cast<double>(seeds.size());
    row.overall_mae = std::accumulate(row.category_mae.begin(), row.category_mae.end(), 0.0) /
                      static_cast<double>(row.category_mae.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_training_log(const std::string& path, const std::vector<EpochLog>& log,
                        const std::vector<std::string>& categories) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write training log: " + path);
  out << "epoch,joint_loss";
  for (const auto& c : categories) out << ",loss_" << c;
  for (const auto& c : categories) out << ",lambda_" << c;
  const size_t clusters = log.empty() ? 0 : log.back().cluster_lambda[0].size();
  for (const auto& c : categories) {
    for (size_t k = 0; k < clusters; ++k) out << ",lambda_" << c << "_k" << k;
  }
  out << ",lr,val_mae\n";
  for (const auto& row : log) {
    out << row.epoch << "," << row.joint_loss;
    for (double v : row.category_loss) out << "," << v;
    for (double v : row.category_lambda) out << "," << v;
    for (const auto& cl : row.cluster_lambda) {
      for (size_t k = 0; k < clusters; ++k) {
        out << "," << (k < cl.size() ? cl[k] : 1.0);
      }
    }
    out << "," << row.learning_rate << "," << row.val_mae << "\n";
  }
}

std::string report_to_json(const ForecastReport& report, bool include_predictions) {
  nlohmann::json j;
  j["overall"]["mae"] = report.overall_mae;
  if (report.overall_mape.has_value()) {
    j["overall"]["mape"] = *report.overall_mape;
  } else {
    j["overall"]["mape"] = nullptr;
  }
  for (size_t c = 0; c < report.categories.size(); ++c) {
    nlohmann::json entry;
    entry["category"] = report.categories[c];
    entry["mae"] = report.per_category[c].mae;
    if (report.per_category[c].mape.has_value()) {
      entry["mape"] = *report.per_category[c].mape;
    } else {
      entry["mape"] = nullptr;
    }
    if (c < report.low_quantile.size()) {
      entry["quantile_low"]["regions"] = report.low_quantile[c].regions;
      entry["quantile_low"]["mae"] = report.low_quantile[c].metrics.mae;
      if (report.low_quantile[c].metrics.mape.has_value()) {
        entry["quantile_low"]["mape"] = *report.low_quantile[c].metrics.mape;
      } else {
        entry["quantile_low"]["mape"] = nullptr;
      }
      entry["quantile_mid"]["regions"] = report.mid_quantile[c].regions;
      entry["quantile_mid"]["mae"] = report.mid_quantile[c].metrics.mae;
      if (report.mid_quantile[c].metrics.mape.has_value()) {
        entry["quantile_mid"]["mape"] = *report.mid_quantile[c].metrics.mape;
      } else {
        entry["quantile_mid"]["mape"] = nullptr;
      }
    }
    j["per_category"].push_back(entry);
  }
  if (!report.training_log_path.empty()) j["training_log"] = report.training_log_path;
  if (include_predictions && report.predictions.defined()) {
    j["predictions"]["shape"] = report.predictions.shape();
    j["predictions"]["values"] = report.predictions.values();
  }
  return j.dump(2);
}

}  // namespace stmoge
