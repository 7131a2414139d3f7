#pragma once

// Brute-force contrastive-loss oracle: direct summation with plain exp/log,
// no log-sum-exp stabilization, structured after the loss definitions rather
// than the implementation. Test-only.

#include <cmath>
#include <vector>

#include "stmoge/tensor.hpp"

namespace stmoge::testing {

inline std::vector<double> pool_mean(const Tensor& h, int64_t b) {
  const int64_t n = h.extent(1), d = h.extent(2);
  std::vector<double> out(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(j)] += h.at(b, i, j);
  }
  for (auto& v : out) v /= static_cast<double>(n);
  return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0;
  return dot / std::sqrt(na * nb);
}

struct CeclOracleResult {
  double specific;
  double universal;
};

inline CeclOracleResult cecl_oracle(const std::vector<Tensor>& h_specific,
                                    const Tensor& h_universal, const std::vector<Tensor>& clean,
                                    const std::vector<Tensor>& disturbed, double tau) {
  const int64_t c_count = static_cast<int64_t>(clean.size());
  const int64_t batch = clean[0].extent(0);
  double ls = 0, lu = 0;
  for (int64_t b = 0; b < batch; ++b) {
    double ls_b = 0, lu_b = 0;
    for (int64_t c = 0; c < c_count; ++c) {
      const auto anchor = pool_mean(clean[static_cast<size_t>(c)], b);
      const double pos =
          std::exp(cosine(pool_mean(disturbed[static_cast<size_t>(c)], b), anchor) / tau);
      double denom_s = 0;
      for (int64_t o = 0; o < c_count; ++o) {
        denom_s += std::exp(cosine(pool_mean(h_specific[static_cast<size_t>(o)], b), anchor) / tau);
      }
      const double denom_u =
          static_cast<double>(c_count) * std::exp(cosine(pool_mean(h_universal, b), anchor) / tau);
      ls_b += -std::log(pos / denom_s);
      lu_b += -std::log(pos / denom_u);
    }
    ls += ls_b / static_cast<double>(c_count);
    lu += lu_b / static_cast<double>(c_count);
  }
  return {ls / static_cast<double>(batch), lu / static_cast<double>(batch)};
}

}  // namespace stmoge::testing
