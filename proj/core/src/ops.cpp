#include "stmoge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

namespace stmoge::ops {

namespace {

bool any_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

bool tracked(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  return tape != nullptr && any_grad(inputs);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + a.shape_string() + " and " +
                         b.shape_string() + " differ");
  }
}

int64_t leading_rows(const Tensor& t) {
  return t.size() / t.shape().back();
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.extent(0)) {
    throw DimensionError("matmul: incompatible shapes " + a.shape_string() + " x " +
                         b.shape_string());
  }
  const int64_t k = b.extent(0), n = b.extent(1);
  const int64_t rows = a.size() / k;
  std::vector<int64_t> out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out(std::move(out_shape), tracked(tape, {&a, &b}));

  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* arow = ap + r * k;
    double* orow = op + r * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = bp + kk * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }

  if (out.requires_grad()) {
    tape->record("matmul", out, [a, b, out, rows, k, n]() mutable {
      const double* g = out.grad();
      if (a.requires_grad()) {
        double* da = a.grad();
        const double* bp = b.data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* grow = g + r * n;
          double* darow = da + r * k;
          for (int64_t kk = 0; kk < k; ++kk) {
            const double* brow = bp + kk * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[kk] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        double* db = b.grad();
        const double* ap = a.data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* arow = ap + r * k;
          const double* grow = out.grad() + r * n;
          for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            double* dbrow = db + kk * n;
            for (int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(Tape* tape, const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError("transpose: expected rank-2 tensor, got " + a.shape_string());
  }
  const int64_t m = a.extent(0), n = a.extent(1);
  Tensor out({n, m}, tracked(tape, {&a}));
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  }
  if (out.requires_grad()) {
    tape->record("transpose", out, [a, out, m, n]() mutable {
      double* da = a.grad();
      const double* g = out.grad();
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
      }
    });
  }
  return out;
}

namespace {

void bmm_check(const char* op, const Tensor& a, const Tensor& b, int64_t b_contract_axis) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) ||
      a.extent(2) != b.extent(b_contract_axis)) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " x " +
                         b.shape_string());
  }
}

}  // namespace

Tensor bmm(Tape* tape, const Tensor& a, const Tensor& b) {
  bmm_check("bmm", a, b, 1);
  const int64_t B = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
  Tensor out({B, m, n}, tracked(tape, {&a, &b}));
  for (int64_t bi = 0; bi < B; ++bi) {
    const double* ap = a.data() + bi * m * k;
    const double* bp = b.data() + bi * k * n;
    double* op = out.data() + bi * m * n;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t kk = 0; kk < k; ++kk) {
        const double av = ap[i * k + kk];
        if (av == 0.0) continue;
        for (int64_t j = 0; j < n; ++j) op[i * n + j] += av * bp[kk * n + j];
      }
    }
  }
  if (out.requires_grad()) {
    tape->record("bmm", out, [a, b, out, B, m, k, n]() mutable {
      const double* g = out.grad();
      for (int64_t bi = 0; bi < B; ++bi) {
        const double* gp = g + bi * m * n;
        const double* ap = a.data() + bi * m * k;
        const double* bp = b.data() + bi * k * n;
        if (a.requires_grad()) {
          double* da = a.grad() + bi * m * k;
          for (int64_t i = 0; i < m; ++i) {
            for (int64_t kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              for (int64_t j = 0; j < n; ++j) acc += gp[i * n + j] * bp[kk * n + j];
              da[i * k + kk] += acc;
            }
          }
        }
        if (b.requires_grad()) {
          double* db = b.grad() + bi * k * n;
          for (int64_t i = 0; i < m; ++i) {
            for (int64_t kk = 0; kk < k; ++kk) {
              const double av = ap[i * k + kk];
              if (av == 0.0) continue;
              for (int64_t j = 0; j < n; ++j) db[kk * n + j] += av * gp[i * n + j];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor bmm_nt(Tape* tape, const Tensor& a, const Tensor& b) {
  bmm_check("bmm_nt", a, b, 2);
  const int64_t B = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(1);
  Tensor out({B, m, n}, tracked(tape, {&a, &b}));
  for (int64_t bi = 0; bi < B; ++bi) {
    const double* ap = a.data() + bi * m * k;
    const double* bp = b.data() + bi * n * k;
    double* op = out.data() + bi * m * n;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int64_t kk = 0; kk < k; ++kk) acc += ap[i * k + kk] * bp[j * k + kk];
        op[i * n + j] = acc;
      }
    }
  }
  if (out.requires_grad()) {
    tape->record("bmm_nt", out, [a, b, out, B, m, k, n]() mutable {
      const double* g = out.grad();
      for (int64_t bi = 0; bi < B; ++bi) {
        const double* gp = g + bi * m * n;
        const double* ap = a.data() + bi * m * k;
        const double* bp = b.data() + bi * n * k;
        if (a.requires_grad()) {
          double* da = a.grad() + bi * m * k;
          for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) {
              const double gv = gp[i * n + j];
              if (gv == 0.0) continue;
              for (int64_t kk = 0; kk < k; ++kk) da[i * k + kk] += gv * bp[j * k + kk];
            }
          }
        }
        if (b.requires_grad()) {
          double* db = b.grad() + bi * n * k;
          for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) {
              const double gv = gp[i * n + j];
              if (gv == 0.0) continue;
              for (int64_t kk = 0; kk < k; ++kk) db[j * k + kk] += gv * ap[i * k + kk];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor graph_matmul(Tape* tape, const Tensor& adj, const Tensor& x) {
  if (adj.rank() != 2 || x.rank() != 4 || adj.extent(0) != adj.extent(1) ||
      adj.extent(0) != x.extent(1)) {
    throw DimensionError("graph_matmul: incompatible shapes " + adj.shape_string() + " x " +
                         x.shape_string());
  }
  const int64_t B = x.extent(0), N = x.extent(1), TF = x.extent(2) * x.extent(3);
  Tensor out(x.shape(), tracked(tape, {&adj, &x}));
  for (int64_t b = 0; b < B; ++b) {
    const double* xb = x.data() + b * N * TF;
    double* ob = out.data() + b * N * TF;
    for (int64_t i = 0; i < N; ++i) {
      double* orow = ob + i * TF;
      for (int64_t j = 0; j < N; ++j) {
        const double w = adj.at(i, j);
        if (w == 0.0) continue;
        const double* xrow = xb + j * TF;
        for (int64_t p = 0; p < TF; ++p) orow[p] += w * xrow[p];
      }
    }
  }
  if (out.requires_grad()) {
    tape->record("graph_matmul", out, [adj, x, out, B, N, TF]() mutable {
      const double* g = out.grad();
      if (adj.requires_grad()) {
        double* da = adj.grad();
        for (int64_t b = 0; b < B; ++b) {
          const double* xb = x.data() + b * N * TF;
          const double* gb = g + b * N * TF;
          for (int64_t i = 0; i < N; ++i) {
            const double* grow = gb + i * TF;
            for (int64_t j = 0; j < N; ++j) {
              const double* xrow = xb + j * TF;
              double acc = 0.0;
              for (int64_t p = 0; p < TF; ++p) acc += grow[p] * xrow[p];
              da[i * N + j] += acc;
            }
          }
        }
      }
      if (x.requires_grad()) {
        double* dx = x.grad();
        for (int64_t b = 0; b < B; ++b) {
          const double* gb = g + b * N * TF;
          double* dxb = dx + b * N * TF;
          for (int64_t i = 0; i < N; ++i) {
            const double* grow = gb + i * TF;
            for (int64_t j = 0; j < N; ++j) {
              const double w = adj.at(i, j);
              if (w == 0.0) continue;
              double* dxrow = dxb + j * TF;
              for (int64_t p = 0; p < TF; ++p) dxrow[p] += w * grow[p];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax_rows(Tape* tape, const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("softmax_rows: scalar input");
  const int64_t n = x.shape().back();
  const int64_t rows = leading_rows(x);
  Tensor out(x.shape(), tracked(tape, {&x}));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double* orow = out.data() + r * n;
    double mx = xr[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      denom += orow[j];
    }
    for (int64_t j = 0; j < n; ++j) orow[j] /= denom;
  }
  if (out.requires_grad()) {
    tape->record("softmax_rows", out, [x, out, rows, n]() mutable {
      double* dx = x.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* s = out.data() + r * n;
        const double* g = out.grad() + r * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += g[j] * s[j];
        for (int64_t j = 0; j < n; ++j) dx[r * n + j] += s[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(Tape* tape, const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  Tensor out(x.shape(), tracked(tape, {&x}));
  const double* xp = x.data();
  double* op = out.data();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) op[i] = fwd(xp[i]);
  if (out.requires_grad()) {
    tape->record(name, out, [x, out, n, bwd]() mutable {
      double* dx = x.grad();
      const double* g = out.grad();
      const double* xp = x.data();
      const double* yp = out.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += bwd(xp[i], yp[i]) * g[i];
    });
  }
  return out;
}

}  // namespace

Tensor relu(Tape* tape, const Tensor& x) {
  return unary_elementwise(
      tape, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape* tape, const Tensor& x) {
  return unary_elementwise(
      tape, x, "sigmoid",
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(Tape* tape, const Tensor& x) {
  return unary_elementwise(
      tape, x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(Tape* tape, const Tensor& x) {
  return unary_elementwise(
      tape, x, "log", [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor affine(Tape* tape, const Tensor& x, double m, double c) {
  return unary_elementwise(
      tape, x, "affine", [m, c](double v) { return m * v + c; },
      [m](double, double) { return m; });
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out(a.shape(), tracked(tape, {&a, &b}));
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (out.requires_grad()) {
    tape->record("add", out, [a, b, out, n]() mutable {
      const double* g = out.grad();
      if (a.requires_grad()) {
        double* da = a.grad();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        double* db = b.grad();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out(a.shape(), tracked(tape, {&a, &b}));
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  if (out.requires_grad()) {
    tape->record("sub", out, [a, b, out, n]() mutable {
      const double* g = out.grad();
      if (a.requires_grad()) {
        double* da = a.grad();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        double* db = b.grad();
        for (int64_t i = 0; i < n; ++i) db[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out(a.shape(), tracked(tape, {&a, &b}));
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (out.requires_grad()) {
    tape->record("mul", out, [a, b, out, n]() mutable {
      const double* g = out.grad();
      if (a.requires_grad()) {
        double* da = a.grad();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * b.at(i);
      }
      if (b.requires_grad()) {
        double* db = b.grad();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i] * a.at(i);
      }
    });
  }
  return out;
}

Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.shape().back() != bias.extent(0)) {
    throw DimensionError("add_bias: shapes " + x.shape_string() + " and " + bias.shape_string() +
                         " incompatible");
  }
  const int64_t f = bias.extent(0);
  const int64_t rows = leading_rows(x);
  Tensor out(x.shape(), tracked(tape, {&x, &bias}));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < f; ++j) out.at(r * f + j) = x.at(r * f + j) + bias.at(j);
  }
  if (out.requires_grad()) {
    tape->record("add_bias", out, [x, bias, out, rows, f]() mutable {
      const double* g = out.grad();
      if (x.requires_grad()) {
        double* dx = x.grad();
        for (int64_t i = 0; i < rows * f; ++i) dx[i] += g[i];
      }
      if (bias.requires_grad()) {
        double* db = bias.grad();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t j = 0; j < f; ++j) db[j] += g[r * f + j];
        }
      }
    });
  }
  return out;
}

Tensor concat_last(Tape* tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  std::vector<int64_t> lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  int64_t total_f = 0;
  bool grad = false;
  for (const Tensor& p : parts) {
    std::vector<int64_t> plead(p.shape().begin(), p.shape().end() - 1);
    if (plead != lead) {
      throw DimensionError("concat_last: leading shape mismatch between " +
                           parts[0].shape_string() + " and " + p.shape_string());
    }
    total_f += p.shape().back();
    grad = grad || p.requires_grad();
  }
  std::vector<int64_t> out_shape = lead;
  out_shape.push_back(total_f);
  Tensor out(std::move(out_shape), tape != nullptr && grad);
  const int64_t rows = leading_rows(out);
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    const int64_t f = p.shape().back();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t j = 0; j < f; ++j) out.at(r * total_f + offset + j) = p.at(r * f + j);
    }
    offset += f;
  }
  if (out.requires_grad()) {
    tape->record("concat_last", out, [parts, out, rows, total_f]() mutable {
      const double* g = out.grad();
      int64_t offset = 0;
      for (const Tensor& p : parts) {
        const int64_t f = p.shape().back();
        if (p.requires_grad()) {
          double* dp = p.grad();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < f; ++j) dp[r * f + j] += g[r * total_f + offset + j];
          }
        }
        offset += f;
      }
    });
  }
  return out;
}

Tensor dropout(Tape* tape, const Tensor& x, double rate, Rng& rng, bool train) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  }
  if (!train || rate == 0.0) return x;
  const int64_t n = x.size();
  auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  const double keep_scale = 1.0 / (1.0 - rate);
  for (int64_t i = 0; i < n; ++i) {
    (*mask)[static_cast<size_t>(i)] = rng.uniform() < rate ? 0.0 : keep_scale;
  }
  Tensor out(x.shape(), tracked(tape, {&x}));
  for (int64_t i = 0; i < n; ++i) out.at(i) = x.at(i) * (*mask)[static_cast<size_t>(i)];
  if (out.requires_grad()) {
    tape->record("dropout", out, [x, out, mask, n]() mutable {
      double* dx = x.grad();
      const double* g = out.grad();
      for (int64_t i = 0; i < n; ++i) dx[i] += g[i] * (*mask)[static_cast<size_t>(i)];
    });
  }
  return out;
}

Tensor sum(Tape* tape, const Tensor& x) {
  double acc = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) acc += x.at(i);
  Tensor out = Tensor::scalar(acc, tracked(tape, {&x}));
  if (out.requires_grad()) {
    tape->record("sum", out, [x, out]() mutable {
      const double g = out.grad()[0];
      double* dx = x.grad();
      for (int64_t i = 0; i < x.size(); ++i) dx[i] += g;
    });
  }
  return out;
}

Tensor mean(Tape* tape, const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  double acc = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) acc += x.at(i);
  Tensor out = Tensor::scalar(acc * inv, tracked(tape, {&x}));
  if (out.requires_grad()) {
    tape->record("mean", out, [x, out, inv]() mutable {
      const double g = out.grad()[0] * inv;
      double* dx = x.grad();
      for (int64_t i = 0; i < x.size(); ++i) dx[i] += g;
    });
  }
  return out;
}

Tensor sum_squares(Tape* tape, const Tensor& x) {
  double acc = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) acc += x.at(i) * x.at(i);
  Tensor out = Tensor::scalar(acc, tracked(tape, {&x}));
  if (out.requires_grad()) {
    tape->record("sum_squares", out, [x, out]() mutable {
      const double g = out.grad()[0];
      double* dx = x.grad();
      for (int64_t i = 0; i < x.size(); ++i) dx[i] += 2.0 * x.at(i) * g;
    });
  }
  return out;
}

Tensor mean_axis1(Tape* tape, const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("mean_axis1: need rank >= 2, got " + x.shape_string());
  const int64_t d0 = x.extent(0), d1 = x.extent(1);
  const int64_t rest = x.size() / (d0 * d1);
  std::vector<int64_t> out_shape;
  out_shape.push_back(d0);
  for (size_t i = 2; i < x.shape().size(); ++i) out_shape.push_back(x.shape()[i]);
  Tensor out(std::move(out_shape), tracked(tape, {&x}));
  const double inv = 1.0 / static_cast<double>(d1);
  for (int64_t i = 0; i < d0; ++i) {
    for (int64_t j = 0; j < d1; ++j) {
      for (int64_t p = 0; p < rest; ++p) {
        out.at(i * rest + p) += x.at((i * d1 + j) * rest + p) * inv;
      }
    }
  }
  if (out.requires_grad()) {
    tape->record("mean_axis1", out, [x, out, d0, d1, rest, inv]() mutable {
      double* dx = x.grad();
      const double* g = out.grad();
      for (int64_t i = 0; i < d0; ++i) {
        for (int64_t j = 0; j < d1; ++j) {
          for (int64_t p = 0; p < rest; ++p) {
            dx[(i * d1 + j) * rest + p] += g[i * rest + p] * inv;
          }
        }
      }
    });
  }
  return out;
}

Tensor cosine_rows(Tape* tape, const Tensor& a, const Tensor& b) {
  check_same_shape("cosine_rows", a, b);
  if (a.rank() < 1) throw DimensionError("cosine_rows: scalar input");
  const int64_t f = a.shape().back();
  const int64_t rows = leading_rows(a);
  std::vector<int64_t> out_shape(a.shape().begin(), a.shape().end() - 1);
  Tensor out(std::move(out_shape), tracked(tape, {&a, &b}));
  for (int64_t r = 0; r < rows; ++r) {
    const double* ar = a.data() + r * f;
    const double* br = b.data() + r * f;
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int64_t j = 0; j < f; ++j) {
      dot += ar[j] * br[j];
      na2 += ar[j] * ar[j];
      nb2 += br[j] * br[j];
    }
    out.at(r) = (na2 == 0.0 || nb2 == 0.0) ? 0.0 : dot / std::sqrt(na2 * nb2);
  }
  if (out.requires_grad()) {
    tape->record("cosine_rows", out, [a, b, out, rows, f]() mutable {
      const double* g = out.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double gv = g[r];
        if (gv == 0.0) continue;
        const double* ar = a.data() + r * f;
        const double* br = b.data() + r * f;
        double dot = 0.0, na2 = 0.0, nb2 = 0.0;
        for (int64_t j = 0; j < f; ++j) {
          dot += ar[j] * br[j];
          na2 += ar[j] * ar[j];
          nb2 += br[j] * br[j];
        }
        if (na2 == 0.0 || nb2 == 0.0) continue;
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        const double c = dot / (na * nb);
        if (a.requires_grad()) {
          double* da = a.grad() + r * f;
          for (int64_t j = 0; j < f; ++j) {
            da[j] += gv * (br[j] / (na * nb) - c * ar[j] / na2);
          }
        }
        if (b.requires_grad()) {
          double* db = b.grad() + r * f;
          for (int64_t j = 0; j < f; ++j) {
            db[j] += gv * (ar[j] / (na * nb) - c * br[j] / nb2);
          }
        }
      }
    });
  }
  return out;
}

Tensor dilated_causal_conv(Tape* tape, const Tensor& x, const Tensor& kernel, int64_t dilation) {
  if (dilation < 1) {
    throw ConfigError("dilated_causal_conv: dilation must be >= 1, got " +
                      std::to_string(dilation));
  }
  if (x.rank() != 1 || kernel.rank() != 1 || kernel.size() < 1) {
    throw DimensionError("dilated_causal_conv: expected rank-1 x and kernel, got " +
                         x.shape_string() + " and " + kernel.shape_string());
  }
  const int64_t T = x.size(), K = kernel.size();
  Tensor out({T}, tracked(tape, {&x, &kernel}));
  for (int64_t s = 0; s < T; ++s) {
    double acc = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      const int64_t idx = s - dilation * k;
      if (idx >= 0) acc += kernel.at(k) * x.at(idx);
    }
    out.at(s) = acc;
  }
  if (out.requires_grad()) {
    tape->record("dilated_causal_conv", out, [x, kernel, out, T, K, dilation]() mutable {
      const double* g = out.grad();
      for (int64_t s = 0; s < T; ++s) {
        for (int64_t k = 0; k < K; ++k) {
          const int64_t idx = s - dilation * k;
          if (idx < 0) continue;
          if (x.requires_grad()) x.grad()[idx] += kernel.at(k) * g[s];
          if (kernel.requires_grad()) kernel.grad()[k] += x.at(idx) * g[s];
        }
      }
    });
  }
  return out;
}

Tensor causal_conv(Tape* tape, const Tensor& x, const Tensor& kernels, int64_t dilation) {
  if (dilation < 1) {
    throw ConfigError("causal_conv: dilation must be >= 1, got " + std::to_string(dilation));
  }
  if (x.rank() != 4 || kernels.rank() != 2 || kernels.extent(0) != x.extent(3)) {
    throw DimensionError("causal_conv: incompatible shapes " + x.shape_string() + " and " +
                         kernels.shape_string());
  }
  const int64_t B = x.extent(0), N = x.extent(1), T = x.extent(2), F = x.extent(3);
  const int64_t K = kernels.extent(1);
  Tensor out(x.shape(), tracked(tape, {&x, &kernels}));
  for (int64_t bn = 0; bn < B * N; ++bn) {
    const double* xs = x.data() + bn * T * F;
    double* os = out.data() + bn * T * F;
    for (int64_t s = 0; s < T; ++s) {
      for (int64_t k = 0; k < K; ++k) {
        const int64_t idx = s - dilation * k;
        if (idx < 0) continue;
        const double* xrow = xs + idx * F;
        double* orow = os + s * F;
        for (int64_t f = 0; f < F; ++f) orow[f] += kernels.at(f, k) * xrow[f];
      }
    }
  }
  if (out.requires_grad()) {
    tape->record("causal_conv", out, [x, kernels, out, B, N, T, F, K, dilation]() mutable {
      const double* g = out.grad();
      for (int64_t bn = 0; bn < B * N; ++bn) {
        const double* xs = x.data() + bn * T * F;
        const double* gs = g + bn * T * F;
        for (int64_t s = 0; s < T; ++s) {
          for (int64_t k = 0; k < K; ++k) {
            const int64_t idx = s - dilation * k;
            if (idx < 0) continue;
            if (x.requires_grad()) {
              double* dxrow = x.grad() + bn * T * F + idx * F;
              for (int64_t f = 0; f < F; ++f) dxrow[f] += kernels.at(f, k) * gs[s * F + f];
            }
            if (kernels.requires_grad()) {
              double* dk = kernels.grad();
              for (int64_t f = 0; f < F; ++f) dk[f * K + k] += xs[idx * F + f] * gs[s * F + f];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor batch_norm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, BnMode mode, bool update_running) {
  if (x.rank() != 4) throw DimensionError("batch_norm: expected [B,N,T,F], got " + x.shape_string());
  const int64_t F = x.extent(3);
  if (gamma.size() != F || beta.size() != F || state.running_mean.size() != F) {
    throw DimensionError("batch_norm: channel mismatch for input " + x.shape_string());
  }
  constexpr double kEps = 1e-5;
  constexpr double kMomentum = 0.9;
  const int64_t rows = x.size() / F;
  Tensor out(x.shape(), tracked(tape, {&x, &gamma, &beta}));

  std::vector<double> mu(static_cast<size_t>(F), 0.0), var(static_cast<size_t>(F), 0.0);
  if (mode == BnMode::kTrain) {
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t f = 0; f < F; ++f) mu[static_cast<size_t>(f)] += x.at(r * F + f);
    }
    for (int64_t f = 0; f < F; ++f) mu[static_cast<size_t>(f)] /= static_cast<double>(rows);
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t f = 0; f < F; ++f) {
        const double d = x.at(r * F + f) - mu[static_cast<size_t>(f)];
        var[static_cast<size_t>(f)] += d * d;
      }
    }
    for (int64_t f = 0; f < F; ++f) var[static_cast<size_t>(f)] /= static_cast<double>(rows);
    if (update_running) {
      for (int64_t f = 0; f < F; ++f) {
        state.running_mean.at(f) = kMomentum * state.running_mean.at(f) +
                                   (1.0 - kMomentum) * mu[static_cast<size_t>(f)];
        state.running_var.at(f) =
            kMomentum * state.running_var.at(f) + (1.0 - kMomentum) * var[static_cast<size_t>(f)];
      }
      state.batches_seen += 1;
    }
  } else {
    if (state.batches_seen == 0 && !state.warned_uninitialized) {
      std::fprintf(stderr,
                   "warning: batch_norm evaluated before any training step; "
                   "using initialized statistics (mean 0, var 1)\n");
      state.warned_uninitialized = true;
    }
    for (int64_t f = 0; f < F; ++f) {
      mu[static_cast<size_t>(f)] = state.running_mean.at(f);
      var[static_cast<size_t>(f)] = state.running_var.at(f);
    }
  }

  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(F));
  for (int64_t f = 0; f < F; ++f) {
    (*inv_std)[static_cast<size_t>(f)] = 1.0 / std::sqrt(var[static_cast<size_t>(f)] + kEps);
  }
  auto mu_keep = std::make_shared<std::vector<double>>(mu);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t f = 0; f < F; ++f) {
      const double xhat = (x.at(r * F + f) - (*mu_keep)[static_cast<size_t>(f)]) *
                          (*inv_std)[static_cast<size_t>(f)];
      out.at(r * F + f) = gamma.at(f) * xhat + beta.at(f);
    }
  }

  if (out.requires_grad()) {
    const bool train_stats = mode == BnMode::kTrain;
    tape->record("batch_norm", out,
                 [x, gamma, beta, out, rows, F, mu_keep, inv_std, train_stats]() mutable {
      const double* g = out.grad();
      for (int64_t f = 0; f < F; ++f) {
        const double m = (*mu_keep)[static_cast<size_t>(f)];
        const double is = (*inv_std)[static_cast<size_t>(f)];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t r = 0; r < rows; ++r) {
          const double xhat = (x.at(r * F + f) - m) * is;
          sum_g += g[r * F + f];
          sum_gx += g[r * F + f] * xhat;
        }
        if (beta.requires_grad()) beta.grad()[f] += sum_g;
        if (gamma.requires_grad()) gamma.grad()[f] += sum_gx;
        if (x.requires_grad()) {
          double* dx = x.grad();
          const double gam = gamma.at(f);
          if (train_stats) {
            const double inv_rows = 1.0 / static_cast<double>(rows);
            for (int64_t r = 0; r < rows; ++r) {
              const double xhat = (x.at(r * F + f) - m) * is;
              dx[r * F + f] +=
                  gam * is * (g[r * F + f] - sum_g * inv_rows - xhat * sum_gx * inv_rows);
            }
          } else {
            for (int64_t r = 0; r < rows; ++r) dx[r * F + f] += gam * is * g[r * F + f];
          }
        }
      }
    });
  }
  return out;
}

Tensor slice_last(Tape* tape, const Tensor& x, int64_t c) {
  if (x.rank() < 1 || c < 0 || c >= x.shape().back()) {
    throw DimensionError("slice_last: index " + std::to_string(c) + " out of range for " +
                         x.shape_string());
  }
  const int64_t C = x.shape().back();
  const int64_t rows = leading_rows(x);
  std::vector<int64_t> out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(1);
  Tensor out(std::move(out_shape), tracked(tape, {&x}));
  for (int64_t r = 0; r < rows; ++r) out.at(r) = x.at(r * C + c);
  if (out.requires_grad()) {
    tape->record("slice_last", out, [x, out, rows, C, c]() mutable {
      double* dx = x.grad();
      const double* g = out.grad();
      for (int64_t r = 0; r < rows; ++r) dx[r * C + c] += g[r];
    });
  }
  return out;
}

Tensor select_last_time(Tape* tape, const Tensor& x) {
  if (x.rank() != 4) {
    throw DimensionError("select_last_time: expected [B,N,T,F], got " + x.shape_string());
  }
  const int64_t B = x.extent(0), N = x.extent(1), T = x.extent(2), F = x.extent(3);
  Tensor out({B, N, F}, tracked(tape, {&x}));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t f = 0; f < F; ++f) out.at(b, n, f) = x.at(b, n, T - 1, f);
    }
  }
  if (out.requires_grad()) {
    tape->record("select_last_time", out, [x, out, B, N, T, F]() mutable {
      double* dx = x.grad();
      const double* g = out.grad();
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t f = 0; f < F; ++f) {
            dx[((b * N + n) * T + (T - 1)) * F + f] += g[(b * N + n) * F + f];
          }
        }
      }
    });
  }
  return out;
}

Tensor gather_regions(Tape* tape, const Tensor& x, const std::vector<int64_t>& idx) {
  if (x.rank() != 3) {
    throw DimensionError("gather_regions: expected [B,N,F], got " + x.shape_string());
  }
  const int64_t B = x.extent(0), N = x.extent(1), F = x.extent(2);
  const int64_t L = static_cast<int64_t>(idx.size());
  for (int64_t i : idx) {
    if (i < 0 || i >= N) throw ContractError("gather_regions: region index out of range");
  }
  Tensor out({B, L, F}, tracked(tape, {&x}));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t l = 0; l < L; ++l) {
      for (int64_t f = 0; f < F; ++f) out.at(b, l, f) = x.at(b, idx[static_cast<size_t>(l)], f);
    }
  }
  if (out.requires_grad()) {
    tape->record("gather_regions", out, [x, out, idx, B, L, F, N]() mutable {
      double* dx = x.grad();
      const double* g = out.grad();
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t l = 0; l < L; ++l) {
          const int64_t n = idx[static_cast<size_t>(l)];
          for (int64_t f = 0; f < F; ++f) {
            dx[(b * N + n) * F + f] += g[(b * L + l) * F + f];
          }
        }
      }
    });
  }
  return out;
}

Tensor scatter_regions(Tape* tape, const Tensor& x, const std::vector<int64_t>& idx, int64_t n) {
  if (x.rank() != 3 || x.extent(1) != static_cast<int64_t>(idx.size())) {
    throw DimensionError("scatter_regions: expected [B,len,F] matching index list, got " +
                         x.shape_string());
  }
  const int64_t B = x.extent(0), L = x.extent(1), F = x.extent(2);
  for (int64_t i : idx) {
    if (i < 0 || i >= n) throw ContractError("scatter_regions: region index out of range");
  }
  Tensor out({B, n, F}, tracked(tape, {&x}));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t l = 0; l < L; ++l) {
      for (int64_t f = 0; f < F; ++f) out.at(b, idx[static_cast<size_t>(l)], f) = x.at(b, l, f);
    }
  }
  if (out.requires_grad()) {
    tape->record("scatter_regions", out, [x, out, idx, B, L, F, n]() mutable {
      double* dx = x.grad();
      const double* g = out.grad();
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t l = 0; l < L; ++l) {
          const int64_t r = idx[static_cast<size_t>(l)];
          for (int64_t f = 0; f < F; ++f) {
            dx[(b * L + l) * F + f] += g[(b * n + r) * F + f];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace stmoge::ops
