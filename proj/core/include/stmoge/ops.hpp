#pragma once

#include <cstdint>
#include <vector>

#include "stmoge/rng.hpp"
#include "stmoge/tensor.hpp"

namespace stmoge::ops {

// Every primitive below computes its forward result eagerly and, when `tape`
// is non-null and some input carries requires_grad, records one adjoint
// closure. Passing tape = nullptr runs pure inference.

/// a: [..., k] (trailing axis contracts), b: [k, n].
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);

/// [m, n] -> [n, m].
Tensor transpose(Tape* tape, const Tensor& a);

/// Per-batch products: a [B,m,k] x b [B,k,n] -> [B,m,n].
Tensor bmm(Tape* tape, const Tensor& a, const Tensor& b);
/// a [B,m,k] x b [B,n,k]^T -> [B,m,n].
Tensor bmm_nt(Tape* tape, const Tensor& a, const Tensor& b);

/// adj [N,N] applied at every (batch, time) position of x [B,N,T,F].
Tensor graph_matmul(Tape* tape, const Tensor& adj, const Tensor& x);

/// Max-subtracted softmax over the last axis.
Tensor softmax_rows(Tape* tape, const Tensor& x);

Tensor relu(Tape* tape, const Tensor& x);
Tensor sigmoid(Tape* tape, const Tensor& x);
Tensor exp(Tape* tape, const Tensor& x);
Tensor log(Tape* tape, const Tensor& x);
/// Elementwise m*x + c.
Tensor affine(Tape* tape, const Tensor& x, double m, double c);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
/// x: [..., F], bias: [F] broadcast over leading axes.
Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias);

/// Concatenate along the last axis; leading shapes must agree.
Tensor concat_last(Tape* tape, const std::vector<Tensor>& parts);

/// Inverted dropout: train mode zeroes entries with probability `rate` and
/// scales survivors by 1/(1-rate); eval mode is the identity.
Tensor dropout(Tape* tape, const Tensor& x, double rate, Rng& rng, bool train);

Tensor sum(Tape* tape, const Tensor& x);
Tensor mean(Tape* tape, const Tensor& x);
Tensor sum_squares(Tape* tape, const Tensor& x);
/// Mean over axis 1 of [d0, d1, ...rest] -> [d0, ...rest].
Tensor mean_axis1(Tape* tape, const Tensor& x);

/// Cosine similarity of trailing-axis vectors; a, b share shape [..., F].
/// Output drops the trailing axis (scalar for rank-1 inputs).
Tensor cosine_rows(Tape* tape, const Tensor& a, const Tensor& b);

/// F(s) = sum_k kernel[k] * x[s - dilation*k], zero-padded on the left.
Tensor dilated_causal_conv(Tape* tape, const Tensor& x, const Tensor& kernel, int64_t dilation);

/// Depthwise causal convolution: x [B,N,T,F], kernels [F,K].
Tensor causal_conv(Tape* tape, const Tensor& x, const Tensor& kernels, int64_t dilation);

enum class BnMode { kTrain, kEval };

/// Running statistics for one batch-norm site. Buffers, not parameters.
struct BatchNormState {
  Tensor running_mean;  // [F]
  Tensor running_var;   // [F]
  int64_t batches_seen = 0;
  bool warned_uninitialized = false;

  explicit BatchNormState(int64_t channels)
      : running_mean(Tensor::zeros({channels})), running_var(Tensor::full({channels}, 1.0)) {}
};

/// Channel-last batch normalization over x [B,N,T,F]: train mode normalizes
/// with statistics over (B,N,T) and folds them into the running buffers with
/// momentum 0.9; eval mode applies the running statistics. Epsilon 1e-5.
Tensor batch_norm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, BnMode mode, bool update_running = true);

/// x [..., C] -> [..., 1] keeping entry `c` of the last axis.
Tensor slice_last(Tape* tape, const Tensor& x, int64_t c);
/// x [B,N,T,F] -> [B,N,F] at the final time index.
Tensor select_last_time(Tape* tape, const Tensor& x);
/// x [B,N,F] -> [B,len,F] gathering the given region rows.
Tensor gather_regions(Tape* tape, const Tensor& x, const std::vector<int64_t>& idx);
/// x [B,len,F] -> [B,N,F], rows scattered to `idx`, zero elsewhere.
Tensor scatter_regions(Tape* tape, const Tensor& x, const std::vector<int64_t>& idx, int64_t n);

}  // namespace stmoge::ops
