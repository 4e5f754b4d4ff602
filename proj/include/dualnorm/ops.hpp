#pragma once

#include <cstddef>
#include <vector>

#include "dualnorm/tape.hpp"

namespace dualnorm::ops {

/// Bitmask of reduction axes.
enum Axis : unsigned {
  kAxisN = 1u,
  kAxisC = 2u,
  kAxisH = 4u,
  kAxisW = 8u,
  kAxisAll = 15u,
};

/// Cross-correlation. weight is (C_out, C_in, k, k); bias is (1, C_out, 1, 1) or unbound.
Var conv2d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding);

Var relu(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, float s);
Var upsample_nearest2x(Var x);
Var maxpool2x(Var x);
/// Softmax along C at every (n, h, w).
Var softmax_channel(Var x);
/// Concatenation along C.
Var concat_channels(Var a, Var b);

/// Sum over the axes in the mask; reduced axes are kept with size 1.
Var reduce_sum(Var x, unsigned axes);
Var reduce_mean(Var x, unsigned axes);
/// Shorthand for reduce_sum(x, kAxisAll).
Var sum_all(Var x);

/// Per-channel statistics over (N, H, W), population variance.
struct ChannelStats {
  std::vector<float> mean;
  std::vector<float> var;
};

/// (x - mu_c) / sqrt(var_c + eps) with mu, var taken from the batch.
/// When stats_out is non-null it receives the batch statistics.
Var batch_standardize(Var x, float eps, ChannelStats* stats_out = nullptr);
/// Same transform with fixed statistics (no gradient into them).
Var standardize_with(Var x, const ChannelStats& stats, float eps);
/// Per-sample standardization over groups of C/groups channels and (H, W).
Var group_standardize(Var x, std::size_t groups, float eps);
/// gamma_c * x + beta_c with gamma, beta shaped (1, C, 1, 1).
Var channel_affine(Var x, Var gamma, Var beta);

}  // namespace dualnorm::ops
