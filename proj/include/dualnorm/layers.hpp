#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dualnorm/ops.hpp"

namespace dualnorm {

enum class Mode { train, eval };
enum class NormKind { batch, instance, layer, group };
enum class MaskEncoding { one_hot, soft };
enum class MaskResize { nearest, bilinear };
/// Which normalization branch a dual site routes through.
enum class Branch { bn, spade };

const char* to_string(NormKind k);
NormKind parse_norm_kind(const std::string& s);

using RunningStats = ops::ChannelStats;

/// How a batch-statistics normalization gets its mu/sigma.
struct NormCore {
  RunningStats* running = nullptr;
  float eps = 1e-5f;
  float momentum = 0.1f;
  Mode mode = Mode::train;
  bool update_running = true;
};

/// Train: batch statistics (and EMA update of *running when requested).
/// Eval: the running statistics.
Var standardize(Var x, const NormCore& core);

/// Per-channel BN state.
struct BnParams {
  Parameter gamma;
  Parameter beta;
  RunningStats running;
  float eps = 1e-5f;
  float momentum = 0.1f;

  static BnParams make(const std::string& prefix, std::size_t channels);
  std::size_t channels() const { return gamma.value.size(); }
};

Var bn_forward(Tape& tape, Var x, BnParams& p, Mode mode, bool update_running = true);

/// Affine state shared by IN (groups == C), LN (groups == 1) and GN.
struct GroupNormParams {
  Parameter gamma;
  Parameter beta;
  std::size_t groups = 1;
  float eps = 1e-5f;

  static GroupNormParams make(const std::string& prefix, std::size_t channels, std::size_t groups);
  std::size_t channels() const { return gamma.value.size(); }
};

Var group_norm_forward(Tape& tape, Var x, GroupNormParams& p);
/// Requires p.groups == C.
Var in_forward(Tape& tape, Var x, GroupNormParams& p);
/// Requires p.groups == 1.
Var ln_forward(Tape& tape, Var x, GroupNormParams& p);
Var gn_forward(Tape& tape, Var x, GroupNormParams& p);

/// Conditioning mask for SPADE, N x |L| x H x W.
struct SemanticMask {
  Tensor values;
  MaskEncoding encoding = MaskEncoding::one_hot;

  /// One-hot of the per-pixel argmax over C (lowest index wins ties).
  static SemanticMask from_argmax(const Tensor& probs);
  /// labels holds N*H*W class indices in [0, classes).
  static SemanticMask from_labels(const std::vector<int>& labels, std::size_t n, std::size_t classes,
                                  std::size_t h, std::size_t w);
  std::size_t classes() const { return values.shape().c; }
  /// Throws ContractError unless the encoding's simplex property holds.
  void validate(float tol = 1e-5f) const;
};

/// Per-pixel argmax over C of an N x C x H x W tensor; ties go to the lowest index.
std::vector<int> argmax_channels(const Tensor& t);

SemanticMask resize_mask(const SemanticMask& m, std::size_t h, std::size_t w, MaskResize method);

/// Mask-conditioned producer of spatially varying gamma/beta:
/// mask -> 3x3 conv (|L| -> hidden) -> relu -> {3x3 conv -> gamma, 3x3 conv -> beta}.
struct SpadeSubnet {
  std::size_t channels = 0;
  std::size_t mask_channels = 0;
  std::size_t hidden = 0;
  Parameter shared_w, shared_b;
  Parameter gamma_w, gamma_b;
  Parameter beta_w, beta_b;

  static SpadeSubnet make(const std::string& prefix, std::size_t channels, std::size_t mask_channels,
                          std::mt19937_64& rng);
  /// Zero weights, gamma bias 1, beta bias 0: gamma == 1 and beta == 0 everywhere.
  void set_neutral();
  std::vector<Parameter*> parameters();
  std::size_t parameter_count() const;
};

/// Hidden width of a SPADE subnet for a C-channel site.
inline std::size_t spade_hidden_width(std::size_t channels) {
  return channels / 2 == 0 ? 1 : channels / 2;
}

struct SpadeModulation {
  Var gamma;
  Var beta;
};

/// mask must already be at the feature resolution.
SpadeModulation spade_modulation(Tape& tape, Var mask, SpadeSubnet& s);

/// gamma(m) * standardize(x) + beta(m).
Var spade_forward(Tape& tape, Var x, Var mask, SpadeSubnet& s, const NormCore& core);

/// One normalization site inside a residual block.
struct NormSite {
  NormKind kind = NormKind::batch;
  BnParams bn;
  GroupNormParams group;
  std::optional<SpadeSubnet> spade;
  /// Running statistics seen by the SPADE-path forward pass.
  RunningStats spade_running;
};

struct DnrbConfig {
  std::size_t in_channels = 0;
  std::size_t channels = 0;
  bool dual = false;
  std::size_t mask_channels = 0;
  MaskResize mask_resize = MaskResize::nearest;
  NormKind kind = NormKind::batch;
  std::size_t gn_groups = 4;

  void validate() const;
};

/// Per-forward routing for a block.
struct BlockContext {
  Branch branch = Branch::bn;
  Mode mode = Mode::train;
  bool update_running = true;
  /// Full-resolution conditioning mask; required when branch == spade and the block is dual.
  const SemanticMask* mask = nullptr;
  /// Non-dual BN sites read/update spade_running instead of bn.running.
  bool spade_path_stats = false;
};

/// Residual block conv-norm-relu-conv-norm (+ skip, relu). A dual block carries a
/// SPADE subnet next to each BN site.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::string prefix, const DnrbConfig& cfg, std::mt19937_64& rng);

  Var forward(Tape& tape, Var x, const BlockContext& ctx);

  const DnrbConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }
  bool dual() const { return cfg_.dual; }
  NormSite& site(std::size_t i) { return i == 0 ? norm1_ : norm2_; }
  Parameter& conv1_weight() { return conv1_w_; }
  Parameter& conv1_bias() { return conv1_b_; }
  Parameter& conv2_weight() { return conv2_w_; }
  Parameter& conv2_bias() { return conv2_b_; }
  Parameter* proj_weight() { return proj_w_ ? &*proj_w_ : nullptr; }
  Parameter* proj_bias() { return proj_b_ ? &*proj_b_ : nullptr; }

  std::vector<Parameter*> parameters();
  /// Named non-learnable buffers (running statistics).
  std::vector<std::pair<std::string, RunningStats*>> buffers();

 private:
  Var norm(Tape& tape, Var h, NormSite& site, const BlockContext& ctx);

  std::string prefix_;
  DnrbConfig cfg_;
  Parameter conv1_w_, conv1_b_, conv2_w_, conv2_b_;
  std::optional<Parameter> proj_w_, proj_b_;
  NormSite norm1_, norm2_;
};

/// Functional form of ResidualBlock::forward.
Var dnrb_forward(Tape& tape, Var x, const SemanticMask* mask, ResidualBlock& block, Branch branch,
                 Mode mode = Mode::train);

/// He-normal conv weight (C_out, C_in, k, k).
Tensor he_normal(Shape s, std::mt19937_64& rng, float gain = 1.0f);

}  // namespace dualnorm
