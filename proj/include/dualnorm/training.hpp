#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dualnorm/data.hpp"
#include "dualnorm/network.hpp"

namespace dualnorm {

struct LossConfig {
  /// Weight of the Dice term; the cross entropy gets 1 - lambda.
  double lambda = 0.5;
  double clamp_eps = 1e-7;

  void validate() const;
};

/// One-hot N x L x H x W encoding of per-pixel labels.
Tensor one_hot(const std::vector<int>& labels, std::size_t n, std::size_t classes, std::size_t h, std::size_t w);

/// Soft Dice loss, per image and class, averaged over both. A class with an
/// empty target and an all-zero prediction contributes 0.
Var dice_loss(Var probs, const Tensor& target);
/// Pixel-mean cross entropy divided by |L| and averaged over the batch; probs clamped below at clamp_eps.
Var ce_loss(Var probs, const Tensor& target, double clamp_eps);

struct LossTerms {
  Var total;
  Var dice;
  Var ce;
};
LossTerms stage_loss(Var probs, const Tensor& target, const LossConfig& cfg);

/// alpha * L(target, probs_bn) + (1 - alpha) * L(target, probs_spade). alpha must
/// be 0 or 1; the gated-off prediction may be left unbound.
Var total_loss(const Tensor& target, Var probs_bn, Var probs_spade, int alpha, const LossConfig& cfg);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction and a step counter per parameter.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<Parameter*>& params);
  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Tensor m, v;
    std::uint64_t t = 0;
  };
  AdamConfig cfg_;
  std::map<std::string, Slot> slots_;
};

struct PlateauConfig {
  double factor = 0.5;
  int patience = 5;
  std::size_t window = 50;
  double lr_min = 1e-6;
  /// Relative improvement needed for a window to count as better.
  double threshold = 1e-4;
};

/// Multiplies the learning rate by factor after more than patience windows
/// without improvement over the best window mean.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(PlateauConfig cfg = {}) : cfg_(cfg) {}

  /// Feeds one window mean; returns the new learning rate.
  double step(double window_mean, double lr);
  int bad_windows() const { return bad_; }

 private:
  PlateauConfig cfg_;
  double best_ = 0.0;
  bool has_best_ = false;
  int bad_ = 0;
};

struct Batch {
  Tensor images;
  Tensor target;
  std::vector<int> labels;
};

Batch make_batch(const std::vector<const Case*>& cases, std::size_t num_classes);

/// Draws batches with a uniformly chosen domain, then case, per sample.
class BatchSampler {
 public:
  BatchSampler(std::vector<const DomainDataset*> domains, std::uint64_t seed, bool augment = true);
  Batch next(std::size_t batch_size);

 private:
  std::vector<const DomainDataset*> domains_;
  std::mt19937_64 rng_;
  bool augment_;
  std::size_t num_classes_ = 0;
};

enum class Phase { bn_update, spade_update };

/// Called after each parameter update (and once between stages) for inspection.
struct IterationHooks {
  std::function<void(Phase, SegNetwork&)> after_update;
  /// Stage-2 tape after backward, with the mask tensors the SPADE pass was given.
  std::function<void(const Tape&, const SemanticMask&)> after_spade_backward;
};

struct IterationResult {
  double bn_dice = 0, bn_ce = 0, bn_total = 0;
  bool spade_ran = false;
  double spade_dice = 0, spade_ce = 0, spade_total = 0;
};

/// One pass of the two-stage update: forward_bn, update {shared, BN}; detach
/// the prediction into a one-hot mask; forward_spade, update {shared, SPADE}.
/// Networks without dual blocks run the first stage only.
IterationResult train_iteration(SegNetwork& net, const Batch& batch, Adam& opt, const LossConfig& loss,
                                const IterationHooks& hooks = {});

struct TrainConfig {
  std::size_t pretrain_iterations = 500;
  /// The alternating phase length (iterations of the two-stage update).
  std::size_t iterations = 1500;
  std::size_t batch_size = 4;
  AdamConfig adam;
  PlateauConfig plateau;
  LossConfig loss;
  bool augment = true;
  /// Write a checkpoint every this many iterations (0 disables).
  std::size_t checkpoint_every = 0;
  std::string checkpoint_path;

  void validate() const;
};

struct LossRecord {
  std::size_t iteration = 0;
  std::string stage;
  double dice = 0;
  double ce = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<LossRecord> history;
  double final_lr = 0;
};

/// Optional BN-only pretraining followed by the alternating phase; alternating
/// only runs on networks with dual blocks and otherwise continues BN-only updates.
TrainResult run_training(SegNetwork& net, const std::vector<const DomainDataset*>& domains, const TrainConfig& cfg,
                         std::uint64_t seed);

/// iter,stage,loss_dice,loss_ce,lr
void write_loss_csv(const std::vector<LossRecord>& history, const std::string& path);

}  // namespace dualnorm
