#include "dualnorm/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dualnorm/error.hpp"

namespace dualnorm {

void LossConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("loss: lambda must lie in [0, 1]");
  if (!(clamp_eps > 0.0 && clamp_eps < 1.0)) throw ConfigError("loss: clamp_eps must lie in (0, 1)");
}

Tensor one_hot(const std::vector<int>& labels, std::size_t n, std::size_t classes, std::size_t h, std::size_t w) {
  return SemanticMask::from_labels(labels, n, classes, h, w).values;
}

namespace {

void require_targets(Var probs, const Tensor& target, const char* what) {
  if (!(probs.shape() == target.shape())) {
    throw ShapeError(std::string(what) + ": prediction " + probs.shape().str() + " vs target " +
                     target.shape().str());
  }
  if (target.shape().c == 0) throw ConfigError(std::string(what) + ": empty label set");
}

}  // namespace

Var dice_loss(Var probs, const Tensor& target) {
  require_targets(probs, target, "dice_loss");
  const Shape s = probs.shape();
  const std::size_t plane = s.plane();
  const Tensor& p = probs.value();
  // Per (image, class): intersection and the squared-sum denominator.
  std::vector<double> inter(s.n * s.c, 0.0), denom(s.n * s.c, 0.0);
  double loss = 0.0;
  for (std::size_t k = 0; k < s.n * s.c; ++k) {
    const float* pp = p.ptr() + k * plane;
    const float* yy = target.ptr() + k * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      inter[k] += static_cast<double>(yy[i]) * pp[i];
      denom[k] += static_cast<double>(yy[i]) * yy[i] + static_cast<double>(pp[i]) * pp[i];
    }
    if (denom[k] > 0.0) loss += 1.0 - 2.0 * inter[k] / denom[k];
  }
  const double norm = 1.0 / static_cast<double>(s.n * s.c);
  Tape& tape = *probs.tape;
  const std::size_t pi = probs.id;
  return tape.record(
      Tensor::scalar(static_cast<float>(loss * norm)), {probs},
      [pi, target, inter, denom, norm, plane](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* dp = t.grad_sink(pi);
        if (dp == nullptr) return;
        const Tensor& pv = t.value(pi);
        const double go = g[0] * norm;
        for (std::size_t k = 0; k < inter.size(); ++k) {
          if (denom[k] <= 0.0) continue;
          const double u2 = denom[k] * denom[k];
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t j = k * plane + i;
            const double d = -2.0 * (target[j] * denom[k] - 2.0 * inter[k] * pv[j]) / u2;
            (*dp)[j] += static_cast<float>(go * d);
          }
        }
      },
      "dice_loss");
}

Var ce_loss(Var probs, const Tensor& target, double clamp_eps) {
  require_targets(probs, target, "ce_loss");
  const Shape s = probs.shape();
  const Tensor& p = probs.value();
  const double norm = 1.0 / static_cast<double>(s.n * s.plane() * s.c);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (target[i] != 0.0f) sum += target[i] * std::log(std::max(static_cast<double>(p[i]), clamp_eps));
  }
  Tape& tape = *probs.tape;
  const std::size_t pi = probs.id;
  return tape.record(
      Tensor::scalar(static_cast<float>(-sum * norm)), {probs},
      [pi, target, norm, clamp_eps](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* dp = t.grad_sink(pi);
        if (dp == nullptr) return;
        const Tensor& pv = t.value(pi);
        const double go = g[0] * norm;
        for (std::size_t i = 0; i < pv.size(); ++i) {
          // The clamp is flat below eps.
          if (target[i] != 0.0f && pv[i] > clamp_eps) (*dp)[i] += static_cast<float>(-go * target[i] / pv[i]);
        }
      },
      "ce_loss");
}

LossTerms stage_loss(Var probs, const Tensor& target, const LossConfig& cfg) {
  cfg.validate();
  LossTerms t;
  t.dice = dice_loss(probs, target);
  t.ce = ce_loss(probs, target, cfg.clamp_eps);
  t.total = ops::add(ops::scale(t.dice, static_cast<float>(cfg.lambda)),
                     ops::scale(t.ce, static_cast<float>(1.0 - cfg.lambda)));
  return t;
}

Var total_loss(const Tensor& target, Var probs_bn, Var probs_spade, int alpha, const LossConfig& cfg) {
  if (alpha != 0 && alpha != 1) throw ConfigError("total_loss: alpha must be 0 or 1");
  Var active = alpha == 1 ? probs_bn : probs_spade;
  Var gated = alpha == 1 ? probs_spade : probs_bn;
  if (!active.valid()) throw ContractError("total_loss: the selected prediction is missing");
  Var on = ops::scale(stage_loss(active, target, cfg).total, 1.0f);
  if (!gated.valid()) return on;
  return ops::add(on, ops::scale(stage_loss(gated, target, cfg).total, 0.0f));
}

// ---------------------------------------------------------------------------
// optimization

void Adam::step(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    Slot& s = slots_[p->name];
    if (s.t == 0) {
      s.m = Tensor(p->value.shape());
      s.v = Tensor(p->value.shape());
    }
    if (!(p->grad.shape() == p->value.shape())) {
      throw ShapeError("adam: gradient of " + p->name + " has the wrong shape");
    }
    ++s.t;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      const double m = b1 * s.m[i] + (1.0 - b1) * g;
      const double v = b2 * s.v[i] + (1.0 - b2) * g * g;
      s.m[i] = static_cast<float>(m);
      s.v[i] = static_cast<float>(v);
      p->value[i] -= static_cast<float>(cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps));
    }
  }
}

double PlateauScheduler::step(double window_mean, double lr) {
  if (!has_best_ || window_mean < best_ * (1.0 - cfg_.threshold)) {
    best_ = window_mean;
    has_best_ = true;
    bad_ = 0;
    return lr;
  }
  if (++bad_ > cfg_.patience) {
    bad_ = 0;
    return std::max(lr * cfg_.factor, cfg_.lr_min);
  }
  return lr;
}

// ---------------------------------------------------------------------------
// batches

Batch make_batch(const std::vector<const Case*>& cases, std::size_t num_classes) {
  if (cases.empty()) throw ConfigError("batch: no cases");
  const std::size_t h = cases[0]->height(), w = cases[0]->width();
  Batch b;
  b.images = Tensor(Shape{cases.size(), 1, h, w});
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const Case& c = *cases[k];
    if (c.height() != h || c.width() != w) throw ShapeError("batch: cases differ in size");
    std::copy(c.image.data().begin(), c.image.data().end(), b.images.ptr() + k * h * w);
    b.labels.insert(b.labels.end(), c.label.begin(), c.label.end());
  }
  b.target = one_hot(b.labels, cases.size(), num_classes, h, w);
  return b;
}

BatchSampler::BatchSampler(std::vector<const DomainDataset*> domains, std::uint64_t seed, bool augment)
    : domains_(std::move(domains)), rng_(seed), augment_(augment) {
  if (domains_.empty()) throw ConfigError("training: no datasets");
  for (const DomainDataset* d : domains_) {
    if (d->cases.empty()) throw ConfigError("training: dataset of domain " + std::to_string(d->domain_id) + " is empty");
    if (num_classes_ == 0) num_classes_ = d->num_classes;
    if (d->num_classes != num_classes_) throw ConfigError("training: datasets disagree on the label set");
  }
}

Batch BatchSampler::next(std::size_t batch_size) {
  std::vector<Case> drawn;
  drawn.reserve(batch_size);
  for (std::size_t k = 0; k < batch_size; ++k) {
    const DomainDataset& d = *domains_[rng_() % domains_.size()];
    const Case& c = d.cases[rng_() % d.cases.size()];
    const std::uint64_t aug_seed = rng_();
    drawn.push_back(augment_ ? dualnorm::augment(c, {}, aug_seed) : c);
  }
  std::vector<const Case*> ptrs;
  for (const Case& c : drawn) ptrs.push_back(&c);
  return make_batch(ptrs, num_classes_);
}

// ---------------------------------------------------------------------------
// the two-stage iteration

namespace {

std::vector<Parameter*> update_set(SegNetwork& net, ParamGroup norm_group) {
  std::vector<Parameter*> out = net.parameters(ParamGroup::shared);
  for (Parameter* p : net.parameters(norm_group)) out.push_back(p);
  return out;
}

void zero_grads(SegNetwork& net) {
  for (Parameter* p : net.parameters()) p->zero_grad();
}

void require_finite(double v, const char* stage) {
  if (!std::isfinite(v)) throw NumericError(std::string("training diverged: non-finite ") + stage + " loss");
}

// Forward BN, alpha = 1, update {shared, BN}. Returns the prediction.
Tensor bn_stage(SegNetwork& net, const Batch& batch, Adam& opt, const LossConfig& loss, IterationResult& r) {
  Tape tape;
  Var yb = net.forward_bn(tape, tape.constant(batch.images), {Mode::train, true});
  LossTerms terms = stage_loss(yb, batch.target, loss);
  Var l = total_loss(batch.target, yb, Var{}, 1, loss);
  r.bn_dice = terms.dice.value().item();
  r.bn_ce = terms.ce.value().item();
  r.bn_total = l.value().item();
  require_finite(r.bn_total, "BN-stage");
  zero_grads(net);
  tape.backward(l);
  opt.step(update_set(net, ParamGroup::norm_bn));
  return yb.value();
}

}  // namespace

IterationResult train_iteration(SegNetwork& net, const Batch& batch, Adam& opt, const LossConfig& loss,
                                const IterationHooks& hooks) {
  IterationResult r;
  const Tensor& y = batch.target;
  const Tensor probs_bn = bn_stage(net, batch, opt, loss, r);
  if (hooks.after_update) hooks.after_update(Phase::bn_update, net);
  if (!net.has_dual()) return r;

  // The BN prediction enters the second stage only as a fresh one-hot constant.
  const SemanticMask mask = SemanticMask::from_argmax(probs_bn);
  {
    Tape tape;
    Var ys = net.forward_spade(tape, tape.constant(batch.images), mask, {Mode::train, true});
    LossTerms terms = stage_loss(ys, y, loss);
    Var l = total_loss(y, Var{}, ys, 0, loss);
    r.spade_ran = true;
    r.spade_dice = terms.dice.value().item();
    r.spade_ce = terms.ce.value().item();
    r.spade_total = l.value().item();
    require_finite(r.spade_total, "SPADE-stage");
    zero_grads(net);
    tape.backward(l);
    if (hooks.after_spade_backward) hooks.after_spade_backward(tape, mask);
    opt.step(update_set(net, ParamGroup::norm_spade));
  }
  if (hooks.after_update) hooks.after_update(Phase::spade_update, net);
  return r;
}

// ---------------------------------------------------------------------------
// training loop

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train: batch_size must be at least 1");
  if (!(adam.lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (plateau.window == 0 || plateau.patience < 0) throw ConfigError("train: bad plateau settings");
  if (!(plateau.factor > 0.0 && plateau.factor < 1.0)) throw ConfigError("train: plateau factor must lie in (0, 1)");
  if (checkpoint_every > 0 && checkpoint_path.empty()) throw ConfigError("train: checkpoint_every needs a path");
  loss.validate();
}

TrainResult run_training(SegNetwork& net, const std::vector<const DomainDataset*>& domains, const TrainConfig& cfg,
                         std::uint64_t seed) {
  TrainResult result;
  BatchSampler sampler(domains, seed, cfg.augment);
  if (cfg.pretrain_iterations + cfg.iterations == 0) return result;
  cfg.validate();
  Adam opt(cfg.adam);
  PlateauScheduler sched(cfg.plateau);
  double window_sum = 0.0;
  std::size_t window_count = 0;

  const std::size_t total = cfg.pretrain_iterations + cfg.iterations;
  for (std::size_t it = 0; it < total; ++it) {
    const bool pretrain = it < cfg.pretrain_iterations;
    if (it == cfg.pretrain_iterations) net.seed_spade_running_stats();
    const Batch batch = sampler.next(cfg.batch_size);
    IterationResult r;
    if (pretrain) {
      bn_stage(net, batch, opt, cfg.loss, r);
    } else {
      r = train_iteration(net, batch, opt, cfg.loss);
    }
    const char* stage = pretrain ? "pretrain" : "bn";
    result.history.push_back({it, stage, r.bn_dice, r.bn_ce, opt.lr()});
    double iter_loss = r.bn_total;
    if (r.spade_ran) {
      result.history.push_back({it, "spade", r.spade_dice, r.spade_ce, opt.lr()});
      iter_loss = (r.bn_total + r.spade_total) / 2.0;
    }
    window_sum += iter_loss;
    if (++window_count == cfg.plateau.window) {
      opt.set_lr(sched.step(window_sum / static_cast<double>(window_count), opt.lr()));
      window_sum = 0.0;
      window_count = 0;
    }
    if (cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(net, cfg.checkpoint_path, {{"iteration", it + 1}, {"stage", stage}, {"lr", opt.lr()}});
    }
  }
  result.final_lr = opt.lr();
  return result;
}

void write_loss_csv(const std::vector<LossRecord>& history, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "iter,stage,loss_dice,loss_ce,lr\n";
  out << std::setprecision(9);
  for (const LossRecord& r : history) {
    out << r.iteration << ',' << r.stage << ',' << r.dice << ',' << r.ce << ',' << r.lr << '\n';
  }
  if (!out) throw Error("failed writing " + path);
}

}  // namespace dualnorm
