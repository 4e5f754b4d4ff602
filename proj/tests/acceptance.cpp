// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dualnorm/error.hpp"
#include "dualnorm/experiment.hpp"
#include "gradcheck.hpp"
#include "masks.hpp"
#include "metric_oracles.hpp"
#include "norm_oracles.hpp"

using namespace dualnorm;
using namespace dualnorm::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail.clear();
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. gradients

Outcome gradient_soundness() {
  Outcome o;
  double worst_layer = 0.0, worst_net = 0.0;
  std::string worst_layer_name;
  auto layer = [&](const std::string& name, const GradCheckResult& r) {
    if (r.rel_error > worst_layer) {
      worst_layer = r.rel_error;
      worst_layer_name = name;
    }
    o.require(r.rel_error < 1e-3, name + " rel " + fmt("%.2e", r.rel_error));
    o.require(r.unstable_fraction() < 0.5, name + " has too many kinked probes");
  };

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    Parameter x("input", ParamGroup::shared, random_tensor(Shape{2, 4, 8, 8}, rng));
    Parameter w("weight", ParamGroup::shared, random_tensor(Shape{5, 4, 3, 3}, rng, -0.5f, 0.5f));
    Parameter b("bias", ParamGroup::shared, random_tensor(Shape{1, 5, 1, 1}, rng));
    Parameter y("other", ParamGroup::shared, random_tensor(Shape{2, 3, 8, 8}, rng));
    const SemanticMask soft = random_soft(2, 3, 8, 8, rng);

    layer("conv3x3", grad_check_params({&x, &w, &b}, [&](Tape& t) {
            return ops::conv2d(t.parameter(x), t.parameter(w), t.parameter(b), 1, 1);
          }, seed));
    layer("relu", grad_check_params({&x}, [&](Tape& t) { return ops::relu(t.parameter(x)); }, seed));
    layer("maxpool", grad_check_params({&x}, [&](Tape& t) { return ops::maxpool2x(t.parameter(x)); }, seed));
    layer("upsample",
          grad_check_params({&x}, [&](Tape& t) { return ops::upsample_nearest2x(t.parameter(x)); }, seed));
    layer("concat", grad_check_params({&x, &y}, [&](Tape& t) {
            return ops::concat_channels(t.parameter(x), t.parameter(y));
          }, seed));
    layer("softmax",
          grad_check_params({&x}, [&](Tape& t) { return ops::softmax_channel(t.parameter(x)); }, seed));

    BnParams bn = BnParams::make("bn", 4);
    randomize(bn.gamma, rng);
    randomize(bn.beta, rng);
    layer("bn", grad_check_params({&x, &bn.gamma, &bn.beta}, [&](Tape& t) {
            return bn_forward(t, t.parameter(x), bn, Mode::train, false);
          }, seed));
    for (std::size_t groups : {4u, 1u, 2u}) {
      GroupNormParams g = GroupNormParams::make("g", 4, groups);
      randomize(g.gamma, rng);
      randomize(g.beta, rng);
      const char* name = groups == 4 ? "in" : groups == 1 ? "ln" : "gn";
      layer(name, grad_check_params({&x, &g.gamma, &g.beta}, [&](Tape& t) {
              return groups == 4 ? in_forward(t, t.parameter(x), g)
                     : groups == 1 ? ln_forward(t, t.parameter(x), g)
                                   : gn_forward(t, t.parameter(x), g);
            }, seed));
    }

    SpadeSubnet s = SpadeSubnet::make("spade", 4, 3, rng);
    for (Parameter* p : s.parameters()) randomize(*p, rng, -0.5f, 0.5f);
    RunningStats st{std::vector<float>(4, 0.0f), std::vector<float>(4, 1.0f)};
    std::vector<Parameter*> sp{&x};
    for (Parameter* p : s.parameters()) sp.push_back(p);
    layer("spade", grad_check_params(sp, [&](Tape& t) {
            return spade_forward(t, t.parameter(x), t.constant(soft.values), s,
                                 NormCore{&st, 1e-5f, 0.1f, Mode::train, false});
          }, seed));

    DnrbConfig dc;
    dc.in_channels = 4;
    dc.channels = 6;
    dc.dual = true;
    dc.mask_channels = 3;
    std::mt19937_64 brng(50 + seed);
    ResidualBlock block("enc1", dc, brng);
    for (Branch br : {Branch::bn, Branch::spade}) {
      std::vector<Parameter*> bp{&x};
      for (Parameter* p : block.parameters()) bp.push_back(p);
      BlockContext ctx;
      ctx.branch = br;
      ctx.mask = &soft;
      ctx.update_running = false;
      layer(br == Branch::bn ? "dnrb/bn" : "dnrb/spade",
            grad_check_params(bp, [&](Tape& t) { return block.forward(t, t.parameter(x), ctx); }, seed));
    }

    Tensor logits = random_tensor(Shape{2, 3, 4, 4}, rng, -2, 2);
    std::vector<int> labels(32);
    std::uniform_int_distribution<int> cls(0, 2);
    for (int& l : labels) l = cls(rng);
    const Tensor target = one_hot(labels, 2, 3, 4, 4);
    GradCheckOptions loss_opt;
    loss_opt.step = 1e-2f;
    layer("loss", grad_check({&logits}, {"logits"}, [&](Tape&, const std::vector<Var>& v) {
            return stage_loss(ops::softmax_channel(v[0]), target, LossConfig{}).total;
          }, seed, loss_opt));

    // Whole network, both forward paths.
    NetConfig nc;
    nc.dual_blocks = {1, 6};
    SegNetwork net = SegNetwork::build(nc, 70 + seed);
    Parameter img("input", ParamGroup::shared, random_tensor(Shape{1, 1, 16, 16}, rng));
    const SemanticMask m = random_one_hot(1, 3, 16, 16, rng);
    std::vector<Parameter*> np{&img};
    for (Parameter* p : net.parameters()) np.push_back(p);
    // Through ten blocks of float arithmetic the h and h/2 quotients already
    // differ at the rounding level, so only the one-sided test flags switches.
    GradCheckOptions net_opt;
    net_opt.max_entries = 4;
    net_opt.stability = std::numeric_limits<double>::infinity();
    net_opt.one_sided = 5e-2;
    const GradCheckResult rb = grad_check_params(
        np, [&](Tape& t) { return net.forward_bn(t, t.parameter(img), {Mode::train, false}); }, seed, net_opt);
    const GradCheckResult rs = grad_check_params(
        np, [&](Tape& t) { return net.forward_spade(t, t.parameter(img), m, {Mode::train, false}); }, seed, net_opt);
    for (const auto* r : {&rb, &rs}) {
      worst_net = std::max(worst_net, r->rel_error);
      o.require(r->rel_error < 1e-2, std::string(r == &rb ? "network/bn" : "network/spade") + " rel " +
                                         fmt("%.2e", r->rel_error));
      o.require(r->unstable_fraction() < 0.5, "network has too many kinked probes");
    }
  }
  if (o.pass) {
    o.detail = "5 seeds; worst layer " + fmt("%.1e", worst_layer) + " (" + worst_layer_name + "), worst network " +
               fmt("%.1e", worst_net);
  }
  return o;
}

// ---------------------------------------------------------------------------
// 2. normalization oracles

Outcome norm_oracles() {
  Outcome o;
  float worst = 0.0f;
  auto check = [&](const char* name, const Tensor& got, const Tensor& want) {
    const float d = max_abs_diff(got, want);
    worst = std::max(worst, d);
    o.require(d < 1e-5f, std::string(name) + " differs by " + fmt("%.2e", d));
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(2000 + seed);
    const Tensor x = random_tensor(Shape{2, 4, 8, 8}, rng, -2.0f, 3.0f);
    Tape t;
    Var xv = t.constant(x);
    BnParams bn = BnParams::make("bn", 4);
    randomize(bn.gamma, rng);
    randomize(bn.beta, rng);
    check("bn", bn_forward(t, xv, bn, Mode::train).value(),
          reference_bn(x, bn.gamma.value.values(), bn.beta.value.values(), 1e-5));
    for (std::size_t groups : {4u, 1u, 2u}) {
      GroupNormParams g = GroupNormParams::make("g", 4, groups);
      randomize(g.gamma, rng);
      randomize(g.beta, rng);
      const Tensor want = reference_group(x, groups, g.gamma.value.values(), g.beta.value.values(), 1e-5);
      if (groups == 4) check("in", in_forward(t, xv, g).value(), want);
      if (groups == 1) check("ln", ln_forward(t, xv, g).value(), want);
      if (groups == 2) check("gn", gn_forward(t, xv, g).value(), want);
    }
    SpadeSubnet s = SpadeSubnet::make("spade", 4, 3, rng);
    for (Parameter* p : s.parameters()) randomize(*p, rng, -0.5f, 0.5f);
    const SemanticMask m = random_one_hot(2, 3, 8, 8, rng);
    RunningStats st{std::vector<float>(4, 0.0f), std::vector<float>(4, 1.0f)};
    Var y = spade_forward(t, xv, t.constant(m.values), s, NormCore{&st});
    Tensor hidden = reference_conv3x3(m.values, s.shared_w.value, s.shared_b.value);
    for (float& v : hidden.data()) v = std::max(v, 0.0f);
    const Tensor gamma = reference_conv3x3(hidden, s.gamma_w.value, s.gamma_b.value);
    const Tensor beta = reference_conv3x3(hidden, s.beta_w.value, s.beta_b.value);
    const Tensor z = reference_bn(x, std::vector<float>(4, 1.0f), std::vector<float>(4, 0.0f), 1e-5);
    Tensor want(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) want[i] = gamma[i] * z[i] + beta[i];
    check("spade", y.value(), want);
  }
  if (o.pass) o.detail = "BN/IN/LN/GN/SPADE on 2x4x8x8, 5 seeds, worst " + fmt("%.1e", worst);
  return o;
}

// ---------------------------------------------------------------------------
// 3. branch neutrality

Outcome branch_neutrality() {
  Outcome o;
  float worst = 0.0f;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(3000 + seed);
    NetConfig nc;
    nc.dual_blocks = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    SegNetwork net = SegNetwork::build(nc, 3000 + seed);
    for (int b = 1; b <= kBlockCount; ++b) {
      for (std::size_t i = 0; i < 2; ++i) {
        NormSite& s = net.block(b).site(i);
        s.bn.gamma.value.fill(1.0f);
        s.bn.beta.value.fill(0.0f);
        s.spade->set_neutral();
      }
    }
    const Tensor x = random_tensor(Shape{2, 1, 32, 32}, rng);
    const SemanticMask m = random_one_hot(2, 3, 32, 32, rng);
    Tape t;
    const float d = max_abs_diff(net.forward_bn(t, t.constant(x), {Mode::train, false}).value(),
                                 net.forward_spade(t, t.constant(x), m, {Mode::train, false}).value());
    worst = std::max(worst, d);
    o.require(d < 1e-5f, "paths differ by " + fmt("%.2e", d));
  }
  if (o.pass) o.detail = "all 10 blocks dual, 3 seeds, max difference " + fmt("%.1e", worst);
  return o;
}

// ---------------------------------------------------------------------------
// 4. update discipline

std::uint64_t group_hash(SegNetwork& net, ParamGroup g) {
  std::uint64_t h = 1469598103934665603ull;
  for (Parameter* p : net.parameters(g)) h = (h ^ content_hash(p->value)) * 1099511628211ull;
  return h;
}

std::uint64_t bn_stats_hash(SegNetwork& net) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto& [name, stats] : net.buffers()) {
    if (name.ends_with(".spade_running")) continue;
    const std::size_t c = stats->mean.size();
    h = (h ^ content_hash(Tensor(Shape{1, c, 1, 1}, stats->mean))) * 1099511628211ull;
    h = (h ^ content_hash(Tensor(Shape{1, c, 1, 1}, stats->var))) * 1099511628211ull;
  }
  return h;
}

Outcome update_discipline() {
  Outcome o;
  SynthConfig sc = default_synth_config(0, 4000);
  sc.num_cases = 8;
  const DomainDataset d = zscore_normalize(generate_domain(sc));
  NetConfig nc;
  nc.dual_blocks = {1, 2, 3, 4};
  SegNetwork net = SegNetwork::build(nc, 4000);
  net.seed_spade_running_stats();
  BatchSampler sampler({&d}, 4000);
  Adam opt;
  std::uint64_t spade = 0, bn = 0, stats = 0;
  std::size_t frozen_bn_steps = 0, frozen_spade_steps = 0, mask_nodes = 0, nonzero_mask_grads = 0;
  IterationHooks hooks;
  hooks.after_update = [&](Phase phase, SegNetwork& n) {
    const std::uint64_t s2 = group_hash(n, ParamGroup::norm_spade), b2 = group_hash(n, ParamGroup::norm_bn),
                        st2 = bn_stats_hash(n);
    if (phase == Phase::bn_update) {
      if (s2 == spade) ++frozen_spade_steps;
      o.require(b2 != bn, "BN affines did not move in a stage-1 step");
    } else {
      if (b2 == bn && st2 == stats) ++frozen_bn_steps;
      o.require(s2 != spade, "SPADE parameters did not move in a stage-2 step");
    }
    spade = s2;
    bn = b2;
    stats = st2;
  };
  hooks.after_spade_backward = [&](const Tape& tape, const SemanticMask& m) {
    Tape& t = const_cast<Tape&>(tape);
    for (std::size_t id = 0; id < tape.size(); ++id) {
      if (!(tape.value(id) == m.values)) continue;
      ++mask_nodes;
      const Tensor* g = t.grad(Var{&t, id});
      if (tape.requires_grad(id) || (g != nullptr && max_abs_diff(*g, Tensor(g->shape())) != 0.0f)) {
        ++nonzero_mask_grads;
      }
    }
  };
  const int iterations = 100;
  for (int it = 0; it < iterations; ++it) {
    spade = group_hash(net, ParamGroup::norm_spade);
    bn = group_hash(net, ParamGroup::norm_bn);
    stats = bn_stats_hash(net);
    train_iteration(net, sampler.next(4), opt, LossConfig{}, hooks);
  }
  o.require(frozen_spade_steps == iterations, "SPADE parameters changed during stage 1 steps");
  o.require(frozen_bn_steps == iterations, "BN parameters or running stats changed during stage 2 steps");
  o.require(mask_nodes >= iterations, "mask never reached the stage-2 tape");
  o.require(nonzero_mask_grads == 0, "mask carried a gradient");
  if (o.pass) {
    o.detail = std::to_string(iterations) + " iterations, hashes frozen as required; " + std::to_string(mask_nodes) +
               " mask nodes, all gradient-free";
  }
  return o;
}

// ---------------------------------------------------------------------------
// 5. loss closed forms

Outcome loss_closed_forms() {
  Outcome o;
  Tape t;
  double worst = 0.0;
  std::mt19937_64 rng(5000);
  for (std::size_t classes : {2u, 3u, 5u}) {
    std::vector<int> labels(2 * 16);
    std::uniform_int_distribution<int> d(0, static_cast<int>(classes) - 1);
    for (int& l : labels) l = d(rng);
    const Tensor y = one_hot(labels, 2, classes, 4, 4);
    const double dice = dice_loss(t.constant(y), y).value().item();
    const double ce = ce_loss(t.constant(Tensor(y.shape(), 1.0f / static_cast<float>(classes))), y, 1e-7).value().item();
    const double want = std::log(static_cast<double>(classes)) / static_cast<double>(classes);
    worst = std::max({worst, std::fabs(dice), std::fabs(ce - want)});
    o.require(std::fabs(dice) < 1e-6, "dice of a perfect prediction is " + fmt("%.3e", dice));
    o.require(std::fabs(ce - want) < 1e-6, "uniform CE off by " + fmt("%.3e", ce - want));
    if (classes == 2) o.require(std::fabs(ce - 0.34657) < 1e-5, "CE for two classes is " + fmt("%.6f", ce));
  }
  if (o.pass) o.detail = "|L| = 2, 3, 5; worst deviation " + fmt("%.1e", worst);
  return o;
}

// ---------------------------------------------------------------------------
// 6. alignment

Outcome alignment_laws() {
  Outcome o;
  double worst_identity = 0.0, worst_match = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SynthConfig a = default_synth_config(0, 6000 + seed), b = default_synth_config(1, 6100 + seed);
    a.noise = b.noise = 0.2;
    b.num_cases = 14;
    const DomainDataset src = generate_domain(a), tgt = generate_domain(b);

    for (int global = 0; global < 2; ++global) {
      const AlignResult self = global ? align_global(src, src) : align_region_wise(src, src);
      for (std::size_t k = 0; k < src.cases.size(); ++k) {
        worst_identity = std::max(worst_identity, static_cast<double>(max_abs_diff(self.aligned.cases[k].image,
                                                                                   src.cases[k].image)));
      }
    }

    const DomainStats ts = collect_stats(tgt);
    const DomainStats after = collect_stats(align_region_wise(src, ts).aligned);
    for (const auto& [cls, t] : ts.aggregate) {
      const ClassAggregate& s = after.aggregate.at(cls);
      worst_match = std::max({worst_match, std::fabs(s.mean_of_means - t.mean_of_means),
                              std::fabs(s.std_of_means - t.std_of_means)});
    }

    for (int cls = 0; cls < 3; ++cls) {
      AlignOptions opt;
      opt.classes = {cls};
      const AlignResult r = align_region_wise(src, ts, opt);
      for (std::size_t k = 0; k < src.cases.size(); ++k)
        for (std::size_t i = 0; i < src.cases[k].label.size(); ++i) {
          if (src.cases[k].label[i] != cls && r.aligned.cases[k].image[i] != src.cases[k].image[i]) {
            o.require(false, "class " + std::to_string(cls) + " pass touched another class");
          }
        }
    }
  }
  // Step 2 on the hand-worked case: means {1, 3} onto {10, 14}.
  DomainDataset s2, t2;
  for (DomainDataset* d : {&s2, &t2}) {
    d->num_classes = 2;
    d->height = 1;
    d->width = 2;
  }
  for (float v : {1.0f, 3.0f}) s2.cases.push_back(Case{Tensor(Shape{1, 1, 1, 2}, {v, 0.0f}), {1, 0}});
  for (float v : {10.0f, 14.0f}) t2.cases.push_back(Case{Tensor(Shape{1, 1, 1, 2}, {v, 0.0f}), {1, 0}});
  const AlignResult hand = align_region_wise(s2, t2);
  o.require(std::fabs(hand.aligned.cases[0].image[0] - 10.0f) < 1e-5f &&
                std::fabs(hand.aligned.cases[1].image[0] - 14.0f) < 1e-5f,
            "hand-worked mapping {1,3} -> {10,14} failed");

  o.require(worst_identity < 1e-5, "self alignment moved pixels by " + fmt("%.2e", worst_identity));
  o.require(worst_match < 1e-4, "aligned statistics off by " + fmt("%.2e", worst_match));
  if (o.pass) {
    o.detail = "identity " + fmt("%.1e", worst_identity) + ", statistics match " + fmt("%.1e", worst_match) +
               ", locality bit-exact";
  }
  return o;
}

// ---------------------------------------------------------------------------
// 7. ASD

Outcome asd_oracle() {
  Outcome o;
  std::mt19937_64 rng(7000);
  std::size_t compared = 0;
  for (int pair = 0; pair < 30; ++pair) {
    const std::size_t h = 4 + rng() % 61, w = 4 + rng() % 61;
    std::vector<int> p(h * w), t(h * w);
    // Blobby masks: random rectangles over a noisy background.
    std::uniform_int_distribution<int> noise(0, 9);
    for (auto* m : {&p, &t}) {
      for (int& v : *m) v = noise(rng) == 0 ? 1 : 0;
      for (int r = 0; r < 3; ++r) {
        const std::size_t y0 = rng() % h, x0 = rng() % w, y1 = y0 + rng() % (h - y0), x1 = x0 + rng() % (w - x0);
        const int c = 1 + static_cast<int>(rng() % 2);
        for (std::size_t y = y0; y <= y1; ++y)
          for (std::size_t x = x0; x <= x1; ++x) (*m)[y * w + x] = c;
      }
    }
    for (int cls = 0; cls < 3; ++cls) {
      const auto got = asd_metric(p, t, h, w, cls), want = reference_asd(p, t, h, w, cls);
      if (got.has_value() != want.has_value()) {
        o.require(false, "definedness differs on pair " + std::to_string(pair));
      } else if (got && *got != *want) {
        o.require(false, "pair " + std::to_string(pair) + " class " + std::to_string(cls) + ": " +
                             fmt("%.17g", *got) + " vs " + fmt("%.17g", *want));
      }
      compared += got.has_value();
    }
  }
  if (o.pass) o.detail = "30 random pairs up to 64x64, " + std::to_string(compared) + " class distances bit-equal";
  return o;
}

// ---------------------------------------------------------------------------
// 8-10. desk-scale runs

ExperimentConfig desk_config(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.validate();
  return c;
}

std::vector<DomainDataset> ready(const std::vector<DomainDataset>& ds, const ExperimentConfig& cfg) {
  std::vector<DomainDataset> out;
  for (const DomainDataset& d : ds) out.push_back(preprocess(d, cfg));
  return out;
}

double val_dice(SegNetwork& net, const std::vector<DomainDataset>& val, Forward f) {
  std::vector<EvalReport> reports;
  for (const DomainDataset& d : val) reports.push_back(evaluate(net, d, f));
  return mean_dice(reports);
}

Outcome single_domain_run() {
  Outcome o;
  ExperimentConfig cfg = desk_config(8);
  cfg.data.domains = 1;
  const auto t0 = std::chrono::steady_clock::now();
  TrainedModel m = train_experiment(cfg, make_domains(cfg, false));
  const double dice = val_dice(m.net, ready(make_domains(cfg, true), cfg), Forward::bn);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.require(dice > 0.85, "validation Dice " + fmt("%.4f", dice) + " <= 0.85");
  o.require(secs < 600, "took " + fmt("%.0f", secs) + " s");
  o.detail = o.pass ? "BN-only, 2000 iterations, validation Dice " + fmt("%.4f", dice) + " in " + fmt("%.0f", secs) + " s"
                    : o.detail;
  return o;
}

struct MultiDomainResult {
  std::vector<double> bn, dual, dual_stage1, region, global;
  double seconds = 0.0;
};

MultiDomainResult multi_domain_runs() {
  MultiDomainResult r;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ExperimentConfig cfg = desk_config(seed);
    const std::vector<DomainDataset> train = make_domains(cfg, false), val_raw = make_domains(cfg, true);
    const std::vector<DomainDataset> val = ready(val_raw, cfg);

    TrainedModel bn = train_experiment(cfg, train);
    r.bn.push_back(val_dice(bn.net, val, Forward::bn));

    ExperimentConfig dual = cfg;
    dual.net.norm = "dualnorm";
    dual.net.dual_blocks = {1};
    TrainedModel dm = train_experiment(dual, train);
    r.dual.push_back(val_dice(dm.net, val, Forward::spade));
    r.dual_stage1.push_back(val_dice(dm.net, val, Forward::bn));

    // Source domains (and their held-out cases) are mapped onto domain 0.
    for (const char* mode : {"region", "global"}) {
      const auto aligned_train = align_domains(train, train[0], mode, cfg.align.eps);
      const auto aligned_val = ready(align_domains(val_raw, train[0], mode, cfg.align.eps), cfg);
      TrainedModel am = train_experiment(cfg, aligned_train);
      (std::strcmp(mode, "region") == 0 ? r.region : r.global).push_back(val_dice(am.net, aligned_val, Forward::bn));
    }
    std::printf("  seed %llu: bn %.4f dualnorm %.4f (stage 1 %.4f) region %.4f global %.4f\n",
                static_cast<unsigned long long>(seed), r.bn.back(), r.dual.back(), r.dual_stage1.back(),
                r.region.back(), r.global.back());
    std::fflush(stdout);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

int wins(const std::vector<double>& a, const std::vector<double>& b) {
  int n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] > b[i];
  return n;
}

Outcome directional_replication(const MultiDomainResult& r) {
  Outcome o;
  const int dual_wins = wins(r.dual, r.bn);
  o.require(mean(r.dual) >= mean(r.bn),
            "DualNorm mean Dice " + fmt("%.4f", mean(r.dual)) + " < BN " + fmt("%.4f", mean(r.bn)));
  o.require(dual_wins >= 2, "DualNorm improved in " + std::to_string(dual_wins) + " of 3 seeds");
  o.require(mean(r.region) >= mean(r.global), "region-wise alignment Dice " + fmt("%.4f", mean(r.region)) +
                                                  " < global " + fmt("%.4f", mean(r.global)));
  o.require(r.seconds < 45 * 60, "took " + fmt("%.0f", r.seconds) + " s");
  if (o.pass) {
    o.detail = "(a) DualNorm " + fmt("%.4f", mean(r.dual)) + " vs BN " + fmt("%.4f", mean(r.bn)) + ", better in " +
               std::to_string(dual_wins) + "/3; (b) region " + fmt("%.4f", mean(r.region)) + " vs global " +
               fmt("%.4f", mean(r.global)) + "; " + fmt("%.0f", r.seconds) + " s";
  }
  return o;
}

Outcome stage_two_gain(const MultiDomainResult& r) {
  Outcome o;
  int n = 0;
  for (std::size_t i = 0; i < r.dual.size(); ++i) n += r.dual[i] >= r.dual_stage1[i];
  o.require(n >= 2, "two-pass Dice >= stage-1 Dice in only " + std::to_string(n) + " of 3 seeds");
  if (o.pass) {
    o.detail = "two-pass " + fmt("%.4f", mean(r.dual)) + " vs stage-1 " + fmt("%.4f", mean(r.dual_stage1)) +
               ", not worse in " + std::to_string(n) + "/3 seeds";
  }
  return o;
}

// ---------------------------------------------------------------------------
// 11. serialization

template <typename F>
bool throws_integrity(F f) {
  try {
    f();
  } catch (const IntegrityError&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome serialization() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "dualnorm_acceptance_io";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::mt19937_64 rng(11000);

  // Arrays of mixed rank, including special float values.
  std::vector<NamedArray> arrays;
  for (int k = 0; k < 6; ++k) {
    NamedArray a;
    a.name = "array" + std::to_string(k);
    for (int r = 0; r < k % 5; ++r) a.dims.push_back(1 + rng() % 5);
    std::size_t n = 1;
    for (auto d : a.dims) n *= d;
    std::uniform_real_distribution<float> u(-1e6f, 1e6f);
    for (std::size_t i = 0; i < n; ++i) a.data.push_back(u(rng));
    arrays.push_back(a);
  }
  arrays[1].data[0] = -0.0f;
  arrays[2].data[0] = std::numeric_limits<float>::denorm_min();
  arrays[3].data[0] = std::numeric_limits<float>::infinity();
  write_dnt(dir / "a.dnt", arrays);
  const std::vector<NamedArray> back = read_dnt(dir / "a.dnt");
  bool bits = back.size() == arrays.size();
  for (std::size_t k = 0; bits && k < arrays.size(); ++k) {
    bits = back[k].name == arrays[k].name && back[k].dims == arrays[k].dims &&
           back[k].data.size() == arrays[k].data.size() &&
           std::memcmp(back[k].data.data(), arrays[k].data.data(), arrays[k].data.size() * sizeof(float)) == 0;
  }
  o.require(bits, "DNT1 round trip is not bit-exact");
  o.require(encode_dnt(back) == read_file_bytes(dir / "a.dnt"), "DNT1 re-encoding differs");

  std::vector<std::uint8_t> bytes = read_file_bytes(dir / "a.dnt");
  o.require(throws_integrity([&] { decode_dnt(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3)); }),
            "truncated DNT1 accepted");
  std::vector<std::uint8_t> magic = bytes;
  magic[0] = 'X';
  o.require(throws_integrity([&] { decode_dnt(magic); }), "bad magic accepted");
  std::vector<std::uint8_t> extra = bytes;
  extra.push_back(0);
  o.require(throws_integrity([&] { decode_dnt(extra); }), "trailing bytes accepted");

  SynthConfig sc = default_synth_config(1, 11001);
  sc.num_cases = 5;
  const DomainDataset d = generate_domain(sc);
  write_dataset(d, dir / "set");
  o.require(read_dataset(dir / "set") == d, "dataset round trip differs");
  std::vector<std::uint8_t> set = read_file_bytes(dir / "set.dnt");
  set[set.size() / 2] ^= 0x10;
  write_file_bytes(dir / "set.dnt", set);
  o.require(throws_integrity([&] { read_dataset(dir / "set"); }), "corrupted dataset accepted");

  NetConfig nc;
  nc.dual_blocks = {1, 6};
  SegNetwork net = SegNetwork::build(nc, 11002);
  save_checkpoint(net, (dir / "ck.dnt").string());
  Checkpoint ck = load_checkpoint((dir / "ck.dnt").string());
  o.require(network_state(ck.net) == network_state(net), "checkpoint round trip differs");
  std::vector<std::uint8_t> ckb = read_file_bytes(dir / "ck.dnt");
  ckb[ckb.size() - 1] ^= 0x01;
  write_file_bytes(dir / "ck.dnt", ckb);
  o.require(throws_integrity([&] { load_checkpoint((dir / "ck.dnt").string()); }), "corrupted checkpoint accepted");
  fs::remove_all(dir);
  if (o.pass) o.detail = "DNT1, dataset and checkpoint round trips bit-exact; 5 corruptions rejected";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&](int n) { return only.empty() || only.contains(n); };

  int failed = 0;
  auto run = [&](int n, const char* title, const std::function<Outcome()>& f) {
    if (!wanted(n)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("threw: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s %d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", n, title, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  run(1, "gradient soundness", gradient_soundness);
  run(2, "normalization oracles", norm_oracles);
  run(3, "branch neutrality", branch_neutrality);
  run(4, "alternating update discipline", update_discipline);
  run(5, "loss closed forms", loss_closed_forms);
  run(6, "alignment laws", alignment_laws);
  run(7, "ASD oracle", asd_oracle);
  run(8, "single-domain desk run", single_domain_run);
  if (wanted(9) || wanted(10)) {
    std::printf("  running 3 seeds x {BN, DualNorm(block1), region-aligned BN, global-aligned BN}\n");
    std::fflush(stdout);
    std::optional<MultiDomainResult> r;
    std::string error;
    try {
      r = multi_domain_runs();
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto from = [&](Outcome (*f)(const MultiDomainResult&)) {
      return [&, f] {
        if (!r) return Outcome{false, "threw: " + error};
        return f(*r);
      };
    };
    run(9, "multi-domain directional replication", from(directional_replication));
    run(10, "stage-2 gain", from(stage_two_gain));
  }
  run(11, "serialization", serialization);
  return failed == 0 ? 0 : 1;
}
