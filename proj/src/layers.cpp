#include "dualnorm/layers.hpp"

#include <algorithm>
#include <cmath>

#include "dualnorm/error.hpp"

namespace dualnorm {

const char* to_string(NormKind k) {
  switch (k) {
    case NormKind::batch: return "bn";
    case NormKind::instance: return "in";
    case NormKind::layer: return "ln";
    case NormKind::group: return "gn";
  }
  return "?";
}

NormKind parse_norm_kind(const std::string& s) {
  if (s == "bn") return NormKind::batch;
  if (s == "in") return NormKind::instance;
  if (s == "ln") return NormKind::layer;
  if (s == "gn") return NormKind::group;
  throw ConfigError("unknown normalization '" + s + "'");
}

Tensor he_normal(Shape s, std::mt19937_64& rng, float gain) {
  const double fan_in = static_cast<double>(s.c * s.h * s.w);
  std::normal_distribution<float> d(0.0f, static_cast<float>(gain * std::sqrt(2.0 / fan_in)));
  Tensor t(s);
  for (float& v : t.data()) v = d(rng);
  return t;
}

Var standardize(Var x, const NormCore& core) {
  if (core.running == nullptr) throw ContractError("standardize: no running statistics bound");
  RunningStats& run = *core.running;
  const std::size_t c = x.shape().c;
  if (run.mean.size() != c || run.var.size() != c) {
    throw ShapeError("standardize: statistics hold " + std::to_string(run.mean.size()) +
                     " channels, input has " + std::to_string(c));
  }
  if (core.mode == Mode::eval) return ops::standardize_with(x, run, core.eps);
  ops::ChannelStats batch;
  Var y = ops::batch_standardize(x, core.eps, &batch);
  if (core.update_running) {
    const float m = core.momentum;
    for (std::size_t i = 0; i < c; ++i) {
      run.mean[i] = (1.0f - m) * run.mean[i] + m * batch.mean[i];
      run.var[i] = (1.0f - m) * run.var[i] + m * batch.var[i];
    }
  }
  return y;
}

namespace {
RunningStats fresh_stats(std::size_t c) {
  return RunningStats{std::vector<float>(c, 0.0f), std::vector<float>(c, 1.0f)};
}
}  // namespace

BnParams BnParams::make(const std::string& prefix, std::size_t channels) {
  BnParams p;
  p.gamma = Parameter(prefix + ".gamma", ParamGroup::norm_bn, Tensor(Shape{1, channels, 1, 1}, 1.0f));
  p.beta = Parameter(prefix + ".beta", ParamGroup::norm_bn, Tensor(Shape{1, channels, 1, 1}, 0.0f));
  p.running = fresh_stats(channels);
  return p;
}

Var bn_forward(Tape& tape, Var x, BnParams& p, Mode mode, bool update_running) {
  if (x.shape().c != p.channels()) {
    throw ShapeError("bn_forward: input has " + std::to_string(x.shape().c) +
                     " channels, parameters expect " + std::to_string(p.channels()));
  }
  Var xhat = standardize(x, NormCore{&p.running, p.eps, p.momentum, mode, update_running});
  return ops::channel_affine(xhat, tape.parameter(p.gamma), tape.parameter(p.beta));
}

GroupNormParams GroupNormParams::make(const std::string& prefix, std::size_t channels,
                                      std::size_t groups) {
  if (groups == 0 || channels % groups != 0) {
    throw ConfigError("group count " + std::to_string(groups) + " does not divide " +
                      std::to_string(channels) + " channels");
  }
  GroupNormParams p;
  p.gamma = Parameter(prefix + ".gamma", ParamGroup::norm_bn, Tensor(Shape{1, channels, 1, 1}, 1.0f));
  p.beta = Parameter(prefix + ".beta", ParamGroup::norm_bn, Tensor(Shape{1, channels, 1, 1}, 0.0f));
  p.groups = groups;
  return p;
}

Var group_norm_forward(Tape& tape, Var x, GroupNormParams& p) {
  if (x.shape().c != p.channels()) {
    throw ShapeError("group norm: input has " + std::to_string(x.shape().c) +
                     " channels, parameters expect " + std::to_string(p.channels()));
  }
  Var xhat = ops::group_standardize(x, p.groups, p.eps);
  return ops::channel_affine(xhat, tape.parameter(p.gamma), tape.parameter(p.beta));
}

Var in_forward(Tape& tape, Var x, GroupNormParams& p) {
  if (p.groups != p.channels()) throw ConfigError("instance norm needs one group per channel");
  return group_norm_forward(tape, x, p);
}

Var ln_forward(Tape& tape, Var x, GroupNormParams& p) {
  if (p.groups != 1) throw ConfigError("layer norm needs a single group");
  return group_norm_forward(tape, x, p);
}

Var gn_forward(Tape& tape, Var x, GroupNormParams& p) { return group_norm_forward(tape, x, p); }

// ---------------------------------------------------------------------------
// masks

std::vector<int> argmax_channels(const Tensor& t) {
  const Shape s = t.shape();
  std::vector<int> out(s.n * s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < s.plane(); ++p) {
      std::size_t best = 0;
      float bv = t[n * s.c * s.plane() + p];
      for (std::size_t c = 1; c < s.c; ++c) {
        const float v = t[(n * s.c + c) * s.plane() + p];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[n * s.plane() + p] = static_cast<int>(best);
    }
  }
  return out;
}

SemanticMask SemanticMask::from_labels(const std::vector<int>& labels, std::size_t n,
                                       std::size_t classes, std::size_t h, std::size_t w) {
  if (labels.size() != n * h * w) throw ShapeError("from_labels: label count does not match dims");
  SemanticMask m{Tensor(Shape{n, classes, h, w}), MaskEncoding::one_hot};
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < h * w; ++p) {
      const int l = labels[b * h * w + p];
      if (l < 0 || static_cast<std::size_t>(l) >= classes) {
        throw ContractError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
      }
      m.values[(b * classes + static_cast<std::size_t>(l)) * h * w + p] = 1.0f;
    }
  }
  return m;
}

SemanticMask SemanticMask::from_argmax(const Tensor& probs) {
  const Shape s = probs.shape();
  return from_labels(argmax_channels(probs), s.n, s.c, s.h, s.w);
}

void SemanticMask::validate(float tol) const {
  const Shape s = values.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < s.plane(); ++p) {
      float total = 0.0f;
      int ones = 0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const float v = values[(n * s.c + c) * s.plane() + p];
        if (encoding == MaskEncoding::one_hot) {
          if (v != 0.0f && v != 1.0f) throw ContractError("one-hot mask holds non-binary value");
          ones += v == 1.0f;
        } else if (v < -tol || v > 1.0f + tol) {
          throw ContractError("soft mask value outside [0,1]");
        }
        total += v;
      }
      if (encoding == MaskEncoding::one_hot && ones != 1) {
        throw ContractError("one-hot mask location without exactly one active class");
      }
      if (std::fabs(total - 1.0f) > tol) throw ContractError("mask channels do not sum to 1");
    }
  }
}

SemanticMask resize_mask(const SemanticMask& m, std::size_t h, std::size_t w, MaskResize method) {
  if (h == 0 || w == 0) throw ShapeError("resize_mask: target dims must be positive");
  const Shape s = m.values.shape();
  if (s.h == h && s.w == w) return m;
  SemanticMask out{Tensor(Shape{s.n, s.c, h, w}), m.encoding};
  const double sy = static_cast<double>(s.h) / static_cast<double>(h);
  const double sx = static_cast<double>(s.w) / static_cast<double>(w);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const float* src = m.values.ptr() + p * s.plane();
    float* dst = out.values.ptr() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (method == MaskResize::nearest) {
          const auto iy = std::min(s.h - 1, static_cast<std::size_t>(std::floor(y * sy)));
          const auto ix = std::min(s.w - 1, static_cast<std::size_t>(std::floor(x * sx)));
          dst[y * w + x] = src[iy * s.w + ix];
        } else {
          const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(s.h - 1));
          const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(s.w - 1));
          const auto y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
          const std::size_t y1 = std::min(y0 + 1, s.h - 1), x1 = std::min(x0 + 1, s.w - 1);
          const double ay = fy - y0, ax = fx - x0;
          dst[y * w + x] = static_cast<float>(
              (1 - ay) * ((1 - ax) * src[y0 * s.w + x0] + ax * src[y0 * s.w + x1]) +
              ay * ((1 - ax) * src[y1 * s.w + x0] + ax * src[y1 * s.w + x1]));
        }
      }
    }
  }
  if (method == MaskResize::bilinear) out.encoding = MaskEncoding::soft;
  return out;
}

// ---------------------------------------------------------------------------
// SPADE

SpadeSubnet SpadeSubnet::make(const std::string& prefix, std::size_t channels,
                              std::size_t mask_channels, std::mt19937_64& rng) {
  if (channels < 2) throw ConfigError("SPADE needs at least 2 feature channels");
  if (mask_channels == 0) throw ConfigError("SPADE needs a non-empty label set");
  SpadeSubnet s;
  s.channels = channels;
  s.mask_channels = mask_channels;
  s.hidden = spade_hidden_width(channels);
  const auto g = ParamGroup::norm_spade;
  s.shared_w = Parameter(prefix + ".shared_conv.weight", g, he_normal(Shape{s.hidden, mask_channels, 3, 3}, rng));
  s.shared_b = Parameter(prefix + ".shared_conv.bias", g, Tensor(Shape{1, s.hidden, 1, 1}));
  // Small output convs so gamma starts near 1 and beta near 0.
  s.gamma_w = Parameter(prefix + ".gamma_conv.weight", g, he_normal(Shape{channels, s.hidden, 3, 3}, rng, 0.1f));
  s.gamma_b = Parameter(prefix + ".gamma_conv.bias", g, Tensor(Shape{1, channels, 1, 1}, 1.0f));
  s.beta_w = Parameter(prefix + ".beta_conv.weight", g, he_normal(Shape{channels, s.hidden, 3, 3}, rng, 0.1f));
  s.beta_b = Parameter(prefix + ".beta_conv.bias", g, Tensor(Shape{1, channels, 1, 1}));
  return s;
}

void SpadeSubnet::set_neutral() {
  for (Parameter* p : parameters()) p->value.fill(0.0f);
  gamma_b.value.fill(1.0f);
}

std::vector<Parameter*> SpadeSubnet::parameters() {
  return {&shared_w, &shared_b, &gamma_w, &gamma_b, &beta_w, &beta_b};
}

std::size_t SpadeSubnet::parameter_count() const {
  return shared_w.value.size() + shared_b.value.size() + gamma_w.value.size() +
         gamma_b.value.size() + beta_w.value.size() + beta_b.value.size();
}

SpadeModulation spade_modulation(Tape& tape, Var mask, SpadeSubnet& s) {
  if (mask.shape().c != s.mask_channels) {
    throw ShapeError("SPADE mask has " + std::to_string(mask.shape().c) + " channels, expected |L| = " +
                     std::to_string(s.mask_channels));
  }
  Var hidden = ops::relu(ops::conv2d(mask, tape.parameter(s.shared_w), tape.parameter(s.shared_b), 1, 1));
  Var gamma = ops::conv2d(hidden, tape.parameter(s.gamma_w), tape.parameter(s.gamma_b), 1, 1);
  Var beta = ops::conv2d(hidden, tape.parameter(s.beta_w), tape.parameter(s.beta_b), 1, 1);
  return {gamma, beta};
}

Var spade_forward(Tape& tape, Var x, Var mask, SpadeSubnet& s, const NormCore& core) {
  const Shape xs = x.shape(), ms = mask.shape();
  if (xs.c != s.channels) {
    throw ShapeError("spade_forward: input has " + std::to_string(xs.c) + " channels, subnet expects " +
                     std::to_string(s.channels));
  }
  if (ms.c != s.mask_channels) {
    throw ShapeError("spade_forward: mask has " + std::to_string(ms.c) + " channels, expected " +
                     std::to_string(s.mask_channels));
  }
  if (ms.n != xs.n || ms.h != xs.h || ms.w != xs.w) {
    throw ShapeError("spade_forward: mask " + ms.str() + " not resized to features " + xs.str());
  }
  Var xhat = standardize(x, core);
  SpadeModulation mod = spade_modulation(tape, mask, s);
  return ops::add(ops::mul(mod.gamma, xhat), mod.beta);
}

// ---------------------------------------------------------------------------
// residual block

void DnrbConfig::validate() const {
  if (in_channels == 0 || channels == 0) throw ConfigError("residual block needs positive channel counts");
  if (dual) {
    if (kind != NormKind::batch) throw ConfigError("dual normalization requires the BN kind");
    if (channels < 2) throw ConfigError("dual block needs C >= 2 for a SPADE hidden width >= 1");
    if (mask_channels == 0) throw ConfigError("dual block needs |L| >= 1 mask channels");
  }
  if (kind == NormKind::group && (gn_groups == 0 || channels % gn_groups != 0)) {
    throw ConfigError("GN group count " + std::to_string(gn_groups) + " does not divide " +
                      std::to_string(channels));
  }
}

namespace {

NormSite make_site(const std::string& block_prefix, int index, const DnrbConfig& cfg,
                   std::mt19937_64& rng) {
  NormSite site;
  site.kind = cfg.kind;
  const std::string idx = std::to_string(index);
  switch (cfg.kind) {
    case NormKind::batch: site.bn = BnParams::make(block_prefix + ".bn" + idx, cfg.channels); break;
    case NormKind::instance:
      site.group = GroupNormParams::make(block_prefix + ".in" + idx, cfg.channels, cfg.channels);
      break;
    case NormKind::layer: site.group = GroupNormParams::make(block_prefix + ".ln" + idx, cfg.channels, 1); break;
    case NormKind::group:
      site.group = GroupNormParams::make(block_prefix + ".gn" + idx, cfg.channels, cfg.gn_groups);
      break;
  }
  if (cfg.dual) {
    site.spade = SpadeSubnet::make(block_prefix + ".spade" + idx, cfg.channels, cfg.mask_channels, rng);
  }
  site.spade_running = fresh_stats(cfg.channels);
  return site;
}

}  // namespace

ResidualBlock::ResidualBlock(std::string prefix, const DnrbConfig& cfg, std::mt19937_64& rng)
    : prefix_(std::move(prefix)), cfg_(cfg) {
  cfg_.validate();
  const std::string p = prefix_ + ".dnrb";
  const auto g = ParamGroup::shared;
  conv1_w_ = Parameter(p + ".conv1.weight", g, he_normal(Shape{cfg.channels, cfg.in_channels, 3, 3}, rng));
  conv1_b_ = Parameter(p + ".conv1.bias", g, Tensor(Shape{1, cfg.channels, 1, 1}));
  conv2_w_ = Parameter(p + ".conv2.weight", g, he_normal(Shape{cfg.channels, cfg.channels, 3, 3}, rng));
  conv2_b_ = Parameter(p + ".conv2.bias", g, Tensor(Shape{1, cfg.channels, 1, 1}));
  if (cfg.in_channels != cfg.channels) {
    proj_w_ = Parameter(p + ".proj.weight", g, he_normal(Shape{cfg.channels, cfg.in_channels, 1, 1}, rng));
    proj_b_ = Parameter(p + ".proj.bias", g, Tensor(Shape{1, cfg.channels, 1, 1}));
  }
  norm1_ = make_site(p, 1, cfg_, rng);
  norm2_ = make_site(p, 2, cfg_, rng);
}

Var ResidualBlock::norm(Tape& tape, Var h, NormSite& site, const BlockContext& ctx) {
  if (site.kind != NormKind::batch) return group_norm_forward(tape, h, site.group);
  if (ctx.branch == Branch::spade && site.spade) {
    if (ctx.mask == nullptr) throw ContractError(prefix_ + ": SPADE branch requires a mask");
    const Shape s = h.shape();
    SemanticMask resized = resize_mask(*ctx.mask, s.h, s.w, cfg_.mask_resize);
    if (resized.values.shape().n != s.n) {
      throw ShapeError(prefix_ + ": mask batch " + std::to_string(resized.values.shape().n) +
                       " does not match features " + s.str());
    }
    Var mask = tape.constant(std::move(resized.values));
    return spade_forward(tape, h, mask, *site.spade,
                         NormCore{&site.spade_running, site.bn.eps, site.bn.momentum, ctx.mode, ctx.update_running});
  }
  RunningStats* stats = ctx.spade_path_stats ? &site.spade_running : &site.bn.running;
  Var xhat = standardize(h, NormCore{stats, site.bn.eps, site.bn.momentum, ctx.mode, ctx.update_running});
  return ops::channel_affine(xhat, tape.parameter(site.bn.gamma), tape.parameter(site.bn.beta));
}

Var ResidualBlock::forward(Tape& tape, Var x, const BlockContext& ctx) {
  if (x.shape().c != cfg_.in_channels) {
    throw ShapeError(prefix_ + ": input has " + std::to_string(x.shape().c) + " channels, expected " +
                     std::to_string(cfg_.in_channels));
  }
  if (ctx.branch == Branch::spade && cfg_.dual && ctx.mask == nullptr) {
    throw ContractError(prefix_ + ": SPADE branch requires a mask");
  }
  Var h = ops::conv2d(x, tape.parameter(conv1_w_), tape.parameter(conv1_b_), 1, 1);
  h = ops::relu(norm(tape, h, norm1_, ctx));
  h = ops::conv2d(h, tape.parameter(conv2_w_), tape.parameter(conv2_b_), 1, 1);
  h = norm(tape, h, norm2_, ctx);
  Var skip = proj_w_ ? ops::conv2d(x, tape.parameter(*proj_w_), tape.parameter(*proj_b_), 1, 0) : x;
  return ops::relu(ops::add(h, skip));
}

std::vector<Parameter*> ResidualBlock::parameters() {
  std::vector<Parameter*> out{&conv1_w_, &conv1_b_, &conv2_w_, &conv2_b_};
  if (proj_w_) {
    out.push_back(&*proj_w_);
    out.push_back(&*proj_b_);
  }
  for (NormSite* site : {&norm1_, &norm2_}) {
    if (site->kind == NormKind::batch) {
      out.push_back(&site->bn.gamma);
      out.push_back(&site->bn.beta);
    } else {
      out.push_back(&site->group.gamma);
      out.push_back(&site->group.beta);
    }
    if (site->spade) {
      for (Parameter* p : site->spade->parameters()) out.push_back(p);
    }
  }
  return out;
}

std::vector<std::pair<std::string, RunningStats*>> ResidualBlock::buffers() {
  std::vector<std::pair<std::string, RunningStats*>> out;
  int i = 1;
  for (NormSite* site : {&norm1_, &norm2_}) {
    if (site->kind == NormKind::batch) {
      const std::string base = prefix_ + ".dnrb.bn" + std::to_string(i);
      out.emplace_back(base + ".running", &site->bn.running);
      out.emplace_back(base + ".spade_running", &site->spade_running);
    }
    ++i;
  }
  return out;
}

Var dnrb_forward(Tape& tape, Var x, const SemanticMask* mask, ResidualBlock& block, Branch branch,
                 Mode mode) {
  BlockContext ctx;
  ctx.branch = branch;
  ctx.mode = mode;
  ctx.mask = mask;
  if (branch == Branch::spade && mask == nullptr) {
    throw ContractError("dnrb_forward: SPADE branch requires a mask");
  }
  return block.forward(tape, x, ctx);
}

}  // namespace dualnorm
