#include "dualnorm/network.hpp"

#include <cmath>
#include <map>

#include "dualnorm/dnt.hpp"
#include "dualnorm/error.hpp"

namespace dualnorm {

void NetConfig::validate() const {
  if (in_channels == 0) throw ConfigError("net: in_channels must be positive");
  if (num_classes < 2) throw ConfigError("net: num_classes must be at least 2");
  if (base_width < 2) throw ConfigError("net: base_width must be at least 2");
  for (int b : dual_blocks) {
    if (b < 1 || b > kBlockCount) {
      throw ConfigError("net: dual block index " + std::to_string(b) + " outside 1..10");
    }
  }
  if (!dual_blocks.empty() && norm != NormKind::batch) {
    throw ConfigError(std::string("net: dual blocks require BN, got ") + to_string(norm));
  }
  if (norm == NormKind::group) {
    for (int b = 1; b <= kBlockCount; ++b) {
      if (gn_groups == 0 || block_channels(b) % gn_groups != 0) {
        throw ConfigError("net: gn_groups " + std::to_string(gn_groups) + " does not divide block " +
                          std::to_string(b) + " width");
      }
    }
  }
}

namespace {

// Resolution level (0 = full) at which block b runs.
int block_level(int b) { return b <= kEncoderBlocks ? b - 1 : kBlockCount - b; }

std::string block_name(int b) { return (b <= kEncoderBlocks ? "enc" : "dec") + std::to_string(b); }

}  // namespace

std::size_t NetConfig::block_channels(int block) const {
  return base_width << static_cast<unsigned>(block_level(block));
}

std::size_t NetConfig::block_in_channels(int block) const {
  if (block == 1) return in_channels;
  if (block <= kEncoderBlocks) return block_channels(block - 1);
  if (block == kEncoderBlocks + 1) return block_channels(kEncoderBlocks);
  // Upsampled previous decoder output concatenated with the matching encoder skip.
  return block_channels(block - 1) + block_channels(kBlockCount + 1 - block);
}

nlohmann::json to_json(const NetConfig& cfg) {
  return {{"in_channels", cfg.in_channels},
          {"num_classes", cfg.num_classes},
          {"base_width", cfg.base_width},
          {"norm", to_string(cfg.norm)},
          {"gn_groups", cfg.gn_groups},
          {"dual_blocks", std::vector<int>(cfg.dual_blocks.begin(), cfg.dual_blocks.end())},
          {"mask_resize", cfg.mask_resize == MaskResize::nearest ? "nearest" : "bilinear"}};
}

NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig cfg;
  try {
    cfg.in_channels = j.at("in_channels").get<std::size_t>();
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.base_width = j.at("base_width").get<std::size_t>();
    cfg.norm = parse_norm_kind(j.at("norm").get<std::string>());
    cfg.gn_groups = j.at("gn_groups").get<std::size_t>();
    for (int b : j.at("dual_blocks").get<std::vector<int>>()) cfg.dual_blocks.insert(b);
    const std::string resize = j.at("mask_resize").get<std::string>();
    if (resize != "nearest" && resize != "bilinear") throw ConfigError("net: unknown mask_resize " + resize);
    cfg.mask_resize = resize == "nearest" ? MaskResize::nearest : MaskResize::bilinear;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("net config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

SegNetwork SegNetwork::build(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SegNetwork net;
  net.cfg_ = cfg;
  std::mt19937_64 rng(seed);
  for (int b = 1; b <= kBlockCount; ++b) {
    DnrbConfig bc;
    bc.in_channels = cfg.block_in_channels(b);
    bc.channels = cfg.block_channels(b);
    bc.dual = cfg.dual_blocks.count(b) > 0;
    bc.mask_channels = cfg.num_classes;
    bc.mask_resize = cfg.mask_resize;
    bc.kind = cfg.norm;
    bc.gn_groups = cfg.gn_groups;
    net.blocks_.emplace_back(block_name(b), bc, rng);
  }
  const std::size_t c = cfg.block_channels(kBlockCount);
  // A small head keeps the untrained softmax close to uniform.
  net.head_w_ = Parameter("head.weight", ParamGroup::shared,
                          he_normal(Shape{cfg.num_classes, c, 1, 1}, rng, 0.1f));
  net.head_b_ = Parameter("head.bias", ParamGroup::shared, Tensor(Shape{1, cfg.num_classes, 1, 1}));
  return net;
}

void SegNetwork::check_input(const Shape& s) const {
  if (s.c != cfg_.in_channels) {
    throw ShapeError("net: input has " + std::to_string(s.c) + " channels, expected " +
                     std::to_string(cfg_.in_channels));
  }
  if (s.h % 16 != 0 || s.w % 16 != 0 || s.h == 0 || s.w == 0) {
    throw ShapeError("net: input spatial dims " + s.str() + " must be positive multiples of 16");
  }
}

Var SegNetwork::forward(Tape& tape, Var x, const BlockContext& base, const SemanticMask* mask) {
  check_input(x.shape());
  const bool spade = mask != nullptr;
  const int first_dual = has_dual() ? *cfg_.dual_blocks.begin() : kBlockCount + 1;
  auto run = [&](int b, Var in) {
    BlockContext ctx = base;
    if (spade) {
      ctx.branch = Branch::spade;
      ctx.mask = mask;
      // Blocks upstream of the first dual block see the same features in both
      // passes and keep using (and updating only via the BN pass) the BN statistics.
      ctx.spade_path_stats = b >= first_dual;
      if (b < first_dual) ctx.update_running = false;
    }
    return block(b).forward(tape, in, ctx);
  };

  std::vector<Var> skips;
  Var h = x;
  for (int b = 1; b <= kEncoderBlocks; ++b) {
    if (b > 1) h = ops::maxpool2x(h);
    h = run(b, h);
    skips.push_back(h);
  }
  h = run(kEncoderBlocks + 1, h);
  for (int b = kEncoderBlocks + 2; b <= kBlockCount; ++b) {
    h = ops::upsample_nearest2x(h);
    h = ops::concat_channels(h, skips[static_cast<std::size_t>(kBlockCount - b)]);
    h = run(b, h);
  }
  Var logits = ops::conv2d(h, tape.parameter(head_w_), tape.parameter(head_b_), 1, 0);
  return ops::softmax_channel(logits);
}

Var SegNetwork::forward_bn(Tape& tape, Var x, ForwardOptions opt) {
  BlockContext ctx;
  ctx.mode = opt.mode;
  ctx.update_running = opt.update_running;
  return forward(tape, x, ctx, nullptr);
}

Var SegNetwork::forward_spade(Tape& tape, Var x, const SemanticMask& mask, ForwardOptions opt) {
  if (!has_dual()) return forward_bn(tape, x, opt);
  const Shape xs = x.shape(), ms = mask.values.shape();
  if (ms.c != cfg_.num_classes) {
    throw ShapeError("net: mask has " + std::to_string(ms.c) + " channels, expected " +
                     std::to_string(cfg_.num_classes));
  }
  if (ms.n != xs.n || ms.h != xs.h || ms.w != xs.w) {
    throw ShapeError("net: mask " + ms.str() + " does not match input " + xs.str());
  }
  BlockContext ctx;
  ctx.mode = opt.mode;
  ctx.update_running = opt.update_running;
  return forward(tape, x, ctx, &mask);
}

std::vector<int> SegNetwork::predict_bn(const Tensor& x) {
  Tape tape;
  return argmax_channels(forward_bn(tape, tape.constant(x), {Mode::eval, false}).value());
}

std::vector<int> SegNetwork::predict(const Tensor& x, MaskEncoding encoding) {
  Tape tape;
  Var xv = tape.constant(x);
  Var yb = forward_bn(tape, xv, {Mode::eval, false});
  if (!has_dual()) return argmax_channels(yb.value());
  SemanticMask m = encoding == MaskEncoding::one_hot ? SemanticMask::from_argmax(yb.value())
                                                     : SemanticMask{yb.value(), MaskEncoding::soft};
  return argmax_channels(forward_spade(tape, xv, m, {Mode::eval, false}).value());
}

std::vector<Parameter*> SegNetwork::parameters() {
  std::vector<Parameter*> out;
  for (ResidualBlock& b : blocks_) {
    for (Parameter* p : b.parameters()) out.push_back(p);
  }
  out.push_back(&head_w_);
  out.push_back(&head_b_);
  return out;
}

std::vector<Parameter*> SegNetwork::parameters(ParamGroup group) {
  std::vector<Parameter*> out;
  for (Parameter* p : parameters()) {
    if (p->group == group) out.push_back(p);
  }
  return out;
}

std::size_t SegNetwork::parameter_count() {
  std::size_t n = 0;
  for (Parameter* p : parameters()) n += p->value.size();
  return n;
}

std::size_t SegNetwork::parameter_count(ParamGroup group) {
  std::size_t n = 0;
  for (Parameter* p : parameters(group)) n += p->value.size();
  return n;
}

std::vector<std::pair<std::string, RunningStats*>> SegNetwork::buffers() {
  std::vector<std::pair<std::string, RunningStats*>> out;
  for (ResidualBlock& b : blocks_) {
    for (auto& entry : b.buffers()) out.push_back(entry);
  }
  return out;
}

void SegNetwork::seed_spade_running_stats() {
  for (ResidualBlock& b : blocks_) {
    for (std::size_t i = 0; i < 2; ++i) {
      NormSite& s = b.site(i);
      if (s.kind == NormKind::batch) s.spade_running = s.bn.running;
    }
  }
}

// ---------------------------------------------------------------------------
// checkpoints

std::vector<NamedArray> network_state(SegNetwork& net) {
  std::vector<NamedArray> out;
  for (Parameter* p : net.parameters()) out.push_back(NamedArray::from_tensor(p->name, p->value));
  for (auto& [name, stats] : net.buffers()) {
    const auto c = static_cast<std::uint64_t>(stats->mean.size());
    out.push_back(NamedArray{name + ".mean", {c}, stats->mean});
    out.push_back(NamedArray{name + ".var", {c}, stats->var});
  }
  return out;
}

void load_network_state(SegNetwork& net, const std::vector<NamedArray>& arrays) {
  std::map<std::string, const NamedArray*> by_name;
  for (const NamedArray& a : arrays) {
    if (!by_name.emplace(a.name, &a).second) throw IntegrityError("checkpoint: duplicate array " + a.name);
  }
  std::size_t used = 0;
  auto take = [&](const std::string& name) -> const NamedArray& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IntegrityError("checkpoint: missing array " + name);
    ++used;
    return *it->second;
  };
  for (Parameter* p : net.parameters()) {
    Tensor t = take(p->name).to_tensor();
    if (t.shape() != p->value.shape()) {
      throw IntegrityError("checkpoint: " + p->name + " has shape " + t.shape().str() + ", expected " +
                           p->value.shape().str());
    }
    p->value = std::move(t);
    p->zero_grad();
  }
  for (auto& [name, stats] : net.buffers()) {
    const NamedArray& m = take(name + ".mean");
    const NamedArray& v = take(name + ".var");
    if (m.data.size() != stats->mean.size() || v.data.size() != stats->var.size()) {
      throw IntegrityError("checkpoint: buffer " + name + " has the wrong channel count");
    }
    stats->mean = m.data;
    stats->var = v.data;
  }
  if (used != arrays.size()) throw IntegrityError("checkpoint: contains arrays the network does not have");
}

void save_checkpoint(SegNetwork& net, const std::string& path, const nlohmann::json& meta) {
  const std::vector<std::uint8_t> bytes = encode_dnt(network_state(net));
  write_file_bytes(path, bytes);
  nlohmann::json side = {{"format", "dualnorm-checkpoint"},
                         {"net", to_json(net.config())},
                         {"meta", meta.is_null() ? nlohmann::json::object() : meta},
                         {"checksum", fnv1a_hex(bytes)}};
  const std::string text = side.dump(2) + "\n";
  write_file_bytes(path + ".json", std::vector<std::uint8_t>(text.begin(), text.end()));
}

Checkpoint load_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IntegrityError("checkpoint " + path + " does not exist");
  const std::vector<std::uint8_t> side_bytes = read_file_bytes(path + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(side_bytes.begin(), side_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("checkpoint sidecar " + path + ".json: " + e.what());
  }
  if (!side.is_object() || side.value("format", "") != "dualnorm-checkpoint") {
    throw IntegrityError("checkpoint sidecar " + path + ".json: not a checkpoint description");
  }
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (side.value("checksum", "") != fnv1a_hex(bytes)) {
    throw IntegrityError("checkpoint " + path + ": checksum mismatch");
  }
  Checkpoint ck{SegNetwork::build(net_config_from_json(side.at("net")), 0), side.value("meta", nlohmann::json::object())};
  load_network_state(ck.net, decode_dnt(bytes));
  return ck;
}

}  // namespace dualnorm
