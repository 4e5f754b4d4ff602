#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "dualnorm/dnt.hpp"
#include "dualnorm/layers.hpp"
#include "json.hpp"

namespace dualnorm {

inline constexpr int kBlockCount = 10;
inline constexpr int kEncoderBlocks = 5;

struct NetConfig {
  std::size_t in_channels = 1;
  std::size_t num_classes = 3;
  std::size_t base_width = 8;
  NormKind norm = NormKind::batch;
  std::size_t gn_groups = 4;
  /// 1-based block indices: 1..5 encoder, 6..10 decoder.
  std::set<int> dual_blocks;
  MaskResize mask_resize = MaskResize::nearest;

  void validate() const;
  std::size_t block_channels(int block) const;
  std::size_t block_in_channels(int block) const;
};

nlohmann::json to_json(const NetConfig& cfg);
NetConfig net_config_from_json(const nlohmann::json& j);

struct ForwardOptions {
  Mode mode = Mode::train;
  bool update_running = true;
};

/// Residual U-Net. Encoder block k runs at 1/2^(k-1) resolution; decoder block
/// 11-k consumes the skip from encoder block k.
class SegNetwork {
 public:
  static SegNetwork build(const NetConfig& cfg, std::uint64_t seed);

  /// Softmax map with every dual site on the BN branch.
  Var forward_bn(Tape& tape, Var x, ForwardOptions opt = {});
  /// Softmax map with dual sites on the SPADE branch conditioned on mask.
  /// Without dual blocks this is forward_bn and the mask is ignored.
  Var forward_spade(Tape& tape, Var x, const SemanticMask& mask, ForwardOptions opt = {});

  /// argmax of forward_spade conditioned on one_hot(argmax forward_bn), in eval mode.
  std::vector<int> predict(const Tensor& x, MaskEncoding encoding = MaskEncoding::one_hot);
  /// argmax of a single forward_bn in eval mode.
  std::vector<int> predict_bn(const Tensor& x);

  const NetConfig& config() const { return cfg_; }
  bool has_dual() const { return !cfg_.dual_blocks.empty(); }
  ResidualBlock& block(int index) { return blocks_.at(static_cast<std::size_t>(index - 1)); }

  std::vector<Parameter*> parameters();
  std::vector<Parameter*> parameters(ParamGroup group);
  std::size_t parameter_count();
  std::size_t parameter_count(ParamGroup group);
  std::vector<std::pair<std::string, RunningStats*>> buffers();

  /// Copies every BN site's running statistics into its SPADE-path slot.
  void seed_spade_running_stats();

 private:
  Var forward(Tape& tape, Var x, const BlockContext& base, const SemanticMask* mask);
  void check_input(const Shape& s) const;

  NetConfig cfg_;
  std::vector<ResidualBlock> blocks_;
  Parameter head_w_, head_b_;
};

/// Parameters and buffers as a DNT1 container.
std::vector<NamedArray> network_state(SegNetwork& net);
void load_network_state(SegNetwork& net, const std::vector<NamedArray>& arrays);

/// Writes path (DNT1) and path + ".json" (config, metadata, checksum).
void save_checkpoint(SegNetwork& net, const std::string& path, const nlohmann::json& meta = {});
struct Checkpoint {
  SegNetwork net;
  nlohmann::json meta;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dualnorm
