#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dualnorm/tensor.hpp"

namespace dualnorm {

/// One labeled 2D case: a 1x1xHxW image and H*W class indices.
struct Case {
  Tensor image;
  std::vector<int> label;

  std::size_t height() const { return image.shape().h; }
  std::size_t width() const { return image.shape().w; }
};

struct DomainDataset {
  int domain_id = 0;
  std::size_t num_classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Case> cases;

  /// Throws ContractError naming the first offending case.
  void validate() const;
  bool operator==(const DomainDataset& o) const;
};

struct ClassIntensity {
  double mean = 0.0;
  double std = 1.0;
};

struct SynthConfig {
  int domain_id = 0;
  std::size_t num_classes = 3;
  /// Pixel intensity distribution per class, background first.
  std::vector<ClassIntensity> intensity{{0.0, 1.0}, {2.0, 1.0}, {4.0, 1.0}};
  /// Per-case offset of each class mean, drawn from N(0, case_jitter^2).
  double case_jitter = 0.2;
  std::size_t blobs_min = 1;
  std::size_t blobs_max = 2;
  double radius_min = 3.0;
  double radius_max = 7.0;
  std::size_t size = 32;
  /// Additive white noise on top of the class intensities.
  double noise = 0.0;
  std::size_t num_cases = 20;
  double min_background = 0.6;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Class-wise domain shift used by the default multi-domain setup: domain d moves
/// class c's mean (2c at domain 0) by d * shift * pattern[c], pattern alternating +1, -1, +1, ...
SynthConfig default_synth_config(int domain, std::uint64_t seed, double shift = 0.8, std::size_t num_classes = 3);

DomainDataset generate_domain(const SynthConfig& cfg);

Case rotate90(const Case& c, int quarter_turns);
Case hflip(const Case& c);

struct AugmentOps {
  bool rotate90s = true;
  bool hflip = true;
};
/// Random multiple-of-90-degree rotation and horizontal flip, same transform on image and label.
Case augment(const Case& c, const AugmentOps& ops, std::uint64_t seed);

/// Per-case whole-image mean 0, std 1; constant images become zeros.
DomainDataset zscore_normalize(const DomainDataset& d, double eps = 1e-8);

struct DiceResult {
  /// Index = class; nullopt when the class is absent from both masks.
  std::vector<std::optional<double>> per_class;
  /// Mean over defined foreground classes (1..L-1).
  std::optional<double> mean;
};
DiceResult dice_metric(const std::vector<int>& pred, const std::vector<int>& truth, std::size_t num_classes);

/// A class pixel is on the boundary when it touches the image border or a
/// 4-neighbour of another class.
std::vector<std::size_t> boundary_pixels(const std::vector<int>& mask, std::size_t h, std::size_t w, int cls);

/// Average symmetric surface distance; nullopt when the class is empty in either mask.
std::optional<double> asd_metric(const std::vector<int>& pred, const std::vector<int>& truth, std::size_t h,
                                 std::size_t w, int cls, double spacing = 1.0);

/// <base>.dnt holds caseK.image / caseK.label; <base>.json is the manifest.
void write_dataset(const DomainDataset& d, const std::filesystem::path& base);
DomainDataset read_dataset(const std::filesystem::path& base);
/// Strips a trailing .dnt or .json so either file names the dataset.
std::filesystem::path dataset_base(const std::filesystem::path& p);

}  // namespace dualnorm
