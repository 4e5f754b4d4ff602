#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dualnorm/align.hpp"
#include "dualnorm/training.hpp"
#include "json.hpp"

namespace dualnorm {

// Everything an experiment needs, loaded from one JSON document. Every field
// has a default; unknown keys are errors.

struct DataSection {
  std::size_t domains = 2;
  std::size_t cases = 20;
  /// Held-out cases per domain used by sweep and the experiment helpers.
  std::size_t val_cases = 10;
  std::size_t size = 32;
  std::size_t num_classes = 3;
  double shift = 0.8;
  double case_jitter = 0.2;
  double noise = 0.0;
  std::size_t blobs_min = 1;
  std::size_t blobs_max = 2;
  double radius_min = 3.0;
  double radius_max = 7.0;
  double min_background = 0.6;
  /// Per-case z-score before training and evaluation.
  bool zscore = true;
};

struct NetSection {
  /// bn, in, ln, gn or dualnorm.
  std::string norm = "bn";
  std::vector<int> dual_blocks;
  std::size_t base_width = 8;
  std::size_t gn_groups = 4;
  std::string mask_resize = "nearest";
};

struct TrainSection {
  std::size_t pretrain_iterations = 500;
  std::size_t iterations = 1500;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double plateau_factor = 0.5;
  int plateau_patience = 5;
  std::size_t plateau_window = 50;
  double plateau_threshold = 1e-4;
  double lr_min = 1e-6;
  double lambda = 0.5;
  double clamp_eps = 1e-7;
  bool augment = true;
  std::size_t checkpoint_every = 0;
};

struct AlignSection {
  /// none, region or global.
  std::string mode = "none";
  int target_domain = 0;
  double eps = 1e-8;
  std::size_t bins = 32;
};

struct EvalSection {
  /// spade runs the two-pass prediction, bn a single BN forward.
  std::string forward = "spade";
  double spacing = 1.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataSection data;
  NetSection net;
  TrainSection train;
  AlignSection align;
  EvalSection eval;

  /// Cross-field checks; throws ConfigError.
  void validate() const;

  NetConfig net_config() const;
  TrainConfig train_config() const;
  SynthConfig synth_config(int domain, bool validation) const;
};

ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);
/// Parses and validates; errors name the file.
ExperimentConfig load_experiment(const std::string& path);

/// Deterministic child seed for a named purpose.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

/// Raw synthetic domains (training or held-out split), one per configured domain.
std::vector<DomainDataset> make_domains(const ExperimentConfig& cfg, bool validation);
/// The per-case preprocessing applied before the network sees a dataset.
DomainDataset preprocess(const DomainDataset& d, const ExperimentConfig& cfg);

/// Aligns every dataset that is not the target domain onto target's
/// statistics. mode is region, global or none.
std::vector<DomainDataset> align_domains(const std::vector<DomainDataset>& domains, const DomainDataset& target,
                                         const std::string& mode, double eps,
                                         std::vector<std::string>* warnings = nullptr);

struct TrainedModel {
  SegNetwork net;
  TrainResult result;
};
/// Builds the configured network and trains it on preprocessed copies of
/// domains. Periodic checkpoints (train.checkpoint_every) go to checkpoint_path.
TrainedModel train_experiment(const ExperimentConfig& cfg, const std::vector<DomainDataset>& domains,
                              const std::string& checkpoint_path = "");

struct CaseMetrics {
  std::size_t case_id = 0;
  int cls = 0;
  std::optional<double> dice;
  std::optional<double> asd;
};

struct EvalReport {
  int domain_id = 0;
  std::vector<CaseMetrics> rows;
  /// Averages of the defined per-case values, index = class.
  std::vector<std::optional<double>> class_dice;
  std::vector<std::optional<double>> class_asd;
  /// Mean over cases of the foreground-class Dice mean.
  std::optional<double> mean_dice;
  /// Mean of the defined foreground per-case ASD values.
  std::optional<double> mean_asd;
};

enum class Forward { bn, spade };
Forward parse_forward(const std::string& s);

/// d must already be preprocessed.
EvalReport evaluate(SegNetwork& net, const DomainDataset& d, Forward forward, double spacing = 1.0);
/// Mean of the reports' mean Dice values.
double mean_dice(const std::vector<EvalReport>& reports);

/// domain,case,class,dice,asd with per-class mean rows (case = mean).
void write_eval_csv(std::ostream& out, const std::vector<EvalReport>& reports);

struct SweepRow {
  int position = 0;
  double dice = 0.0;
  std::optional<double> asd;
};
/// One DualNorm model per position, all trained with the same seed and
/// evaluated on the held-out split. Up to threads positions run concurrently.
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::vector<int>& positions, std::size_t threads);
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

/// "1,3,5" or "1..4" or a mix ("1..3,7"); duplicates rejected.
std::vector<int> parse_block_list(const std::string& s);

/// Value of DUALNORM_THREADS (default 1); ConfigError when malformed.
std::size_t thread_cap_from_env();

}  // namespace dualnorm
