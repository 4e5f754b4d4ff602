#pragma once

#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "dualnorm/data.hpp"

namespace dualnorm {

/// Intensity statistics of one class region in one case.
struct ClassStats {
  int domain_id = 0;
  std::size_t case_id = 0;
  int cls = 0;
  std::size_t pixel_count = 0;
  double mean = 0.0;
  /// Population standard deviation.
  double std = 0.0;
};

/// Population statistics of the per-case statistics of one class, taken over
/// the cases where the class is present.
struct ClassAggregate {
  std::size_t cases = 0;
  double mean_of_means = 0.0;
  double mean_of_stds = 0.0;
  double std_of_means = 0.0;
  double std_of_stds = 0.0;
};

struct DomainStats {
  int domain_id = 0;
  std::vector<ClassStats> records;
  std::map<int, ClassAggregate> aggregate;

  const ClassStats* find(std::size_t case_id, int cls) const;
};

/// Per-case per-class statistics. Classes with no pixels in a case get no record.
DomainStats collect_stats(const DomainDataset& d);
/// Same statistics with every pixel in the single pseudo-class 0.
DomainStats collect_global_stats(const DomainDataset& d);

struct AlignOptions {
  /// Spreads at or below eps switch the mapping to shift-only.
  double eps = 1e-8;
  /// Classes to adjust; empty means all.
  std::set<int> classes;
};

struct AlignResult {
  DomainDataset aligned;
  /// One line per class that could not be aligned.
  std::vector<std::string> warnings;
};

/// Maps every case's class-wise mean and std onto the target domain's
/// distribution of those statistics and resynthesizes the class pixels.
AlignResult align_region_wise(const DomainDataset& source, const DomainStats& target, const AlignOptions& opt = {});
AlignResult align_region_wise(const DomainDataset& source, const DomainDataset& target, const AlignOptions& opt = {});

/// Whole-image variant: one pseudo-class covering all pixels. target must come
/// from collect_global_stats.
AlignResult align_global(const DomainDataset& source, const DomainStats& target, double eps = 1e-8);
AlignResult align_global(const DomainDataset& source, const DomainDataset& target, double eps = 1e-8);

/// domain,stage,class,cases,mean_of_means,std_of_means,mean_of_stds,std_of_stds
void write_stats_csv(std::ostream& out, const std::vector<std::pair<std::string, const DomainStats*>>& rows);

/// Normalized per-domain per-class intensity histograms over a common range:
/// domain,class,bin,lo,hi,mass
void histogram_report(std::ostream& out, const std::vector<const DomainDataset*>& datasets, std::size_t bins);

}  // namespace dualnorm
