#include "dualnorm/align.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>

#include "dualnorm/error.hpp"

namespace dualnorm {

namespace {

using Partition = std::vector<std::vector<int>>;

void require_labels(const DomainDataset& d, const char* what) {
  for (std::size_t k = 0; k < d.cases.size(); ++k) {
    if (d.cases[k].label.empty()) {
      throw ContractError(std::string(what) + ": alignment needs labels but case" + std::to_string(k) + " has none");
    }
  }
  d.validate();
}

Partition labels_of(const DomainDataset& d) {
  Partition p;
  for (const Case& c : d.cases) p.push_back(c.label);
  return p;
}

Partition single_region(const DomainDataset& d) {
  Partition p;
  for (const Case& c : d.cases) p.emplace_back(c.image.size(), 0);
  return p;
}

DomainStats stats_over(const DomainDataset& d, const Partition& part, std::size_t regions) {
  DomainStats out;
  out.domain_id = d.domain_id;
  for (std::size_t k = 0; k < d.cases.size(); ++k) {
    const Tensor& img = d.cases[k].image;
    std::vector<double> sum(regions, 0.0), sq(regions, 0.0);
    std::vector<std::size_t> count(regions, 0);
    for (std::size_t i = 0; i < img.size(); ++i) {
      const auto c = static_cast<std::size_t>(part[k][i]);
      sum[c] += img[i];
      ++count[c];
    }
    std::vector<double> mean(regions, 0.0);
    for (std::size_t c = 0; c < regions; ++c) {
      if (count[c] > 0) mean[c] = sum[c] / static_cast<double>(count[c]);
    }
    // Second pass around the mean; the one-pass formula loses precision on offset data.
    for (std::size_t i = 0; i < img.size(); ++i) {
      const auto c = static_cast<std::size_t>(part[k][i]);
      const double dv = img[i] - mean[c];
      sq[c] += dv * dv;
    }
    for (std::size_t c = 0; c < regions; ++c) {
      if (count[c] == 0) continue;
      out.records.push_back(ClassStats{d.domain_id, k, static_cast<int>(c), count[c], mean[c],
                                       std::sqrt(sq[c] / static_cast<double>(count[c]))});
    }
  }

  std::map<int, std::vector<const ClassStats*>> by_class;
  for (const ClassStats& r : out.records) by_class[r.cls].push_back(&r);
  for (const auto& [cls, rs] : by_class) {
    ClassAggregate a;
    a.cases = rs.size();
    const auto m = static_cast<double>(rs.size());
    for (const ClassStats* r : rs) {
      a.mean_of_means += r->mean / m;
      a.mean_of_stds += r->std / m;
    }
    double vm = 0.0, vs = 0.0;
    for (const ClassStats* r : rs) {
      vm += (r->mean - a.mean_of_means) * (r->mean - a.mean_of_means);
      vs += (r->std - a.mean_of_stds) * (r->std - a.mean_of_stds);
    }
    a.std_of_means = std::sqrt(vm / m);
    a.std_of_stds = std::sqrt(vs / m);
    out.aggregate[cls] = a;
  }
  return out;
}

/// Standardizes v within the source spread and restores it in the target's;
/// a degenerate source spread only moves the centre.
double remap(double v, double src_centre, double src_spread, double dst_centre, double dst_spread, double eps) {
  if (src_spread <= eps) return v - src_centre + dst_centre;
  return (v - src_centre) / src_spread * dst_spread + dst_centre;
}

AlignResult align_over(const DomainDataset& source, const Partition& part, std::size_t regions,
                       const DomainStats& target, const AlignOptions& opt, const char* what) {
  const DomainStats src = stats_over(source, part, regions);
  AlignResult result;
  result.aligned = source;

  std::set<int> active;
  for (const auto& [cls, agg] : src.aggregate) {
    if (!opt.classes.empty() && !opt.classes.contains(cls)) continue;
    if (!target.aggregate.contains(cls)) {
      result.warnings.push_back(std::string(what) + ": class " + std::to_string(cls) +
                                " is absent from the target domain; left unaligned");
      continue;
    }
    active.insert(cls);
  }

  for (const ClassStats& r : src.records) {
    if (!active.contains(r.cls)) continue;
    const ClassAggregate& s = src.aggregate.at(r.cls);
    const ClassAggregate& t = target.aggregate.at(r.cls);
    const double new_mean = remap(r.mean, s.mean_of_means, s.std_of_means, t.mean_of_means, t.std_of_means, opt.eps);
    const double new_std =
        std::max(0.0, remap(r.std, s.mean_of_stds, s.std_of_stds, t.mean_of_stds, t.std_of_stds, opt.eps));

    Tensor& img = result.aligned.cases[r.case_id].image;
    const std::vector<int>& lab = part[r.case_id];
    for (std::size_t i = 0; i < img.size(); ++i) {
      if (lab[i] != r.cls) continue;
      const double z = r.std > 0.0 ? (img[i] - r.mean) / r.std : 0.0;
      img[i] = static_cast<float>(z * new_std + new_mean);
    }
  }
  return result;
}

}  // namespace

const ClassStats* DomainStats::find(std::size_t case_id, int cls) const {
  for (const ClassStats& r : records) {
    if (r.case_id == case_id && r.cls == cls) return &r;
  }
  return nullptr;
}

DomainStats collect_stats(const DomainDataset& d) {
  require_labels(d, "collect_stats");
  return stats_over(d, labels_of(d), d.num_classes);
}

DomainStats collect_global_stats(const DomainDataset& d) { return stats_over(d, single_region(d), 1); }

AlignResult align_region_wise(const DomainDataset& source, const DomainStats& target, const AlignOptions& opt) {
  require_labels(source, "align_region_wise");
  return align_over(source, labels_of(source), source.num_classes, target, opt, "align_region_wise");
}

AlignResult align_region_wise(const DomainDataset& source, const DomainDataset& target, const AlignOptions& opt) {
  return align_region_wise(source, collect_stats(target), opt);
}

AlignResult align_global(const DomainDataset& source, const DomainStats& target, double eps) {
  // Labels are not needed by the whole-image mapping but the operation stays a
  // labeled-data tool like its region-wise counterpart.
  require_labels(source, "align_global");
  AlignOptions opt;
  opt.eps = eps;
  return align_over(source, single_region(source), 1, target, opt, "align_global");
}

AlignResult align_global(const DomainDataset& source, const DomainDataset& target, double eps) {
  return align_global(source, collect_global_stats(target), eps);
}

void write_stats_csv(std::ostream& out, const std::vector<std::pair<std::string, const DomainStats*>>& rows) {
  out << "domain,stage,class,cases,mean_of_means,std_of_means,mean_of_stds,std_of_stds\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& [stage, stats] : rows) {
    for (const auto& [cls, a] : stats->aggregate) {
      out << stats->domain_id << ',' << stage << ',' << cls << ',' << a.cases << ',' << a.mean_of_means << ','
          << a.std_of_means << ',' << a.mean_of_stds << ',' << a.std_of_stds << '\n';
    }
  }
}

void histogram_report(std::ostream& out, const std::vector<const DomainDataset*>& datasets, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram_report: bins must be positive");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const DomainDataset* d : datasets) {
    require_labels(*d, "histogram_report");
    for (const Case& c : d->cases) {
      for (float v : c.image.data()) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
      }
    }
  }
  if (!(hi > lo)) {
    if (!std::isfinite(lo)) lo = hi = 0.0;
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(bins);

  out << "domain,class,bin,lo,hi,mass\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const DomainDataset* d : datasets) {
    std::vector<std::vector<std::size_t>> counts(d->num_classes, std::vector<std::size_t>(bins, 0));
    std::vector<std::size_t> totals(d->num_classes, 0);
    for (const Case& c : d->cases) {
      for (std::size_t i = 0; i < c.image.size(); ++i) {
        auto b = static_cast<std::size_t>((c.image[i] - lo) / width);
        b = std::min(b, bins - 1);
        const auto cls = static_cast<std::size_t>(c.label[i]);
        ++counts[cls][b];
        ++totals[cls];
      }
    }
    for (std::size_t cls = 0; cls < d->num_classes; ++cls) {
      if (totals[cls] == 0) continue;
      for (std::size_t b = 0; b < bins; ++b) {
        out << d->domain_id << ',' << cls << ',' << b << ',' << lo + width * static_cast<double>(b) << ','
            << lo + width * static_cast<double>(b + 1) << ','
            << static_cast<double>(counts[cls][b]) / static_cast<double>(totals[cls]) << '\n';
      }
    }
  }
}

}  // namespace dualnorm
