#include "dualnorm/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "dualnorm/error.hpp"

namespace dualnorm {

using nlohmann::json;

namespace {

/// Strict reader over one JSON object: typed lookups, then finish() rejects
/// any key that was never asked for.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const json& v = *it;
    const std::string where = name_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) throw ConfigError(where + ": expected an array of integers");
      out.clear();
      for (const json& e : v) {
        if (!e.is_number_integer()) throw ConfigError(where + ": expected an array of integers");
        out.push_back(e.get<int>());
      }
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.get<long long>() < 0) throw ConfigError(where + ": must be non-negative");
      }
      out = v.get<T>();
    } else {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
      out = v.get<T>();
    }
  }

  Section sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    static const json empty = json::object();
    return Section(it == j_.end() ? empty : *it, key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(name_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

const std::set<std::string> kNorms{"bn", "in", "ln", "gn", "dualnorm"};

}  // namespace

void ExperimentConfig::validate() const {
  if (data.domains == 0) throw ConfigError("data.domains must be positive");
  if (data.cases == 0) throw ConfigError("data.cases must be positive");
  if (data.size == 0 || data.size % 16 != 0) {
    throw ConfigError("data.size " + std::to_string(data.size) + " must be a positive multiple of 16");
  }
  if (!kNorms.contains(net.norm)) throw ConfigError("net.norm: unknown normalization '" + net.norm + "'");
  if (net.norm == "dualnorm" && net.dual_blocks.empty()) {
    throw ConfigError("net.norm dualnorm needs at least one entry in net.dual_blocks");
  }
  if (net.norm != "dualnorm" && !net.dual_blocks.empty()) {
    throw ConfigError("net.dual_blocks is only valid with net.norm dualnorm, got " + net.norm);
  }
  if (std::set<int>(net.dual_blocks.begin(), net.dual_blocks.end()).size() != net.dual_blocks.size()) {
    throw ConfigError("net.dual_blocks has duplicates");
  }
  if (align.mode != "none" && align.mode != "region" && align.mode != "global") {
    throw ConfigError("align.mode must be none, region or global");
  }
  if (align.target_domain < 0 || static_cast<std::size_t>(align.target_domain) >= data.domains) {
    throw ConfigError("align.target_domain " + std::to_string(align.target_domain) + " is not a generated domain");
  }
  if (!(align.eps >= 0.0)) throw ConfigError("align.eps must be non-negative");
  if (align.bins == 0) throw ConfigError("align.bins must be positive");
  parse_forward(eval.forward);
  if (!(eval.spacing > 0.0)) throw ConfigError("eval.spacing must be positive");
  // The remaining constraints live with the structures they describe.
  net_config().validate();
  TrainConfig t = train_config();
  t.checkpoint_path = "checkpoint";  // the real path is chosen by the caller
  t.validate();
  synth_config(0, false).validate();
}

NetConfig ExperimentConfig::net_config() const {
  NetConfig n;
  n.num_classes = data.num_classes;
  n.base_width = net.base_width;
  n.gn_groups = net.gn_groups;
  n.norm = parse_norm_kind(net.norm == "dualnorm" ? "bn" : net.norm);
  n.dual_blocks = std::set<int>(net.dual_blocks.begin(), net.dual_blocks.end());
  if (net.mask_resize == "nearest") {
    n.mask_resize = MaskResize::nearest;
  } else if (net.mask_resize == "bilinear") {
    n.mask_resize = MaskResize::bilinear;
  } else {
    throw ConfigError("net.mask_resize must be nearest or bilinear");
  }
  return n;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.pretrain_iterations = train.pretrain_iterations;
  t.iterations = train.iterations;
  t.batch_size = train.batch_size;
  t.adam = AdamConfig{train.lr, train.beta1, train.beta2, train.adam_eps};
  t.plateau = PlateauConfig{train.plateau_factor, train.plateau_patience, train.plateau_window, train.lr_min,
                            train.plateau_threshold};
  t.loss = LossConfig{train.lambda, train.clamp_eps};
  t.augment = train.augment;
  t.checkpoint_every = train.checkpoint_every;
  return t;
}

SynthConfig ExperimentConfig::synth_config(int domain, bool validation) const {
  SynthConfig s = default_synth_config(domain, derive_seed(seed, static_cast<std::uint64_t>(domain), validation ? 2 : 1),
                                       data.shift, data.num_classes);
  s.num_cases = validation ? data.val_cases : data.cases;
  s.size = data.size;
  s.case_jitter = data.case_jitter;
  s.noise = data.noise;
  s.blobs_min = data.blobs_min;
  s.blobs_max = data.blobs_max;
  s.radius_min = data.radius_min;
  s.radius_max = data.radius_max;
  s.min_background = data.min_background;
  return s;
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "config");
  root.get("seed", c.seed);

  Section d = root.sub("data");
  d.get("domains", c.data.domains);
  d.get("cases", c.data.cases);
  d.get("val_cases", c.data.val_cases);
  d.get("size", c.data.size);
  d.get("num_classes", c.data.num_classes);
  d.get("shift", c.data.shift);
  d.get("case_jitter", c.data.case_jitter);
  d.get("noise", c.data.noise);
  d.get("blobs_min", c.data.blobs_min);
  d.get("blobs_max", c.data.blobs_max);
  d.get("radius_min", c.data.radius_min);
  d.get("radius_max", c.data.radius_max);
  d.get("min_background", c.data.min_background);
  d.get("zscore", c.data.zscore);
  d.finish();

  Section n = root.sub("net");
  n.get("norm", c.net.norm);
  n.get("dual_blocks", c.net.dual_blocks);
  n.get("base_width", c.net.base_width);
  n.get("gn_groups", c.net.gn_groups);
  n.get("mask_resize", c.net.mask_resize);
  n.finish();

  Section t = root.sub("train");
  t.get("pretrain_iterations", c.train.pretrain_iterations);
  t.get("iterations", c.train.iterations);
  t.get("batch_size", c.train.batch_size);
  t.get("lr", c.train.lr);
  t.get("beta1", c.train.beta1);
  t.get("beta2", c.train.beta2);
  t.get("adam_eps", c.train.adam_eps);
  t.get("plateau_factor", c.train.plateau_factor);
  t.get("plateau_patience", c.train.plateau_patience);
  t.get("plateau_window", c.train.plateau_window);
  t.get("plateau_threshold", c.train.plateau_threshold);
  t.get("lr_min", c.train.lr_min);
  t.get("lambda", c.train.lambda);
  t.get("clamp_eps", c.train.clamp_eps);
  t.get("augment", c.train.augment);
  t.get("checkpoint_every", c.train.checkpoint_every);
  t.finish();

  Section a = root.sub("align");
  a.get("mode", c.align.mode);
  a.get("target_domain", c.align.target_domain);
  a.get("eps", c.align.eps);
  a.get("bins", c.align.bins);
  a.finish();

  Section e = root.sub("eval");
  e.get("forward", c.eval.forward);
  e.get("spacing", c.eval.spacing);
  e.finish();

  root.finish();
  return c;
}

json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"data",
           {{"domains", c.data.domains},
            {"cases", c.data.cases},
            {"val_cases", c.data.val_cases},
            {"size", c.data.size},
            {"num_classes", c.data.num_classes},
            {"shift", c.data.shift},
            {"case_jitter", c.data.case_jitter},
            {"noise", c.data.noise},
            {"blobs_min", c.data.blobs_min},
            {"blobs_max", c.data.blobs_max},
            {"radius_min", c.data.radius_min},
            {"radius_max", c.data.radius_max},
            {"min_background", c.data.min_background},
            {"zscore", c.data.zscore}}},
          {"net",
           {{"norm", c.net.norm},
            {"dual_blocks", c.net.dual_blocks},
            {"base_width", c.net.base_width},
            {"gn_groups", c.net.gn_groups},
            {"mask_resize", c.net.mask_resize}}},
          {"train",
           {{"pretrain_iterations", c.train.pretrain_iterations},
            {"iterations", c.train.iterations},
            {"batch_size", c.train.batch_size},
            {"lr", c.train.lr},
            {"beta1", c.train.beta1},
            {"beta2", c.train.beta2},
            {"adam_eps", c.train.adam_eps},
            {"plateau_factor", c.train.plateau_factor},
            {"plateau_patience", c.train.plateau_patience},
            {"plateau_window", c.train.plateau_window},
            {"plateau_threshold", c.train.plateau_threshold},
            {"lr_min", c.train.lr_min},
            {"lambda", c.train.lambda},
            {"clamp_eps", c.train.clamp_eps},
            {"augment", c.train.augment},
            {"checkpoint_every", c.train.checkpoint_every}}},
          {"align",
           {{"mode", c.align.mode},
            {"target_domain", c.align.target_domain},
            {"eps", c.align.eps},
            {"bins", c.align.bins}}},
          {"eval", {{"forward", c.eval.forward}, {"spacing", c.eval.spacing}}}};
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  try {
    ExperimentConfig c = experiment_from_json(j);
    c.validate();
    return c;
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the mixed inputs
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<DomainDataset> make_domains(const ExperimentConfig& cfg, bool validation) {
  std::vector<DomainDataset> out;
  for (std::size_t d = 0; d < cfg.data.domains; ++d) {
    out.push_back(generate_domain(cfg.synth_config(static_cast<int>(d), validation)));
  }
  return out;
}

DomainDataset preprocess(const DomainDataset& d, const ExperimentConfig& cfg) {
  return cfg.data.zscore ? zscore_normalize(d) : d;
}

std::vector<DomainDataset> align_domains(const std::vector<DomainDataset>& domains, const DomainDataset& target,
                                         const std::string& mode, double eps, std::vector<std::string>* warnings) {
  if (mode == "none") return domains;
  if (mode != "region" && mode != "global") throw ConfigError("align mode must be none, region or global");
  const DomainStats stats = mode == "region" ? collect_stats(target) : collect_global_stats(target);
  std::vector<DomainDataset> out;
  for (const DomainDataset& d : domains) {
    if (d.domain_id == target.domain_id) {
      out.push_back(d);
      continue;
    }
    AlignOptions opt;
    opt.eps = eps;
    AlignResult r = mode == "region" ? align_region_wise(d, stats, opt) : align_global(d, stats, eps);
    if (warnings != nullptr) warnings->insert(warnings->end(), r.warnings.begin(), r.warnings.end());
    out.push_back(std::move(r.aligned));
  }
  return out;
}

TrainedModel train_experiment(const ExperimentConfig& cfg, const std::vector<DomainDataset>& domains,
                              const std::string& checkpoint_path) {
  std::vector<DomainDataset> ready;
  for (const DomainDataset& d : domains) ready.push_back(preprocess(d, cfg));
  std::vector<const DomainDataset*> ptrs;
  for (const DomainDataset& d : ready) ptrs.push_back(&d);
  TrainedModel m{SegNetwork::build(cfg.net_config(), derive_seed(cfg.seed, 100)), {}};
  TrainConfig tc = cfg.train_config();
  tc.checkpoint_path = checkpoint_path;
  m.result = run_training(m.net, ptrs, tc, derive_seed(cfg.seed, 200));
  return m;
}

Forward parse_forward(const std::string& s) {
  if (s == "bn") return Forward::bn;
  if (s == "spade") return Forward::spade;
  throw ConfigError("forward must be bn or spade, got '" + s + "'");
}

EvalReport evaluate(SegNetwork& net, const DomainDataset& d, Forward forward, double spacing) {
  d.validate();
  const std::size_t classes = net.config().num_classes;
  if (d.num_classes != classes) {
    throw ContractError("evaluate: dataset has " + std::to_string(d.num_classes) + " classes, network " +
                        std::to_string(classes));
  }
  EvalReport r;
  r.domain_id = d.domain_id;
  std::vector<double> dsum(classes, 0.0), asum(classes, 0.0);
  std::vector<std::size_t> dn(classes, 0), an(classes, 0);
  double case_dice = 0.0, fg_asd = 0.0;
  std::size_t n_case_dice = 0, n_fg_asd = 0;
  for (std::size_t k = 0; k < d.cases.size(); ++k) {
    const Case& c = d.cases[k];
    const std::vector<int> pred = forward == Forward::spade ? net.predict(c.image) : net.predict_bn(c.image);
    const DiceResult dice = dice_metric(pred, c.label, classes);
    if (dice.mean) {
      case_dice += *dice.mean;
      ++n_case_dice;
    }
    for (std::size_t cls = 0; cls < classes; ++cls) {
      CaseMetrics m{k, static_cast<int>(cls), dice.per_class[cls],
                    asd_metric(pred, c.label, c.height(), c.width(), static_cast<int>(cls), spacing)};
      if (m.dice) {
        dsum[cls] += *m.dice;
        ++dn[cls];
      }
      if (m.asd) {
        asum[cls] += *m.asd;
        ++an[cls];
        if (cls > 0) {
          fg_asd += *m.asd;
          ++n_fg_asd;
        }
      }
      r.rows.push_back(m);
    }
  }
  for (std::size_t cls = 0; cls < classes; ++cls) {
    r.class_dice.push_back(dn[cls] > 0 ? std::optional<double>(dsum[cls] / static_cast<double>(dn[cls])) : std::nullopt);
    r.class_asd.push_back(an[cls] > 0 ? std::optional<double>(asum[cls] / static_cast<double>(an[cls])) : std::nullopt);
  }
  if (n_case_dice > 0) r.mean_dice = case_dice / static_cast<double>(n_case_dice);
  if (n_fg_asd > 0) r.mean_asd = fg_asd / static_cast<double>(n_fg_asd);
  return r;
}

double mean_dice(const std::vector<EvalReport>& reports) {
  double s = 0.0;
  std::size_t n = 0;
  for (const EvalReport& r : reports) {
    if (r.mean_dice) {
      s += *r.mean_dice;
      ++n;
    }
  }
  return n > 0 ? s / static_cast<double>(n) : 0.0;
}

namespace {

void put(std::ostream& out, const std::optional<double>& v) {
  if (v) out << *v;
}

}  // namespace

void write_eval_csv(std::ostream& out, const std::vector<EvalReport>& reports) {
  out << "domain,case,class,dice,asd\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const EvalReport& r : reports) {
    for (const CaseMetrics& m : r.rows) {
      out << r.domain_id << ',' << m.case_id << ',' << m.cls << ',';
      put(out, m.dice);
      out << ',';
      put(out, m.asd);
      out << '\n';
    }
    for (std::size_t cls = 0; cls < r.class_dice.size(); ++cls) {
      out << r.domain_id << ",mean," << cls << ',';
      put(out, r.class_dice[cls]);
      out << ',';
      put(out, r.class_asd[cls]);
      out << '\n';
    }
    out << r.domain_id << ",mean,foreground,";
    put(out, r.mean_dice);
    out << ',';
    put(out, r.mean_asd);
    out << '\n';
  }
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const std::vector<int>& positions, std::size_t threads) {
  for (int p : positions) {
    if (p < 1 || p > kBlockCount) throw ConfigError("sweep: position " + std::to_string(p) + " outside 1..10");
  }
  const std::vector<DomainDataset> train = make_domains(base, false);
  std::vector<DomainDataset> val;
  for (const DomainDataset& d : make_domains(base, true)) val.push_back(preprocess(d, base));
  // Forward kind comes from the config; every position shares the seed.
  const Forward forward = parse_forward(base.eval.forward);

  std::vector<SweepRow> rows(positions.size());
  std::vector<std::exception_ptr> errors(positions.size());
  std::size_t next = 0;
  std::mutex lock;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> g(lock);
        if (next == positions.size()) return;
        i = next++;
      }
      try {
        ExperimentConfig cfg = base;
        cfg.net.norm = "dualnorm";
        cfg.net.dual_blocks = {positions[i]};
        cfg.validate();
        TrainedModel m = train_experiment(cfg, train);
        std::vector<EvalReport> reports;
        std::optional<double> asd;
        double asd_sum = 0.0;
        std::size_t asd_n = 0;
        for (const DomainDataset& d : val) {
          reports.push_back(evaluate(m.net, d, forward, cfg.eval.spacing));
          if (reports.back().mean_asd) {
            asd_sum += *reports.back().mean_asd;
            ++asd_n;
          }
        }
        if (asd_n > 0) asd = asd_sum / static_cast<double>(asd_n);
        rows[i] = SweepRow{positions[i], mean_dice(reports), asd};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, positions.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "position,mean_dice,mean_asd\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const SweepRow& r : rows) {
    out << r.position << ',' << r.dice << ',';
    put(out, r.asd);
    out << '\n';
  }
}

std::vector<int> parse_block_list(const std::string& s) {
  std::vector<int> out;
  auto number = [&](const std::string& t) {
    if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos || t.size() > 6) {
      throw ConfigError("block list '" + s + "': '" + t + "' is not a block index");
    }
    return std::stoi(t);
  };
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = std::min(s.find(',', start), s.size());
    const std::string item = s.substr(start, comma - start);
    const std::size_t dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(number(item));
    } else {
      const int lo = number(item.substr(0, dots)), hi = number(item.substr(dots + 2));
      if (hi < lo) throw ConfigError("block list '" + s + "': empty range " + item);
      for (int b = lo; b <= hi; ++b) out.push_back(b);
    }
    start = comma + 1;
  }
  for (int b : out) {
    if (b < 1 || b > kBlockCount) throw ConfigError("block index " + std::to_string(b) + " outside 1..10");
  }
  if (std::set<int>(out.begin(), out.end()).size() != out.size()) {
    throw ConfigError("block list '" + s + "' repeats an index");
  }
  return out;
}

std::size_t thread_cap_from_env() {
  const char* v = std::getenv("DUALNORM_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  const std::string s(v);
  if (s.find_first_not_of("0123456789") != std::string::npos || s.size() > 4 || std::stoi(s) == 0) {
    throw ConfigError("DUALNORM_THREADS must be a positive integer, got '" + s + "'");
  }
  return static_cast<std::size_t>(std::stoi(s));
}

}  // namespace dualnorm
