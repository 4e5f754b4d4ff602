#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "dualnorm/error.hpp"
#include "dualnorm/experiment.hpp"

namespace fs = std::filesystem;
using namespace dualnorm;

namespace {

/// Bad flags, bad configs and unreadable inputs; mapped to exit code 2.
struct UsageError : Error {
  using Error::Error;
};

ExperimentConfig base_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_experiment(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

void print_mean(const char* what, const std::optional<double>& v) {
  std::cout << ' ' << what << ' ';
  if (v) {
    std::cout << *v;
  } else {
    std::cout << "n/a";
  }
}

int cmd_gen(const std::string& config, const std::optional<std::uint64_t>& seed, const std::string& out) {
  ExperimentConfig cfg = base_config(config, seed);
  cfg.validate();
  // Generate everything before touching the output directory.
  const std::vector<DomainDataset> domains = make_domains(cfg, false);
  fs::create_directories(out);
  for (const DomainDataset& d : domains) {
    const fs::path base = fs::path(out) / ("domain" + std::to_string(d.domain_id));
    write_dataset(d, base);
    std::cout << "wrote " << base.string() << ".dnt (" << d.cases.size() << " cases, " << d.height << "x"
              << d.width << ", " << d.num_classes << " classes)\n";
  }
  return 0;
}

int cmd_align(const std::string& config, const std::string& source, const std::string& target,
              const std::string& mode, const std::string& out) {
  const ExperimentConfig cfg = base_config(config, std::nullopt);
  if (mode != "region" && mode != "global") throw UsageError("--mode must be region or global");
  const DomainDataset src = read_dataset(dataset_base(source));
  const DomainDataset tgt = read_dataset(dataset_base(target));

  const bool region = mode == "region";
  const DomainStats target_stats = region ? collect_stats(tgt) : collect_global_stats(tgt);
  AlignOptions opt;
  opt.eps = cfg.align.eps;
  const AlignResult r = region ? align_region_wise(src, target_stats, opt) : align_global(src, target_stats, opt.eps);

  const fs::path base = dataset_base(out);
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  write_dataset(r.aligned, base);

  const DomainStats before = region ? collect_stats(src) : collect_global_stats(src);
  const DomainStats after = region ? collect_stats(r.aligned) : collect_global_stats(r.aligned);
  {
    std::ofstream csv = open_out(base.string() + ".stats.csv");
    write_stats_csv(csv, {{"before", &before}, {"after", &after}, {"target", &target_stats}});
    for (const std::string& w : r.warnings) csv << "# warning: " << w << '\n';
  }
  {
    std::ofstream hist = open_out(base.string() + ".hist.csv");
    histogram_report(hist, {&r.aligned, &tgt}, cfg.align.bins);
  }
  for (const std::string& w : r.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << mode << " alignment of " << src.cases.size() << " cases onto domain " << tgt.domain_id << "\n";
  for (const auto& [cls, a] : after.aggregate) {
    const auto it = target_stats.aggregate.find(cls);
    std::cout << "  class " << cls << ": mean of means " << a.mean_of_means;
    if (it != target_stats.aggregate.end()) std::cout << " (target " << it->second.mean_of_means << ")";
    std::cout << '\n';
  }
  std::cout << "wrote " << base.string() << ".dnt, .stats.csv, .hist.csv\n";
  return 0;
}

int cmd_train(const std::string& config, const std::optional<std::uint64_t>& seed,
              const std::vector<std::string>& datasets, const std::string& norm, const std::string& dual_blocks,
              const std::string& out) {
  ExperimentConfig cfg = base_config(config, seed);
  if (!norm.empty()) {
    cfg.net.norm = norm;
    if (norm != "dualnorm") {
      if (!dual_blocks.empty()) throw UsageError("--dual-blocks requires --norm dualnorm, got --norm " + norm);
      cfg.net.dual_blocks.clear();
    }
  }
  if (!dual_blocks.empty()) cfg.net.dual_blocks = parse_block_list(dual_blocks);

  std::vector<DomainDataset> domains;
  if (datasets.empty()) {
    cfg.validate();
    domains = make_domains(cfg, false);
  } else {
    for (const std::string& p : datasets) domains.push_back(read_dataset(dataset_base(p)));
    for (const DomainDataset& d : domains) {
      if (d.num_classes != domains[0].num_classes || d.height != domains[0].height || d.width != domains[0].width) {
        throw UsageError("--datasets disagree on classes or image size");
      }
    }
    cfg.data.num_classes = domains[0].num_classes;
    cfg.data.size = domains[0].height;
    if (domains[0].height != domains[0].width) throw UsageError("training data must be square");
    cfg.data.domains = std::max<std::size_t>(cfg.data.domains, static_cast<std::size_t>(cfg.align.target_domain) + 1);
    cfg.validate();
  }

  if (cfg.align.mode != "none") {
    const DomainDataset* target = nullptr;
    for (const DomainDataset& d : domains) {
      if (d.domain_id == cfg.align.target_domain) target = &d;
    }
    if (target == nullptr) {
      throw UsageError("align.target_domain " + std::to_string(cfg.align.target_domain) + " is not among the datasets");
    }
    std::vector<std::string> warnings;
    const DomainDataset t = *target;
    domains = align_domains(domains, t, cfg.align.mode, cfg.align.eps, &warnings);
    for (const std::string& w : warnings) std::cerr << "warning: " << w << '\n';
  }

  fs::create_directories(out);
  const std::string model = (fs::path(out) / "model.dnt").string();
  TrainedModel m = train_experiment(cfg, domains, model);
  SegNetwork& net = m.net;
  const TrainResult& r = m.result;

  save_checkpoint(net, model, {{"config", to_json(cfg)}, {"iteration", r.history.size()}, {"final_lr", r.final_lr}});
  write_loss_csv(r.history, (fs::path(out) / "loss.csv").string());

  std::cout << "trained " << cfg.net.norm << " network (" << net.parameter_count() << " parameters) for "
            << r.history.size() << " records on " << domains.size() << " domain(s)\n";
  if (!r.history.empty()) {
    const LossRecord& last = r.history.back();
    std::cout << "  last " << last.stage << " loss: dice " << last.dice << " ce " << last.ce << ", lr " << r.final_lr
              << '\n';
  }
  std::cout << "wrote " << model << " and " << (fs::path(out) / "loss.csv").string() << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& forward,
             const std::string& out) {
  Checkpoint ck = load_checkpoint(checkpoint);
  ExperimentConfig cfg;
  if (ck.meta.contains("config")) cfg = experiment_from_json(ck.meta.at("config"));
  const Forward f = parse_forward(forward.empty() ? cfg.eval.forward : forward);
  const DomainDataset d = preprocess(read_dataset(dataset_base(dataset)), cfg);
  const EvalReport r = evaluate(ck.net, d, f, cfg.eval.spacing);
  {
    std::ofstream csv = open_out(out);
    write_eval_csv(csv, {r});
  }
  std::cout << "domain " << r.domain_id << ", " << d.cases.size() << " cases, forward "
            << (f == Forward::bn ? "bn" : "spade") << ":";
  print_mean("mean dice", r.mean_dice);
  print_mean("mean asd", r.mean_asd);
  std::cout << "\nwrote " << out << '\n';
  return 0;
}

int cmd_sweep(const std::string& config, const std::optional<std::uint64_t>& seed, const std::string& positions,
              const std::string& out, std::size_t threads) {
  ExperimentConfig cfg = base_config(config, seed);
  const std::vector<int> pos = parse_block_list(positions);
  cfg.net.norm = "dualnorm";
  cfg.net.dual_blocks = {pos.front()};
  cfg.validate();
  const std::vector<SweepRow> rows = run_sweep(cfg, pos, threads);
  {
    std::ofstream csv = open_out(out);
    write_sweep_csv(csv, rows);
  }
  for (const SweepRow& r : rows) {
    std::cout << "position " << r.position << ": dice " << r.dice;
    print_mean("asd", r.asd);
    std::cout << '\n';
  }
  std::cout << "wrote " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DualNorm segmentation experiments on synthetic multi-domain data"};
  app.require_subcommand(1);

  std::string config, out, source, target, mode = "region", norm, dual_blocks, checkpoint, dataset, forward, positions;
  std::vector<std::string> datasets;
  std::optional<std::uint64_t> seed;

  auto* gen = app.add_subcommand("gen", "generate one synthetic dataset per configured domain");
  gen->add_option("--config", config, "experiment config JSON")->check(CLI::ExistingFile);
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "override the config seed");

  auto* align = app.add_subcommand("align", "align a labeled source dataset onto a target dataset");
  align->add_option("--source", source, "source dataset (.dnt or .json)")->required();
  align->add_option("--target", target, "target dataset (.dnt or .json)")->required();
  align->add_option("--mode", mode, "region or global")->check(CLI::IsMember({"region", "global"}));
  align->add_option("--out", out, "output dataset base path")->required();
  align->add_option("--config", config, "experiment config JSON (align section)")->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "train a network and write a checkpoint plus loss CSV");
  train->add_option("--config", config, "experiment config JSON")->check(CLI::ExistingFile);
  train->add_option("--datasets", datasets, "training datasets; generated from the config when omitted");
  train->add_option("--norm", norm, "bn, in, ln, gn or dualnorm")
      ->check(CLI::IsMember({"bn", "in", "ln", "gn", "dualnorm"}));
  train->add_option("--dual-blocks", dual_blocks, "DualNorm block indices, e.g. 1,2,3,4 or 1..4");
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--seed", seed, "override the config seed");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "checkpoint .dnt")->required();
  eval->add_option("--dataset", dataset, "dataset (.dnt or .json)")->required();
  eval->add_option("--forward", forward, "bn (single pass) or spade (two-pass)")
      ->check(CLI::IsMember({"bn", "spade"}));
  eval->add_option("--out", out, "metrics CSV")->required();

  auto* sweep = app.add_subcommand("sweep", "train one single-block DualNorm model per position");
  sweep->add_option("--positions", positions, "block indices, e.g. 1..10")->required();
  sweep->add_option("--config", config, "experiment config JSON")->check(CLI::ExistingFile);
  sweep->add_option("--out", out, "summary CSV")->required();
  sweep->add_option("--seed", seed, "override the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const std::size_t threads = thread_cap_from_env();
    set_checked_mode(false);
    if (*gen) return cmd_gen(config, seed, out);
    if (*align) return cmd_align(config, source, target, mode, out);
    if (*train) return cmd_train(config, seed, datasets, norm, dual_blocks, out);
    if (*eval) return cmd_eval(checkpoint, dataset, forward, out);
    if (*sweep) return cmd_sweep(config, seed, positions, out, threads);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const IntegrityError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
