// Command-line front end: synthetic data generation, adaptation training,
// test-time adaptation, evaluation, and the ablation/sensitivity harnesses.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "domadapt/csv.hpp"
#include "domadapt/data.hpp"
#include "domadapt/errors.hpp"
#include "domadapt/eval.hpp"
#include "domadapt/model.hpp"
#include "domadapt/train.hpp"

namespace fs = std::filesystem;
using namespace domadapt;

namespace {

std::set<std::string> split_tags(const std::string& csv) {
  std::set<std::string> tags;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) tags.insert(item);
  }
  return tags;
}

std::vector<double> split_doubles(const std::string& csv) {
  std::vector<double> values;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) values.push_back(std::stod(item));
  }
  return values;
}

std::vector<std::size_t> split_sizes(const std::string& csv) {
  std::vector<std::size_t> values;
  for (const double v : split_doubles(csv)) {
    values.push_back(static_cast<std::size_t>(v));
  }
  return values;
}

// Options shared by the commands that train or evaluate on a dataset.
struct RunOptions {
  std::string data_path;
  std::string source_domains;
  std::string target_domains;
  std::string out_dir;
  std::string sigma = "median";
  double test_fraction = 0.2;
  bool no_tta = false;
  std::size_t dim = 0;  // 0: infer from the data
  TrainConfig train;
};

void add_run_options(CLI::App* cmd, RunOptions& opt) {
  cmd->set_config("--config", "", "key=value config file; flags override");
  cmd->add_option("--data", opt.data_path, "embeddings file (.jsonl[.gz])")
      ->required();
  cmd->add_option("--source-domains", opt.source_domains,
                  "comma-separated source domain tags")
      ->required();
  cmd->add_option("--target-domains", opt.target_domains,
                  "comma-separated target domain tags")
      ->required();
  cmd->add_option("--out", opt.out_dir, "output directory")->required();
  cmd->add_option("--seed", opt.train.seed, "run seed");
  cmd->add_option("--dim", opt.dim, "expected feature dimension (0: infer)");
  cmd->add_option("--batch-size", opt.train.batch_size, "training batch size");
  cmd->add_option("--epochs", opt.train.max_epochs, "maximum epochs");
  cmd->add_option("--patience", opt.train.patience, "early-stopping patience");
  cmd->add_option("--lr", opt.train.learning_rate, "Adam learning rate");
  cmd->add_option("--lambda-ce", opt.train.loss_weights.lambda_ce,
                  "cross-entropy weight");
  cmd->add_option("--lambda-ctr", opt.train.loss_weights.lambda_ctr,
                  "contrastive weight");
  cmd->add_option("--lambda-mmd", opt.train.loss_weights.lambda_mmd,
                  "MMD weight");
  cmd->add_option("--temperature", opt.train.loss_weights.temperature,
                  "contrastive temperature");
  cmd->add_option("--sigma", opt.sigma,
                  "RBF bandwidth: 'median' or a fixed positive value");
  cmd->add_option("--augment-std", opt.train.augment_std,
                  "feature-space augmentation noise std");
  cmd->add_option("--tta-batch", opt.train.tta_batch_size, "TTA batch size");
  cmd->add_option("--tta-passes", opt.train.tta_passes,
                  "passes over the target test set during TTA");
  cmd->add_flag("--no-tta", opt.no_tta, "skip test-time adaptation");
  cmd->add_flag("--symmetrize", opt.train.symmetrize_contrastive,
                "use augments as anchors too in the contrastive sum");
  cmd->add_option("--test-fraction", opt.test_fraction,
                  "target test split fraction");
}

void resolve_sigma_option(RunOptions& opt) {
  if (opt.sigma == "median") {
    opt.train.loss_weights.sigma = BandwidthPolicy::median();
  } else {
    opt.train.loss_weights.sigma = BandwidthPolicy::fixed(std::stod(opt.sigma));
  }
}

struct LoadedExperiment {
  ExperimentData data;
  ModelConfig model_cfg;
};

LoadedExperiment load_experiment(const RunOptions& opt) {
  const auto records = load_embeddings(opt.data_path);
  if (records.empty()) {
    throw DataError("dataset '" + opt.data_path + "' is empty");
  }
  const DomainPartition domains{split_tags(opt.source_domains),
                                split_tags(opt.target_domains)};
  const PartitionResult split =
      partition(records, domains, opt.train.seed, opt.test_fraction);
  const std::size_t dim = records.front().features.size();
  if (opt.dim != 0 && opt.dim != dim) {
    throw DataError("--dim " + std::to_string(opt.dim) +
                    " does not match data dimension " + std::to_string(dim));
  }
  return {{split.source, split.target_train, split.target_test},
          ModelConfig::for_dim(dim)};
}

void write_resolved_config(const RunOptions& opt, const ModelConfig& model_cfg,
                           const std::string& extra = "") {
  std::ofstream out(fs::path(opt.out_dir) / "config_resolved.txt");
  out << "data=" << opt.data_path << '\n'
      << "source_domains=" << opt.source_domains << '\n'
      << "target_domains=" << opt.target_domains << '\n'
      << "test_fraction=" << format_double(opt.test_fraction) << '\n'
      << "no_tta=" << (opt.no_tta ? 1 : 0) << '\n'
      << describe_config(opt.train, model_cfg);
  if (!extra.empty()) out << extra;
}

void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw IoError("cannot create output directory '" + dir + "': " +
                  ec.message());
  }
}

int cmd_generate(const std::string& out_dir, SyntheticSpec& spec) {
  ensure_out_dir(out_dir);
  const auto records = generate_synthetic(spec);
  const fs::path data_path = fs::path(out_dir) / "synthetic.jsonl";
  save_embeddings(records, data_path.string());
  std::ofstream cfg(fs::path(out_dir) / "config_resolved.txt");
  cfg << "n_domains=" << spec.n_domains << '\n'
      << "per_domain=" << spec.per_domain << '\n'
      << "dim=" << spec.dim << '\n'
      << "margin=" << format_double(spec.margin) << '\n'
      << "shift=" << format_double(spec.shift) << '\n'
      << "noise_std=" << format_double(spec.noise_std) << '\n'
      << "seed=" << spec.seed << '\n';
  std::cout << "wrote " << records.size() << " records to "
            << data_path.string() << '\n';
  return 0;
}

int cmd_train(RunOptions& opt) {
  resolve_sigma_option(opt);
  ensure_out_dir(opt.out_dir);
  const LoadedExperiment loaded = load_experiment(opt);
  write_resolved_config(opt, loaded.model_cfg);

  ModelState model = ModelState::init(loaded.model_cfg, opt.train.seed);
  FitResult fitted =
      fit(model, loaded.data.source, loaded.data.target_train, opt.train);
  const bool with_tta = !opt.no_tta && loaded.data.target_test.size() > 0;
  if (with_tta) {
    tta_adapt(fitted.model, loaded.data.target_test.features,
              opt.train.tta_batch_size, opt.train.tta_passes);
  }

  const fs::path out(opt.out_dir);
  save_checkpoint(fitted.model, (out / "checkpoint.json").string());
  write_trace_csv(fitted.trace, (out / "trace.csv").string());
  write_trace_json(fitted.trace, (out / "trace.json").string());
  if (loaded.data.target_test.size() > 0) {
    EvalReport report = evaluate(fitted.model, loaded.data.target_test);
    report.seed = opt.train.seed;
    report.config_hash = config_hash(opt.train, loaded.model_cfg);
    report.tta_applied = with_tta;
    write_metrics_json(report, (out / "metrics.json").string());
    write_projection2d_csv(fitted.model, loaded.data.target_test,
                           (out / "projection2d.csv").string());
    std::cout << "accuracy=" << report.accuracy << " f1=" << report.f1
              << '\n';
  }
  return 0;
}

int cmd_tta(RunOptions& opt, const std::string& checkpoint_path) {
  resolve_sigma_option(opt);
  ensure_out_dir(opt.out_dir);
  const LoadedExperiment loaded = load_experiment(opt);
  if (loaded.data.target_test.size() == 0) {
    throw DataError("tta: no target test records");
  }
  ModelState model = load_checkpoint(checkpoint_path);
  tta_adapt(model, loaded.data.target_test.features, opt.train.tta_batch_size,
            opt.train.tta_passes);

  const fs::path out(opt.out_dir);
  write_resolved_config(opt, model.config,
                        "checkpoint=" + checkpoint_path + "\n");
  save_checkpoint(model, (out / "checkpoint.json").string());
  EvalReport report = evaluate(model, loaded.data.target_test);
  report.seed = opt.train.seed;
  report.config_hash = config_hash(opt.train, model.config);
  report.tta_applied = true;
  write_metrics_json(report, (out / "metrics.json").string());
  std::cout << "accuracy=" << report.accuracy << " f1=" << report.f1 << '\n';
  return 0;
}

int cmd_evaluate(RunOptions& opt, const std::string& checkpoint_path) {
  resolve_sigma_option(opt);
  ensure_out_dir(opt.out_dir);
  const LoadedExperiment loaded = load_experiment(opt);
  if (loaded.data.target_test.size() == 0) {
    throw DataError("evaluate: no target test records");
  }
  const ModelState model = load_checkpoint(checkpoint_path);

  const fs::path out(opt.out_dir);
  write_resolved_config(opt, model.config,
                        "checkpoint=" + checkpoint_path + "\n");
  EvalReport report = evaluate(model, loaded.data.target_test);
  report.seed = opt.train.seed;
  report.config_hash = config_hash(opt.train, model.config);
  write_metrics_json(report, (out / "metrics.json").string());
  write_projection2d_csv(model, loaded.data.target_test,
                         (out / "projection2d.csv").string());
  std::cout << "accuracy=" << report.accuracy << " f1=" << report.f1 << '\n';
  return 0;
}

int cmd_ablate(RunOptions& opt) {
  resolve_sigma_option(opt);
  ensure_out_dir(opt.out_dir);
  const LoadedExperiment loaded = load_experiment(opt);
  write_resolved_config(opt, loaded.model_cfg);
  const auto rows = run_ablation(loaded.model_cfg, opt.train, loaded.data);
  write_ablation_csv(rows, (fs::path(opt.out_dir) / "ablation.csv").string());
  for (const auto& row : rows) {
    std::cout << row.name << ": accuracy=" << row.report.accuracy
              << " f1=" << row.report.f1 << '\n';
  }
  return 0;
}

int cmd_sweep(RunOptions& opt, const std::string& grid_mmd,
              const std::string& grid_ctr, const std::string& grid_tta) {
  resolve_sigma_option(opt);
  ensure_out_dir(opt.out_dir);
  const LoadedExperiment loaded = load_experiment(opt);
  write_resolved_config(opt, loaded.model_cfg);
  SweepGrids grids;
  if (!grid_mmd.empty()) grids.lambda_mmd = split_doubles(grid_mmd);
  if (!grid_ctr.empty()) grids.lambda_ctr = split_doubles(grid_ctr);
  if (!grid_tta.empty()) grids.tta_batch = split_sizes(grid_tta);
  const auto points = run_sensitivity(loaded.model_cfg, opt.train, loaded.data,
                                      grids);
  write_sweep_csv(points, (fs::path(opt.out_dir) / "sweep.csv").string());
  std::cout << "sweep finished: " << points.size() << " grid points\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double tolerance,
                  const std::string& out_dir) {
  ModelConfig cfg;
  cfg.input_dim = 6;
  cfg.proj_hidden = 8;
  cfg.proj_out = 5;
  cfg.cls_hidden = 8;
  cfg.dropout_rate = 0.0;
  const ModelState model = ModelState::init(cfg, seed);

  SeededRng rng(seed);
  auto random_matrix = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (auto& v : m.data()) v = rng.next_gaussian();
    return m;
  };
  const PairedBatch source{random_matrix(4, 6), random_matrix(4, 6)};
  const PairedBatch target{random_matrix(4, 6), random_matrix(4, 6)};
  const std::vector<int> labels{0, 1, 0, 1};
  const LossWeights weights;  // full composite objective

  const GradCheckReport report =
      grad_check(model, source, labels, target, weights, false, tolerance);
  std::cout << (report.pass ? "PASS" : "FAIL")
            << " max_rel_error=" << report.max_rel_error
            << " tolerance=" << report.tolerance
            << " worst=" << report.worst_param << '\n';
  if (!out_dir.empty()) {
    ensure_out_dir(out_dir);
    std::ofstream out(fs::path(out_dir) / "gradcheck.json");
    out << "{\n  \"pass\": " << (report.pass ? "true" : "false")
        << ",\n  \"max_rel_error\": " << format_double(report.max_rel_error)
        << ",\n  \"tolerance\": " << format_double(report.tolerance)
        << ",\n  \"worst_param\": \"" << report.worst_param << "\"\n}\n";
  }
  return report.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "domain-adaptive out-of-context detection on embedding vectors: "
      "contrastive + MMD training with test-time BN adaptation"};
  app.require_subcommand(1);

  SyntheticSpec gen_spec;
  gen_spec.per_domain = 2000;
  std::string gen_out;
  auto* generate = app.add_subcommand(
      "generate", "write a synthetic multi-domain benchmark");
  generate->set_config("--config", "", "key=value config file");
  generate->add_option("--out", gen_out, "output directory")->required();
  generate->add_option("--seed", gen_spec.seed, "generator seed");
  generate->add_option("--domains", gen_spec.n_domains, "number of domains");
  generate->add_option("--per-domain", gen_spec.per_domain,
                       "records per domain");
  generate->add_option("--dim", gen_spec.dim, "feature dimension");
  generate->add_option("--margin", gen_spec.margin, "class separation");
  generate->add_option("--shift", gen_spec.shift, "domain shift magnitude");
  generate->add_option("--noise-std", gen_spec.noise_std, "sample noise std");

  RunOptions train_opt;
  auto* train_cmd = app.add_subcommand(
      "train", "fit the adaptation model and evaluate on the target test "
               "split");
  add_run_options(train_cmd, train_opt);

  RunOptions tta_opt;
  std::string tta_checkpoint;
  auto* tta_cmd = app.add_subcommand(
      "tta", "update BN statistics of a trained checkpoint on target test "
             "data");
  add_run_options(tta_cmd, tta_opt);
  tta_cmd->add_option("--checkpoint", tta_checkpoint, "model checkpoint")
      ->required();

  RunOptions eval_opt;
  std::string eval_checkpoint;
  auto* eval_cmd = app.add_subcommand(
      "evaluate", "score a checkpoint on the target test split");
  add_run_options(eval_cmd, eval_opt);
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "model checkpoint")
      ->required();

  RunOptions ablate_opt;
  auto* ablate_cmd = app.add_subcommand(
      "ablate", "full model vs single-component ablations, one seed");
  add_run_options(ablate_cmd, ablate_opt);

  RunOptions sweep_opt;
  std::string grid_mmd, grid_ctr, grid_tta;
  auto* sweep_cmd = app.add_subcommand(
      "sweep", "one-dimensional sensitivity sweeps over the loss weights and "
               "TTA batch size");
  add_run_options(sweep_cmd, sweep_opt);
  sweep_cmd->add_option("--grid-mmd", grid_mmd, "comma-separated MMD weights");
  sweep_cmd->add_option("--grid-ctr", grid_ctr,
                        "comma-separated contrastive weights");
  sweep_cmd->add_option("--grid-tta", grid_tta,
                        "comma-separated TTA batch sizes");

  std::uint64_t gc_seed = 0;
  double gc_tolerance = 1e-3;
  std::string gc_out;
  auto* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "compare analytic gradients against finite differences");
  gradcheck_cmd->add_option("--seed", gc_seed, "toy model seed");
  gradcheck_cmd->add_option("--tolerance", gc_tolerance,
                            "max relative error allowed");
  gradcheck_cmd->add_option("--out", gc_out, "optional output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << '\n';
    return 2;
  }

  try {
    if (generate->parsed()) return cmd_generate(gen_out, gen_spec);
    if (train_cmd->parsed()) return cmd_train(train_opt);
    if (tta_cmd->parsed()) return cmd_tta(tta_opt, tta_checkpoint);
    if (eval_cmd->parsed()) return cmd_evaluate(eval_opt, eval_checkpoint);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate_opt);
    if (sweep_cmd->parsed()) {
      return cmd_sweep(sweep_opt, grid_mmd, grid_ctr, grid_tta);
    }
    if (gradcheck_cmd->parsed()) {
      return cmd_gradcheck(gc_seed, gc_tolerance, gc_out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
