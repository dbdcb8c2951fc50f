#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "nmroute/commands.hpp"

namespace {

using nmr::cli::ExperimentConfig;

// Flag values that override the config file when given.
struct Overrides {
  std::string config_path;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<double> sigmas;
  std::size_t classes = 0, samples = 0, test_samples = 0, patch = 0, channels = 0;
  std::string source_dir;
  std::string branches;
  std::size_t depth = 0, width = 0;
  std::size_t stage1_epochs = 0, stage2_epochs = 0, stage3_epochs = 0, scratch_epochs = 0, batch_size = 0;
  double omega1 = 0, omega2 = 0, omega3 = 0, lambda_w = 0, classifier_lr = 0, stage3_lr = 0;
  std::size_t force_branch = 0;
  std::vector<std::size_t> sizes;
  std::vector<std::string> patterns;
  std::size_t repeats = 0;
  std::vector<std::string> sets;

  std::vector<std::pair<CLI::Option*, std::function<void(ExperimentConfig&)>>> apply;
  bool no_remap = false, shared_bn = false, mask_first_last = false, plain_ste = false;
  bool freeze_restoration = false, masked_dense = false, no_svg = false;
};

template <typename V, typename F>
void add(CLI::App* app, Overrides& o, const std::string& name, V& var, const std::string& help, F&& setter) {
  CLI::Option* opt = app->add_option(name, var, help);
  o.apply.emplace_back(opt, [&var, setter](ExperimentConfig& c) { setter(c, var); });
}

void add_flag(CLI::App* app, Overrides& o, const std::string& name, bool& var, const std::string& help,
              std::function<void(ExperimentConfig&)> setter) {
  CLI::Option* opt = app->add_flag(name, var, help);
  o.apply.emplace_back(opt, std::move(setter));
}

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_path, "JSON experiment config (flags override it)");
  add(app, o, "--out", o.out, "Output directory", [](ExperimentConfig& c, const std::string& v) { c.out_dir = v; });
  add(app, o, "--seed", o.seed, "Seed for all randomness", [](ExperimentConfig& c, std::uint64_t v) { c.seed = v; });
  add(app, o, "--sigma", o.sigmas, "Noise levels, comma separated", [](ExperimentConfig& c, const std::vector<double>& v) { c.synth.sigmas = v; });
  app->get_option("--sigma")->delimiter(',');
  add(app, o, "--classes", o.classes, "Difficulty tiers", [](ExperimentConfig& c, std::size_t v) { c.synth.num_classes = v; });
  add(app, o, "--samples", o.samples, "Training samples", [](ExperimentConfig& c, std::size_t v) { c.synth.train_samples = v; });
  add(app, o, "--test-samples", o.test_samples, "Test samples", [](ExperimentConfig& c, std::size_t v) { c.synth.test_samples = v; });
  add(app, o, "--patch", o.patch, "Patch size", [](ExperimentConfig& c, std::size_t v) { c.synth.patch_size = v; });
  add(app, o, "--channels", o.channels, "Image channels (synthesis and model)", [](ExperimentConfig& c, std::size_t v) {
    c.synth.channels = v;
    c.model.channels = v;
  });
  add(app, o, "--source-dir", o.source_dir, "Directory of PGM/PPM clean images", [](ExperimentConfig& c, const std::string& v) { c.synth.source_dir = v; });
  add_flag(app, o, "--no-remap", o.no_remap, "Keep raw residuals", [](ExperimentConfig& c) { c.synth.remap = false; });
  add(app, o, "--branches", o.branches, "Branch set, e.g. 1&2&4", [](ExperimentConfig& c, const std::string& v) {
    c.model.branches = v;
    c.model.costs.clear();
  });
  add(app, o, "--depth", o.depth, "Restoration depth", [](ExperimentConfig& c, std::size_t v) { c.model.depth = v; });
  add(app, o, "--width", o.width, "Restoration width", [](ExperimentConfig& c, std::size_t v) { c.model.width = v; });
  add_flag(app, o, "--shared-bn", o.shared_bn, "Share one BN bank across branches", [](ExperimentConfig& c) { c.model.shared_bn = true; });
  add_flag(app, o, "--mask-first-last", o.mask_first_last, "Prune the first and last layers too", [](ExperimentConfig& c) { c.model.mask_first_last = true; });
  add(app, o, "--stage1-epochs", o.stage1_epochs, "Stage-1 epochs", [](ExperimentConfig& c, std::size_t v) { c.train.stage1.epochs = v; });
  add(app, o, "--stage2-epochs", o.stage2_epochs, "Stage-2 epochs", [](ExperimentConfig& c, std::size_t v) { c.train.stage2.epochs = v; });
  add(app, o, "--stage3-epochs", o.stage3_epochs, "Stage-3 epochs", [](ExperimentConfig& c, std::size_t v) { c.train.stage3.epochs = v; });
  add(app, o, "--scratch-epochs", o.scratch_epochs, "Scratch-baseline epochs", [](ExperimentConfig& c, std::size_t v) { c.train.scratch.epochs = v; });
  add(app, o, "--batch-size", o.batch_size, "Batch size for every stage and evaluation", [](ExperimentConfig& c, std::size_t v) {
    c.train.stage1.batch_size = c.train.stage2.batch_size = c.train.stage3.batch_size = c.train.scratch.batch_size = v;
    c.eval.batch_size = v;
  });
  add(app, o, "--omega1", o.omega1, "Weight of L_W", [](ExperimentConfig& c, double v) { c.train.loss.omega1 = v; });
  add(app, o, "--omega2", o.omega2, "Weight of L_E", [](ExperimentConfig& c, double v) { c.train.loss.omega2 = v; });
  add(app, o, "--omega3", o.omega3, "Weight of L_C", [](ExperimentConfig& c, double v) { c.train.loss.omega3 = v; });
  add(app, o, "--lambda-w", o.lambda_w, "SR-STE decay", [](ExperimentConfig& c, double v) { c.train.lambda_w = v; });
  add_flag(app, o, "--plain-ste", o.plain_ste, "Masked gradients without decay", [](ExperimentConfig& c) { c.train.sr_ste = false; });
  add_flag(app, o, "--freeze-restoration", o.freeze_restoration, "Train only the classifier in stage 3",
           [](ExperimentConfig& c) { c.train.stage3_freeze_restoration = true; });
  add(app, o, "--stage3-lr", o.stage3_lr, "Stage-3 peak learning rate (floor at 1/100)", [](ExperimentConfig& c, double v) {
    c.train.stage3.lr_max = v;
    c.train.stage3.lr_min = v / 100;
  });
  add(app, o, "--classifier-lr", o.classifier_lr, "Stage-3 classifier peak learning rate", [](ExperimentConfig& c, double v) {
    c.train.stage3_classifier_lr_max = v;
    c.train.stage3_classifier_lr_min = v / 100;
  });
  add(app, o, "--force-branch", o.force_branch, "Route every sample to this branch", [](ExperimentConfig& c, std::size_t v) { c.eval.force_branch = v; });
  add_flag(app, o, "--masked-dense", o.masked_dense, "Evaluate with masked dense kernels", [](ExperimentConfig& c) { c.eval.path = nmr::KernelPath::masked_dense; });
  add_flag(app, o, "--no-svg", o.no_svg, "Skip SVG plots", [](ExperimentConfig& c) { c.eval.svg = false; });
  add(app, o, "--sizes", o.sizes, "Benchmark sizes", [](ExperimentConfig& c, const std::vector<std::size_t>& v) { c.bench.sizes = v; });
  app->get_option("--sizes")->delimiter(',');
  add(app, o, "--patterns", o.patterns, "Benchmark patterns", [](ExperimentConfig& c, const std::vector<std::string>& v) { c.bench.patterns = v; });
  app->get_option("--patterns")->delimiter(',');
  add(app, o, "--repeats", o.repeats, "Benchmark repeats", [](ExperimentConfig& c, std::size_t v) { c.bench.repeats = v; });
  add(app, o, "--sets", o.sets, "Ablation branch sets", [](ExperimentConfig& c, const std::vector<std::string>& v) { c.ablation_sets = v; });
  app->get_option("--sets")->delimiter(',');
}

ExperimentConfig build_config(const Overrides& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : nmr::cli::load_config(o.config_path);
  for (const auto& [opt, set] : o.apply) {
    if (opt->count() > 0) set(c);
  }
  c.resolve();
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic N:M routed image restoration"};
  app.require_subcommand(1, 1);

  Overrides o;
  std::string data_dir, model_dir, checkpoint;
  bool all_stages = false;

  auto* synth = app.add_subcommand("synth", "Synthesize a pseudo-labelled dataset");
  auto* pretrain = app.add_subcommand("pretrain", "Stage 1: train the classifier");
  auto* train = app.add_subcommand("train", "Stages 2 and 3 from a pretrain checkpoint");
  auto* eval = app.add_subcommand("eval", "Evaluate a trained model");
  auto* bench = app.add_subcommand("bench", "Benchmark dense and compressed kernels");
  auto* ablate = app.add_subcommand("ablate", "Compare branch sets");
  for (auto* sub : {synth, pretrain, train, eval, bench, ablate}) add_common(sub, o);
  for (auto* sub : {pretrain, train, eval, ablate}) sub->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--checkpoint", checkpoint, "Pretrain output or checkpoint directory");
  train->add_flag("--all-stages", all_stages, "Run stages 1 to 3 from initialization");
  eval->add_option("--model", model_dir, "Train output, model or checkpoint directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const ExperimentConfig config = build_config(o);
    auto& log = std::cout;
    if (synth->parsed()) nmr::cli::cmd_synth(config, log);
    if (pretrain->parsed()) nmr::cli::cmd_pretrain(config, data_dir, log);
    if (train->parsed()) {
      std::optional<std::filesystem::path> ckpt;
      if (!checkpoint.empty()) ckpt = checkpoint;
      nmr::cli::cmd_train(config, data_dir, ckpt, all_stages, log);
    }
    if (eval->parsed()) nmr::cli::cmd_eval(config, data_dir, model_dir, log);
    if (bench->parsed()) nmr::cli::cmd_bench(config, log);
    if (ablate->parsed()) nmr::cli::cmd_ablate(config, data_dir, log);
  } catch (const std::exception& e) {
    const auto f = nmr::cli::classify_error(e);
    std::cerr << "error[" << f.kind << "]: " << e.what() << "\n";
    return f.code;
  }
  return 0;
}
