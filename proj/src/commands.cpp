#include "nmroute/commands.hpp"

#include <fstream>
#include <ostream>

#include "json_util.hpp"
#include "nmroute/errors.hpp"

namespace nmr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

void ExperimentConfig::resolve() {
  synth.seed = seed;
  train.seed = seed;
  bench.seed = seed;
}

void ExperimentConfig::validate() const {
  synth.validate();
  model.validate();
  train.validate();
  if (eval.batch_size == 0) throw ConfigError("eval.batch_size must be positive");
  if (eval.force_branch && *eval.force_branch >= model.num_branches()) {
    throw ConfigError("eval.force_branch out of range for branches " + model.branches);
  }
  if (bench.sizes.empty() || bench.patterns.empty()) throw ConfigError("bench needs sizes and patterns");
  if (bench.repeats == 0 || bench.n_cols == 0) throw ConfigError("bench.repeats and bench.n_cols must be positive");
  for (const auto& p : bench.patterns) {
    try {
      (void)NmPattern::parse(p);
    } catch (const std::exception& e) {
      throw ConfigError("bench pattern '" + p + "': " + e.what());
    }
  }
  if (ablation_sets.empty()) throw ConfigError("ablation needs at least one branch set");
  for (const auto& s : ablation_sets) {
    ModelConfig m = model;
    m.branches = s;
    m.costs.clear();
    m.validate();
  }
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"seed", c.seed},
           {"out_dir", c.out_dir.string()},
           {"synth", c.synth},
           {"model", c.model},
           {"train", c.train},
           {"eval",
            {{"path", c.eval.path == KernelPath::compressed ? "compressed" : "masked_dense"},
             {"batch_size", c.eval.batch_size},
             {"force_branch", c.eval.force_branch ? json(*c.eval.force_branch) : json(nullptr)},
             {"svg", c.eval.svg}}},
           {"bench",
            {{"sizes", c.bench.sizes},
             {"patterns", c.bench.patterns},
             {"n_cols", c.bench.n_cols},
             {"repeats", c.bench.repeats}}},
           {"ablation_sets", c.ablation_sets}};
}

void from_json(const json& j, ExperimentConfig& c) {
  using namespace jsonutil;
  const std::string what = "config";
  require_object(j, what);
  reject_unknown(j, {"seed", "out_dir", "synth", "model", "train", "eval", "bench", "ablation_sets"}, what);
  read(j, "seed", c.seed, what);
  std::string out = c.out_dir.string();
  read(j, "out_dir", out, what);
  c.out_dir = out;
  read(j, "synth", c.synth, what);
  read(j, "model", c.model, what);
  read(j, "train", c.train, what);
  read(j, "ablation_sets", c.ablation_sets, what);
  if (auto it = j.find("eval"); it != j.end()) {
    const auto& e = *it;
    require_object(e, "eval");
    reject_unknown(e, {"path", "batch_size", "force_branch", "svg"}, "eval");
    std::string path = c.eval.path == KernelPath::compressed ? "compressed" : "masked_dense";
    read(e, "path", path, "eval");
    if (path == "compressed") {
      c.eval.path = KernelPath::compressed;
    } else if (path == "masked_dense") {
      c.eval.path = KernelPath::masked_dense;
    } else {
      throw ConfigError("eval.path must be 'compressed' or 'masked_dense'");
    }
    read(e, "batch_size", c.eval.batch_size, "eval");
    read(e, "svg", c.eval.svg, "eval");
    if (auto f = e.find("force_branch"); f != e.end() && !f->is_null()) {
      std::size_t b = 0;
      read(e, "force_branch", b, "eval");
      c.eval.force_branch = b;
    }
  }
  if (auto it = j.find("bench"); it != j.end()) {
    require_object(*it, "bench");
    reject_unknown(*it, {"sizes", "patterns", "n_cols", "repeats"}, "bench");
    read(*it, "sizes", c.bench.sizes, "bench");
    read(*it, "patterns", c.bench.patterns, "bench");
    read(*it, "n_cols", c.bench.n_cols, "bench");
    read(*it, "repeats", c.bench.repeats, "bench");
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return j.get<ExperimentConfig>();
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os || !(os << text)) throw IoError("cannot write " + path.string());
}

void prepare_out(const ExperimentConfig& config) {
  std::error_code ec;
  fs::create_directories(config.out_dir, ec);
  if (ec) throw IoError("cannot create " + config.out_dir.string() + ": " + ec.message());
}

DatasetBundle load_data(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw IoError("missing dataset: " + dir.string());
  return read_dataset(dir);
}

void check_channels(const DatasetBundle& data, const ModelConfig& model) {
  const std::size_t c = data.train.sample_shape().at(0);
  if (c != model.channels) {
    throw DimensionError("dataset has " + std::to_string(c) + " channel(s) but the model expects " +
                         std::to_string(model.channels));
  }
}

// A pretrain or train output directory, or a checkpoint directory itself.
fs::path find_checkpoint(const fs::path& dir) {
  if (fs::exists(dir / "checkpoint" / "manifest.json")) return dir / "checkpoint";
  if (fs::exists(dir / "manifest.json")) return dir;
  throw IoError("missing checkpoint: " + dir.string());
}

fs::path find_model(const fs::path& dir) {
  if (fs::exists(dir / "model" / "manifest.json")) return dir / "model";
  return find_checkpoint(dir);
}

void print_histogram(std::ostream& log, const std::string& split, const Dataset& d, std::size_t classes) {
  log << split << " histogram:";
  for (auto h : d.histogram(classes)) log << " " << h;
  log << "\n";
}

void print_report(std::ostream& log, const EvalReport& r) {
  log << "routing:";
  for (std::size_t i = 0; i < r.routing.size(); ++i) log << " " << r.branch_names[i] << "=" << format_number(r.routing[i]);
  log << "\naverage FLOPs " << format_number(r.average_flops) << " (" << format_number(r.average_flops_percent)
      << "% of dense)\n";
  for (const auto& row : r.rows) {
    if (row.group == "all") log << row.model << ": PSNR " << format_number(row.psnr) << " SSIM " << format_number(row.ssim) << "\n";
  }
}

}  // namespace

void record_config(const ExperimentConfig& config, std::ostream& log) {
  prepare_out(config);
  const std::string text = json(config).dump(2) + "\n";
  write_text(config.out_dir / "config.json", text);
  log << "seed " << config.seed << "\n" << "config " << text;
}

void cmd_synth(const ExperimentConfig& config, std::ostream& log) {
  record_config(config, log);
  const auto bundle = synthesize(config.synth);
  write_dataset(config.out_dir, bundle);
  print_histogram(log, "train", bundle.train, config.synth.num_classes);
  print_histogram(log, "test", bundle.test, config.synth.num_classes);
  log << "clamp fraction " << format_number(bundle.clamp_fraction) << "\n";
}

void cmd_pretrain(const ExperimentConfig& config, const fs::path& data_dir, std::ostream& log) {
  const auto data = load_data(data_dir);
  check_channels(data, config.model);
  record_config(config, log);
  Model model(config.model, config.train.sr_ste, config.train.seed);
  Trainer trainer(model, config.train, data.train, &data.test);
  trainer.run(1);
  trainer.save_checkpoint(config.out_dir / "checkpoint");
  write_log_csv(config.out_dir / "log.csv", trainer.logs(), model.num_branches());
  if (model.routed()) log << "stage-1 held-out accuracy " << format_number(classifier_accuracy(model, data.test)) << "\n";
}

void cmd_train(const ExperimentConfig& config, const fs::path& data_dir,
               const std::optional<fs::path>& checkpoint, bool all_stages, std::ostream& log) {
  if (!checkpoint && !all_stages) throw ConfigError("train needs --checkpoint or --all-stages");
  const auto data = load_data(data_dir);
  check_channels(data, config.model);
  std::optional<fs::path> ckpt;
  if (checkpoint) ckpt = find_checkpoint(*checkpoint);
  record_config(config, log);
  Model model(config.model, config.train.sr_ste, config.train.seed);
  Trainer trainer(model, config.train, data.train, &data.test);
  if (ckpt) trainer.load_checkpoint(*ckpt);
  trainer.run();
  trainer.save_checkpoint(config.out_dir / "checkpoint");
  save_model(config.out_dir / "model", model);
  write_log_csv(config.out_dir / "log.csv", trainer.logs(), model.num_branches());
  if (config.eval.svg) {
    write_text(config.out_dir / "probabilities.svg", probability_curve_svg(trainer.logs(), model.num_branches()));
  }
  if (!trainer.logs().empty()) {
    log << "final mean p:";
    for (double p : trainer.logs().back().mean_p) log << " " << format_number(p);
    log << "\n";
  }
}

void cmd_eval(const ExperimentConfig& config, const fs::path& data_dir, const fs::path& model_dir,
              std::ostream& log) {
  const auto data = load_data(data_dir);
  const auto dir = find_model(model_dir);
  Model model = load_model(dir);
  check_channels(data, model.config());
  if (config.eval.force_branch && *config.eval.force_branch >= model.num_branches()) {
    throw ConfigError("eval.force_branch out of range for the loaded model");
  }
  record_config(config, log);
  EvalOptions options;
  options.path = config.eval.path;
  options.batch_size = config.eval.batch_size;
  options.force_branch = config.eval.force_branch;
  const auto report = evaluate(model, data.test.size() ? data.test : data.train, options);
  write_report_csv(config.out_dir / "report.csv", report);
  write_report_json(config.out_dir / "report.json", report);
  if (config.eval.svg) write_text(config.out_dir / "psnr_flops.svg", psnr_flops_svg(report));
  print_report(log, report);
}

void cmd_bench(const ExperimentConfig& config, std::ostream& log) {
  record_config(config, log);
  const auto rows = bench_kernels(config.bench);
  write_bench_csv(config.out_dir / "bench.csv", rows);
  bool ok = true;
  for (const auto& r : rows) {
    log << r.rows << "x" << r.cols << " " << r.pattern << ": dense " << format_number(r.dense_ms) << " ms, masked "
        << format_number(r.masked_ms) << " ms, compressed " << format_number(r.compressed_ms) << " ms, max diff "
        << format_number(r.max_abs_diff) << "\n";
    ok = ok && r.equivalent;
  }
  if (!ok) throw ContractError("benchmark equivalence gate failed");
}

void cmd_ablate(const ExperimentConfig& config, const fs::path& data_dir, std::ostream& log) {
  const auto data = load_data(data_dir);
  check_channels(data, config.model);
  record_config(config, log);
  const auto rows = ablate_classification_types(config.ablation_sets, data, config.model, config.train);
  write_ablation_csv(config.out_dir / "ablation.csv", rows);
  for (const auto& r : rows) {
    log << r.branches << ": PSNR " << format_number(r.psnr.back()) << " FLOPs "
        << format_number(r.average_flops_percent) << "%\n";
  }
}

Failure classify_error(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return {3, "config"};
  if (dynamic_cast<const IoError*>(&e)) return {4, "io"};
  if (dynamic_cast<const FormatError*>(&e)) return {5, "format"};
  if (dynamic_cast<const DimensionError*>(&e)) return {6, "shape"};
  if (dynamic_cast<const MaskError*>(&e) || dynamic_cast<const ContractError*>(&e)) return {7, "invariant"};
  return {1, "error"};
}

}  // namespace nmr::cli
