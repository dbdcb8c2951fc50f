#include "nmroute/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "nmroute/errors.hpp"
#include "nmroute/kernels.hpp"

namespace nmr {

namespace fs = std::filesystem;
using nlohmann::json;

double psnr(std::span<const float> a, std::span<const float> b, double max_val) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("psnr: inputs differ in size or are empty");
  double mse = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

double psnr(const Tensor<float>& a, const Tensor<float>& b, double max_val) {
  if (a.shape() != b.shape()) throw DimensionError("psnr: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return psnr(a.data(), b.data(), max_val);
}

double ssim(const Tensor<float>& a, const Tensor<float>& b, double max_val) {
  if (a.shape() != b.shape()) throw DimensionError("ssim: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::size_t C, H, W;
  if (a.rank() == 2) {
    C = 1, H = a.dim(0), W = a.dim(1);
  } else if (a.rank() == 3) {
    C = a.dim(0), H = a.dim(1), W = a.dim(2);
  } else {
    throw DimensionError("ssim expects [H,W] or [C,H,W], got " + shape_str(a.shape()));
  }
  constexpr std::size_t win = 11;
  constexpr double sigma = 1.5;
  if (H < win || W < win) throw DimensionError("ssim: images must be at least 11x11");

  std::array<double, win> g{};
  double gsum = 0;
  for (std::size_t i = 0; i < win; ++i) {
    const double d = static_cast<double>(i) - (win - 1) / 2.0;
    gsum += g[i] = std::exp(-d * d / (2 * sigma * sigma));
  }
  for (auto& v : g) v /= gsum;

  const double c1 = (0.01 * max_val) * (0.01 * max_val);
  const double c2 = (0.03 * max_val) * (0.03 * max_val);
  auto x = a.data();
  auto y = b.data();
  double total = 0;
  std::size_t windows = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const float* px = x.data() + c * H * W;
    const float* py = y.data() + c * H * W;
    for (std::size_t i = 0; i + win <= H; ++i) {
      for (std::size_t j = 0; j + win <= W; ++j) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::size_t u = 0; u < win; ++u) {
          for (std::size_t v = 0; v < win; ++v) {
            const double w = g[u] * g[v];
            const double xv = px[(i + u) * W + j + v], yv = py[(i + u) * W + j + v];
            mx += w * xv;
            my += w * yv;
            sxx += w * xv * xv;
            syy += w * yv * yv;
            sxy += w * xv * yv;
          }
        }
        const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++windows;
      }
    }
  }
  return total / static_cast<double>(windows);
}

std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

const EvalRow& EvalReport::row(const std::string& model, const std::string& group) const {
  for (const auto& r : rows) {
    if (r.model == model && r.group == group) return r;
  }
  throw ContractError("report has no row " + model + "/" + group);
}

double EvalReport::routed_fraction(const std::string& group, std::size_t branch) const {
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g] == group) return routing_by_group.at(g).at(branch);
  }
  throw ContractError("report has no group " + group);
}

namespace {

struct SampleMetrics {
  std::vector<double> psnr, ssim;
};

// Runs `branch` over the samples in `indices` and scores each one.
void score_branch(Model& model, const Dataset& data, std::size_t branch,
                  const std::vector<std::size_t>& indices, const EvalOptions& options,
                  SampleMetrics& out) {
  NoGradGuard guard;
  const Shape sample = data.sample_shape();
  const std::size_t per = numel(sample);
  for (std::size_t start = 0; start < indices.size(); start += options.batch_size) {
    const std::size_t end = std::min(indices.size(), start + options.batch_size);
    std::vector<std::size_t> idx(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                 indices.begin() + static_cast<std::ptrdiff_t>(end));
    const auto y = data.degraded_batch(idx);
    const auto x = data.clean_batch(idx);
    const auto xhat = model.net().forward_branch(y, branch, ops::Mode::eval, options.path);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Tensor<float> a(sample, std::vector<float>(xhat.data().begin() + static_cast<std::ptrdiff_t>(k * per),
                                                       xhat.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * per)));
      const Tensor<float> b(sample, std::vector<float>(x.data().begin() + static_cast<std::ptrdiff_t>(k * per),
                                                       x.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * per)));
      out.psnr[idx[k]] = psnr(a, b);
      out.ssim[idx[k]] = ssim(a, b);
    }
  }
}

double mean_of(const std::vector<double>& v, const std::vector<std::size_t>& idx) {
  double s = 0;
  for (auto i : idx) s += v[i];
  return idx.empty() ? 0.0 : s / static_cast<double>(idx.size());
}

std::size_t base_parameter_count(const RestorationNet<float>& net) {
  std::size_t n = 0;
  for (const auto& p : net.parameters()) {
    if (p.name.rfind("restoration.conv", 0) == 0 || p.name.rfind("restoration.bank0.", 0) == 0) {
      n += p.tensor.numel();
    }
  }
  return n;
}

}  // namespace

EvalReport evaluate(Model& model, const Dataset& data, const EvalOptions& options) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  const Shape sample = data.sample_shape();
  if (sample.size() != 3 || sample[0] != model.config().channels) {
    throw DimensionError("evaluate: dataset samples " + shape_str(sample) + " do not match the model");
  }
  const std::size_t N = data.size(), L = model.num_branches();
  const std::size_t H = sample[1], W = sample[2];
  if (options.batch_size == 0) throw ContractError("evaluate: batch size must be positive");
  if (options.force_branch && *options.force_branch >= L) throw ContractError("evaluate: forced branch out of range");

  EvalReport report;
  report.forced_branch = options.force_branch;
  for (const auto& b : model.net().config().branches) report.branch_names.push_back(b.pattern.str());

  // Generating noise level groups, ascending.
  std::map<double, std::vector<std::size_t>> by_sigma;
  for (std::size_t s = 0; s < N; ++s) by_sigma[data.sigmas[s]].push_back(s);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> groups;
  for (auto& [sigma, idx] : by_sigma) groups.emplace_back(format_number(sigma), idx);
  std::vector<std::size_t> all(N);
  std::iota(all.begin(), all.end(), 0);

  // Routing.
  std::vector<std::size_t> route(N, 0);
  if (options.force_branch) {
    std::fill(route.begin(), route.end(), *options.force_branch);
  } else if (model.routed()) {
    for (std::size_t start = 0; start < N; start += options.batch_size) {
      std::vector<std::size_t> idx(std::min(options.batch_size, N - start));
      std::iota(idx.begin(), idx.end(), start);
      const auto r = model.route(data.degraded_batch(idx));
      std::copy(r.begin(), r.end(), route.begin() + static_cast<std::ptrdiff_t>(start));
    }
  }

  // Fixed-branch metrics over every sample.
  std::vector<SampleMetrics> branch(L, SampleMetrics{std::vector<double>(N), std::vector<double>(N)});
  for (std::size_t i = 0; i < L; ++i) score_branch(model, data, i, all, options, branch[i]);

  // Routed metrics: each sample goes through its selected branch only.
  SampleMetrics routed{std::vector<double>(N), std::vector<double>(N)};
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<std::size_t> idx;
    for (std::size_t s = 0; s < N; ++s) {
      if (route[s] == i) idx.push_back(s);
    }
    if (!idx.empty()) score_branch(model, data, i, idx, options, routed);
  }

  auto add_rows = [&](const std::string& name, const SampleMetrics& m) {
    for (const auto& [g, idx] : groups) report.rows.push_back({name, g, idx.size(), mean_of(m.psnr, idx), mean_of(m.ssim, idx)});
    report.rows.push_back({name, "all", N, mean_of(m.psnr, all), mean_of(m.ssim, all)});
  };
  add_rows("routed", routed);
  for (std::size_t i = 0; i < L; ++i) add_rows("branch" + std::to_string(i), branch[i]);
  if (model.net().config().branches.back().pattern.is_dense()) add_rows("dense", branch[L - 1]);

  report.routing.assign(L, 0.0);
  for (auto r : route) report.routing[r] += 1.0 / static_cast<double>(N);
  for (const auto& [g, idx] : groups) {
    report.groups.push_back(g);
    std::vector<double> frac(L, 0.0);
    for (auto s : idx) frac[route[s]] += 1.0 / static_cast<double>(idx.size());
    report.routing_by_group.push_back(frac);
  }

  for (std::size_t i = 0; i < L; ++i) report.branch_flops.push_back(model.net().branch_flops(i, H, W));
  report.dense_flops = model.net().dense_flops(H, W);
  const bool classifier_runs = model.routed() && !options.force_branch;
  report.classifier_flops = classifier_runs ? classifier_flops(model.classifier().config(), H, W) : 0.0;
  report.average_flops = report.classifier_flops;
  for (std::size_t i = 0; i < L; ++i) report.average_flops += report.routing[i] * report.branch_flops[i];
  report.average_flops_percent = 100.0 * report.average_flops / report.dense_flops;

  report.base_parameters = base_parameter_count(model.net());
  report.classifier_parameters = model.routed() ? model.classifier().parameter_count() : 0;
  report.total_parameters = model.net().parameter_count() + report.classifier_parameters;
  return report;
}

void write_report_csv(const fs::path& path, const EvalReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "model,sigma,count,psnr,ssim\n";
  for (const auto& r : report.rows) {
    os << r.model << "," << r.group << "," << r.count << "," << format_number(r.psnr) << ","
       << format_number(r.ssim) << "\n";
  }
}

json report_json(const EvalReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"model", r.model}, {"sigma", r.group}, {"count", r.count},
                    {"psnr", format_number(r.psnr)}, {"ssim", format_number(r.ssim)}});
  }
  json by_group = json::object();
  for (std::size_t g = 0; g < report.groups.size(); ++g) by_group[report.groups[g]] = report.routing_by_group[g];
  return json{{"rows", rows},
              {"branches", report.branch_names},
              {"routing", report.routing},
              {"routing_by_sigma", by_group},
              {"branch_flops", report.branch_flops},
              {"classifier_flops", report.classifier_flops},
              {"average_flops", report.average_flops},
              {"dense_flops", report.dense_flops},
              {"average_flops_percent", report.average_flops_percent},
              {"base_parameters", report.base_parameters},
              {"total_parameters", report.total_parameters},
              {"classifier_parameters", report.classifier_parameters},
              {"forced_branch", report.forced_branch ? json(*report.forced_branch) : json(nullptr)}};
}

void write_report_json(const fs::path& path, const EvalReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << report_json(report).dump(2) << "\n";
}

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

std::string svg_open(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
         "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string num(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << v;
  return os.str();
}

}  // namespace

std::string probability_curve_svg(const std::vector<EpochLog>& logs, std::size_t num_branches) {
  const int w = 640, h = 360, left = 50, right = 130, top = 20, bottom = 40;
  const double pw = w - left - right, ph = h - top - bottom;
  std::string s = svg_open(w, h);
  s += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(h - bottom) + "\" x2=\"" +
       std::to_string(w - right) + "\" y2=\"" + std::to_string(h - bottom) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(top) + "\" x2=\"" + std::to_string(left) +
       "\" y2=\"" + std::to_string(h - bottom) + "\" stroke=\"black\"/>\n";
  s += "<text x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(h - 10) + "\" font-size=\"12\">epoch (all stages)</text>\n";
  s += "<text x=\"5\" y=\"" + std::to_string(top + 10) + "\" font-size=\"12\">mean p</text>\n";
  const std::size_t n = logs.size();
  for (std::size_t i = 0; i < num_branches; ++i) {
    std::string pts;
    for (std::size_t e = 0; e < n; ++e) {
      const double px = left + (n > 1 ? pw * static_cast<double>(e) / static_cast<double>(n - 1) : 0.0);
      const double p = i < logs[e].mean_p.size() ? logs[e].mean_p[i] : 0.0;
      pts += num(px) + "," + num(top + ph * (1.0 - p)) + " ";
    }
    const char* color = kPalette[i % 6];
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    s += "<text x=\"" + std::to_string(w - right + 10) + "\" y=\"" + std::to_string(top + 20 + 18 * i) +
         "\" font-size=\"12\" fill=\"" + color + "\">p_" + std::to_string(i) + "</text>\n";
  }
  return s + "</svg>\n";
}

std::string psnr_flops_svg(const EvalReport& report) {
  const int w = 640, h = 360, left = 60, right = 140, top = 20, bottom = 40;
  const double pw = w - left - right, ph = h - top - bottom;
  struct Point {
    std::string label;
    double flops, psnr;
  };
  std::vector<Point> pts;
  for (std::size_t i = 0; i < report.branch_flops.size(); ++i) {
    pts.push_back({report.branch_names[i], 100.0 * report.branch_flops[i] / report.dense_flops,
                   report.row("branch" + std::to_string(i)).psnr});
  }
  pts.push_back({"routed", report.average_flops_percent, report.row("routed").psnr});
  double lo = pts[0].psnr, hi = pts[0].psnr;
  for (const auto& p : pts) {
    if (std::isfinite(p.psnr)) lo = std::min(lo, p.psnr), hi = std::max(hi, p.psnr);
  }
  if (hi - lo < 1e-9) hi = lo + 1.0;
  std::string s = svg_open(w, h);
  s += "<text x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(h - 10) +
       "\" font-size=\"12\">FLOPs (% of dense)</text>\n<text x=\"5\" y=\"15\" font-size=\"12\">PSNR (dB) " +
       num(lo) + " to " + num(hi) + "</text>\n";
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const double px = left + pw * std::clamp(pts[k].flops, 0.0, 110.0) / 110.0;
    const double py = top + ph * (1.0 - (pts[k].psnr - lo) / (hi - lo));
    const char* color = k + 1 == pts.size() ? "#d62728" : "#1f77b4";
    s += "<circle cx=\"" + num(px) + "\" cy=\"" + num(py) + "\" r=\"5\" fill=\"" + color + "\"/>\n";
    s += "<text x=\"" + num(px + 8) + "\" y=\"" + num(py + 4) + "\" font-size=\"11\">" + pts[k].label + "</text>\n";
  }
  return s + "</svg>\n";
}

// ---------------------------------------------------------------------------
// Kernel benchmark

namespace {

template <typename F>
double median_ms(std::size_t repeats, F&& f) {
  std::vector<double> times;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

}  // namespace

std::vector<BenchRow> bench_kernels(const BenchConfig& config) {
  if (config.repeats == 0) throw ContractError("bench: repeats must be positive");
  std::vector<BenchRow> out;
  std::mt19937_64 rng(config.seed);
  for (std::size_t size : config.sizes) {
    const auto weight = Tensor<float>::randn({size, size}, rng);
    const auto x = Tensor<float>::randn({size, config.n_cols}, rng);
    for (const auto& pat : config.patterns) {
      const NmPattern pattern = NmPattern::parse(pat);
      const auto mask = compute_mask(weight, pattern);
      const auto masked = apply_mask(weight, mask);
      const auto packed = compress(weight, mask);
      std::vector<float> y_dense(size * config.n_cols), y_masked(y_dense.size()), y_packed(y_dense.size());

      BenchRow row;
      row.rows = row.cols = size;
      row.n = config.n_cols;
      row.pattern = pattern.str();
      row.dense_ms = median_ms(config.repeats, [&] {
        kernels::gemm_nn(size, config.n_cols, size, weight.data().data(), x.data().data(), y_dense.data(), false);
      });
      row.masked_ms = median_ms(config.repeats, [&] {
        kernels::gemm_nn(size, config.n_cols, size, masked.data().data(), x.data().data(), y_masked.data(), false);
      });
      row.compressed_ms = median_ms(config.repeats, [&] {
        compressed_gemm(packed, x.data().data(), config.n_cols, y_packed.data(), false);
      });
      for (std::size_t i = 0; i < y_masked.size(); ++i) {
        row.max_abs_diff = std::max(row.max_abs_diff, static_cast<double>(std::abs(y_masked[i] - y_packed[i])));
      }
      row.equivalent = row.max_abs_diff <= 1e-4;
      row.dense_bytes = weight.numel() * sizeof(float);
      row.value_bytes = packed.value_bytes();
      row.index_bytes = packed.index_bytes();
      row.group_count = mask.group_count();
      out.push_back(row);
    }
  }
  return out;
}

void write_bench_csv(const fs::path& path, const std::vector<BenchRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "rows,cols,n,pattern,dense_ms,masked_ms,compressed_ms,speedup_vs_dense,dense_bytes,value_bytes,"
        "index_bytes,group_count,max_abs_diff,equivalent\n";
  for (const auto& r : rows) {
    os << r.rows << "," << r.cols << "," << r.n << "," << r.pattern << "," << format_number(r.dense_ms) << ","
       << format_number(r.masked_ms) << "," << format_number(r.compressed_ms) << ","
       << format_number(r.dense_ms / r.compressed_ms) << "," << r.dense_bytes << "," << r.value_bytes << ","
       << r.index_bytes << "," << r.group_count << "," << format_number(r.max_abs_diff) << ","
       << (r.equivalent ? "true" : "false") << "\n";
  }
}

// ---------------------------------------------------------------------------
// Experiments

ExperimentResult run_experiment(const ModelConfig& model_config, const TrainConfig& train_config,
                                const DatasetBundle& data, const EvalOptions& eval_options,
                                Pipeline pipeline) {
  Model model(model_config, train_config.sr_ste, train_config.seed);
  Trainer trainer(model, train_config, data.train, &data.test, pipeline);
  ExperimentResult result;
  if (pipeline == Pipeline::staged) {
    trainer.run(1);
    result.stage1_accuracy = classifier_accuracy(model, data.test.size() ? data.test : data.train);
  }
  trainer.run();
  if (pipeline == Pipeline::scratch) {
    result.stage1_accuracy = classifier_accuracy(model, data.test.size() ? data.test : data.train);
  }
  result.logs = trainer.logs();
  result.report = evaluate(model, data.test.size() ? data.test : data.train, eval_options);
  return result;
}

std::vector<AblationRow> ablate_classification_types(const std::vector<std::string>& sets,
                                                     const DatasetBundle& data,
                                                     const ModelConfig& model_config,
                                                     const TrainConfig& train_config) {
  std::vector<AblationRow> rows;
  for (const auto& set : sets) {
    ModelConfig mc = model_config;
    mc.branches = set;
    mc.costs.clear();
    const std::size_t L = mc.num_branches();
    // Pseudo labels are defined over the full tier set; collapse them onto
    // the available branches by rank.
    DatasetBundle local = data;
    if (L != data.config.num_classes) {
      auto remap = [&](Dataset& d) {
        for (auto& l : d.labels) l = L == 1 ? 0 : (l * L) / data.config.num_classes;
      };
      remap(local.train);
      remap(local.test);
    }
    const auto result = run_experiment(mc, train_config, local);
    AblationRow row;
    row.branches = set;
    for (const auto& g : result.report.groups) {
      row.groups.push_back(g);
      row.psnr.push_back(result.report.row("routed", g).psnr);
    }
    row.groups.push_back("all");
    row.psnr.push_back(result.report.row("routed").psnr);
    row.average_flops_percent = result.report.average_flops_percent;
    row.routing = result.report.routing;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "branches";
  if (!rows.empty()) {
    for (const auto& g : rows[0].groups) os << ",psnr_" << (g == "all" ? "average" : "sigma" + g);
  }
  os << ",flops_percent,routing\n";
  for (const auto& r : rows) {
    os << r.branches;
    for (double p : r.psnr) os << "," << format_number(p);
    os << "," << format_number(r.average_flops_percent) << ",";
    for (std::size_t i = 0; i < r.routing.size(); ++i) os << (i ? ";" : "") << format_number(r.routing[i]);
    os << "\n";
  }
}

}  // namespace nmr
