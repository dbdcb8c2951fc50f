#include "nmroute/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json_util.hpp"
#include "nmroute/errors.hpp"
#include "nmroute/tensor_io.hpp"

namespace nmr {

namespace fs = std::filesystem;
using nlohmann::json;

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(seed), hi(seed), lo(stream), hi(stream), lo(index), hi(index)};
  return std::mt19937_64(seq);
}

Tensor<float> procedural_clean(std::size_t channels, std::size_t height, std::size_t width,
                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto range = [&](double a, double b) { return a + (b - a) * u(rng); };
  std::vector<double> gray(height * width);

  const double base = range(0.3, 0.7), gx = range(-0.4, 0.4), gy = range(-0.4, 0.4);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      gray[i * width + j] = base + gx * (static_cast<double>(j) / width - 0.5) +
                            gy * (static_cast<double>(i) / height - 0.5);
    }
  }

  const int rects = static_cast<int>(rng() % 4);
  for (int r = 0; r < rects; ++r) {
    std::size_t y0 = rng() % height, y1 = rng() % height, x0 = rng() % width, x1 = rng() % width;
    if (y0 > y1) std::swap(y0, y1);
    if (x0 > x1) std::swap(x0, x1);
    const double value = range(0.1, 0.9), alpha = range(0.5, 1.0);
    for (std::size_t i = y0; i <= y1; ++i)
      for (std::size_t j = x0; j <= x1; ++j)
        gray[i * width + j] = (1 - alpha) * gray[i * width + j] + alpha * value;
  }

  const int waves = 1 + static_cast<int>(rng() % 2);
  for (int w = 0; w < waves; ++w) {
    const double amp = range(0.0, 0.12), cycles = range(0.5, 4.0);
    const double theta = range(0.0, std::numbers::pi), phase = range(0.0, 2 * std::numbers::pi);
    const double fx = cycles * std::cos(theta) / width, fy = cycles * std::sin(theta) / height;
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j)
        gray[i * width + j] += amp * std::sin(2 * std::numbers::pi * (fx * j + fy * i) + phase);
  }

  Tensor<float> out({channels, height, width});
  auto d = out.mutable_data();
  for (std::size_t c = 0; c < channels; ++c) {
    const double tint = channels == 1 ? 0.0 : range(-0.1, 0.1);
    for (std::size_t k = 0; k < gray.size(); ++k) {
      d[c * gray.size() + k] = static_cast<float>(std::clamp(gray[k] + tint, 0.0, 1.0));
    }
  }
  return out;
}

Tensor<float> gaussian_noise(const Shape& shape, double sigma, std::mt19937_64& rng) {
  if (sigma < 0) throw ContractError("noise level must be non-negative");
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<float> out(shape);
  const double s = sigma / 255.0;
  for (auto& v : out.mutable_data()) v = static_cast<float>(s * normal(rng));
  return out;
}

Tensor<float> synth_gaussian(const Tensor<float>& x, double sigma, std::mt19937_64& rng) {
  const auto noise = gaussian_noise(x.shape(), sigma, rng);
  Tensor<float> y(x.shape());
  auto xd = x.data();
  auto nd = noise.data();
  auto yd = y.mutable_data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = std::clamp(xd[i] + nd[i], 0.0f, 1.0f);
  return y;
}

double variance(std::span<const float> values) {
  if (values.empty()) return 0;
  double mean = 0;
  for (float v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double sq = 0;
  for (float v : values) sq += (v - mean) * (v - mean);
  return sq / static_cast<double>(values.size());
}

namespace {

std::vector<double> residual(const Tensor<float>& y, const Tensor<float>& x) {
  if (y.shape() != x.shape()) {
    throw DimensionError("residual: " + shape_str(y.shape()) + " vs " + shape_str(x.shape()));
  }
  auto yd = y.data();
  auto xd = x.data();
  std::vector<double> r(yd.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<double>(yd[i]) - xd[i];
  return r;
}

double variance_of(const std::vector<double>& v) {
  if (v.empty()) return 0;
  double mean = 0;
  for (double a : v) mean += a;
  mean /= static_cast<double>(v.size());
  double sq = 0;
  for (double a : v) sq += (a - mean) * (a - mean);
  return sq / static_cast<double>(v.size());
}

double median_of(const std::vector<double>& sorted, std::size_t begin, std::size_t end) {
  const std::size_t n = end - begin;
  const std::size_t mid = begin + n / 2;
  return n % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
}

}  // namespace

double residual_variance(const Tensor<float>& y, const Tensor<float>& x) {
  return variance_of(residual(y, x));
}

std::size_t DifficultyTiers::classify(double var) const {
  std::size_t c = 0;
  for (double t : thresholds) c += t < var ? 1 : 0;
  return c;
}

DifficultyTiers compute_tiers(std::vector<double> variances, std::size_t num_classes) {
  if (num_classes == 0) throw ContractError("compute_tiers: need at least one class");
  if (variances.size() < num_classes) {
    throw ContractError("compute_tiers: " + std::to_string(variances.size()) +
                        " variances cannot fill " + std::to_string(num_classes) + " tiers");
  }
  std::sort(variances.begin(), variances.end());
  const std::size_t n = variances.size();
  DifficultyTiers tiers;
  for (std::size_t t = 0; t < num_classes; ++t) {
    const std::size_t begin = t * n / num_classes, end = (t + 1) * n / num_classes;
    tiers.medians.push_back(median_of(variances, begin, end));
    if (t + 1 < num_classes) tiers.thresholds.push_back(0.5 * (variances[end - 1] + variances[end]));
    if (t && !(tiers.medians[t] > tiers.medians[t - 1])) {
      throw ContractError("compute_tiers: variances are degenerate, tier medians do not increase");
    }
  }
  return tiers;
}

LabeledSample residual_remap(const Tensor<float>& y, const Tensor<float>& x,
                             const DifficultyTiers& tiers) {
  if (tiers.medians.empty()) throw ContractError("residual_remap: no tiers");
  auto r = residual(y, x);
  const double var = variance_of(r);
  if (!(var > 0)) throw ContractError("residual_remap: residual has zero variance");
  LabeledSample out;
  out.pseudo_class = tiers.classify(var);
  const double scale = std::sqrt(tiers.medians[out.pseudo_class]) / std::sqrt(var);
  for (auto& v : r) v *= scale;
  out.remapped_variance = variance_of(r);
  out.clean = x.clone();
  out.degraded = Tensor<float>(x.shape());
  auto xd = x.data();
  auto yd = out.degraded.mutable_data();
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double raw = xd[i] + r[i];
    const double clamped = std::clamp(raw, 0.0, 1.0);
    out.clamped += clamped != raw ? 1 : 0;
    yd[i] = static_cast<float>(clamped);
  }
  return out;
}

Tensor<float> deblur_fuse(const std::vector<Tensor<float>>& frames) {
  if (frames.empty()) throw ContractError("deblur_fuse: no frames");
  std::vector<double> acc(frames[0].numel(), 0.0);
  for (const auto& f : frames) {
    if (f.shape() != frames[0].shape()) throw DimensionError("deblur_fuse: frame shapes differ");
    auto d = f.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
  }
  Tensor<float> out(frames[0].shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < acc.size(); ++i) {
    o[i] = static_cast<float>(acc[i] / static_cast<double>(frames.size()));
  }
  return out;
}

std::size_t fused_class(std::size_t frame_count, const std::vector<std::size_t>& frame_counts) {
  for (std::size_t i = 0; i < frame_counts.size(); ++i) {
    if (frame_counts[i] == frame_count) return i;
  }
  throw ContractError("fused_class: no class fuses " + std::to_string(frame_count) + " frames");
}

std::vector<Tensor<float>> shifted_frames(const Tensor<float>& x, std::size_t count) {
  if (x.rank() != 3) throw DimensionError("shifted_frames expects [C,H,W]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto src = x.data();
  std::vector<Tensor<float>> frames;
  for (std::size_t f = 0; f < count; ++f) {
    Tensor<float> frame(x.shape());
    auto d = frame.mutable_data();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          d[(c * H + i) * W + j] = src[(c * H + i) * W + std::min(j + f, W - 1)];
    frames.push_back(std::move(frame));
  }
  return frames;
}

namespace {

Tensor<float> crop(const Tensor<float>& image, std::size_t top, std::size_t left, std::size_t patch) {
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  (void)H;
  Tensor<float> out({C, patch, patch});
  auto src = image.data();
  auto d = out.mutable_data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < patch; ++i)
      for (std::size_t j = 0; j < patch; ++j)
        d[(c * patch + i) * patch + j] = src[(c * H + top + i) * W + left + j];
  return out;
}

void check_patchable(const Tensor<float>& image, std::size_t patch) {
  if (image.rank() != 3) throw DimensionError("expected image [C,H,W], got " + shape_str(image.shape()));
  if (patch == 0 || patch > image.dim(1) || patch > image.dim(2)) {
    throw DimensionError("patch " + std::to_string(patch) + " does not fit image " +
                         shape_str(image.shape()));
  }
}

}  // namespace

std::vector<Tensor<float>> extract_patches(const Tensor<float>& image, std::size_t patch,
                                           std::size_t stride) {
  check_patchable(image, patch);
  if (stride == 0) throw ContractError("extract_patches: stride must be positive");
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i + patch <= image.dim(1); i += stride)
    for (std::size_t j = 0; j + patch <= image.dim(2); j += stride) out.push_back(crop(image, i, j, patch));
  return out;
}

Tensor<float> random_crop(const Tensor<float>& image, std::size_t patch, std::mt19937_64& rng) {
  check_patchable(image, patch);
  const std::size_t top = rng() % (image.dim(1) - patch + 1);
  const std::size_t left = rng() % (image.dim(2) - patch + 1);
  return crop(image, top, left, patch);
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

std::size_t pnm_number(std::istream& is, const fs::path& path) {
  const std::string tok = pnm_token(is);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), ::isdigit)) {
    throw FormatError("malformed PNM header in " + path.string());
  }
  return std::stoul(tok);
}

}  // namespace

Tensor<float> read_pnm(const fs::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ContractError("read_pnm: channels must be 1 or 3");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const std::string magic = pnm_token(is);
  const bool ascii = magic == "P2" || magic == "P3";
  const std::size_t src_channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
    throw FormatError(path.string() + " is not a PGM/PPM file");
  }
  const std::size_t W = pnm_number(is, path), H = pnm_number(is, path);
  const std::size_t maxval = pnm_number(is, path);
  if (W == 0 || H == 0 || maxval == 0 || maxval > 65535) throw FormatError("bad PNM header in " + path.string());

  std::vector<double> px(H * W * src_channels);
  for (auto& v : px) {
    if (ascii) {
      v = static_cast<double>(pnm_number(is, path));
    } else if (maxval < 256) {
      const int ch = is.get();
      if (ch == EOF) throw FormatError("truncated PNM data in " + path.string());
      v = ch;
    } else {
      const int a = is.get(), b = is.get();
      if (b == EOF) throw FormatError("truncated PNM data in " + path.string());
      v = a * 256 + b;
    }
    v /= static_cast<double>(maxval);
  }

  Tensor<float> out({channels, H, W});
  auto d = out.mutable_data();
  for (std::size_t k = 0; k < H * W; ++k) {
    for (std::size_t c = 0; c < channels; ++c) {
      double v;
      if (channels == src_channels) {
        v = px[k * src_channels + c];
      } else if (channels == 1) {
        v = (px[k * 3] + px[k * 3 + 1] + px[k * 3 + 2]) / 3.0;
      } else {
        v = px[k];
      }
      d[c * H * W + k] = static_cast<float>(v);
    }
  }
  return out;
}

void write_pgm(const fs::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw DimensionError("write_pgm expects [1|3,H,W], got " + shape_str(image.shape()));
  }
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << (C == 1 ? "P5" : "P6") << "\n" << W << " " << H << "\n255\n";
  auto d = image.data();
  for (std::size_t k = 0; k < H * W; ++k) {
    for (std::size_t c = 0; c < C; ++c) {
      const double v = std::clamp(static_cast<double>(d[c * H * W + k]), 0.0, 1.0);
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255))));
    }
  }
}

void SynthConfig::validate() const {
  if (sigmas.empty()) throw ConfigError("synth: sigma list is empty");
  for (double s : sigmas) {
    if (!(s >= 0)) throw ConfigError("synth: noise levels must be non-negative");
  }
  if (num_classes == 0) throw ConfigError("synth: need at least one class");
  if (channels != 1 && channels != 3) throw ConfigError("synth: channels must be 1 or 3");
  if (patch_size == 0) throw ConfigError("synth: patch size must be positive");
  if (train_samples == 0) throw ConfigError("synth: empty dataset rejected (train samples = 0)");
  if (train_samples < num_classes) throw ConfigError("synth: fewer train samples than classes");
}

void to_json(json& j, const SynthConfig& c) {
  j = json{{"sigmas", c.sigmas},
           {"num_classes", c.num_classes},
           {"channels", c.channels},
           {"patch_size", c.patch_size},
           {"train_samples", c.train_samples},
           {"test_samples", c.test_samples},
           {"seed", c.seed},
           {"remap", c.remap},
           {"source_dir", c.source_dir}};
}

void from_json(const json& j, SynthConfig& c) {
  const std::string what = "synth";
  jsonutil::require_object(j, what);
  jsonutil::reject_unknown(j, {"sigmas", "num_classes", "channels", "patch_size", "train_samples",
                               "test_samples", "seed", "remap", "source_dir"},
                           what);
  jsonutil::read(j, "sigmas", c.sigmas, what);
  jsonutil::read(j, "num_classes", c.num_classes, what);
  jsonutil::read(j, "channels", c.channels, what);
  jsonutil::read(j, "patch_size", c.patch_size, what);
  jsonutil::read(j, "train_samples", c.train_samples, what);
  jsonutil::read(j, "test_samples", c.test_samples, what);
  jsonutil::read(j, "seed", c.seed, what);
  jsonutil::read(j, "remap", c.remap, what);
  jsonutil::read(j, "source_dir", c.source_dir, what);
}

Shape Dataset::sample_shape() const {
  if (!degraded.defined()) return {};
  const auto& s = degraded.shape();
  return Shape(s.begin() + 1, s.end());
}

std::vector<std::size_t> Dataset::histogram(std::size_t num_classes) const {
  std::vector<std::size_t> h(num_classes, 0);
  for (auto l : labels) {
    if (l >= num_classes) throw ContractError("label " + std::to_string(l) + " out of range");
    ++h[l];
  }
  return h;
}

namespace {

Tensor<float> gather(const Tensor<float>& stacked, const std::vector<std::size_t>& indices) {
  Shape shape = stacked.shape();
  const std::size_t per = numel(shape) / shape[0];
  const std::size_t count = shape[0];
  shape[0] = indices.size();
  Tensor<float> out(shape);
  auto src = stacked.data();
  auto d = out.mutable_data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= count) throw ContractError("sample index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[k] * per), per,
                d.begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return out;
}

Tensor<float> stack_samples(const std::vector<Tensor<float>>& items, const Shape& sample) {
  Shape shape{items.size()};
  shape.insert(shape.end(), sample.begin(), sample.end());
  Tensor<float> out(shape);
  auto d = out.mutable_data();
  const std::size_t per = numel(sample);
  for (std::size_t k = 0; k < items.size(); ++k) {
    auto s = items[k].data();
    std::copy(s.begin(), s.end(), d.begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return out;
}

}  // namespace

Tensor<float> Dataset::degraded_batch(const std::vector<std::size_t>& indices) const {
  return gather(degraded, indices);
}

Tensor<float> Dataset::clean_batch(const std::vector<std::size_t>& indices) const {
  return gather(clean, indices);
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.degraded = degraded_batch(indices);
  out.clean = clean_batch(indices);
  for (auto i : indices) {
    out.labels.push_back(labels.at(i));
    out.sigmas.push_back(sigmas.at(i));
  }
  return out;
}

namespace {

std::vector<Tensor<float>> load_sources(const SynthConfig& config) {
  std::vector<Tensor<float>> sources;
  if (config.source_dir.empty()) return sources;
  if (!fs::is_directory(config.source_dir)) throw IoError("source directory " + config.source_dir + " not found");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(config.source_dir)) {
    const auto ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) sources.push_back(read_pnm(f, config.channels));
  if (sources.empty()) throw IoError("no PGM/PPM images in " + config.source_dir);
  return sources;
}

struct RawSplit {
  std::vector<Tensor<float>> clean, noisy;
  std::vector<double> sigmas, variances;
};

RawSplit generate_split(const SynthConfig& config, const std::vector<Tensor<float>>& sources,
                        std::uint64_t stream, std::size_t count) {
  RawSplit raw;
  const std::size_t P = config.patch_size;
  for (std::size_t s = 0; s < count; ++s) {
    auto rng = sample_rng(config.seed, stream, s);
    Tensor<float> x = sources.empty() ? procedural_clean(config.channels, P, P, rng)
                                      : random_crop(sources[s % sources.size()], P, rng);
    const double sigma = config.sigmas[s % config.sigmas.size()];
    Tensor<float> y = synth_gaussian(x, sigma, rng);
    raw.variances.push_back(residual_variance(y, x));
    raw.sigmas.push_back(sigma);
    raw.clean.push_back(std::move(x));
    raw.noisy.push_back(std::move(y));
  }
  return raw;
}

Dataset finalize_split(const SynthConfig& config, const DifficultyTiers& tiers, RawSplit raw,
                       std::size_t& clamped, std::size_t& pixels) {
  Dataset out;
  std::vector<Tensor<float>> degraded;
  for (std::size_t s = 0; s < raw.clean.size(); ++s) {
    if (config.remap) {
      auto sample = residual_remap(raw.noisy[s], raw.clean[s], tiers);
      clamped += sample.clamped;
      out.labels.push_back(sample.pseudo_class);
      degraded.push_back(std::move(sample.degraded));
    } else {
      out.labels.push_back(tiers.classify(raw.variances[s]));
      degraded.push_back(raw.noisy[s]);
    }
    pixels += raw.clean[s].numel();
  }
  out.sigmas = std::move(raw.sigmas);
  if (!raw.clean.empty()) {
    const Shape sample = raw.clean[0].shape();
    out.degraded = stack_samples(degraded, sample);
    out.clean = stack_samples(raw.clean, sample);
  } else {
    const Shape empty{0, config.channels, config.patch_size, config.patch_size};
    out.degraded = Tensor<float>(empty);
    out.clean = Tensor<float>(empty);
  }
  return out;
}

}  // namespace

DatasetBundle synthesize(const SynthConfig& config) {
  config.validate();
  const auto sources = load_sources(config);
  DatasetBundle bundle;
  bundle.config = config;
  auto train = generate_split(config, sources, 0, config.train_samples);
  auto test = generate_split(config, sources, 1, config.test_samples);
  bundle.tiers = compute_tiers(train.variances, config.num_classes);
  std::size_t clamped = 0, pixels = 0;
  bundle.train = finalize_split(config, bundle.tiers, std::move(train), clamped, pixels);
  bundle.test = finalize_split(config, bundle.tiers, std::move(test), clamped, pixels);
  bundle.clamp_fraction = pixels ? static_cast<double>(clamped) / static_cast<double>(pixels) : 0.0;
  return bundle;
}

namespace {

Tensor<double> to_tensor(const std::vector<double>& v) { return Tensor<double>({v.size()}, v); }

void write_split(const fs::path& dir, const Dataset& d) {
  fs::create_directories(dir);
  save_tensor(dir / "degraded.nmt", d.degraded);
  save_tensor(dir / "clean.nmt", d.clean);
  std::vector<double> labels(d.labels.begin(), d.labels.end());
  save_tensor(dir / "labels.nmt", to_tensor(labels));
  save_tensor(dir / "sigma.nmt", to_tensor(d.sigmas));
}

Dataset read_split(const fs::path& dir, std::size_t num_classes) {
  Dataset d;
  d.degraded = load_tensor<float>(dir / "degraded.nmt");
  d.clean = load_tensor<float>(dir / "clean.nmt");
  const auto labels = load_tensor<double>(dir / "labels.nmt");
  const auto sigmas = load_tensor<double>(dir / "sigma.nmt");
  if (d.degraded.shape() != d.clean.shape() || d.degraded.rank() != 4 ||
      labels.numel() != d.degraded.dim(0) || sigmas.numel() != labels.numel()) {
    throw FormatError("inconsistent tensors in dataset split " + dir.string());
  }
  for (double l : labels.data()) {
    if (l < 0 || l >= static_cast<double>(num_classes) || l != std::floor(l)) {
      throw FormatError("bad label in " + dir.string());
    }
    d.labels.push_back(static_cast<std::size_t>(l));
  }
  d.sigmas.assign(sigmas.data().begin(), sigmas.data().end());
  return d;
}

json split_manifest(const Dataset& d, std::size_t num_classes) {
  return json{{"samples", d.size()}, {"shape", d.degraded.shape()}, {"histogram", d.histogram(num_classes)}};
}

}  // namespace

void write_dataset(const fs::path& dir, const DatasetBundle& bundle) {
  fs::create_directories(dir);
  const std::size_t L = bundle.config.num_classes;
  write_split(dir / "train", bundle.train);
  write_split(dir / "test", bundle.test);
  json manifest{{"format", "nmroute-dataset"},
                {"version", 1},
                {"config", bundle.config},
                {"tiers", {{"medians", bundle.tiers.medians}, {"thresholds", bundle.tiers.thresholds}}},
                {"clamp_fraction", bundle.clamp_fraction},
                {"splits", {{"train", split_manifest(bundle.train, L)}, {"test", split_manifest(bundle.test, L)}}}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << "\n";
}

DatasetBundle read_dataset(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw IoError("dataset manifest " + path.string() + " not found");
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("malformed dataset manifest " + path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "nmroute-dataset") {
    throw FormatError(path.string() + " is not a dataset manifest");
  }
  DatasetBundle bundle;
  try {
    bundle.config = manifest.at("config").get<SynthConfig>();
    bundle.tiers.medians = manifest.at("tiers").at("medians").get<std::vector<double>>();
    bundle.tiers.thresholds = manifest.at("tiers").at("thresholds").get<std::vector<double>>();
    bundle.clamp_fraction = manifest.at("clamp_fraction").get<double>();
  } catch (const json::exception& e) {
    throw FormatError("malformed dataset manifest " + path.string() + ": " + e.what());
  }
  const std::size_t L = bundle.config.num_classes;
  bundle.train = read_split(dir / "train", L);
  bundle.test = read_split(dir / "test", L);
  for (const char* split : {"train", "test"}) {
    const auto& d = std::string(split) == "train" ? bundle.train : bundle.test;
    if (manifest["splits"][split]["samples"].get<std::size_t>() != d.size() ||
        manifest["splits"][split]["histogram"].get<std::vector<std::size_t>>() != d.histogram(L)) {
      throw FormatError("dataset split '" + std::string(split) + "' disagrees with its manifest");
    }
  }
  return bundle;
}

}  // namespace nmr
