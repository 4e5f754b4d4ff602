#include "dualnorm/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <random>

#include "dualnorm/dnt.hpp"
#include "dualnorm/error.hpp"
#include "json.hpp"

namespace dualnorm {

void DomainDataset::validate() const {
  if (num_classes < 2) throw ContractError("dataset: need at least 2 classes");
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const Case& c = cases[k];
    const std::string name = "case" + std::to_string(k);
    const Shape s = c.image.shape();
    if (s.n != 1 || s.c != 1 || s.h != height || s.w != width) {
      throw ContractError(name + ": image shape " + s.str() + " does not match dataset " +
                          std::to_string(height) + "x" + std::to_string(width));
    }
    if (c.label.size() != height * width) throw ContractError(name + ": label size mismatch");
    for (int l : c.label) {
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
        throw ContractError(name + ": label value " + std::to_string(l) + " outside the label set");
      }
    }
  }
}

bool DomainDataset::operator==(const DomainDataset& o) const {
  if (domain_id != o.domain_id || num_classes != o.num_classes || height != o.height || width != o.width ||
      cases.size() != o.cases.size()) {
    return false;
  }
  for (std::size_t k = 0; k < cases.size(); ++k) {
    if (!(cases[k].image == o.cases[k].image) || cases[k].label != o.cases[k].label) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// synthetic domains

void SynthConfig::validate() const {
  if (num_classes < 2) throw ConfigError("synth: num_classes must be at least 2");
  if (intensity.size() != num_classes) {
    throw ConfigError("synth: expected " + std::to_string(num_classes) + " class intensities, got " +
                      std::to_string(intensity.size()));
  }
  for (const ClassIntensity& ci : intensity) {
    if (!(ci.std > 0.0)) throw ConfigError("synth: class intensity std must be positive");
  }
  if (size == 0 || size % 16 != 0) {
    throw ConfigError("synth: image size " + std::to_string(size) + " is not a positive multiple of 16");
  }
  if (blobs_min > blobs_max) throw ConfigError("synth: blobs_min exceeds blobs_max");
  if (!(radius_min > 0.0) || radius_max < radius_min) throw ConfigError("synth: bad blob radius range");
  if (case_jitter < 0.0 || noise < 0.0) throw ConfigError("synth: jitter and noise must be non-negative");
  if (num_cases == 0) throw ConfigError("synth: num_cases must be positive");
  if (min_background < 0.0 || min_background > 1.0) throw ConfigError("synth: min_background outside [0,1]");
}

SynthConfig default_synth_config(int domain, std::uint64_t seed, double shift, std::size_t num_classes) {
  SynthConfig cfg;
  cfg.domain_id = domain;
  cfg.seed = seed;
  cfg.num_classes = num_classes;
  cfg.intensity.assign(num_classes, ClassIntensity{});
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double sign = c % 2 == 0 ? 1.0 : -1.0;
    cfg.intensity[c].mean = 2.0 * static_cast<double>(c) + domain * shift * sign;
  }
  return cfg;
}

namespace {

constexpr int kMaxLayoutAttempts = 200;

std::vector<int> draw_layout(const SynthConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = cfg.size;
  std::uniform_int_distribution<std::size_t> blobs(cfg.blobs_min, cfg.blobs_max);
  std::uniform_real_distribution<double> radius(cfg.radius_min, cfg.radius_max);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  for (int attempt = 0; attempt < kMaxLayoutAttempts; ++attempt) {
    std::vector<int> label(n * n, 0);
    for (std::size_t cls = 1; cls < cfg.num_classes; ++cls) {
      const std::size_t count = blobs(rng);
      for (std::size_t b = 0; b < count; ++b) {
        const double ra = radius(rng), rb = radius(rng), th = angle(rng);
        const double margin = std::min(std::max(ra, rb), n / 2.0);
        std::uniform_real_distribution<double> centre(margin, n - margin);
        const double cy = centre(rng), cx = centre(rng);
        const double ct = std::cos(th), st = std::sin(th);
        for (std::size_t y = 0; y < n; ++y)
          for (std::size_t x = 0; x < n; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            const double u = (dx * ct + dy * st) / ra, v = (-dx * st + dy * ct) / rb;
            if (u * u + v * v <= 1.0) label[y * n + x] = static_cast<int>(cls);
          }
      }
    }
    std::vector<std::size_t> counts(cfg.num_classes, 0);
    for (int l : label) ++counts[static_cast<std::size_t>(l)];
    bool ok = static_cast<double>(counts[0]) >= cfg.min_background * static_cast<double>(label.size());
    // Later blobs may cover a whole earlier class; every class that drew a blob must survive.
    if (cfg.blobs_min > 0) {
      for (std::size_t cls = 1; cls < cfg.num_classes; ++cls) ok = ok && counts[cls] > 0;
    }
    if (ok) return label;
  }
  throw ConfigError("synth: could not place blobs with at least " + std::to_string(cfg.min_background) +
                    " background after " + std::to_string(kMaxLayoutAttempts) + " attempts");
}

}  // namespace

DomainDataset generate_domain(const SynthConfig& cfg) {
  cfg.validate();
  DomainDataset d;
  d.domain_id = cfg.domain_id;
  d.num_classes = cfg.num_classes;
  d.height = d.width = cfg.size;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < cfg.num_cases; ++k) {
    Case c;
    c.label = draw_layout(cfg, rng);
    std::vector<double> case_mean(cfg.num_classes);
    for (std::size_t cls = 0; cls < cfg.num_classes; ++cls) {
      case_mean[cls] = cfg.intensity[cls].mean + cfg.case_jitter * unit(rng);
    }
    c.image = Tensor(Shape{1, 1, cfg.size, cfg.size});
    for (std::size_t i = 0; i < c.label.size(); ++i) {
      const auto cls = static_cast<std::size_t>(c.label[i]);
      double v = case_mean[cls] + cfg.intensity[cls].std * unit(rng);
      if (cfg.noise > 0.0) v += cfg.noise * unit(rng);
      c.image[i] = static_cast<float>(v);
    }
    d.cases.push_back(std::move(c));
  }
  return d;
}

// ---------------------------------------------------------------------------
// augmentation and normalization

Case rotate90(const Case& c, int quarter_turns) {
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return c;
  const std::size_t h = c.height(), w = c.width();
  const std::size_t oh = q % 2 == 0 ? h : w, ow = q % 2 == 0 ? w : h;
  Case out{Tensor(Shape{1, 1, oh, ow}), std::vector<int>(h * w)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      // Counter-clockwise turns.
      std::size_t ny = 0, nx = 0;
      switch (q) {
        case 1: ny = w - 1 - x; nx = y; break;
        case 2: ny = h - 1 - y; nx = w - 1 - x; break;
        default: ny = x; nx = h - 1 - y; break;
      }
      out.image[ny * ow + nx] = c.image[y * w + x];
      out.label[ny * ow + nx] = c.label[y * w + x];
    }
  return out;
}

Case hflip(const Case& c) {
  const std::size_t h = c.height(), w = c.width();
  Case out{Tensor(c.image.shape()), std::vector<int>(h * w)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      out.image[y * w + (w - 1 - x)] = c.image[y * w + x];
      out.label[y * w + (w - 1 - x)] = c.label[y * w + x];
    }
  return out;
}

Case augment(const Case& c, const AugmentOps& ops, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int turns = ops.rotate90s ? static_cast<int>(rng() % 4) : 0;
  const bool flip = ops.hflip && (rng() & 1u) != 0;
  Case out = rotate90(c, turns);
  return flip ? hflip(out) : out;
}

DomainDataset zscore_normalize(const DomainDataset& d, double eps) {
  DomainDataset out = d;
  for (Case& c : out.cases) {
    double sum = 0.0;
    for (float v : c.image.data()) sum += v;
    const double mean = sum / static_cast<double>(c.image.size());
    double sq = 0.0;
    for (float v : c.image.data()) sq += (v - mean) * (v - mean);
    const double sd = std::max(std::sqrt(sq / static_cast<double>(c.image.size())), eps);
    for (float& v : c.image.data()) v = static_cast<float>((v - mean) / sd);
  }
  return out;
}

// ---------------------------------------------------------------------------
// metrics

DiceResult dice_metric(const std::vector<int>& pred, const std::vector<int>& truth, std::size_t num_classes) {
  if (pred.size() != truth.size()) throw ShapeError("dice_metric: mask sizes differ");
  std::vector<std::size_t> p(num_classes, 0), t(num_classes, 0), both(num_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto a = static_cast<std::size_t>(pred[i]), b = static_cast<std::size_t>(truth[i]);
    if (a >= num_classes || b >= num_classes) throw ContractError("dice_metric: label outside the label set");
    ++p[a];
    ++t[b];
    if (a == b) ++both[a];
  }
  DiceResult r;
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (p[c] + t[c] == 0) {
      r.per_class.emplace_back();
      continue;
    }
    const double dice = 2.0 * static_cast<double>(both[c]) / static_cast<double>(p[c] + t[c]);
    r.per_class.emplace_back(dice);
    if (c > 0) {
      sum += dice;
      ++defined;
    }
  }
  if (defined > 0) r.mean = sum / static_cast<double>(defined);
  return r;
}

std::vector<std::size_t> boundary_pixels(const std::vector<int>& mask, std::size_t h, std::size_t w, int cls) {
  if (mask.size() != h * w) throw ShapeError("boundary_pixels: mask size does not match dims");
  std::vector<std::size_t> out;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (mask[y * w + x] != cls) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || mask[(y - 1) * w + x] != cls ||
                        mask[(y + 1) * w + x] != cls || mask[y * w + x - 1] != cls || mask[y * w + x + 1] != cls;
      if (edge) out.push_back(y * w + x);
    }
  return out;
}

namespace {

// Exact squared Euclidean distance to the nearest seed (Felzenszwalb-Huttenlocher).
std::vector<double> squared_distance_transform(const std::vector<std::size_t>& seeds, std::size_t h, std::size_t w) {
  const double inf = 1e30;
  std::vector<double> f(h * w, inf);
  for (std::size_t s : seeds) f[s] = 0.0;

  // Lower envelope of the parabolas rooted at the finite samples of one line.
  auto pass = [inf](const double* in, double* out, std::size_t n, std::size_t stride) {
    std::vector<std::size_t> v(n);
    std::vector<double> z(n + 1);
    long k = -1;
    for (std::size_t q = 0; q < n; ++q) {
      const double fq = in[q * stride];
      if (fq >= inf) continue;
      const double dq = static_cast<double>(q);
      double s = -inf;
      while (k >= 0) {
        const double dp = static_cast<double>(v[static_cast<std::size_t>(k)]);
        s = ((fq + dq * dq) - (in[v[static_cast<std::size_t>(k)] * stride] + dp * dp)) / (2.0 * (dq - dp));
        if (s > z[static_cast<std::size_t>(k)]) break;
        --k;
      }
      if (k < 0) s = -inf;
      ++k;
      v[static_cast<std::size_t>(k)] = q;
      z[static_cast<std::size_t>(k)] = s;
      z[static_cast<std::size_t>(k) + 1] = inf;
    }
    if (k < 0) {
      for (std::size_t q = 0; q < n; ++q) out[q * stride] = inf;
      return;
    }
    std::size_t j = 0;
    for (std::size_t q = 0; q < n; ++q) {
      while (z[j + 1] < static_cast<double>(q)) ++j;
      const double d = static_cast<double>(q) - static_cast<double>(v[j]);
      out[q * stride] = d * d + in[v[j] * stride];
    }
  };

  std::vector<double> g(h * w);
  for (std::size_t x = 0; x < w; ++x) pass(&f[x], &g[x], h, w);
  for (std::size_t y = 0; y < h; ++y) pass(&g[y * w], &f[y * w], w, 1);
  return f;
}

double mean_distance(const std::vector<std::size_t>& from, const std::vector<double>& sq_dist) {
  double sum = 0.0;
  for (std::size_t p : from) sum += std::sqrt(sq_dist[p]);
  return sum / static_cast<double>(from.size());
}

}  // namespace

std::optional<double> asd_metric(const std::vector<int>& pred, const std::vector<int>& truth, std::size_t h,
                                 std::size_t w, int cls, double spacing) {
  if (pred.size() != h * w || truth.size() != h * w) throw ShapeError("asd_metric: mask size does not match dims");
  const auto bp = boundary_pixels(pred, h, w, cls);
  const auto bt = boundary_pixels(truth, h, w, cls);
  if (bp.empty() || bt.empty()) return std::nullopt;
  const double pt = mean_distance(bp, squared_distance_transform(bt, h, w));
  const double tp = mean_distance(bt, squared_distance_transform(bp, h, w));
  return (pt + tp) / 2.0 * spacing;
}

// ---------------------------------------------------------------------------
// dataset container

std::filesystem::path dataset_base(const std::filesystem::path& p) {
  const auto ext = p.extension();
  if (ext == ".dnt" || ext == ".json") {
    std::filesystem::path base = p;
    return base.replace_extension();
  }
  return p;
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& base, const char* suffix) {
  return std::filesystem::path(base.string() + suffix);
}

}  // namespace

void write_dataset(const DomainDataset& d, const std::filesystem::path& base_in) {
  d.validate();
  const auto base = dataset_base(base_in);
  std::vector<NamedArray> arrays;
  nlohmann::json names = nlohmann::json::array();
  const std::vector<std::uint64_t> dims{d.height, d.width};
  for (std::size_t k = 0; k < d.cases.size(); ++k) {
    const std::string name = "case" + std::to_string(k);
    arrays.push_back(NamedArray{name + ".image", dims, d.cases[k].image.values()});
    std::vector<float> label(d.cases[k].label.begin(), d.cases[k].label.end());
    arrays.push_back(NamedArray{name + ".label", dims, std::move(label)});
    names.push_back(name);
  }
  const std::vector<std::uint8_t> bytes = encode_dnt(arrays);
  std::vector<int> label_set(d.num_classes);
  for (std::size_t c = 0; c < d.num_classes; ++c) label_set[c] = static_cast<int>(c);
  const nlohmann::json manifest = {{"format", "dualnorm-dataset"}, {"domain_id", d.domain_id},
                                   {"labels", label_set},           {"height", d.height},
                                   {"width", d.width},              {"cases", names},
                                   {"checksum", fnv1a_hex(bytes)}};
  write_file_bytes(with_suffix(base, ".dnt"), bytes);
  const std::string text = manifest.dump(2) + "\n";
  write_file_bytes(with_suffix(base, ".json"), std::vector<std::uint8_t>(text.begin(), text.end()));
}

DomainDataset read_dataset(const std::filesystem::path& base_in) {
  const auto base = dataset_base(base_in);
  const auto manifest_path = with_suffix(base, ".json");
  const std::vector<std::uint8_t> text = read_file_bytes(manifest_path);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(manifest_path.string() + ": " + e.what());
  }
  if (!m.is_object() || m.value("format", "") != "dualnorm-dataset") {
    throw IntegrityError(manifest_path.string() + ": not a dataset manifest");
  }
  const std::vector<std::uint8_t> bytes = read_file_bytes(with_suffix(base, ".dnt"));
  const std::vector<NamedArray> arrays = decode_dnt(bytes);
  if (m.value("checksum", "") != fnv1a_hex(bytes)) {
    throw IntegrityError(with_suffix(base, ".dnt").string() + ": checksum does not match the manifest");
  }

  DomainDataset d;
  std::vector<std::string> names;
  try {
    d.domain_id = m.at("domain_id").get<int>();
    d.num_classes = m.at("labels").size();
    d.height = m.at("height").get<std::size_t>();
    d.width = m.at("width").get<std::size_t>();
    names = m.at("cases").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(manifest_path.string() + ": " + e.what());
  }
  std::map<std::string, const NamedArray*> by_name;
  for (const NamedArray& a : arrays) by_name[a.name] = &a;
  if (by_name.size() != 2 * names.size()) {
    throw IntegrityError(base.string() + ": manifest lists " + std::to_string(names.size()) +
                         " cases but the container holds " + std::to_string(arrays.size()) + " arrays");
  }
  const std::vector<std::uint64_t> dims{d.height, d.width};
  for (const std::string& name : names) {
    auto img = by_name.find(name + ".image");
    auto lab = by_name.find(name + ".label");
    if (img == by_name.end() || lab == by_name.end()) {
      throw IntegrityError(base.string() + ": " + name + " is missing from the container");
    }
    if (img->second->dims != dims || lab->second->dims != dims) {
      throw IntegrityError(base.string() + ": " + name + " dims do not match the manifest");
    }
    Case c{Tensor(Shape{1, 1, d.height, d.width}, img->second->data), {}};
    c.label.reserve(lab->second->data.size());
    for (float v : lab->second->data) {
      if (v != std::floor(v) || v < 0.0f || v >= static_cast<float>(d.num_classes)) {
        throw IntegrityError(base.string() + ": " + name + " has label value outside the label set");
      }
      c.label.push_back(static_cast<int>(v));
    }
    d.cases.push_back(std::move(c));
  }
  return d;
}

}  // namespace dualnorm
