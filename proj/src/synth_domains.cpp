#include "anrl/synth_domains.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "anrl/random.hpp"

namespace anrl {

static_assert(std::endian::native == std::endian::little, "cache format is little-endian");

namespace {

constexpr char kCacheMagic[8] = {'A', 'N', 'R', 'L', 'S', 'P', 'L', 'T'};
constexpr std::uint32_t kCacheVersion = 1;

struct FaceGeometry {
  double cx, cy, rx, ry;
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Normalized elliptical radius; 1 on the face outline.
double face_radius(const FaceGeometry& f, double x, double y) {
  const double dx = (x - f.cx) / f.rx, dy = (y - f.cy) / f.ry;
  return std::sqrt(dx * dx + dy * dy);
}

double dome(double r) { return r < 1.0 ? std::cos(0.5 * std::numbers::pi * r) : 0.0; }

void gaussian_blur(std::vector<double>& plane, std::size_t side, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  const int s = static_cast<int>(side);
  std::vector<double> tmp(plane.size());
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * plane[y * s + std::clamp(x + i, 0, s - 1)];
      tmp[y * s + x] = acc;
    }
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[std::clamp(y + i, 0, s - 1) * s + x];
      plane[y * s + x] = acc;
    }
}

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("split cache: truncated file");
  return v;
}

}  // namespace

void DomainSpec::validate() const {
  for (double g : color_gain) {
    if (!(g > 0.0)) throw std::invalid_argument("DomainSpec " + std::to_string(id) + ": gains must be positive");
  }
  if (blur_sigma < 0.0) throw std::invalid_argument("DomainSpec " + std::to_string(id) + ": blur_sigma must be >= 0");
  if (noise_std < 0.0) throw std::invalid_argument("DomainSpec " + std::to_string(id) + ": noise_std must be >= 0");
}

std::string DomainSpec::to_json() const {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["color_gain"] = color_gain;
  j["color_bias"] = color_bias;
  j["blur_sigma"] = blur_sigma;
  j["noise_std"] = noise_std;
  j["background_palette"] = background_palette;
  j["spoof_cast"] = spoof_cast;
  return j.dump();
}

DomainSpec DomainSpec::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  DomainSpec s;
  s.id = j.at("id").get<int>();
  s.color_gain = j.at("color_gain").get<std::array<double, 3>>();
  s.color_bias = j.at("color_bias").get<std::array<double, 3>>();
  s.blur_sigma = j.at("blur_sigma").get<double>();
  s.noise_std = j.at("noise_std").get<double>();
  s.background_palette = j.at("background_palette").get<std::uint64_t>();
  s.spoof_cast = j.at("spoof_cast").get<std::array<double, 3>>();
  s.validate();
  return s;
}

std::vector<DomainSpec> default_domain_specs() {
  std::vector<DomainSpec> specs(4);
  specs[0] = {0, {1.00, 0.95, 0.90}, {0.02, 0.00, -0.02}, 0.0, 0.010, 0x1001, {0.06, -0.03, -0.03}};
  specs[1] = {1, {0.85, 0.95, 1.05}, {-0.03, 0.02, 0.05}, 0.5, 0.015, 0x2002, {-0.03, 0.06, -0.03}};
  specs[2] = {2, {1.10, 1.00, 0.85}, {0.04, 0.03, -0.03}, 0.3, 0.012, 0x3003, {-0.03, -0.03, 0.06}};
  specs[3] = {3, {0.70, 0.75, 0.80}, {0.10, 0.08, 0.07}, 0.6, 0.015, 0x4004, {-0.05, -0.05, -0.05}};
  return specs;
}

HsvResult rgb_to_hsv(const std::vector<double>& rgb, std::size_t pixels) {
  if (rgb.size() != 3 * pixels) throw ShapeError("rgb_to_hsv: expected 3 planes of " + std::to_string(pixels));
  HsvResult out;
  out.hsv.resize(3 * pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    double c[3];
    for (int k = 0; k < 3; ++k) {
      const double v = rgb[k * pixels + p];
      if (v < 0.0 || v > 1.0) out.clamped = true;
      c[k] = clamp01(v);
    }
    const double mx = std::max({c[0], c[1], c[2]});
    const double mn = std::min({c[0], c[1], c[2]});
    const double delta = mx - mn;
    double h = 0.0;
    if (delta > 0.0) {
      if (mx == c[0]) {
        h = std::fmod((c[1] - c[2]) / delta, 6.0);
      } else if (mx == c[1]) {
        h = (c[2] - c[0]) / delta + 2.0;
      } else {
        h = (c[0] - c[1]) / delta + 4.0;
      }
      h /= 6.0;
      if (h < 0.0) h += 1.0;
    }
    out.hsv[p] = h;
    out.hsv[pixels + p] = mx > 0.0 ? delta / mx : 0.0;
    out.hsv[2 * pixels + p] = mx;
  }
  return out;
}

Sample make_sample(const DomainSpec& spec, int label, std::uint64_t seed, const ImageGeometry& geom) {
  spec.validate();
  if (label != 0 && label != 1) throw std::invalid_argument("make_sample: label must be 0 or 1");
  const std::size_t s = geom.side, px = s * s;
  const double side = static_cast<double>(s);
  Rng rng(derive_seed(seed, 0x5A3D));
  Rng palette(spec.background_palette);

  // Background: domain palette pair, per-sample jitter, gradient plus a slow wave.
  double bg_a[3], bg_b[3];
  for (int k = 0; k < 3; ++k) bg_a[k] = palette.uniform(0.15, 0.85);
  for (int k = 0; k < 3; ++k) bg_b[k] = palette.uniform(0.15, 0.85);
  for (int k = 0; k < 3; ++k) {
    bg_a[k] = clamp01(bg_a[k] + rng.uniform(-0.08, 0.08));
    bg_b[k] = clamp01(bg_b[k] + rng.uniform(-0.08, 0.08));
  }
  const double grad_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double wave_period = rng.uniform(12.0, 24.0);
  const double wave_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  FaceGeometry face{};
  face.cx = side * (0.5 + rng.uniform(-0.08, 0.08));
  face.cy = side * (0.5 + rng.uniform(-0.08, 0.08));
  face.ry = side * rng.uniform(0.28, 0.36);
  face.rx = face.ry * rng.uniform(0.80, 0.95);
  const double skin_r = rng.uniform(0.55, 0.85);
  const double skin[3] = {skin_r, skin_r * rng.uniform(0.70, 0.85), skin_r * rng.uniform(0.55, 0.72)};
  const double eye_dx = face.rx * 0.38, eye_dy = -face.ry * 0.22;

  const double moire_period = rng.uniform(2.2, 3.5);
  const double moire_angle = rng.uniform(0.0, std::numbers::pi);
  const double moire_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double moire_amp = rng.uniform(0.07, 0.12);
  // Capture illumination varies per sample in every domain.
  const double contrast = rng.uniform(0.75, 1.25);
  const double brightness = rng.uniform(-0.08, 0.08);

  std::vector<double> rgb(3 * px);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
      const double t = 0.5 + 0.5 * ((fx / side - 0.5) * std::cos(grad_angle) + (fy / side - 0.5) * std::sin(grad_angle));
      const double wave = 0.05 * std::sin(2.0 * std::numbers::pi * (fx + 0.5 * fy) / wave_period + wave_phase);
      const double r = face_radius(face, fx, fy);
      const double mask = std::clamp((1.0 - r) / 0.08, 0.0, 1.0);
      const double shade = 0.7 + 0.3 * dome(r);
      double eyes = 0.0;
      for (double side_sign : {-1.0, 1.0}) {
        const double ex = fx - (face.cx + side_sign * eye_dx), ey = fy - (face.cy + eye_dy);
        eyes += std::exp(-(ex * ex + ey * ey) / (2.0 * 1.2 * 1.2));
      }
      double texture = 0.0;
      if (label == 0) {
        const double u = fx * std::cos(moire_angle) + fy * std::sin(moire_angle);
        texture = moire_amp * std::sin(2.0 * std::numbers::pi * u / moire_period + moire_phase);
      }
      for (int k = 0; k < 3; ++k) {
        const double bg = (1.0 - t) * bg_a[k] + t * bg_b[k] + wave;
        const double fg = skin[k] * shade * (1.0 - 0.45 * eyes);
        double v = (1.0 - mask) * bg + mask * fg + mask * texture;
        if (label == 0) v += spec.spoof_cast[k];
        rgb[k * px + y * s + x] = 0.5 + contrast * (v - 0.5) + brightness;
      }
    }
  }

  // Domain transform.
  for (int k = 0; k < 3; ++k) {
    std::vector<double> plane(rgb.begin() + k * px, rgb.begin() + (k + 1) * px);
    for (auto& v : plane) v = spec.color_gain[k] * v + spec.color_bias[k];
    gaussian_blur(plane, s, spec.blur_sigma);
    for (auto& v : plane) v = clamp01(v + spec.noise_std * rng.normal());
    std::copy(plane.begin(), plane.end(), rgb.begin() + k * px);
  }

  Sample out;
  out.label = label;
  out.domain_id = spec.id;
  out.image.resize(6 * px);
  std::copy(rgb.begin(), rgb.end(), out.image.begin());
  auto hsv = rgb_to_hsv(rgb, px);
  std::copy(hsv.hsv.begin(), hsv.hsv.end(), out.image.begin() + 3 * px);

  const std::size_t h = geom.depth_side;
  out.depth.assign(h * h, 0.0);
  if (label == 1) {
    const double cell = side / static_cast<double>(h);
    double peak = 0.0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < h; ++x) {
        const double v = dome(face_radius(face, (x + 0.5) * cell, (y + 0.5) * cell));
        out.depth[y * h + x] = v;
        peak = std::max(peak, v);
      }
    for (auto& v : out.depth) v /= peak;
  }
  return out;
}

double face_laplacian_energy(const Sample& sample, std::size_t side) {
  const std::size_t px = side * side;
  std::vector<double> lum(px);
  for (std::size_t p = 0; p < px; ++p) {
    lum[p] = 0.299 * sample.image[p] + 0.587 * sample.image[px + p] + 0.114 * sample.image[2 * px + p];
  }
  const double c = static_cast<double>(side) * 0.5, radius = 0.18 * static_cast<double>(side);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 1; y + 1 < side; ++y)
    for (std::size_t x = 1; x + 1 < side; ++x) {
      const double dx = x + 0.5 - c, dy = y + 0.5 - c;
      if (dx * dx + dy * dy > radius * radius) continue;
      const double lap = lum[(y - 1) * side + x] + lum[(y + 1) * side + x] + lum[y * side + x - 1] +
                         lum[y * side + x + 1] - 4.0 * lum[y * side + x];
      total += std::abs(lap);
      ++count;
    }
  return count ? total / static_cast<double>(count) : 0.0;
}

Protocol build_protocol(std::size_t n_domains, int held_out, const ProtocolSizes& sizes, std::uint64_t data_seed) {
  if (n_domains < 3) throw std::invalid_argument("build_protocol: need at least 3 domains");
  if (held_out < 0 || static_cast<std::size_t>(held_out) >= n_domains) {
    throw std::invalid_argument("build_protocol: held_out " + std::to_string(held_out) + " out of range");
  }
  Protocol p;
  p.target_domain = held_out;
  const std::size_t stride = sizes.train_per_domain + sizes.test_per_domain;
  for (std::size_t d = 0; d < n_domains; ++d) {
    const int dom = static_cast<int>(d);
    if (dom != held_out) p.source_domains.push_back(dom);
    for (std::size_t j = 0; j < stride; ++j) {
      const bool is_train = j < sizes.train_per_domain;
      const std::size_t local = is_train ? j : j - sizes.train_per_domain;
      SampleRef ref;
      ref.id = d * stride + j;
      ref.domain = dom;
      ref.label = local % 2 == 0 ? 1 : 0;
      ref.seed = derive_seed(data_seed, ref.id);
      if (is_train && dom != held_out) p.train.push_back(ref);
      if (!is_train && dom == held_out) p.test.push_back(ref);
    }
  }
  return p;
}

DomainBatch materialize(const std::vector<SampleRef>& refs, const std::vector<DomainSpec>& specs,
                        const ImageGeometry& geom) {
  const std::size_t n = refs.size(), px = geom.side * geom.side, h = geom.depth_side;
  std::vector<double> images(n * 6 * px), depth(n * h * h);
  DomainBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = refs[i];
    if (r.domain < 0 || static_cast<std::size_t>(r.domain) >= specs.size()) {
      throw std::invalid_argument("materialize: no spec for domain " + std::to_string(r.domain));
    }
    Sample s = make_sample(specs[r.domain], r.label, r.seed, geom);
    std::copy(s.image.begin(), s.image.end(), images.begin() + i * 6 * px);
    std::copy(s.depth.begin(), s.depth.end(), depth.begin() + i * h * h);
    b.labels.push_back(r.label);
    b.domain_ids.push_back(r.domain);
    b.sample_ids.push_back(r.id);
  }
  b.images = Tensor::from({n, 6, geom.side, geom.side}, std::move(images));
  b.depth = Tensor::from({n, 1, h, h}, std::move(depth));
  return b;
}

void write_split_cache(std::ostream& out, const std::string& header_json, const std::vector<SampleRef>& refs,
                       const std::vector<DomainSpec>& specs, const ImageGeometry& geom) {
  out.write(kCacheMagic, sizeof(kCacheMagic));
  put(out, kCacheVersion);
  put(out, static_cast<std::uint32_t>(header_json.size()));
  out.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));
  put(out, static_cast<std::uint32_t>(geom.side));
  put(out, static_cast<std::uint32_t>(geom.depth_side));
  put(out, static_cast<std::uint64_t>(refs.size()));
  for (const auto& r : refs) {
    Sample s = make_sample(specs.at(static_cast<std::size_t>(r.domain)), r.label, r.seed, geom);
    put(out, r.id);
    put(out, static_cast<std::int32_t>(r.domain));
    put(out, static_cast<std::int32_t>(r.label));
    put(out, r.seed);
    out.write(reinterpret_cast<const char*>(s.image.data()), static_cast<std::streamsize>(s.image.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(s.depth.data()), static_cast<std::streamsize>(s.depth.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("split cache: write failed");
}

SplitCache read_split_cache(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0) throw std::runtime_error("split cache: bad magic");
  const auto version = get<std::uint32_t>(in);
  if (version != kCacheVersion) throw std::runtime_error("split cache: unsupported version " + std::to_string(version));
  SplitCache c;
  c.header_json.resize(get<std::uint32_t>(in));
  in.read(c.header_json.data(), static_cast<std::streamsize>(c.header_json.size()));
  const std::size_t side = get<std::uint32_t>(in), h = get<std::uint32_t>(in);
  const auto count = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    SampleRef r;
    r.id = get<std::uint64_t>(in);
    r.domain = get<std::int32_t>(in);
    r.label = get<std::int32_t>(in);
    r.seed = get<std::uint64_t>(in);
    Sample s;
    s.label = r.label;
    s.domain_id = r.domain;
    s.image.resize(6 * side * side);
    s.depth.resize(h * h);
    in.read(reinterpret_cast<char*>(s.image.data()), static_cast<std::streamsize>(s.image.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(s.depth.data()), static_cast<std::streamsize>(s.depth.size() * sizeof(double)));
    if (!in) throw std::runtime_error("split cache: truncated record");
    c.refs.push_back(r);
    c.samples.push_back(std::move(s));
  }
  return c;
}

}  // namespace anrl
