#include "mlda/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mlda/config_io.hpp"

namespace mlda {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kGeometrySalt = 0x6765'6f6d'6574'7279ULL;
constexpr std::uint64_t kAppearanceSalt[2] = {0x5350'4153'4d00'0001ULL, 0x4d41'5353'4f4e'0002ULL};
constexpr std::uint64_t kSplitSalt = 0x7370'6c69'7400'0000ULL;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Smooth random field in [0,1]: white noise, Gaussian blur, min-max rescale.
cv::Mat smooth_noise(std::mt19937_64& rng, int n, double sigma) {
  cv::Mat field(n, n, CV_32F);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) field.at<float>(y, x) = u(rng);
  cv::GaussianBlur(field, field, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT);
  double lo = 0, hi = 1;
  cv::minMaxLoc(field, &lo, &hi);
  field = (field - lo) / std::max(hi - lo, 1e-6);
  return field;
}

float quantile(const cv::Mat& field, double q) {
  std::vector<float> v(field.begin<float>(), field.end<float>());
  const auto k = static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

Rgb lerp(const Rgb& a, const Rgb& b, float t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

// Normalised elliptical radius of (x, y); <= 1 inside.
double elliptical_radius(const Ellipse& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double c = std::cos(e.theta), s = std::sin(e.theta);
  const double u = dx * c + dy * s, v = -dx * s + dy * c;
  return std::sqrt((u * u) / (e.a * e.a) + (v * v) / (e.b * e.b));
}

void check_rgb(const Rgb& c, const char* what) {
  for (float v : c)
    if (!(v >= 0.f && v <= 1.f)) throw std::invalid_argument(std::string("DomainStyle: ") + what + " color outside [0,1]");
}

}  // namespace

void DomainStyle::validate() const {
  check_rgb(background, "background");
  check_rgb(tissue, "tissue");
  check_rgb(target, "target");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("DomainStyle: noise_std must be >= 0");
  if (!(texture_density >= 0.0 && texture_density <= 1.0))
    throw std::invalid_argument("DomainStyle: texture_density must lie in [0,1]");
  if (!(contrast > 0.0)) throw std::invalid_argument("DomainStyle: contrast must be > 0");
  if (distractor_count_range.first < 0 || distractor_count_range.second < distractor_count_range.first)
    throw std::invalid_argument("DomainStyle: invalid distractor_count_range");
}

DomainStyle style_source() {
  DomainStyle s;
  s.background = {0.93f, 0.89f, 0.86f};
  s.tissue = {0.78f, 0.60f, 0.64f};
  s.target = {0.30f, 0.26f, 0.30f};
  s.noise_std = 0.03;
  s.texture_density = 0.25;
  s.contrast = 1.0;
  s.distractor_count_range = {1, 3};
  return s;
}

DomainStyle style_target() {
  // bluish stain, grainier, weaker contrast
  DomainStyle s;
  s.background = {0.891f, 0.875f, 0.878f};
  s.tissue = {0.648f, 0.540f, 0.664f};
  s.target = {0.444f, 0.290f, 0.330f};
  s.noise_std = 0.051;
  s.texture_density = 0.34;
  s.contrast = 0.925;
  s.distractor_count_range = {2, 5};
  return s;
}

void SceneSpec::validate() const {
  if (image_size < 32)
    throw std::invalid_argument("SceneSpec: image_size " + std::to_string(image_size) +
                                " < 32, targets would be unresolvable");
  if (target_count_range.first < 0 || target_count_range.second < target_count_range.first)
    throw std::invalid_argument("SceneSpec: invalid target_count_range");
  const auto [rlo, rhi] = target_radius_range;
  if (!(rlo > 0.0 && rhi < 0.5 && rlo <= rhi))
    throw std::invalid_argument("SceneSpec: target_radius_range must lie within (0, 0.5)");
  if (!(ellipticity_range.first >= 1.0 && ellipticity_range.first <= ellipticity_range.second))
    throw std::invalid_argument("SceneSpec: ellipticity_range must satisfy 1 <= lo <= hi");
}

bool Ellipse::contains(double x, double y) const { return elliptical_radius(*this, x, y) <= 1.0; }

SceneGeometry sample_geometry(std::uint64_t seed, const SceneSpec& scene) {
  scene.validate();
  std::mt19937_64 rng(splitmix64(seed ^ kGeometrySalt));
  const double n = scene.image_size;
  const int count = uniform_int(rng, scene.target_count_range.first, scene.target_count_range.second);
  SceneGeometry g;
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double r = uniform(rng, scene.target_radius_range.first, scene.target_radius_range.second) * n;
      const double e = uniform(rng, scene.ellipticity_range.first, scene.ellipticity_range.second);
      Ellipse el;
      el.a = r * std::sqrt(e);
      el.b = r / std::sqrt(e);
      el.theta = uniform(rng, 0.0, std::numbers::pi);
      const double margin = el.a + 1.0;
      if (2.0 * margin >= n) continue;
      el.cx = uniform(rng, margin, n - margin);
      el.cy = uniform(rng, margin, n - margin);
      const bool overlaps = std::any_of(g.targets.begin(), g.targets.end(), [&](const Ellipse& o) {
        return std::hypot(o.cx - el.cx, o.cy - el.cy) <= o.a + el.a + 1.0;
      });
      if (!overlaps) {
        g.targets.push_back(el);
        break;
      }
    }
  }
  return g;
}

BinaryMask render_mask(const SceneGeometry& geometry, int image_size) {
  BinaryMask m(image_size, image_size);
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x)
      for (const auto& e : geometry.targets)
        if (e.contains(x + 0.5, y + 0.5)) {
          m.at(y, x) = 1;
          break;
        }
  return m;
}

Sample generate_sample(std::uint64_t seed, const SceneSpec& scene, const DomainStyle& style, Domain domain) {
  scene.validate();
  style.validate();
  const int n = scene.image_size;
  const SceneGeometry geometry = sample_geometry(seed, scene);

  Sample s;
  s.domain = domain;
  s.id = std::string(to_string(domain)) + "_seed" + std::to_string(seed);
  s.mask = render_mask(geometry, n);
  s.image = Image(3, n, n);

  std::mt19937_64 rng(splitmix64(seed ^ kAppearanceSalt[domain == Domain::S ? 0 : 1]));
  std::vector<Rgb> canvas(static_cast<size_t>(n) * n, style.background);
  auto px = [&](int y, int x) -> Rgb& { return canvas[static_cast<size_t>(y) * n + x]; };

  // Tissue texture covering roughly texture_density of the field.
  const cv::Mat tissue_field = smooth_noise(rng, n, 3.0);
  if (style.texture_density > 0.0) {
    const float thr = quantile(tissue_field, 1.0 - style.texture_density);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const float alpha = std::clamp((tissue_field.at<float>(y, x) - thr) / 0.08f, 0.f, 1.f);
        px(y, x) = lerp(style.background, style.tissue, alpha);
      }
  }

  // Elongated distractor blobs coloured part-way towards the target colour.
  const int n_distractors = uniform_int(rng, style.distractor_count_range.first, style.distractor_count_range.second);
  const Rgb distractor_color = lerp(style.target, style.tissue, 0.4f);
  for (int i = 0; i < n_distractors; ++i) {
    Ellipse d;
    const double r = uniform(rng, 0.5, 1.0) * scene.target_radius_range.second * n;
    const double e = uniform(rng, 2.5, 4.0);
    d.a = r * std::sqrt(e);
    d.b = r / std::sqrt(e);
    d.theta = uniform(rng, 0.0, std::numbers::pi);
    d.cx = uniform(rng, 0.0, n);
    d.cy = uniform(rng, 0.0, n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (d.contains(x + 0.5, y + 0.5)) px(y, x) = distractor_color;
  }

  // Targets: mottled interior with a darker capsule ring near the boundary.
  const cv::Mat fine = smooth_noise(rng, n, 1.0);
  const auto mottling = static_cast<float>(0.5 * style.texture_density);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      if (!s.mask.at(y, x)) continue;
      double q = 2.0;
      for (const auto& t : geometry.targets) q = std::min(q, elliptical_radius(t, x + 0.5, y + 0.5));
      float scale = 1.f + mottling * (fine.at<float>(y, x) - 0.5f);
      if (q > 0.8) scale *= 0.75f;
      Rgb c = style.target;
      for (auto& v : c) v *= scale;
      px(y, x) = c;
    }

  std::normal_distribution<float> noise(0.f, static_cast<float>(style.noise_std));
  const auto contrast = static_cast<float>(style.contrast);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = 0.5f + contrast * (px(y, x)[c] - 0.5f);
        if (style.noise_std > 0.0) v += noise(rng);
        s.image.at(c, y, x) = std::clamp(v, 0.f, 1.f);
      }
  return s;
}

std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

fs::path DatasetManifest::image_path(Domain d, Split s, const std::string& id) const {
  return root / std::string(to_string(d)) / std::string(to_string(s)) / (id + ".img.png");
}

fs::path DatasetManifest::mask_path(Domain d, Split s, const std::string& id) const {
  return root / std::string(to_string(d)) / std::string(to_string(s)) / (id + ".mask.png");
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, Domain domain, int index) {
  return splitmix64(splitmix64(dataset_seed) + (domain == Domain::S ? 0ULL : 0x1000'0000ULL) +
                    static_cast<std::uint64_t>(index));
}

std::string sample_id(Domain domain, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05d", domain == Domain::S ? "S" : "T", index);
  return buf;
}

int sample_index(const std::string& id) {
  if (id.size() < 3 || id[1] != '_') throw DatasetError("malformed sample id '" + id + "'");
  try {
    return std::stoi(id.substr(2));
  } catch (const std::exception&) {
    throw DatasetError("malformed sample id '" + id + "'");
  }
}

void write_sample_png(const Sample& sample, const fs::path& image_path, const fs::path& mask_path) {
  const int h = sample.image.height, w = sample.image.width;
  cv::Mat img(h, w, CV_8UC3);
  cv::Mat mask(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto& p = img.at<cv::Vec3b>(y, x);
      // OpenCV stores BGR.
      for (int c = 0; c < 3; ++c)
        p[2 - c] = static_cast<std::uint8_t>(std::lround(std::clamp(sample.image.at(c, y, x), 0.f, 1.f) * 255.f));
      mask.at<std::uint8_t>(y, x) = sample.mask.at(y, x) ? 255 : 0;
    }
  if (!cv::imwrite(image_path.string(), img)) throw DatasetError("cannot write " + image_path.string());
  if (!cv::imwrite(mask_path.string(), mask)) throw DatasetError("cannot write " + mask_path.string());
}

DatasetManifest generate_dataset(const fs::path& out_dir, int n_per_domain, const SceneSpec& scene,
                                 const DomainStyle& style_S, const DomainStyle& style_T, double split_fraction,
                                 std::uint64_t seed) {
  if (!(split_fraction > 0.0 && split_fraction < 1.0))
    throw std::invalid_argument("generate_dataset: split_fraction must lie in (0,1)");
  if (n_per_domain < 5) throw std::invalid_argument("generate_dataset: n_per_domain must be >= 5");
  scene.validate();
  style_S.validate();
  style_T.validate();

  DatasetManifest m;
  m.root = out_dir;
  m.seed = seed;
  m.scene = scene;
  m.style_S = style_S;
  m.style_T = style_T;

  const int n_train = std::clamp(static_cast<int>(std::lround(n_per_domain * split_fraction)), 1, n_per_domain - 1);
  for (Domain d : {Domain::S, Domain::T}) {
    std::vector<int> order(static_cast<size_t>(n_per_domain));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(splitmix64(seed ^ kSplitSalt ^ (d == Domain::S ? 1ULL : 2ULL)));
    std::shuffle(order.begin(), order.end(), rng);
    std::sort(order.begin(), order.begin() + n_train);
    std::sort(order.begin() + n_train, order.end());

    auto& splits = d == Domain::S ? m.splits_S : m.splits_T;
    for (int i = 0; i < n_per_domain; ++i) {
      const bool train = i < n_train;
      const int index = order[static_cast<size_t>(i)];
      (train ? splits.train : splits.test).push_back(sample_id(d, index));
    }
    for (Split s : {Split::Train, Split::Test}) {
      const fs::path dir = out_dir / std::string(to_string(d)) / std::string(to_string(s));
      std::error_code ec;
      fs::create_directories(dir, ec);
      if (ec) throw DatasetError("cannot create " + dir.string() + ": " + ec.message());
      for (const auto& id : s == Split::Train ? splits.train : splits.test) {
        Sample sample = generate_sample(sample_seed(seed, d, sample_index(id)), scene, m.style(d), d);
        sample.id = id;
        write_sample_png(sample, m.image_path(d, s, id), m.mask_path(d, s, id));
      }
    }
  }

  std::ofstream out(m.manifest_path());
  if (!out) throw DatasetError("cannot write " + m.manifest_path().string());
  out << manifest_to_json(m).dump(2) << '\n';
  if (!out) throw DatasetError("failed writing " + m.manifest_path().string());
  return m;
}

DatasetManifest read_manifest(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DatasetError("cannot open manifest " + manifest_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DatasetError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  DatasetManifest m = manifest_from_json(j);
  m.root = manifest_path.parent_path();
  for (Domain d : {Domain::S, Domain::T}) {
    const auto& sp = m.splits(d);
    std::vector<std::string> train = sp.train, test = sp.test;
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    std::vector<std::string> both;
    std::set_intersection(train.begin(), train.end(), test.begin(), test.end(), std::back_inserter(both));
    if (!both.empty()) throw DatasetError("manifest lists id " + both.front() + " in both train and test");
  }
  return m;
}

namespace {

Sample read_sample(const DatasetManifest& m, Domain d, Split s, const std::string& id) {
  const fs::path ip = m.image_path(d, s, id), mp = m.mask_path(d, s, id);
  if (!fs::exists(ip)) throw DatasetError("sample " + id + ": missing image file " + ip.string());
  if (!fs::exists(mp)) throw DatasetError("sample " + id + ": missing mask file " + mp.string());
  const cv::Mat img = cv::imread(ip.string(), cv::IMREAD_COLOR);
  const cv::Mat mask = cv::imread(mp.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw DatasetError("sample " + id + ": unreadable image " + ip.string());
  if (mask.empty()) throw DatasetError("sample " + id + ": unreadable mask " + mp.string());
  Sample out;
  out.id = id;
  out.domain = d;
  out.image = Image(3, img.rows, img.cols);
  out.mask = BinaryMask(mask.rows, mask.cols);
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x) {
      const auto& p = img.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = static_cast<float>(p[2 - c]) / 255.f;
    }
  for (int y = 0; y < mask.rows; ++y)
    for (int x = 0; x < mask.cols; ++x) {
      const auto v = mask.at<std::uint8_t>(y, x);
      if (v != 0 && v != 255) throw DatasetError("sample " + id + ": mask value " + std::to_string(v) + " is not 0/255");
      out.mask.at(y, x) = v ? 1 : 0;
    }
  try {
    out.validate();
  } catch (const std::exception& e) {
    throw DatasetError(e.what());
  }
  return out;
}

}  // namespace

Dataset load_dataset(const fs::path& manifest_path) {
  Dataset ds;
  ds.manifest = read_manifest(manifest_path);
  for (Domain d : {Domain::S, Domain::T})
    for (Split s : {Split::Train, Split::Test}) {
      auto& out = ds.samples[{d, s}];
      const auto& sp = ds.manifest.splits(d);
      for (const auto& id : s == Split::Train ? sp.train : sp.test) out.push_back(read_sample(ds.manifest, d, s, id));
    }
  return ds;
}

}  // namespace mlda
