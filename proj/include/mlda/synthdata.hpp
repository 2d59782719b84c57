#pragma once

// Two-domain synthetic segmentation data. Both domains draw target geometry
// (near-round ellipses) from the same SceneSpec, each sample from its own
// seed; appearance (palette, texture, noise, distractor blobs) comes from a
// per-domain style.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mlda/core.hpp"

namespace mlda {

using Rgb = std::array<float, 3>;

struct DomainStyle {
  Rgb background{0.f, 0.f, 0.f};
  Rgb tissue{0.f, 0.f, 0.f};
  Rgb target{0.f, 0.f, 0.f};
  double noise_std = 0.0;
  double texture_density = 0.0;
  double contrast = 1.0;
  std::pair<int, int> distractor_count_range{0, 0};

  void validate() const;
  bool operator==(const DomainStyle&) const = default;
};

/// Clean, high-contrast source appearance.
DomainStyle style_source();
/// Noisy, textured target appearance with a shifted palette.
DomainStyle style_target();

struct SceneSpec {
  int image_size = 96;
  std::pair<int, int> target_count_range{1, 3};
  // Mean radius as a fraction of image_size; axes are r*sqrt(e) and r/sqrt(e).
  std::pair<double, double> target_radius_range{0.07, 0.14};
  std::pair<double, double> ellipticity_range{1.0, 1.35};

  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

struct Ellipse {
  double cx = 0, cy = 0;  // pixel units
  double a = 0, b = 0;    // semi-axes, a >= b
  double theta = 0;

  bool contains(double x, double y) const;
};

struct SceneGeometry {
  std::vector<Ellipse> targets;
};

SceneGeometry sample_geometry(std::uint64_t seed, const SceneSpec& scene);

/// Pixel (y, x) is foreground iff its centre lies inside some target ellipse.
BinaryMask render_mask(const SceneGeometry& geometry, int image_size);

Sample generate_sample(std::uint64_t seed, const SceneSpec& scene, const DomainStyle& style, Domain domain);

enum class Split { Train, Test };
std::string_view to_string(Split s);

struct DomainSplits {
  std::vector<std::string> train;
  std::vector<std::string> test;
  bool operator==(const DomainSplits&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  SceneSpec scene;
  DomainStyle style_S;
  DomainStyle style_T;
  DomainSplits splits_S;
  DomainSplits splits_T;

  const DomainSplits& splits(Domain d) const { return d == Domain::S ? splits_S : splits_T; }
  const DomainStyle& style(Domain d) const { return d == Domain::S ? style_S : style_T; }
  std::filesystem::path image_path(Domain d, Split s, const std::string& id) const;
  std::filesystem::path mask_path(Domain d, Split s, const std::string& id) const;
  std::filesystem::path manifest_path() const { return root / "manifest.json"; }
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seed used to render sample `index` of `domain` inside a dataset.
std::uint64_t sample_seed(std::uint64_t dataset_seed, Domain domain, int index);
std::string sample_id(Domain domain, int index);
/// Inverse of sample_id; throws DatasetError on malformed ids.
int sample_index(const std::string& id);

DatasetManifest generate_dataset(const std::filesystem::path& out_dir, int n_per_domain, const SceneSpec& scene,
                                 const DomainStyle& style_S, const DomainStyle& style_T, double split_fraction,
                                 std::uint64_t seed);

DatasetManifest read_manifest(const std::filesystem::path& manifest_path);

struct Dataset {
  DatasetManifest manifest;
  std::map<std::pair<Domain, Split>, std::vector<Sample>> samples;

  const std::vector<Sample>& get(Domain d, Split s) const { return samples.at({d, s}); }
};

/// Reads every sample listed in the manifest; samples come back in manifest
/// order. Throws DatasetError naming the id when a file is missing.
Dataset load_dataset(const std::filesystem::path& manifest_path);

void write_sample_png(const Sample& sample, const std::filesystem::path& image_path,
                      const std::filesystem::path& mask_path);

}  // namespace mlda
