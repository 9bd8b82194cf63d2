#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "anrl/tensor.hpp"

namespace anrl {

/// Style/illumination transform defining one synthetic source.
struct DomainSpec {
  int id = 0;
  std::array<double, 3> color_gain{1.0, 1.0, 1.0};
  std::array<double, 3> color_bias{0.0, 0.0, 0.0};
  double blur_sigma = 0.0;
  double noise_std = 0.0;
  std::uint64_t background_palette = 0;
  /// Domain-specific tint that spoof captures pick up in this source. It is
  /// a global color offset, so instance statistics remove it.
  std::array<double, 3> spoof_cast{0.0, 0.0, 0.0};

  void validate() const;
  std::string to_json() const;
  static DomainSpec from_json(const std::string& text);
};

/// Four sources with distinct color, blur and noise characteristics.
std::vector<DomainSpec> default_domain_specs();

struct ImageGeometry {
  std::size_t side = 32;
  std::size_t depth_side = 8;
};

struct Sample {
  std::vector<double> image;  // 6 x S x S: R, G, B, H, S, V in [0,1]
  std::vector<double> depth;  // h x h in [0,1]
  int label = 0;              // 1 real, 0 fake
  int domain_id = 0;
};

Sample make_sample(const DomainSpec& spec, int label, std::uint64_t seed, const ImageGeometry& geom = {});

struct HsvResult {
  std::vector<double> hsv;  // 3 x S x S
  bool clamped = false;     // some input fell outside [0,1]
};

/// Planar RGB (3 x pixels) to planar HSV with hue scaled to [0,1).
HsvResult rgb_to_hsv(const std::vector<double>& rgb, std::size_t pixels);

/// Mean absolute 4-neighbour Laplacian of the luminance inside the central face
/// footprint. Used to verify the spoof cue.
double face_laplacian_energy(const Sample& sample, std::size_t side);

struct SampleRef {
  std::uint64_t id = 0;
  int domain = 0;
  int label = 0;
  std::uint64_t seed = 0;
};

struct ProtocolSizes {
  std::size_t train_per_domain = 2000;
  std::size_t test_per_domain = 500;
};

/// Leave-one-domain-out split. Source domains supply the training set, the
/// held-out domain supplies the test set.
struct Protocol {
  std::vector<int> source_domains;
  int target_domain = 0;
  std::vector<SampleRef> train;
  std::vector<SampleRef> test;
};

Protocol build_protocol(std::size_t n_domains, int held_out, const ProtocolSizes& sizes, std::uint64_t data_seed);

/// A materialized batch of samples.
struct DomainBatch {
  Tensor images;  // [N,6,S,S]
  Tensor depth;   // [N,1,h,h]
  std::vector<int> labels;
  std::vector<int> domain_ids;
  std::vector<std::uint64_t> sample_ids;

  std::size_t size() const { return labels.size(); }
};

DomainBatch materialize(const std::vector<SampleRef>& refs, const std::vector<DomainSpec>& specs,
                        const ImageGeometry& geom);

/// Split cache: magic, version, spec JSON header, then raw records.
void write_split_cache(std::ostream& out, const std::string& header_json, const std::vector<SampleRef>& refs,
                       const std::vector<DomainSpec>& specs, const ImageGeometry& geom);

struct SplitCache {
  std::string header_json;
  std::vector<SampleRef> refs;
  std::vector<Sample> samples;
};

SplitCache read_split_cache(std::istream& in);

}  // namespace anrl
