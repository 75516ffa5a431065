#pragma once

#include <optional>
#include <string>
#include <vector>

#include "invenio/dataset.hpp"

namespace invenio::taskgen {

// --- image transformations ----------------------------------------------------

enum class TransformFamily : uint8_t { Rotation, Flip, Affine, Color, Filter };

enum class ColorParam : uint8_t { Brightness, Saturation, Contrast, Hue };
enum class FilterKind : uint8_t { Box, Gaussian };

// One domain-shift recipe. Which fields matter depends on the family:
//   Rotation: degrees in [0, 90]
//   Flip:     flag 0 = horizontal, 1 = vertical
//   Affine:   scale in [0.25, 4], flag 1 adds the fixed shear
//   Color:    color_param + level (brightness/saturation/contrast factor, or
//             hue shift in degrees)
//   Filter:   filter_kind + level (box radius, or gaussian sigma)
struct TransformSpec {
  TransformFamily family = TransformFamily::Rotation;
  double value = 0.0;
  int flag = 0;
  ColorParam color_param = ColorParam::Brightness;
  FilterKind filter_kind = FilterKind::Box;

  std::string name() const;
  void validate() const;

  static TransformSpec rotation(double degrees);
  static TransformSpec flip(bool vertical);
  static TransformSpec affine(double scale, bool shear);
  static TransformSpec color(ColorParam p, double level);
  static TransformSpec filter(FilterKind k, double level);
};

// The 53-variant default taxonomy: 7 rotation, 2 flip, 14 affine,
// 20 color, 10 filter.
std::vector<TransformSpec> default_domain_specs();

const char* family_name(TransformFamily f);

// Applies one transform to an H x W x C image in [0,1]. Rotation/affine use
// bilinear resampling with zero fill; filters use clamp-to-edge padding.
Tensor apply_transform(const Tensor& image, const TransformSpec& spec);

// --- database generation --------------------------------------------------------

// Planted-cluster binary tasks: each cluster owns an (orthogonal across
// clusters) unit decision boundary, each task perturbs its cluster boundary by
// `noise`. Inputs are standard Gaussians; positives lie at w.x > margin and
// negatives are drawn from other tasks' positive regions subject to
// w.x < -margin.
struct SyntheticTaskParams {
  int K = 12;
  int n_clusters = 3;
  int dim = 8;
  int n_per_task = 100;
  double noise = 0.1;
  double margin = 0.2;
  int max_samples = 200;  // hard ceiling on n_i
  uint64_t seed = 0;
};

TaskDatabase gen_synthetic_tasks(const SyntheticTaskParams& p,
                                 std::vector<std::vector<double>>* boundaries_out = nullptr);

// Small synthetic multiclass image base for domain experiments: class-coded
// oriented stripe patterns plus noise, H x W x 3 in [0,1].
Dataset gen_synthetic_image_base(int n_classes, int n_per_class, int64_t height, int64_t width,
                                 uint64_t seed);

// One domain per spec; all domains share the base's labels, only inputs differ.
TaskDatabase gen_domain_db(const Dataset& base, const std::vector<TransformSpec>& specs);

// Stratified per-class split; `fraction` of each class goes to the held-out
// side. Every class needs at least 2 samples.
TaskDatabase split(const TaskDatabase& db, double heldout_fraction, uint64_t seed);

// --- container I/O ---------------------------------------------------------------

void save_db(const std::string& path, const TaskDatabase& db);
TaskDatabase load_db(const std::string& path);

// Optional CIFAR-10 loader (public binary format: label byte + 3072 channel
// bytes per record). Returns nullopt when the files are missing so callers can
// fall back to the synthetic base.
std::optional<Dataset> load_cifar10(const std::string& dir, int n_per_class, uint64_t seed);

}  // namespace invenio::taskgen
