#include "invenio/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "invenio/binio.hpp"
#include "invenio/rng.hpp"

namespace invenio::taskgen {

namespace {
constexpr uint32_t kDbMagic = 0x42445649;  // "IVDB"
constexpr uint32_t kDbVersion = 1;
constexpr double kShearFactor = 0.25;  // fixed shear used by the affine grid
constexpr double kPi = 3.14159265358979323846;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}
}  // namespace

const char* family_name(TransformFamily f) {
  switch (f) {
    case TransformFamily::Rotation: return "rotation";
    case TransformFamily::Flip: return "flip";
    case TransformFamily::Affine: return "affine";
    case TransformFamily::Color: return "color";
    case TransformFamily::Filter: return "filter";
  }
  return "?";
}

TransformSpec TransformSpec::rotation(double degrees) {
  TransformSpec s;
  s.family = TransformFamily::Rotation;
  s.value = degrees;
  s.validate();
  return s;
}

TransformSpec TransformSpec::flip(bool vertical) {
  TransformSpec s;
  s.family = TransformFamily::Flip;
  s.flag = vertical ? 1 : 0;
  return s;
}

TransformSpec TransformSpec::affine(double scale, bool shear) {
  TransformSpec s;
  s.family = TransformFamily::Affine;
  s.value = scale;
  s.flag = shear ? 1 : 0;
  s.validate();
  return s;
}

TransformSpec TransformSpec::color(ColorParam p, double level) {
  TransformSpec s;
  s.family = TransformFamily::Color;
  s.color_param = p;
  s.value = level;
  s.validate();
  return s;
}

TransformSpec TransformSpec::filter(FilterKind k, double level) {
  TransformSpec s;
  s.family = TransformFamily::Filter;
  s.filter_kind = k;
  s.value = level;
  s.validate();
  return s;
}

void TransformSpec::validate() const {
  switch (family) {
    case TransformFamily::Rotation:
      if (value < 0.0 || value > 90.0)
        throw SpecError("transform: rotation degrees must lie in [0, 90], got " + fmt("%g", value));
      break;
    case TransformFamily::Flip:
      if (flag != 0 && flag != 1) throw SpecError("transform: flip flag must be 0 or 1");
      break;
    case TransformFamily::Affine:
      if (value < 0.25 || value > 4.0)
        throw SpecError("transform: affine scale must lie in [0.25, 4], got " + fmt("%g", value));
      break;
    case TransformFamily::Color:
      if (color_param == ColorParam::Hue) {
        if (value < 0.0 || value > 360.0)
          throw SpecError("transform: hue shift must lie in [0, 360], got " + fmt("%g", value));
      } else if (value < 0.0 || value > 4.0) {
        throw SpecError("transform: color factor must lie in [0, 4], got " + fmt("%g", value));
      }
      break;
    case TransformFamily::Filter:
      if (filter_kind == FilterKind::Box) {
        if (value < 1.0 || value > 8.0 || value != std::floor(value))
          throw SpecError("transform: box radius must be an integer in [1, 8]");
      } else if (value <= 0.0 || value > 8.0) {
        throw SpecError("transform: gaussian sigma must lie in (0, 8]");
      }
      break;
  }
}

std::string TransformSpec::name() const {
  switch (family) {
    case TransformFamily::Rotation:
      return "rotation:" + fmt("%02.0f", value);
    case TransformFamily::Flip:
      return std::string("flip:") + (flag ? "vertical" : "horizontal");
    case TransformFamily::Affine:
      return "affine:scale" + fmt("%.2f", value) + (flag ? ":shear" : "");
    case TransformFamily::Color: {
      const char* p = color_param == ColorParam::Brightness  ? "brightness"
                      : color_param == ColorParam::Saturation ? "saturation"
                      : color_param == ColorParam::Contrast   ? "contrast"
                                                              : "hue";
      return std::string("color:") + p + ":" + fmt("%.2f", value);
    }
    case TransformFamily::Filter:
      return std::string("filter:") + (filter_kind == FilterKind::Box ? "box:" : "gauss:") +
             fmt("%.1f", value);
  }
  return "?";
}

std::vector<TransformSpec> default_domain_specs() {
  std::vector<TransformSpec> specs;
  // 7 rotations evenly spaced over [0, 90]
  for (int k = 0; k < 7; ++k) specs.push_back(TransformSpec::rotation(15.0 * k));
  // 2 flips
  specs.push_back(TransformSpec::flip(false));
  specs.push_back(TransformSpec::flip(true));
  // 14 affine: 7 scales x shear off/on
  const double scales[7] = {0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  for (double s : scales) {
    specs.push_back(TransformSpec::affine(s, false));
    specs.push_back(TransformSpec::affine(s, true));
  }
  // 20 color: 4 parameters x 5 levels
  const double factor_levels[5] = {0.25, 0.5, 0.75, 1.5, 2.5};
  const double sat_levels[5] = {0.0, 0.25, 0.5, 1.5, 2.5};
  const double hue_levels[5] = {30.0, 60.0, 90.0, 120.0, 180.0};
  for (double v : factor_levels) specs.push_back(TransformSpec::color(ColorParam::Brightness, v));
  for (double v : sat_levels) specs.push_back(TransformSpec::color(ColorParam::Saturation, v));
  for (double v : factor_levels) specs.push_back(TransformSpec::color(ColorParam::Contrast, v));
  for (double v : hue_levels) specs.push_back(TransformSpec::color(ColorParam::Hue, v));
  // 10 filter: 5 box radii + 5 gaussian sigmas
  for (int r = 1; r <= 5; ++r) specs.push_back(TransformSpec::filter(FilterKind::Box, r));
  for (int k = 1; k <= 5; ++k) specs.push_back(TransformSpec::filter(FilterKind::Gaussian, 0.5 * k));
  return specs;
}

// --- image helpers ------------------------------------------------------------

namespace {

struct ImageView {
  const Tensor& t;
  int64_t H, W, C;
  double at(int64_t h, int64_t w, int64_t c) const {
    return t.data[(size_t)((h * W + w) * C + c)];
  }
};

double pix_or_zero(const ImageView& img, int64_t h, int64_t w, int64_t c) {
  if (h < 0 || h >= img.H || w < 0 || w >= img.W) return 0.0;
  return img.at(h, w, c);
}

double bilinear(const ImageView& img, double y, double x, int64_t c) {
  double fy = std::floor(y), fx = std::floor(x);
  int64_t y0 = static_cast<int64_t>(fy), x0 = static_cast<int64_t>(fx);
  double wy = y - fy, wx = x - fx;
  double top = (1.0 - wx) * pix_or_zero(img, y0, x0, c) + wx * pix_or_zero(img, y0, x0 + 1, c);
  double bot = (1.0 - wx) * pix_or_zero(img, y0 + 1, x0, c) + wx * pix_or_zero(img, y0 + 1, x0 + 1, c);
  return (1.0 - wy) * top + wy * bot;
}

// Inverse-map resampling: src = A * (dst - center) + center.
Tensor resample(const Tensor& image, const double A[4]) {
  ImageView img{image, image.shape[0], image.shape[1], image.shape[2]};
  Tensor out(image.shape);
  double cy = (img.H - 1) / 2.0, cx = (img.W - 1) / 2.0;
  for (int64_t h = 0; h < img.H; ++h)
    for (int64_t w = 0; w < img.W; ++w) {
      double dx = w - cx, dy = h - cy;
      double sx = A[0] * dx + A[1] * dy + cx;
      double sy = A[2] * dx + A[3] * dy + cy;
      for (int64_t c = 0; c < img.C; ++c)
        out.data[(size_t)((h * img.W + w) * img.C + c)] = bilinear(img, sy, sx, c);
    }
  return out;
}

// cos/sin with exact values at multiples of 90 degrees so grid-aligned
// rotations stay bit-exact.
void snapped_trig(double degrees, double& c, double& s) {
  c = std::cos(degrees * kPi / 180.0);
  s = std::sin(degrees * kPi / 180.0);
  if (std::fabs(c) < 1e-12) c = 0.0;
  if (std::fabs(s) < 1e-12) s = 0.0;
  if (std::fabs(c - 1.0) < 1e-12) c = 1.0;
  if (std::fabs(c + 1.0) < 1e-12) c = -1.0;
  if (std::fabs(s - 1.0) < 1e-12) s = 1.0;
  if (std::fabs(s + 1.0) < 1e-12) s = -1.0;
}

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d == 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = 60.0 * std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = 60.0 * ((b - r) / d + 2.0);
  } else {
    h = 60.0 * ((r - g) / d + 4.0);
  }
  if (h < 0.0) h += 360.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  double c = v * s;
  double hp = h / 60.0;
  double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r1 = 0, g1 = 0, b1 = 0;
  if (hp < 1)      { r1 = c; g1 = x; }
  else if (hp < 2) { r1 = x; g1 = c; }
  else if (hp < 3) { g1 = c; b1 = x; }
  else if (hp < 4) { g1 = x; b1 = c; }
  else if (hp < 5) { r1 = x; b1 = c; }
  else             { r1 = c; b1 = x; }
  double m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

Tensor color_transform(const Tensor& image, const TransformSpec& spec) {
  int64_t H = image.shape[0], W = image.shape[1], C = image.shape[2];
  if (C != 3) throw SpecError("color transform requires 3 channels, got " + std::to_string(C));
  Tensor out(image.shape);
  const double lum[3] = {0.299, 0.587, 0.114};
  for (int64_t i = 0; i < H * W; ++i) {
    double r = image.data[(size_t)(i * 3)], g = image.data[(size_t)(i * 3 + 1)],
           b = image.data[(size_t)(i * 3 + 2)];
    double ro = r, go = g, bo = b;
    switch (spec.color_param) {
      case ColorParam::Brightness:
        ro = r * spec.value;
        go = g * spec.value;
        bo = b * spec.value;
        break;
      case ColorParam::Saturation: {
        double gray = lum[0] * r + lum[1] * g + lum[2] * b;
        ro = gray + spec.value * (r - gray);
        go = gray + spec.value * (g - gray);
        bo = gray + spec.value * (b - gray);
        break;
      }
      case ColorParam::Contrast:
        ro = 0.5 + spec.value * (r - 0.5);
        go = 0.5 + spec.value * (g - 0.5);
        bo = 0.5 + spec.value * (b - 0.5);
        break;
      case ColorParam::Hue: {
        double h, s, v;
        rgb_to_hsv(r, g, b, h, s, v);
        h = std::fmod(h + spec.value, 360.0);
        hsv_to_rgb(h, s, v, ro, go, bo);
        break;
      }
    }
    out.data[(size_t)(i * 3)] = clamp01(ro);
    out.data[(size_t)(i * 3 + 1)] = clamp01(go);
    out.data[(size_t)(i * 3 + 2)] = clamp01(bo);
  }
  // Neutral parameters must be bit-exact identities.
  bool identity = (spec.color_param == ColorParam::Brightness && spec.value == 1.0) ||
                  (spec.color_param == ColorParam::Saturation && spec.value == 1.0) ||
                  (spec.color_param == ColorParam::Contrast && spec.value == 1.0) ||
                  (spec.color_param == ColorParam::Hue && (spec.value == 0.0 || spec.value == 360.0));
  return identity ? image : out;
}

Tensor box_blur(const Tensor& image, int64_t radius) {
  ImageView img{image, image.shape[0], image.shape[1], image.shape[2]};
  Tensor out(image.shape);
  double inv = 1.0 / static_cast<double>((2 * radius + 1) * (2 * radius + 1));
  for (int64_t h = 0; h < img.H; ++h)
    for (int64_t w = 0; w < img.W; ++w)
      for (int64_t c = 0; c < img.C; ++c) {
        double acc = 0.0;
        for (int64_t dy = -radius; dy <= radius; ++dy)
          for (int64_t dx = -radius; dx <= radius; ++dx) {
            int64_t y = std::clamp<int64_t>(h + dy, 0, img.H - 1);
            int64_t x = std::clamp<int64_t>(w + dx, 0, img.W - 1);
            acc += img.at(y, x, c);
          }
        out.data[(size_t)((h * img.W + w) * img.C + c)] = acc * inv;
      }
  return out;
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
  int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int64_t i = -radius; i <= radius; ++i) {
    double v = std::exp(-(double)(i * i) / (2.0 * sigma * sigma));
    k[(size_t)(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;

  int64_t H = image.shape[0], W = image.shape[1], C = image.shape[2];
  Tensor tmp(image.shape), out(image.shape);
  ImageView in{image, H, W, C};
  // horizontal
  for (int64_t h = 0; h < H; ++h)
    for (int64_t w = 0; w < W; ++w)
      for (int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int64_t i = -radius; i <= radius; ++i)
          acc += k[(size_t)(i + radius)] * in.at(h, std::clamp<int64_t>(w + i, 0, W - 1), c);
        tmp.data[(size_t)((h * W + w) * C + c)] = acc;
      }
  // vertical
  ImageView mid{tmp, H, W, C};
  for (int64_t h = 0; h < H; ++h)
    for (int64_t w = 0; w < W; ++w)
      for (int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int64_t i = -radius; i <= radius; ++i)
          acc += k[(size_t)(i + radius)] * mid.at(std::clamp<int64_t>(h + i, 0, H - 1), w, c);
        out.data[(size_t)((h * W + w) * C + c)] = acc;
      }
  return out;
}

}  // namespace

Tensor apply_transform(const Tensor& image, const TransformSpec& spec) {
  if (image.rank() != 3)
    throw ShapeError("apply_transform: image must be HxWxC, got " + shape_str(image.shape));
  spec.validate();

  switch (spec.family) {
    case TransformFamily::Rotation: {
      if (spec.value == 0.0) return image;
      double c, s;
      snapped_trig(spec.value, c, s);
      // forward rotation of the content; inverse map rotates sample coords back
      const double A[4] = {c, s, -s, c};
      return resample(image, A);
    }
    case TransformFamily::Flip: {
      int64_t H = image.shape[0], W = image.shape[1], C = image.shape[2];
      Tensor out(image.shape);
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
          for (int64_t c = 0; c < C; ++c) {
            int64_t sh = spec.flag ? H - 1 - h : h;
            int64_t sw = spec.flag ? w : W - 1 - w;
            out.data[(size_t)((h * W + w) * C + c)] = image.data[(size_t)((sh * W + sw) * C + c)];
          }
      return out;
    }
    case TransformFamily::Affine: {
      if (spec.value == 1.0 && spec.flag == 0) return image;
      // forward: p' = s * Shear * p (about center); inverse: Shear^-1 * p' / s
      double inv_s = 1.0 / spec.value;
      double k = spec.flag ? kShearFactor : 0.0;
      const double A[4] = {inv_s, -k * inv_s, 0.0, inv_s};
      return resample(image, A);
    }
    case TransformFamily::Color:
      return color_transform(image, spec);
    case TransformFamily::Filter:
      return spec.filter_kind == FilterKind::Box
                 ? box_blur(image, static_cast<int64_t>(spec.value))
                 : gaussian_blur(image, spec.value);
  }
  throw SpecError("apply_transform: unknown family");
}

// --- synthetic task generation --------------------------------------------------

namespace {

double vdot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

void vnormalize(std::vector<double>& v) {
  double n = std::sqrt(vdot(v, v));
  if (n == 0.0) throw NumericError("gen_synthetic_tasks: zero boundary vector");
  for (double& x : v) x /= n;
}

std::vector<double> gaussian_vec(Rng& rng, int dim) {
  std::vector<double> v(static_cast<size_t>(dim));
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace

TaskDatabase gen_synthetic_tasks(const SyntheticTaskParams& p,
                                 std::vector<std::vector<double>>* boundaries_out) {
  if (p.n_clusters < 1 || p.K < p.n_clusters)
    throw SpecError("gen_synthetic_tasks: need K >= n_clusters >= 1");
  if (p.dim < 2) throw SpecError("gen_synthetic_tasks: dim must be >= 2");
  if (p.n_clusters > p.dim)
    throw SpecError("gen_synthetic_tasks: orthogonal cluster boundaries need dim >= n_clusters");
  if (p.n_per_task < 2) throw SpecError("gen_synthetic_tasks: n_per_task must be >= 2");
  if (p.n_per_task > p.max_samples)
    throw SpecError("gen_synthetic_tasks: n_per_task " + std::to_string(p.n_per_task) +
                    " exceeds the configured ceiling " + std::to_string(p.max_samples));
  if (p.noise < 0.0) throw SpecError("gen_synthetic_tasks: noise must be >= 0");

  // Orthonormal cluster bases: Gram-Schmidt on Gaussian draws.
  Rng crng(derive_seed(p.seed, "clusters"));
  std::vector<std::vector<double>> bases;
  for (int c = 0; c < p.n_clusters; ++c) {
    std::vector<double> v = gaussian_vec(crng, p.dim);
    for (const auto& u : bases) {
      double d = vdot(v, u);
      for (int i = 0; i < p.dim; ++i) v[(size_t)i] -= d * u[(size_t)i];
    }
    vnormalize(v);
    bases.push_back(std::move(v));
  }

  // Per-task boundaries: perturbed copies of the cluster base.
  std::vector<std::vector<double>> w(static_cast<size_t>(p.K));
  std::vector<int> cluster_of(static_cast<size_t>(p.K));
  for (int t = 0; t < p.K; ++t) {
    int c = static_cast<int>(static_cast<int64_t>(t) * p.n_clusters / p.K);
    cluster_of[(size_t)t] = c;
    Rng brng(derive_seed(p.seed, "boundary", t));
    std::vector<double> v = bases[(size_t)c];
    std::vector<double> eps = gaussian_vec(brng, p.dim);
    for (int i = 0; i < p.dim; ++i) v[(size_t)i] += p.noise * eps[(size_t)i];
    vnormalize(v);
    w[(size_t)t] = std::move(v);
  }

  TaskDatabase db;
  for (int t = 0; t < p.K; ++t) {
    Rng rng(derive_seed(p.seed, "samples", t));
    int n_pos = p.n_per_task / 2 + p.n_per_task % 2;
    int n_neg = p.n_per_task - n_pos;

    Tensor inputs({p.n_per_task, p.dim});
    std::vector<int> labels(static_cast<size_t>(p.n_per_task));
    int row = 0;
    auto put = [&](const std::vector<double>& z, int label) {
      for (int i = 0; i < p.dim; ++i) inputs.at2(row, i) = z[(size_t)i];
      labels[(size_t)row] = label;
      ++row;
    };

    for (int i = 0; i < n_pos; ++i) {
      std::vector<double> z;
      do {
        z = gaussian_vec(rng, p.dim);
      } while (vdot(z, w[(size_t)t]) <= p.margin);
      put(z, 1);
    }
    // Negatives come from other tasks' positive regions where possible.
    for (int i = 0; i < n_neg; ++i) {
      std::vector<double> z;
      bool ok = false;
      for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
        int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(p.K)));
        if (j == t && p.K > 1) continue;
        z = gaussian_vec(rng, p.dim);
        if (vdot(z, w[(size_t)j]) > p.margin && vdot(z, w[(size_t)t]) < -p.margin) ok = true;
      }
      while (!ok) {
        z = gaussian_vec(rng, p.dim);
        ok = vdot(z, w[(size_t)t]) < -p.margin;
      }
      put(z, 0);
    }

    Dataset d;
    d.inputs = std::move(inputs);
    d.labels = std::move(labels);
    d.kind = TaskKind::BinaryTask;
    char buf[32];
    std::snprintf(buf, sizeof buf, "task%02d", t);
    d.name = buf;
    db.datasets.push_back(std::move(d));
  }
  db.ground_truth_clusters = std::move(cluster_of);
  if (boundaries_out) *boundaries_out = std::move(w);
  db.validate();
  return db;
}

Dataset gen_synthetic_image_base(int n_classes, int n_per_class, int64_t height, int64_t width,
                                 uint64_t seed) {
  if (n_classes < 2) throw SpecError("gen_synthetic_image_base: need at least 2 classes");
  if (n_per_class < 1) throw SpecError("gen_synthetic_image_base: need at least 1 sample/class");
  int64_t n = static_cast<int64_t>(n_classes) * n_per_class;
  Tensor inputs({n, height, width, 3});
  std::vector<int> labels(static_cast<size_t>(n));

  int64_t row = 0;
  for (int c = 0; c < n_classes; ++c) {
    // Class identity: stripe orientation, frequency and color tint.
    double angle = kPi * c / n_classes;
    double freq = 2.0 + (c % 3);
    double tint_r = 0.4 + 0.6 * ((c * 37) % 10) / 10.0;
    double tint_g = 0.4 + 0.6 * ((c * 53 + 3) % 10) / 10.0;
    double tint_b = 0.4 + 0.6 * ((c * 71 + 7) % 10) / 10.0;
    Rng rng(derive_seed(seed, "image_class", c));
    for (int s = 0; s < n_per_class; ++s, ++row) {
      double phase = rng.uniform(0.0, 2.0 * kPi);
      for (int64_t h = 0; h < height; ++h)
        for (int64_t w = 0; w < width; ++w) {
          double u = (w * std::cos(angle) + h * std::sin(angle)) / static_cast<double>(width);
          double v = 0.5 + 0.35 * std::sin(2.0 * kPi * freq * u + phase);
          double noise = 0.05 * rng.normal();
          inputs.at4(row, h, w, 0) = clamp01(v * tint_r + noise);
          inputs.at4(row, h, w, 1) = clamp01(v * tint_g + noise);
          inputs.at4(row, h, w, 2) = clamp01(v * tint_b + noise);
        }
      labels[(size_t)row] = c;
    }
  }

  Dataset d;
  d.inputs = std::move(inputs);
  d.labels = std::move(labels);
  d.kind = TaskKind::MulticlassDomain;
  d.name = "synthetic_base";
  return d;
}

TaskDatabase gen_domain_db(const Dataset& base, const std::vector<TransformSpec>& specs) {
  base.validate();
  if (base.kind != TaskKind::MulticlassDomain)
    throw DataError("gen_domain_db: base dataset must be multiclass");
  if (specs.empty()) throw SpecError("gen_domain_db: empty spec list");
  if (base.inputs.rank() != 4)
    throw ShapeError("gen_domain_db: base inputs must be [n,H,W,C]");

  int64_t n = base.n(), H = base.inputs.shape[1], W = base.inputs.shape[2],
          C = base.inputs.shape[3];
  TaskDatabase db;
  for (const auto& spec : specs) {
    Dataset d;
    d.kind = TaskKind::MulticlassDomain;
    d.labels = base.labels;  // identical conditionals: only inputs change
    d.name = spec.name();
    d.inputs = Tensor({n, H, W, C});
    for (int64_t i = 0; i < n; ++i) {
      Tensor img({H, W, C});
      std::copy_n(base.inputs.data.begin() + i * H * W * C, H * W * C, img.data.begin());
      Tensor t = apply_transform(img, spec);
      std::copy_n(t.data.begin(), H * W * C, d.inputs.data.begin() + i * H * W * C);
    }
    db.datasets.push_back(std::move(d));
  }
  db.ground_truth_clusters.reserve(specs.size());
  for (const auto& spec : specs)
    db.ground_truth_clusters.push_back(static_cast<int>(spec.family));
  db.validate();
  return db;
}

TaskDatabase split(const TaskDatabase& db, double heldout_fraction, uint64_t seed) {
  if (heldout_fraction <= 0.0 || heldout_fraction >= 1.0)
    throw SpecError("split: fraction must lie strictly between 0 and 1");
  db.validate();

  TaskDatabase out;
  out.ground_truth_clusters = db.ground_truth_clusters;
  for (int t = 0; t < db.K(); ++t) {
    const Dataset& d = db.datasets[(size_t)t];
    int classes = std::max(d.num_classes(), 2);
    std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(classes));
    for (int64_t i = 0; i < d.n(); ++i) by_class[(size_t)d.labels[(size_t)i]].push_back(i);

    Rng rng(derive_seed(seed, "split", t));
    std::vector<int64_t> held, train;
    for (auto& idx : by_class) {
      if (idx.empty()) continue;
      if (idx.size() < 2)
        throw DataError("split: dataset '" + d.name + "' has a class with fewer than 2 samples");
      // Fisher-Yates, then round(fraction * n_c) to the held-out side.
      for (size_t i = idx.size() - 1; i > 0; --i)
        std::swap(idx[i], idx[(size_t)rng.uniform_int(i + 1)]);
      auto n_held = static_cast<size_t>(std::llround(heldout_fraction * (double)idx.size()));
      n_held = std::clamp<size_t>(n_held, 1, idx.size() - 1);
      held.insert(held.end(), idx.begin(), idx.begin() + (ptrdiff_t)n_held);
      train.insert(train.end(), idx.begin() + (ptrdiff_t)n_held, idx.end());
    }
    std::sort(held.begin(), held.end());
    std::sort(train.begin(), train.end());

    auto take = [&](const std::vector<int64_t>& rows) {
      Dataset r;
      r.kind = d.kind;
      r.name = d.name;
      Shape s = d.inputs.shape;
      s[0] = static_cast<int64_t>(rows.size());
      r.inputs = Tensor(s);
      int64_t stride = d.inputs.size() / d.n();
      for (size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(d.inputs.data.begin() + rows[i] * stride, stride,
                    r.inputs.data.begin() + (int64_t)i * stride);
        r.labels.push_back(d.labels[(size_t)rows[i]]);
      }
      return r;
    };
    out.datasets.push_back(take(train));
    out.heldout.push_back(take(held));
  }
  out.validate();
  return out;
}

// --- container I/O ---------------------------------------------------------------

namespace {

void write_dataset(std::ostream& os, const Dataset& d) {
  binio::write_string(os, d.name);
  unsigned char kind = static_cast<unsigned char>(d.kind);
  binio::write_bytes(os, &kind, 1);
  binio::write_u32(os, static_cast<uint32_t>(d.inputs.rank()));
  for (int64_t dim : d.inputs.shape) binio::write_i64(os, dim);
  for (int l : d.labels) binio::write_i32(os, l);
  binio::write_f64_vec(os, d.inputs.data);
}

Dataset read_dataset(std::istream& is) {
  Dataset d;
  d.name = binio::read_string(is);
  unsigned char kind;
  binio::read_bytes(is, &kind, 1);
  if (kind > 1) throw FormatError("database: bad dataset kind " + std::to_string(kind));
  d.kind = static_cast<TaskKind>(kind);
  uint32_t rank = binio::read_u32(is);
  if (rank == 0 || rank > 8) throw FormatError("database: bad tensor rank");
  Shape shape(rank);
  for (auto& dim : shape) {
    dim = binio::read_i64(is);
    if (dim <= 0 || dim > (1LL << 32)) throw FormatError("database: bad dimension");
  }
  int64_t n = shape[0];
  d.labels.resize(static_cast<size_t>(n));
  for (auto& l : d.labels) l = binio::read_i32(is);
  std::vector<double> data;
  binio::read_f64_vec(is, data, static_cast<size_t>(shape_numel(shape)));
  d.inputs = Tensor(std::move(shape), std::move(data));
  return d;
}

}  // namespace

void save_db(const std::string& path, const TaskDatabase& db) {
  db.validate();
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + tmp + "' for writing");
    binio::write_u32(os, kDbMagic);
    binio::write_u32(os, kDbVersion);
    binio::write_u32(os, static_cast<uint32_t>(db.K()));
    unsigned char flags = (db.has_ground_truth() ? 1 : 0) | (db.has_heldout() ? 2 : 0);
    binio::write_bytes(os, &flags, 1);
    for (const auto& d : db.datasets) write_dataset(os, d);
    if (db.has_heldout())
      for (const auto& d : db.heldout) write_dataset(os, d);
    if (db.has_ground_truth())
      for (int c : db.ground_truth_clusters) binio::write_i32(os, c);
    if (!os) throw FormatError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

TaskDatabase load_db(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  if (binio::read_u32(is) != kDbMagic) throw FormatError("'" + path + "': bad magic");
  uint32_t ver = binio::read_u32(is);
  if (ver != kDbVersion)
    throw FormatError("'" + path + "': unsupported version " + std::to_string(ver));
  uint32_t k = binio::read_u32(is);
  if (k == 0 || k > 100000) throw FormatError("'" + path + "': bad task count");
  unsigned char flags;
  binio::read_bytes(is, &flags, 1);

  TaskDatabase db;
  for (uint32_t i = 0; i < k; ++i) db.datasets.push_back(read_dataset(is));
  if (flags & 2)
    for (uint32_t i = 0; i < k; ++i) db.heldout.push_back(read_dataset(is));
  if (flags & 1) {
    db.ground_truth_clusters.resize(k);
    for (auto& c : db.ground_truth_clusters) c = binio::read_i32(is);
  }
  db.validate();
  return db;
}

std::optional<Dataset> load_cifar10(const std::string& dir, int n_per_class, uint64_t seed) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  for (int b = 1; b <= 5; ++b) files.push_back(dir + "/data_batch_" + std::to_string(b) + ".bin");
  for (const auto& f : files)
    if (!fs::exists(f)) return std::nullopt;

  constexpr int64_t kRecord = 3073;
  std::vector<unsigned char> bytes;
  for (const auto& f : files) {
    std::ifstream is(f, std::ios::binary);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() % kRecord != 0)
      throw FormatError("'" + f + "': size is not a multiple of the 3073-byte record");
    bytes.insert(bytes.end(), buf.begin(), buf.end());
  }

  int64_t total = static_cast<int64_t>(bytes.size()) / kRecord;
  std::vector<std::vector<int64_t>> by_class(10);
  for (int64_t r = 0; r < total; ++r) {
    unsigned char label = bytes[(size_t)(r * kRecord)];
    if (label > 9) throw FormatError("cifar10: label byte out of range");
    by_class[label].push_back(r);
  }

  std::vector<int64_t> chosen;
  Rng rng(derive_seed(seed, "cifar"));
  for (auto& idx : by_class) {
    if (static_cast<int>(idx.size()) < n_per_class)
      throw DataError("cifar10: class has fewer than requested samples");
    for (size_t i = idx.size() - 1; i > 0; --i)
      std::swap(idx[i], idx[(size_t)rng.uniform_int(i + 1)]);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + n_per_class);
  }

  Dataset d;
  d.kind = TaskKind::MulticlassDomain;
  d.name = "cifar10";
  d.inputs = Tensor({static_cast<int64_t>(chosen.size()), 32, 32, 3});
  d.labels.resize(chosen.size());
  for (size_t i = 0; i < chosen.size(); ++i) {
    const unsigned char* rec = bytes.data() + chosen[i] * kRecord;
    d.labels[i] = rec[0];
    for (int64_t h = 0; h < 32; ++h)
      for (int64_t w = 0; w < 32; ++w)
        for (int64_t c = 0; c < 3; ++c)
          d.inputs.at4((int64_t)i, h, w, c) = rec[1 + c * 1024 + h * 32 + w] / 255.0;
  }
  return d;
}

}  // namespace invenio::taskgen
