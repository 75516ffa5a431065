#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "invenio/binio.hpp"
#include "invenio/taskgen.hpp"
#include "oracles.hpp"

using namespace invenio;
using namespace invenio::taskgen;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

Tensor test_pattern_3x3() {
  // asymmetric single-channel 3x3 pattern
  return Tensor({3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
}

}  // namespace

TEST_CASE("synthetic: K=1 gives one task with cluster vector [0]") {
  SyntheticTaskParams p;
  p.K = 1;
  p.n_clusters = 1;
  p.dim = 4;
  p.n_per_task = 10;
  auto db = gen_synthetic_tasks(p);
  CHECK(db.K() == 1);
  CHECK(db.ground_truth_clusters == std::vector<int>{0});
}

TEST_CASE("synthetic: 12 tasks in 3 clusters have the planted geometry") {
  SyntheticTaskParams p;
  p.K = 12;
  p.n_clusters = 3;
  p.dim = 8;
  p.n_per_task = 20;
  p.noise = 0.02;  // construction parameters chosen so the cosine bounds hold
  p.seed = 1;
  std::vector<std::vector<double>> w;
  auto db = gen_synthetic_tasks(p, &w);

  std::map<int, int> sizes;
  for (int c : db.ground_truth_clusters) sizes[c]++;
  CHECK(sizes == std::map<int, int>{{0, 4}, {1, 4}, {2, 4}});

  for (int i = 0; i < 12; ++i)
    for (int j = i + 1; j < 12; ++j) {
      double c = std::fabs(cosine(w[(size_t)i], w[(size_t)j]));
      if (db.ground_truth_clusters[(size_t)i] == db.ground_truth_clusters[(size_t)j])
        CHECK(c >= 0.9);
      else
        CHECK(c <= 0.2);
    }
}

TEST_CASE("synthetic: labels agree with the planted boundary and sampling is deterministic") {
  SyntheticTaskParams p;
  p.K = 4;
  p.n_clusters = 2;
  p.dim = 6;
  p.n_per_task = 30;
  p.seed = 9;
  std::vector<std::vector<double>> w;
  auto a = gen_synthetic_tasks(p, &w);
  auto b = gen_synthetic_tasks(p);

  for (int t = 0; t < 4; ++t) {
    CHECK(a.datasets[(size_t)t].inputs.data == b.datasets[(size_t)t].inputs.data);
    CHECK(a.datasets[(size_t)t].labels == b.datasets[(size_t)t].labels);
    const auto& d = a.datasets[(size_t)t];
    for (int64_t i = 0; i < d.n(); ++i) {
      double score = 0;
      for (int k = 0; k < 6; ++k) score += d.inputs.at2(i, k) * w[(size_t)t][(size_t)k];
      CHECK((score > 0) == (d.labels[(size_t)i] == 1));
    }
  }
}

TEST_CASE("synthetic: n_per_task above the ceiling is rejected") {
  SyntheticTaskParams p;
  p.n_per_task = 500;
  p.max_samples = 200;
  CHECK_THROWS_AS(gen_synthetic_tasks(p), SpecError);
}

TEST_CASE("default domain taxonomy has 53 variants with the right family counts") {
  auto specs = default_domain_specs();
  CHECK(specs.size() == 53);
  std::map<TransformFamily, int> counts;
  std::set<std::string> names;
  for (const auto& s : specs) {
    counts[s.family]++;
    names.insert(s.name());
  }
  CHECK(counts[TransformFamily::Rotation] == 7);
  CHECK(counts[TransformFamily::Flip] == 2);
  CHECK(counts[TransformFamily::Affine] == 14);
  CHECK(counts[TransformFamily::Color] == 20);
  CHECK(counts[TransformFamily::Filter] == 10);
  CHECK(names.size() == 53);  // all names distinct
}

TEST_CASE("rotation 0 degrees is a bit-exact identity") {
  Tensor img = test_pattern_3x3();
  Tensor out = apply_transform(img, TransformSpec::rotation(0.0));
  CHECK(out.data == img.data);
}

TEST_CASE("rotation 90 degrees is the exact transposed flip") {
  Tensor img = test_pattern_3x3();
  Tensor out = apply_transform(img, TransformSpec::rotation(90.0));
  // oracle mapping: out[r][c] = in[H-1-c][r]
  for (int64_t r = 0; r < 3; ++r)
    for (int64_t c = 0; c < 3; ++c)
      CHECK(out.data[(size_t)(r * 3 + c)] == img.data[(size_t)((3 - 1 - c) * 3 + r)]);
}

TEST_CASE("horizontal flip mirrors columns exactly") {
  Tensor img({2, 3, 2});
  for (int64_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  Tensor out = apply_transform(img, TransformSpec::flip(false));
  for (int64_t r = 0; r < 2; ++r)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t ch = 0; ch < 2; ++ch)
        CHECK(out.data[(size_t)((r * 3 + c) * 2 + ch)] ==
              img.data[(size_t)((r * 3 + (3 - 1 - c)) * 2 + ch)]);
}

TEST_CASE("brightness factor 1.0 is the identity") {
  Tensor img({2, 2, 3});
  for (int64_t i = 0; i < img.size(); ++i) img[i] = 0.1 * static_cast<double>(i % 10);
  Tensor out = apply_transform(img, TransformSpec::color(ColorParam::Brightness, 1.0));
  CHECK(out.data == img.data);
}

TEST_CASE("hue shift of a gray image is the identity, saturation 0 grays out") {
  Tensor img({1, 2, 3}, {0.4, 0.4, 0.4, 0.8, 0.8, 0.8});
  Tensor hue = apply_transform(img, TransformSpec::color(ColorParam::Hue, 90.0));
  for (int64_t i = 0; i < img.size(); ++i) CHECK(hue[i] == doctest::Approx(img[i]).epsilon(1e-12));

  Tensor colored({1, 1, 3}, {0.9, 0.3, 0.1});
  Tensor gray = apply_transform(colored, TransformSpec::color(ColorParam::Saturation, 0.0));
  double lum = 0.299 * 0.9 + 0.587 * 0.3 + 0.114 * 0.1;
  for (int64_t c = 0; c < 3; ++c) CHECK(gray[c] == doctest::Approx(lum).epsilon(1e-12));
}

TEST_CASE("3x3 box blur of an impulse spreads 1/9 over the neighborhood") {
  Tensor img({7, 7, 1});
  img.data[(size_t)(3 * 7 + 3)] = 1.0;  // centered impulse
  Tensor out = apply_transform(img, TransformSpec::filter(FilterKind::Box, 1));
  for (int64_t r = 0; r < 7; ++r)
    for (int64_t c = 0; c < 7; ++c) {
      double want = (std::abs(r - 3) <= 1 && std::abs(c - 3) <= 1) ? 1.0 / 9.0 : 0.0;
      CHECK(out.data[(size_t)(r * 7 + c)] == doctest::Approx(want).epsilon(1e-15));
    }
}

TEST_CASE("gaussian blur preserves total mass away from edges") {
  Tensor img({11, 11, 1});
  img.data[(size_t)(5 * 11 + 5)] = 1.0;
  Tensor out = apply_transform(img, TransformSpec::filter(FilterKind::Gaussian, 1.0));
  double total = 0;
  for (double v : out.data) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("affine scale 2 keeps the center pixel and crops the borders") {
  Tensor img({5, 5, 1});
  for (int64_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  Tensor out = apply_transform(img, TransformSpec::affine(2.0, false));
  // center of output samples the center of the input
  CHECK(out.data[(size_t)(2 * 5 + 2)] == img.data[(size_t)(2 * 5 + 2)]);
}

TEST_CASE("transform parameter out of range is rejected") {
  CHECK_THROWS_AS(TransformSpec::rotation(120.0), SpecError);
  CHECK_THROWS_AS(TransformSpec::affine(9.0, false), SpecError);
  CHECK_THROWS_AS(TransformSpec::filter(FilterKind::Box, 1.5), SpecError);
  Tensor flat({4, 4}, std::vector<double>(16, 0.0));
  CHECK_THROWS_AS(apply_transform(flat, TransformSpec::rotation(15.0)), ShapeError);
}

TEST_CASE("domain database: 53 domains, shared labels, rotation 0 bit-identical") {
  Dataset base = gen_synthetic_image_base(3, 4, 8, 8, 5);
  auto db = gen_domain_db(base, default_domain_specs());
  CHECK(db.K() == 53);
  for (const auto& d : db.datasets) CHECK(d.labels == base.labels);
  CHECK(db.datasets[0].name == "rotation:00");
  CHECK(db.datasets[0].inputs.data == base.inputs.data);

  // horizontal flip domain obeys the index mapping oracle
  const Dataset& fl = db.datasets[7];
  CHECK(fl.name == "flip:horizontal");
  for (int64_t i = 0; i < base.n(); ++i)
    for (int64_t r = 0; r < 8; ++r)
      for (int64_t c = 0; c < 8; ++c)
        for (int64_t ch = 0; ch < 3; ++ch)
          CHECK(fl.inputs.at4(i, r, c, ch) == base.inputs.at4(i, r, 8 - 1 - c, ch));
}

TEST_CASE("split: 50% of 100 balanced samples gives 25/25 per class, disjoint, deterministic") {
  // inputs carry their index so the audit can identify rows
  Tensor x({100, 2});
  std::vector<int> y(100);
  for (int64_t i = 0; i < 100; ++i) {
    x.at2(i, 0) = static_cast<double>(i);
    x.at2(i, 1) = 1.0;
    y[(size_t)i] = i < 50 ? 0 : 1;
  }
  TaskDatabase db;
  db.datasets.push_back({std::move(x), std::move(y), TaskKind::BinaryTask, "t"});

  auto s1 = split(db, 0.5, 3);
  auto s2 = split(db, 0.5, 3);

  const Dataset& train = s1.datasets[0];
  const Dataset& held = s1.heldout[0];
  CHECK(train.n() == 50);
  CHECK(held.n() == 50);
  int held_c0 = 0;
  for (int l : held.labels) held_c0 += (l == 0);
  CHECK(held_c0 == 25);

  std::set<double> train_ids, held_ids;
  for (int64_t i = 0; i < 50; ++i) {
    train_ids.insert(train.inputs.at2(i, 0));
    held_ids.insert(held.inputs.at2(i, 0));
  }
  CHECK(train_ids.size() == 50);
  for (double id : held_ids) CHECK(train_ids.count(id) == 0);

  CHECK(s1.datasets[0].inputs.data == s2.datasets[0].inputs.data);
  CHECK(s1.heldout[0].inputs.data == s2.heldout[0].inputs.data);
}

TEST_CASE("split: class with fewer than 2 samples is an error") {
  Tensor x({3, 1}, {0.0, 1.0, 2.0});
  TaskDatabase db;
  db.datasets.push_back({std::move(x), {0, 0, 1}, TaskKind::BinaryTask, "tiny"});
  CHECK_THROWS_AS(split(db, 0.5, 0), DataError);
}

TEST_CASE("database round-trip is bit-exact") {
  SyntheticTaskParams p;
  p.K = 3;
  p.n_clusters = 1;
  p.dim = 4;
  p.n_per_task = 8;
  p.seed = 2;
  auto db = split(gen_synthetic_tasks(p), 0.25, 1);

  auto path = std::filesystem::temp_directory_path() / "ivdb_rt.bin";
  save_db(path.string(), db);
  auto back = load_db(path.string());

  REQUIRE(back.K() == db.K());
  for (int i = 0; i < db.K(); ++i) {
    CHECK(back.datasets[(size_t)i].inputs.data == db.datasets[(size_t)i].inputs.data);
    CHECK(back.datasets[(size_t)i].labels == db.datasets[(size_t)i].labels);
    CHECK(back.datasets[(size_t)i].name == db.datasets[(size_t)i].name);
    CHECK(back.heldout[(size_t)i].inputs.data == db.heldout[(size_t)i].inputs.data);
  }
  CHECK(back.ground_truth_clusters == db.ground_truth_clusters);
  std::filesystem::remove(path);
}

TEST_CASE("database with corrupt magic is a format error") {
  SyntheticTaskParams p;
  p.K = 1;
  p.n_clusters = 1;
  p.dim = 4;
  p.n_per_task = 4;
  auto db = gen_synthetic_tasks(p);
  auto path = std::filesystem::temp_directory_path() / "ivdb_bad.bin";
  save_db(path.string(), db);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("ZZZZ", 4);
  }
  CHECK_THROWS_AS(load_db(path.string()), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("truncated database is a format error") {
  SyntheticTaskParams p;
  p.K = 2;
  p.n_clusters = 1;
  p.dim = 4;
  p.n_per_task = 6;
  auto db = gen_synthetic_tasks(p);
  auto path = std::filesystem::temp_directory_path() / "ivdb_trunc.bin";
  save_db(path.string(), db);
  auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  CHECK_THROWS_AS(load_db(path.string()), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("file written by an independent writer loads identically") {
  // Hand-assemble a one-dataset container following the documented format,
  // without touching save_db.
  auto path = std::filesystem::temp_directory_path() / "ivdb_ext.bin";
  {
    std::ofstream os(path, std::ios::binary);
    auto u32 = [&](uint32_t v) {
      unsigned char b[4] = {(unsigned char)v, (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                            (unsigned char)(v >> 24)};
      os.write((const char*)b, 4);
    };
    auto i64 = [&](int64_t v) {
      for (int i = 0; i < 8; ++i) os.put((char)((uint64_t)v >> (8 * i)));
    };
    auto f64 = [&](double v) {
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int i = 0; i < 8; ++i) os.put((char)(bits >> (8 * i)));
    };
    u32(0x42445649);  // 'IVDB'
    u32(1);           // version
    u32(1);           // K
    os.put(1);        // flags: ground truth only
    u32(4);           // name length
    os.write("mini", 4);
    os.put(0);  // kind: binary
    u32(2);     // rank
    i64(2);     // n
    i64(3);     // dim
    u32(1);     // label 0 -> wait, labels are i32 each
    u32(0);
    for (double v : {0.5, -1.0, 2.0, 0.25, 1.5, -0.75}) f64(v);
    u32(0);  // cluster id for task 0
  }
  auto db = load_db(path.string());
  CHECK(db.K() == 1);
  CHECK(db.datasets[0].name == "mini");
  CHECK(db.datasets[0].labels == std::vector<int>{1, 0});
  CHECK(db.datasets[0].inputs.shape == Shape{2, 3});
  CHECK(db.datasets[0].inputs.data == std::vector<double>{0.5, -1.0, 2.0, 0.25, 1.5, -0.75});
  CHECK(db.ground_truth_clusters == std::vector<int>{0});
  std::filesystem::remove(path);
}

TEST_CASE("cifar loader: fabricated batch files in the public format load correctly") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "cifar_fake";
  fs::create_directories(dir);
  // 3073-byte records: label + 1024 R + 1024 G + 1024 B; one record per class
  // per batch so every class has 5 samples across the 5 batches.
  for (int b = 1; b <= 5; ++b) {
    std::ofstream os(dir / ("data_batch_" + std::to_string(b) + ".bin"), std::ios::binary);
    for (int cls = 0; cls < 10; ++cls) {
      os.put((char)cls);
      for (int i = 0; i < 3072; ++i) os.put((char)((cls * 20 + b) % 256));
    }
  }
  auto d = load_cifar10(dir.string(), 2, 0);
  REQUIRE(d.has_value());
  CHECK(d->n() == 20);  // 10 classes x 2
  CHECK(d->inputs.shape == Shape{20, 32, 32, 3});
  int count9 = 0;
  for (int l : d->labels) count9 += (l == 9);
  CHECK(count9 == 2);
  // pixel values are byte/255
  for (int64_t i = 0; i < d->n(); ++i) {
    int cls = d->labels[(size_t)i];
    double v = d->inputs.at4(i, 0, 0, 0);
    bool matches_some_batch = false;
    for (int b = 1; b <= 5; ++b)
      if (v == ((cls * 20 + b) % 256) / 255.0) matches_some_batch = true;
    CHECK(matches_some_batch);
  }
  fs::remove_all(dir);

  CHECK(!load_cifar10((fs::temp_directory_path() / "no_such_dir").string(), 2, 0).has_value());
}
