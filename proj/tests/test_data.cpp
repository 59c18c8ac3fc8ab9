#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "feddva/data.hpp"

using namespace feddva;
namespace fs = std::filesystem;

namespace {

// Per-pixel membership, written as predicates rather than scanlines.
bool on_sinusoid(std::size_t row, std::size_t col, std::size_t h, std::size_t w, const MarkSpec& s,
                 bool horizontal) {
  const double along = horizontal ? static_cast<double>(w) : static_cast<double>(h);
  const double across = horizontal ? static_cast<double>(h) : static_cast<double>(w);
  const double u = horizontal ? static_cast<double>(col) : static_cast<double>(row);
  const double v = horizontal ? static_cast<double>(row) : static_cast<double>(col);
  const double y = (across - 1) / 2 + s.amplitude * std::sin(2 * std::numbers::pi * s.frequency * u / along + s.phase);
  return std::abs(v - y) <= s.thickness / 2;
}

bool in_ellipse_band(std::size_t row, std::size_t col, std::size_t h, std::size_t w, const MarkSpec& s) {
  const double dy = static_cast<double>(row) - (static_cast<double>(h) - 1) / 2;
  const double dx = static_cast<double>(col) - (static_cast<double>(w) - 1) / 2;
  const double t = s.thickness / 2;
  auto inside = [&](double rx, double ry) { return (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry); };
  const bool within_outer = inside(s.radius_x + t, s.radius_y + t) <= 1.0;
  const bool within_inner = s.radius_x > t && s.radius_y > t && inside(s.radius_x - t, s.radius_y - t) < 1.0;
  return within_outer && !within_inner;
}

Dataset labelled(std::size_t n_classes, std::size_t per_class) {
  return make_toy_digits(per_class, n_classes, 8, 8, 17);
}

}  // namespace

TEST_CASE("sinusoid marks on a blank image light exactly the curve pixels") {
  for (bool horizontal : {true, false}) {
    for (double thickness : {1.0, 2.0, 3.0}) {
      const std::size_t h = 16, w = 20;
      MarkSpec s = MarkSpec::defaults(horizontal ? MarkKind::kHorizontalSinusoid : MarkKind::kVerticalSinusoid, h, w);
      s.thickness = thickness;
      s.phase = 0.37;
      std::vector<double> img(h * w, 0.0);
      apply_mark(img, h, w, s);
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          CHECK(img[r * w + c] == (on_sinusoid(r, c, h, w, s, horizontal) ? 1.0 : 0.0));
        }
      }
    }
  }
}

TEST_CASE("ellipse marks match the band membership predicate") {
  for (double thickness : {1.0, 2.0}) {
    const std::size_t h = 16, w = 16;
    MarkSpec s = MarkSpec::defaults(MarkKind::kEllipse, h, w);
    s.thickness = thickness;
    std::vector<double> img(h * w, 0.0);
    apply_mark(img, h, w, s);
    std::size_t lit = 0, expected = 0;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const bool want = in_ellipse_band(r, c, h, w, s);
        CHECK(img[r * w + c] == (want ? 1.0 : 0.0));
        lit += img[r * w + c] > 0.0;
        expected += want;
      }
    }
    CHECK(lit == expected);
    CHECK(lit > 0);
  }
}

TEST_CASE("marks composite with max and leave plain images alone") {
  const std::size_t h = 8, w = 8;
  std::vector<double> img(h * w, 0.6);
  MarkSpec s = MarkSpec::defaults(MarkKind::kHorizontalSinusoid, h, w);
  s.intensity = 0.4;
  apply_mark(img, h, w, s);
  for (double v : img) CHECK(v == 0.6);
  apply_mark(img, h, w, MarkSpec::defaults(MarkKind::kPlain, h, w));
  for (double v : img) CHECK(v == 0.6);
}

TEST_CASE("invalid marks are rejected") {
  std::vector<double> img(64, 0.0);
  MarkSpec s = MarkSpec::defaults(MarkKind::kHorizontalSinusoid, 8, 8);
  s.intensity = 1.5;
  CHECK_THROWS_AS(apply_mark(img, 8, 8, s), std::invalid_argument);
  s = MarkSpec::defaults(MarkKind::kHorizontalSinusoid, 8, 8);
  s.thickness = 0.0;
  CHECK_THROWS_AS(apply_mark(img, 8, 8, s), std::invalid_argument);
  s = MarkSpec::defaults(MarkKind::kEllipse, 8, 8);
  s.radius_x = 9.0;
  CHECK_THROWS_AS(apply_mark(img, 8, 8, s), std::invalid_argument);
  s.radius_x = std::nan("");
  CHECK_THROWS_AS(apply_mark(img, 8, 8, s), std::invalid_argument);
}

TEST_CASE("IDX encode and parse round-trip bytes exactly") {
  IdxArray a;
  a.dims = {3, 2, 2};
  for (int i = 0; i < 12; ++i) a.data.push_back(static_cast<std::uint8_t>(i * 20 + 3));
  const auto bytes = encode_idx(a);
  CHECK(bytes.size() == 4 + 12 + 12);
  CHECK(bytes[2] == 0x08);
  CHECK(bytes[3] == 3);
  const IdxArray b = parse_idx_bytes(bytes);
  CHECK(b.dims == a.dims);
  CHECK(b.data == a.data);
  CHECK(encode_idx(b) == bytes);
}

TEST_CASE("IDX errors report the byte offset") {
  IdxArray a;
  a.dims = {2};
  a.data = {1, 2};
  auto bytes = encode_idx(a);
  auto bad = bytes;
  bad[0] = 1;
  CHECK_THROWS_WITH(parse_idx_bytes(bad), doctest::Contains("offset 0"));
  bad = bytes;
  bad[2] = 0x0D;
  CHECK_THROWS_WITH(parse_idx_bytes(bad), doctest::Contains("offset 2"));
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS_WITH(parse_idx_bytes(bad), doctest::Contains("truncated"));
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS(parse_idx_bytes(bad));
  CHECK_THROWS(parse_idx_bytes(std::vector<std::uint8_t>{0, 0}));
}

TEST_CASE("IDX image and label files load into a dataset scaled to [0,1]") {
  const fs::path dir = fs::temp_directory_path() / "feddva_test_idx";
  fs::create_directories(dir);
  IdxArray img;
  img.dims = {2, 2, 3};
  img.data = {0, 255, 51, 102, 0, 0, 255, 255, 255, 0, 0, 0};
  IdxArray lab;
  lab.dims = {2};
  lab.data = {7, 1};
  write_idx(dir / "img", img);
  write_idx(dir / "lab", lab);
  const Dataset ds = load_idx_dataset(dir / "img", dir / "lab");
  CHECK(ds.size() == 2);
  CHECK(ds.height == 2);
  CHECK(ds.width == 3);
  CHECK(ds.labels == std::vector<int>{7, 1});
  CHECK(ds.image(0)[2] == doctest::Approx(0.2));
  CHECK_THROWS(load_idx_dataset(dir / "lab", dir / "img"));
  fs::remove_all(dir);
}

TEST_CASE("uniform partition covers every sample once with balanced sizes") {
  const Dataset ds = labelled(4, 10);
  const auto marks = default_client_marks(3, 8, 8);
  CHECK(marks[0].kind == MarkKind::kHorizontalSinusoid);
  CHECK(marks[1].kind == MarkKind::kEllipse);
  CHECK(marks[2].kind == MarkKind::kVerticalSinusoid);
  const PartitionPlan plan = partition_uniform_marked(ds, 3, marks, 5);
  CHECK(plan.is_partition_of(ds.size()));
  CHECK(plan.clients[0].size() == 14);
  CHECK(plan.clients[1].size() == 13);
  CHECK(plan.clients[2].size() == 13);
  CHECK_THROWS(partition_uniform_marked(ds, 41, default_client_marks(41, 8, 8), 5));
}

TEST_CASE("materialized clients carry their own mark") {
  const Dataset ds = labelled(2, 4);
  const PartitionPlan plan = partition_uniform_marked(ds, 2, default_client_marks(2, 8, 8), 5);
  const auto clients = materialize(ds, plan);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t i = 0; i < clients[k].size(); ++i) {
      std::vector<double> expect(ds.image(plan.clients[k][i]).begin(), ds.image(plan.clients[k][i]).end());
      apply_mark(expect, 8, 8, plan.marks[k]);
      const auto got = clients[k].image(i);
      CHECK(std::equal(got.begin(), got.end(), expect.begin()));
    }
  }
}

TEST_CASE("dirichlet draws lie on the simplex and concentrate as alpha shrinks") {
  Rng rng(3);
  double max_small = 0.0, max_large = 0.0;
  for (int t = 0; t < 200; ++t) {
    const auto a = dirichlet_sample(5, 0.05, rng);
    const auto b = dirichlet_sample(5, 50.0, rng);
    double sa = 0, sb = 0;
    for (double v : a) { CHECK(v >= 0.0); sa += v; }
    for (double v : b) { CHECK(v >= 0.0); sb += v; }
    CHECK(sa == doctest::Approx(1.0));
    CHECK(sb == doctest::Approx(1.0));
    max_small += *std::max_element(a.begin(), a.end());
    max_large += *std::max_element(b.begin(), b.end());
  }
  CHECK(max_small / 200 > 0.8);
  CHECK(max_large / 200 < 0.35);
}

TEST_CASE("label-skew partition is a partition with skewed class mixes") {
  const Dataset ds = labelled(4, 50);
  const PartitionPlan plan = partition_label_skew(ds, 8, 0.3, 11, 10);
  CHECK(plan.is_partition_of(ds.size()));
  CHECK(plan.class_fractions.size() == 4);
  for (const auto& row : plan.class_fractions) {
    double s = 0;
    for (double v : row) s += v;
    CHECK(s == doctest::Approx(1.0));
  }
  std::size_t skewed = 0;
  for (const auto& c : plan.clients) {
    CHECK(c.size() >= 10);
    CHECK(std::is_sorted(c.begin(), c.end()));
    std::vector<std::size_t> counts(4, 0);
    for (auto i : c) ++counts[static_cast<std::size_t>(ds.labels[i])];
    skewed += *std::max_element(counts.begin(), counts.end()) * 2 > c.size();
  }
  CHECK(skewed >= 4);
  const PartitionPlan again = partition_label_skew(ds, 8, 0.3, 11, 10);
  CHECK(again.clients == plan.clients);
}

TEST_CASE("partition plans survive a JSON round trip") {
  const Dataset ds = labelled(2, 5);
  const PartitionPlan plan = partition_uniform_marked(ds, 2, default_client_marks(2, 8, 8), 1);
  const PartitionPlan back = partition_plan_from_json(to_json(plan));
  CHECK(back.clients == plan.clients);
  CHECK(back.marks.size() == 2);
  CHECK(back.marks[1].radius_x == plan.marks[1].radius_x);
}

TEST_CASE("holdout split is deterministic and disjoint") {
  const Dataset ds = labelled(2, 10);
  const auto [train, held] = split_holdout(ds, 0.25, 4);
  CHECK(train.size() + held.size() == ds.size());
  CHECK(held.size() == 5);
  const auto [train2, held2] = split_holdout(ds, 0.25, 4);
  CHECK(train2.pixels == train.pixels);
  CHECK(held2.labels == held.labels);
  const auto [t3, h3] = split_holdout(ds.subset(std::vector<std::size_t>{0, 1, 2}), 0.01, 4);
  CHECK(h3.size() == 1);
  CHECK(t3.size() == 2);
}

TEST_CASE("toy digits are valid, balanced and reproducible") {
  const Dataset a = make_toy_digits(6, 10, 16, 16, 2);
  a.validate();
  CHECK(a.size() == 60);
  for (auto c : a.class_counts()) CHECK(c == 6);
  const Dataset b = make_toy_digits(6, 10, 16, 16, 2);
  CHECK(a.pixels == b.pixels);
  // Glyphs of different classes differ on average.
  std::vector<double> mean0(256, 0.0), mean1(256, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto& m = a.labels[i] == 0 ? mean0 : mean1;
    if (a.labels[i] > 1) continue;
    for (std::size_t p = 0; p < 256; ++p) m[p] += a.image(i)[p] / 6;
  }
  double diff = 0;
  for (std::size_t p = 0; p < 256; ++p) diff += std::abs(mean0[p] - mean1[p]);
  CHECK(diff > 5.0);
}
