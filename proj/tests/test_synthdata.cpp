#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mgvit/synthdata.hpp"

using namespace mgvit;

namespace {

synth::SyntheticSpec small_spec() {
  synth::SyntheticSpec spec;
  spec.image_h = spec.image_w = 16;
  spec.patch = 4;
  spec.num_base_classes = 2;
  spec.num_novel_classes = 2;
  spec.region_patches_h = spec.region_patches_w = 2;
  spec.samples_per_class = 6;
  spec.noise_sigma = 0.1;
  spec.modes_per_class = 1;
  spec.seed = 7;
  return spec;
}

}  // namespace

TEST_CASE("zero noise leaves the motif as the only nonconstant content") {
  synth::SyntheticSpec spec = small_spec();
  spec.noise_sigma = 0.0;
  spec.color_jitter = 0.0;
  const synth::Dataset ds = synth::generate_classification(spec);
  for (const auto& s : ds.samples) {
    const std::set<int> gt(s.gt_patches.begin(), s.gt_patches.end());
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 16; ++x) {
        bool constant = true;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          if (s.image((ch * 16 + y) * 16 + x) != 0.5) constant = false;
        }
        const int patch = static_cast<int>((y / 4) * 4 + x / 4);
        if (!constant) REQUIRE(gt.count(patch) == 1);
      }
    }
  }
}

TEST_CASE("generation is a pure function of spec and seed") {
  const synth::SyntheticSpec spec = small_spec();
  const synth::Dataset a = synth::generate_classification(spec);
  const synth::Dataset b = synth::generate_classification(spec);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    REQUIRE(a.samples[i].image.data() == b.samples[i].image.data());
    REQUIRE(a.samples[i].gt_patches == b.samples[i].gt_patches);
  }
}

TEST_CASE("base and novel label spaces are disjoint") {
  const synth::Dataset ds = synth::generate_classification(small_spec());
  std::set<int> base(ds.base_classes.begin(), ds.base_classes.end());
  for (int cls : ds.novel_classes) REQUIRE(base.count(cls) == 0);
  for (const auto& s : ds.samples) {
    REQUIRE((base.count(s.label) == 1) != ds.is_novel_class(s.label));
  }
}

TEST_CASE("motif pixels always lie inside ground-truth patches") {
  // independent check against a pure-background render: any pixel differing
  // from the background must fall in a recorded patch
  synth::SyntheticSpec spec = small_spec();
  spec.noise_sigma = 0.0;
  spec.modes_per_class = 2;
  const synth::Dataset ds = synth::generate_classification(spec);
  for (const auto& s : ds.samples) {
    const std::set<int> gt(s.gt_patches.begin(), s.gt_patches.end());
    REQUIRE(!gt.empty());
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 16; ++x) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          if (s.image((ch * 16 + y) * 16 + x) != 0.5) {
            REQUIRE(gt.count(static_cast<int>((y / 4) * 4 + x / 4)) == 1);
          }
        }
      }
    }
  }
}

TEST_CASE("a linear probe on ground-truth patches separates the classes", "[probe]") {
  synth::SyntheticSpec spec = small_spec();
  spec.samples_per_class = 24;
  spec.noise_sigma = 0.1;
  spec.color_jitter = 0.1;
  const synth::Dataset ds = synth::generate_classification(spec);
  const std::size_t region_px = 8 * 8 * 3;
  const std::size_t n = ds.samples.size();
  const std::size_t classes = 4;

  // features: pixels of each sample's own ground-truth region
  Eigen::MatrixXd x(n, region_px + 1);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, classes);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ds.samples[i];
    const int anchor = *std::min_element(s.gt_patches.begin(), s.gt_patches.end());
    const std::size_t pr = static_cast<std::size_t>(anchor) / 4, pc = static_cast<std::size_t>(anchor) % 4;
    std::size_t col = 0;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t dy = 0; dy < 8; ++dy) {
        for (std::size_t dx = 0; dx < 8; ++dx) {
          const std::size_t yy = std::min<std::size_t>(pr * 4 + dy, 15);
          const std::size_t xx = std::min<std::size_t>(pc * 4 + dx, 15);
          x(i, col++) = s.image((ch * 16 + yy) * 16 + xx);
        }
      }
    }
    x(i, region_px) = 1.0;
    y(i, static_cast<std::size_t>(s.label)) = 1.0;
  }

  // alternating split: even rows train, odd rows test
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < n; ++i) (i % 2 == 0 ? train : test).push_back(i);
  Eigen::MatrixXd xt(train.size(), region_px + 1), yt(train.size(), classes);
  for (std::size_t i = 0; i < train.size(); ++i) {
    xt.row(i) = x.row(train[i]);
    yt.row(i) = y.row(train[i]);
  }
  const Eigen::MatrixXd gram =
      xt.transpose() * xt + 1e-3 * Eigen::MatrixXd::Identity(region_px + 1, region_px + 1);
  const Eigen::MatrixXd w = gram.ldlt().solve(xt.transpose() * yt);

  std::size_t correct = 0;
  for (std::size_t i : test) {
    Eigen::Index arg = 0;
    (x.row(i) * w).maxCoeff(&arg);
    correct += static_cast<std::size_t>(arg) == static_cast<std::size_t>(ds.samples[i].label);
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(test.size());
  REQUIRE(acc > 0.95);
}

TEST_CASE("detection boxes equal the rendered pixel bounding boxes") {
  synth::SyntheticSpec spec = small_spec();
  spec.noise_sigma = 0.0;
  spec.color_jitter = 0.0;
  spec.min_instances = 1;
  spec.max_instances = 2;
  spec.samples_per_class = 10;
  const synth::Dataset ds = synth::generate_detection(spec);
  REQUIRE(ds.kind == synth::TaskKind::detection);

  for (const auto& s : ds.samples) {
    // recover motif pixels against the constant background
    std::vector<std::vector<bool>> on(16, std::vector<bool>(16, false));
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 16; ++x) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          if (s.image((ch * 16 + y) * 16 + x) != 0.5) on[y][x] = true;
        }
      }
    }
    for (const det::Box& b : s.boxes) {
      // bounding box of motif pixels inside the recorded box
      const auto x0 = static_cast<std::size_t>(std::lround((b.cx - b.w / 2) * 16));
      const auto x1 = static_cast<std::size_t>(std::lround((b.cx + b.w / 2) * 16)) - 1;
      const auto y0 = static_cast<std::size_t>(std::lround((b.cy - b.h / 2) * 16));
      const auto y1 = static_cast<std::size_t>(std::lround((b.cy + b.h / 2) * 16)) - 1;
      std::size_t mx0 = 16, mx1 = 0, my0 = 16, my1 = 0;
      for (std::size_t y = y0; y <= y1; ++y) {
        for (std::size_t x = x0; x <= x1; ++x) {
          if (on[y][x]) {
            mx0 = std::min(mx0, x);
            mx1 = std::max(mx1, x);
            my0 = std::min(my0, y);
            my1 = std::max(my1, y);
          }
        }
      }
      det::Box recovered;
      recovered.cx = (static_cast<double>(mx0 + mx1) + 1.0) / 2.0 / 16.0;
      recovered.cy = (static_cast<double>(my0 + my1) + 1.0) / 2.0 / 16.0;
      recovered.w = static_cast<double>(mx1 - mx0 + 1) / 16.0;
      recovered.h = static_cast<double>(my1 - my0 + 1) / 16.0;
      REQUIRE(det::iou(b, recovered) == Catch::Approx(1.0).margin(1e-12));
    }
  }
}

TEST_CASE("zero instances are allowed when configured") {
  synth::SyntheticSpec spec = small_spec();
  spec.min_instances = 0;
  spec.max_instances = 0;
  const synth::Dataset ds = synth::generate_detection(spec);
  for (const auto& s : ds.samples) REQUIRE(s.boxes.empty());
}

TEST_CASE("split_indices") {
  std::vector<int> ids(100);
  std::iota(ids.begin(), ids.end(), 0);

  SECTION("a single fraction keeps everything") {
    const auto parts = synth::split_indices(ids, {1.0}, 3);
    REQUIRE(parts.size() == 1);
    REQUIRE(parts[0].size() == 100);
  }

  SECTION("75/25 of 100 is 75 and 25") {
    const auto parts = synth::split_indices(ids, {0.75, 0.25}, 3);
    REQUIRE(parts[0].size() == 75);
    REQUIRE(parts[1].size() == 25);
    std::set<int> all;
    for (const auto& p : parts) all.insert(p.begin(), p.end());
    REQUIRE(all.size() == 100);
  }

  SECTION("same seed, same partition") {
    REQUIRE(synth::split_indices(ids, {0.64, 0.16, 0.20}, 9) ==
            synth::split_indices(ids, {0.64, 0.16, 0.20}, 9));
  }

  SECTION("fractions must sum to one") {
    REQUIRE_THROWS_AS(synth::split_indices(ids, {0.5, 0.4}, 3), InputError);
  }
}

TEST_CASE("dataset save/load round-trips bit-exactly") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "mgvit_ds_roundtrip").string();
  fs::remove_all(dir);

  synth::SyntheticSpec spec = small_spec();
  spec.samples_per_class = 4;
  const synth::Dataset ds = synth::generate_detection(spec);
  synth::save_dataset(ds, dir);
  const synth::Dataset back = synth::load_dataset(dir);

  REQUIRE(back.kind == ds.kind);
  REQUIRE(back.base_classes == ds.base_classes);
  REQUIRE(back.novel_classes == ds.novel_classes);
  REQUIRE(back.samples.size() == ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    REQUIRE(back.samples[i].id == ds.samples[i].id);
    REQUIRE(back.samples[i].label == ds.samples[i].label);
    REQUIRE(back.samples[i].gt_patches == ds.samples[i].gt_patches);
    REQUIRE(back.samples[i].image.data() == ds.samples[i].image.data());
    REQUIRE(back.samples[i].boxes.size() == ds.samples[i].boxes.size());
    for (std::size_t b = 0; b < ds.samples[i].boxes.size(); ++b) {
      REQUIRE(back.samples[i].boxes[b].cx == ds.samples[i].boxes[b].cx);
      REQUIRE(back.samples[i].boxes[b].cy == ds.samples[i].boxes[b].cy);
      REQUIRE(back.samples[i].boxes[b].w == ds.samples[i].boxes[b].w);
      REQUIRE(back.samples[i].boxes[b].h == ds.samples[i].boxes[b].h);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("an empty dataset still round-trips") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "mgvit_ds_empty").string();
  fs::remove_all(dir);
  synth::Dataset ds;
  ds.spec = small_spec();
  synth::save_dataset(ds, dir);
  const synth::Dataset back = synth::load_dataset(dir);
  REQUIRE(back.samples.empty());
  fs::remove_all(dir);
}

TEST_CASE("a raster with the wrong magic is rejected at offset zero") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "mgvit_ds_magic").string();
  fs::remove_all(dir);
  synth::SyntheticSpec spec = small_spec();
  spec.samples_per_class = 1;
  const synth::Dataset ds = synth::generate_classification(spec);
  synth::save_dataset(ds, dir);
  {
    std::fstream f(fs::path(dir) / "rasters" / "0.bin",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.put('Z');
  }
  try {
    (void)synth::load_dataset(dir);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    REQUIRE(e.offset == 0);
  }
  fs::remove_all(dir);
}
