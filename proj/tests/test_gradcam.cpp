#include <doctest.h>

#include <cmath>

#include "cxr/gradcam.hpp"
#include "test_helpers.hpp"

using namespace cxr;
using test_util::random_tensor;

TEST_CASE("compute_cam: identity weighting normalizes by the peak") {
  std::vector<double> act{0.5, 1.0, 2.0, 0.0};
  std::vector<double> grads{1.0, 1.0, 1.0, 1.0};
  Heatmap m = compute_cam(act, grads, 1, 2, 2);
  CHECK(m.raw_max == doctest::Approx(2.0));
  CHECK(m.values == std::vector<double>{0.25, 0.5, 1.0, 0.0});
  CHECK_FALSE(m.degenerate());
}

TEST_CASE("compute_cam: nowhere-positive sum leaves a flagged zero map") {
  std::vector<double> act{0.5, 1.0, 2.0, 0.1};
  std::vector<double> grads{-1.0, -1.0, -1.0, -1.0};  // alpha = -1
  Heatmap m = compute_cam(act, grads, 1, 2, 2);
  CHECK(m.raw_max <= 0.0);
  CHECK(m.degenerate());
  for (double v : m.values) CHECK(v == 0.0);
}

TEST_CASE("compute_cam: two channels with opposing weights") {
  // A1 = [[1,0],[0,0]], A2 = [[0,0],[0,1]], alpha = (1, -1)
  std::vector<double> act{1, 0, 0, 0, 0, 0, 0, 1};
  std::vector<double> grads{1, 1, 1, 1, -1, -1, -1, -1};
  Heatmap m = compute_cam(act, grads, 2, 2, 2);
  CHECK(m.values == std::vector<double>{1, 0, 0, 0});
  CHECK(m.raw_max == doctest::Approx(1.0));
}

TEST_CASE("compute_cam: positive gradient scaling cancels in normalization") {
  Rng rng(64);
  std::vector<double> act(3 * 16), grads(3 * 16);
  for (auto& v : act) v = rng.uniform(-1.0, 1.0);
  for (auto& v : grads) v = rng.uniform(-1.0, 1.0);
  Heatmap base = compute_cam(act, grads, 3, 4, 4);

  std::vector<double> scaled = grads;
  for (auto& v : scaled) v *= 4.0;  // power of two: exact
  Heatmap same = compute_cam(act, scaled, 3, 4, 4);
  CHECK(same.values == base.values);

  for (auto& v : scaled) v *= 0.9625;
  Heatmap close = compute_cam(act, scaled, 3, 4, 4);
  for (std::size_t i = 0; i < base.values.size(); ++i) {
    CHECK(close.values[i] == doctest::Approx(base.values[i]).epsilon(1e-14));
  }
}

TEST_CASE("gradcam on a model: bounds, flags, no parameter mutation") {
  ModelConfig c;
  c.input_channels = 1;
  c.input_h = 8;
  c.input_w = 8;
  c.initial_channels = 8;
  c.growth_rate = 4;
  c.block_layout = {2, 2};
  c.num_classes = 3;
  c.dropout_rate = 0.1;
  Model model = build_model(c, 2025);

  Rng rng(1);
  Tensor image = random_tensor({1, 8, 8}, rng, 0.0, 1.0);

  std::vector<std::vector<double>> before;
  for (const ParamRef& p : model.named_parameters()) before.push_back(p.tensor->values());

  double prob = -1.0;
  Heatmap m = gradcam(model, image, 1, &prob);
  CHECK(m.height == 4);  // one transition halves 8x8
  CHECK(m.width == 4);
  CHECK(m.class_index == 1);
  CHECK(m.source_layer == "dense_block1");
  CHECK(prob > 0.0);
  CHECK(prob < 1.0);
  double peak = 0.0;
  for (double v : m.values) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    peak = std::max(peak, v);
  }
  if (!m.degenerate()) CHECK(peak == 1.0);

  auto after = model.named_parameters();
  for (std::size_t i = 0; i < after.size(); ++i) {
    CHECK(after[i].tensor->values() == before[i]);
  }

  CHECK_THROWS_AS(gradcam(model, image, 3), InvalidArgument);
  CHECK_THROWS_AS(gradcam(model, image, -1), InvalidArgument);

  Heatmap again = gradcam(model, image, 1);
  CHECK(again.values == m.values);  // evaluation path is deterministic
}

TEST_CASE("upsample_heatmap: constants, single sample, monotone rows") {
  Heatmap constant;
  constant.height = 2;
  constant.width = 2;
  constant.values = {0.6, 0.6, 0.6, 0.6};
  constant.raw_max = 1.0;
  Heatmap up = upsample_heatmap(constant, 5, 7);
  CHECK(up.height == 5);
  CHECK(up.width == 7);
  for (double v : up.values) CHECK(v == doctest::Approx(0.6));

  Heatmap dot;
  dot.height = 1;
  dot.width = 1;
  dot.values = {0.4};
  Heatmap filled = upsample_heatmap(dot, 3, 3);
  for (double v : filled.values) CHECK(v == doctest::Approx(0.4));

  Heatmap ramp;
  ramp.height = 2;
  ramp.width = 2;
  ramp.values = {0.0, 1.0, 0.0, 1.0};
  Heatmap wide = upsample_heatmap(ramp, 2, 4);
  for (int y = 0; y < 2; ++y) {
    for (int x = 1; x < 4; ++x) {
      CHECK(wide.at(y, x) >= wide.at(y, x - 1));
    }
    CHECK(wide.at(y, 0) == 0.0);
    CHECK(wide.at(y, 3) == 1.0);
  }

  CHECK_THROWS_AS(upsample_heatmap(ramp, 1, 4), InvalidArgument);
}

TEST_CASE("overlay: zero map reproduces the grayscale image") {
  GrayImage img;
  img.width = 3;
  img.height = 2;
  img.pixels = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  Heatmap zero;
  zero.height = 2;
  zero.width = 3;
  zero.values.assign(6, 0.0);

  OverlayImage o = make_overlay(img, zero, 0.5);
  for (int i = 0; i < 6; ++i) {
    const auto expected = static_cast<std::uint8_t>(std::lround(img.pixels[i] * 255.0));
    CHECK(o.rgb[i * 3 + 0] == expected);
    CHECK(o.rgb[i * 3 + 1] == expected);
    CHECK(o.rgb[i * 3 + 2] == expected);
  }
}

TEST_CASE("overlay: full blend of a saturated map is the pure colormap") {
  GrayImage img;
  img.width = 2;
  img.height = 1;
  img.pixels = {0.3, 0.7};
  Heatmap ones;
  ones.height = 1;
  ones.width = 2;
  ones.values = {1.0, 1.0};
  OverlayImage o = make_overlay(img, ones, 1.0);
  for (int i = 0; i < 2; ++i) {
    CHECK(o.rgb[i * 3 + 0] == 255);  // colormap(1) is red
    CHECK(o.rgb[i * 3 + 1] == 0);
    CHECK(o.rgb[i * 3 + 2] == 0);
  }
}

TEST_CASE("colormap anchors") {
  auto blue = heat_colormap(0.0);
  CHECK(blue[0] == 0.0);
  CHECK(blue[1] == 0.0);
  CHECK(blue[2] == 1.0);
  auto yellow = heat_colormap(0.5);
  CHECK(yellow[0] == 1.0);
  CHECK(yellow[1] == 1.0);
  CHECK(yellow[2] == 0.0);
  auto red = heat_colormap(1.0);
  CHECK(red[0] == 1.0);
  CHECK(red[1] == 0.0);
  CHECK(red[2] == 0.0);
}

TEST_CASE("overlay PPM files are byte-stable") {
  test_util::TempDir dir("ppm");
  GrayImage img;
  img.width = 4;
  img.height = 4;
  for (int i = 0; i < 16; ++i) img.pixels.push_back(i / 15.0);
  Heatmap m;
  m.height = 4;
  m.width = 4;
  for (int i = 0; i < 16; ++i) m.values.push_back((15 - i) / 15.0);

  write_ppm(make_overlay(img, m, 0.4), dir.path() / "a.ppm");
  write_ppm(make_overlay(img, m, 0.4), dir.path() / "b.ppm");
  CHECK(test_util::file_bytes(dir.path() / "a.ppm") ==
        test_util::file_bytes(dir.path() / "b.ppm"));

  auto bytes = test_util::file_bytes(dir.path() / "a.ppm");
  CHECK(bytes.size() > 10);
  CHECK(bytes[0] == 'P');
  CHECK(bytes[1] == '6');
}

TEST_CASE("localization score") {
  Heatmap m;
  m.height = 2;
  m.width = 2;
  m.values = {1.0, 0.0, 0.0, 3.0};
  m.raw_max = 3.0;

  CHECK(localization_score(m, {0, 0, 2, 2}) == doctest::Approx(1.0));
  CHECK(localization_score(m, {1, 1, 1, 1}) == doctest::Approx(0.75));

  Heatmap uniform;
  uniform.height = 4;
  uniform.width = 4;
  uniform.values.assign(16, 0.5);
  uniform.raw_max = 1.0;
  CHECK(localization_score(uniform, {0, 0, 2, 2}) == doctest::Approx(0.25));

  Heatmap zero;
  zero.height = 2;
  zero.width = 2;
  zero.values.assign(4, 0.0);
  zero.raw_max = -1.0;
  CHECK(localization_score(zero, {0, 0, 1, 1}) == 0.0);

  CHECK_THROWS_AS(localization_score(m, {0, 0, 0, 1}), InvalidArgument);
  CHECK_THROWS_AS(localization_score(m, {1, 1, 2, 2}), InvalidArgument);
}
