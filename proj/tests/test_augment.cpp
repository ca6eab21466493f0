#include "support.hpp"

#include "spiralscope/augment.hpp"
#include "spiralscope/spiralgen.hpp"

#include <doctest.h>

#include <cstring>

using namespace spiralscope;
using spiralscope::testing::random_tensor;

namespace {

bool same_image(const ImageTensor& a, const ImageTensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0;
}

AugmentConfig forced(double flip, double contrast, double zoom, int target) {
  AugmentConfig c;
  c.p_hflip = flip;
  c.p_contrast = contrast;
  c.p_zoomcrop = zoom;
  c.resize_target = target;
  return c;
}

long dark_pixels(const ImageTensor& img) {
  const Index plane = img.dim(1) * img.dim(2);
  return (img.values().head(plane) < 0.5f).count();
}

}  // namespace

TEST_CASE("horizontal flip") {
  Rng rng(1);
  const auto img = random_tensor({3, 5, 7}, rng, 0.0, 1.0);
  const auto flipped = flip_horizontal(img);
  CHECK(flipped[0] == img[6]);
  CHECK(same_image(flip_horizontal(flipped), img));

  auto sym = Tensor<float>::zeros({3, 2, 4});
  for (Index r = 0; r < 6; ++r) {
    sym.mutable_values()[r * 4 + 0] = sym.mutable_values()[r * 4 + 3] = 0.2f * r;
    sym.mutable_values()[r * 4 + 1] = sym.mutable_values()[r * 4 + 2] = 0.1f;
  }
  CHECK(same_image(flip_horizontal(sym), sym));
  Rng draw(2);
  CHECK(same_image(hflip(sym, forced(1, 0, 0, 8), draw), sym));
}

TEST_CASE("contrast") {
  Rng rng(3);
  const auto img = random_tensor({3, 4, 4}, rng, 0.0, 1.0);
  CHECK(same_image(adjust_contrast(img, 1.0), img));
  const auto gray = Tensor<float>::full({3, 4, 4}, 0.5f);
  for (double c : {0.5, 0.9, 1.5}) CHECK(same_image(adjust_contrast(gray, c), gray));
  CHECK(adjust_contrast(Tensor<float>::full({3, 1, 1}, 1.0f), 0.5)[0] == 0.75f);
  const auto strong = adjust_contrast(img, 3.0);
  CHECK(strong.values().minCoeff() >= 0.0f);
  CHECK(strong.values().maxCoeff() <= 1.0f);
}

TEST_CASE("zoom and crop") {
  Rng rng(4);
  const auto img = random_tensor({3, 20, 20}, rng, 0.0, 1.0);
  CHECK(same_image(zoom_crop(img, 1.0, 0, 0), img));
  const auto [sy, sx] = zoom_crop_slack(img, 1.15);
  CHECK(sy == 3);
  CHECK(sx == 3);
  for (int oy = 0; oy <= sy; ++oy) CHECK(zoom_crop(img, 1.15, oy, 0).shape() == img.shape());
  CHECK_THROWS_AS(zoom_crop(img, 1.15, sy + 1, 0), std::invalid_argument);

  AugmentConfig c = forced(0, 0, 1, 20);
  Rng draw(5);
  for (int i = 0; i < 50; ++i) CHECK(zoom_crop(img, c, draw).shape() == img.shape());
}

TEST_CASE("centered zoom keeps most of a centered spiral") {
  GeneratorConfig g = default_generator_config();
  g.center_jitter = 0.0;
  const SpiralSample s = generate_sample(Diagnosis::Control, 0, g, 0);
  const auto [sy, sx] = zoom_crop_slack(s.image, 1.15);
  const int oy = sy / 2, ox = sx / 2;
  const auto zoomed = zoom_crop(s.image, 1.15, oy, ox);
  CHECK(zoomed.shape() == s.image.shape());
  // Source rows and columns that survive the crop.
  const Index h = s.image.dim(1), w = s.image.dim(2);
  const Index y0 = (oy * h) / (h + sy), y1 = ((h - 1 + oy) * h) / (h + sy);
  const Index x0 = (ox * w) / (w + sx), x1 = ((w - 1 + ox) * w) / (w + sx);
  long total = 0, kept = 0;
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      if (s.image[y * w + x] >= 0.5f) continue;
      ++total;
      kept += y >= y0 && y <= y1 && x >= x0 && x <= x1;
    }
  }
  CHECK(total > 0);
  CHECK(static_cast<double>(kept) / total >= 0.8);
  CHECK(dark_pixels(zoomed) > 0);
}

TEST_CASE("nearest-neighbour resize") {
  Rng rng(6);
  const auto img = random_tensor({3, 12, 12}, rng, 0.0, 1.0);
  CHECK(same_image(resize_nn(img, 12), img));

  const auto small = Tensor<float>::from_values({1, 2, 2}, {1, 2, 3, 4});
  const auto up = resize_nn(small, 4);
  const float expect[] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) CHECK(up[i] == expect[i]);

  const auto down = resize_nn(img, 5);
  for (Index y = 0; y < 5; ++y)
    for (Index x = 0; x < 5; ++x) CHECK(down[(1 * 5 + y) * 5 + x] == img[(1 * 12 + y * 12 / 5) * 12 + x * 12 / 5]);

  const SpiralSample s = generate_sample(Diagnosis::PD, 0, default_generator_config(), 0);
  CHECK(dark_pixels(resize_nn(s.image, 96)) > 0);
}

TEST_CASE("pipeline determinism, order and range") {
  const SpiralSample s = generate_sample(Diagnosis::ET, 1, default_generator_config(), 0);
  const AugmentConfig c;
  Rng a(9), b(9);
  const auto x = augment_pipeline(s.image, c, a), y = augment_pipeline(s.image, c, b);
  CHECK(same_image(x, y));
  CHECK(x.shape() == Shape{3, 96, 96});
  CHECK(x.values().minCoeff() >= 0.0f);
  CHECK(x.values().maxCoeff() <= 1.0f);

  Rng none(10);
  CHECK(same_image(augment_pipeline(s.image, forced(0, 0, 0, 64), none), resize_nn(s.image, 64)));

  // Replaying the trace through the deterministic blocks reproduces the output.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    AugmentTrace t;
    const auto out = augment_pipeline(s.image, forced(0.5, 0.5, 0.5, 96), rng, &t);
    ImageTensor replay = t.flipped ? flip_horizontal(s.image) : s.image;
    if (t.contrasted) replay = adjust_contrast(replay, t.contrast_factor);
    if (t.zoomed) replay = zoom_crop(replay, t.zoom, t.offset_y, t.offset_x);
    CHECK(same_image(resize_nn(replay, 96), out));
  }
}

TEST_CASE("application rates match the configured probabilities") {
  const AugmentConfig c;
  const auto img = Tensor<float>::full({3, 16, 16}, 0.3f);
  AugmentConfig small = c;
  small.resize_target = 16;
  Rng rng(11);
  int flips = 0, contrasts = 0, zooms = 0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    AugmentTrace t;
    augment_pipeline(img, small, rng, &t);
    flips += t.flipped;
    contrasts += t.contrasted;
    zooms += t.zoomed;
  }
  CHECK(std::abs(flips / double(trials) - 0.5) <= 0.02);
  CHECK(std::abs(contrasts / double(trials) - 0.1) <= 0.02);
  CHECK(std::abs(zooms / double(trials) - 0.75) <= 0.02);
}

TEST_CASE("evaluation mode only resizes") {
  const SpiralSample s = generate_sample(Diagnosis::PD, 2, default_generator_config(), 0);
  const AugmentConfig c = forced(1, 1, 1, 96);
  Rng rng(12);
  const auto state = rng;
  AugmentTrace t;
  const auto out = prepare_image(s.image, c, PipelineMode::Eval, rng, &t);
  CHECK(same_image(out, resize_nn(s.image, 96)));
  CHECK(rng == state);
  CHECK_FALSE(t.flipped);
  CHECK_FALSE(t.zoomed);
  const auto train = prepare_image(s.image, c, PipelineMode::Train, rng, &t);
  CHECK(t.flipped);
  CHECK(t.contrasted);
  CHECK(t.zoomed);
  CHECK_FALSE(same_image(train, out));
}

TEST_CASE("augment config validation and json") {
  AugmentConfig c;
  CHECK_NOTHROW(c.validate());
  c.p_hflip = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AugmentConfig{};
  c.zoom_range = {0.9, 1.1};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AugmentConfig{};
  c.resize_target = 4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = AugmentConfig{};
  c.p_contrast = 0.25;
  CHECK(augment_config_from_json(to_json(c)) == c);
}
