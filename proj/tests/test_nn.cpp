#include "support.hpp"

#include "spiralscope/nn.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace spiralscope;
using spiralscope::testing::random_tensor;

namespace {

ModelConfig small_config(int classes = 3, std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_classes = classes;
  c.input_side = 16;
  c.widths = {4, 6, 8};
  c.blocks_per_stage = 1;
  c.seed = seed;
  c.head_seed = seed;
  return c;
}

bool same_values(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0;
}

bool same_body(const Model& a, const Model& b) {
  for (const Parameter& p : a.parameters()) {
    if (p.is_head()) continue;
    if (!same_values(p.value, b.parameter(p.name).value)) return false;
  }
  return true;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("spiralscope_test_" + name);
}

}  // namespace

TEST_CASE("head width follows the class count") {
  for (int classes : {2, 3, 10}) {
    const Model m = build_model(classes, 16, {4, 6, 8}, 1, 0);
    CHECK(m.parameter("head.weight").value.dim(1) == classes);
    Rng rng(1);
    CHECK(m.forward(random_tensor({1, 3, 16, 16}, rng)).shape() == Shape{1, classes});
  }
}

TEST_CASE("build_model validation") {
  CHECK_THROWS_AS(build_model(1, 16, {4, 6, 8}, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(build_model(2, 20, {4, 6, 8}, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(build_model(2, 16, {4, 0, 8}, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(build_model(2, 16, {4, 6, 8}, 0, 0), std::invalid_argument);
  ModelConfig no_pool = small_config();
  no_pool.stem_pool = false;
  no_pool.input_side = 12;
  CHECK_NOTHROW(build_model(no_pool));
}

TEST_CASE("same seed gives identical parameters") {
  const Model a = build_model(small_config()), b = build_model(small_config());
  REQUIRE(a.parameters().size() == b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(same_values(a.parameters()[i].value, b.parameters()[i].value));
  }
  const Model c = build_model(small_config(3, 2));
  CHECK_FALSE(same_values(a.parameter("stem.weight").value, c.parameter("stem.weight").value));
}

TEST_CASE("layer groups partition the parameters") {
  const Model m = build_model(small_config());
  std::array<int, 3> counts{};
  for (const Parameter& p : m.parameters()) {
    ++counts[static_cast<int>(p.group)];
    if (p.name.starts_with("stem.") || p.name.starts_with("stage1.")) CHECK(p.group == LayerGroup::Early);
    if (p.name.starts_with("stage2.")) CHECK(p.group == LayerGroup::Middle);
    if (p.name.starts_with("stage3.") || p.is_head()) CHECK(p.group == LayerGroup::Late);
  }
  CHECK(counts[0] + counts[1] + counts[2] == static_cast<int>(m.parameters().size()));
  for (int c : counts) CHECK(c > 0);
  CHECK(m.has_parameter("stage2.block0.proj.weight"));
  CHECK(m.has_parameter("stage3.block0.proj.weight"));
  CHECK_FALSE(m.has_parameter("stage1.block0.proj.weight"));
}

TEST_CASE("default architecture has 14 weighted layers") {
  const Model m = build_model(ModelConfig{});
  int convs = 0;
  for (const Parameter& p : m.parameters()) {
    if (p.name.ends_with(".weight") && p.name.find("proj") == std::string::npos) ++convs;
  }
  CHECK(convs == 14);
  CHECK(m.config().feature_side() == 12);
}

TEST_CASE("forward contracts") {
  const Model m = build_model(small_config());
  const auto zeros = Tensor<float>::zeros({2, 3, 16, 16});
  const auto logits = m.forward(zeros);
  CHECK(logits.shape() == Shape{2, 3});
  for (Index c = 0; c < 3; ++c) CHECK(logits[c] == logits[3 + c]);

  Rng rng(2);
  const auto x = random_tensor({2, 3, 16, 16}, rng);
  CHECK(same_values(m.forward(x), m.forward(x)));

  Model probe = m;
  probe.parameter("stem.weight").value.mutable_values()[0] += 0.5f;
  CHECK_FALSE(same_values(probe.forward(x), m.forward(x)));

  try {
    m.forward(Tensor<float>::zeros({1, 3, 20, 20}));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("resize") != std::string::npos);
  }
}

TEST_CASE("features feed the head") {
  const Model m = build_model(small_config());
  Rng rng(3);
  const auto x = random_tensor({2, 3, 16, 16}, rng);
  const auto f = m.features(x);
  CHECK(f.shape() == Shape{2, 8});
  const auto logits = add(matmul(f, m.parameter("head.weight").value), m.parameter("head.bias").value);
  CHECK(same_values(logits, m.forward(x)));
}

TEST_CASE("model gradients match finite differences") {
  const Model m = build_model(small_config(3, 4));
  Rng rng(4);
  const auto x = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  const int labels[] = {1, 2};
  FiniteDiffOptions options;
  options.skip_nonsmooth = true;
  for (const char* name : {"stem.bias", "stage2.block0.proj.bias", "stage3.block0.conv2.bias", "head.bias"}) {
    const auto at = m.parameter(name).value;
    const auto r = finite_diff_check(
        [&](const Tensor<float>& p) {
          Model copy = m;
          for (Parameter& q : copy.parameters()) q.value.set_requires_grad(false);
          Parameter& target = copy.parameter(name);
          target.value = p;
          return softmax_cross_entropy(copy.forward(x), labels);
        },
        at, options);
    INFO(name);
    CHECK(r.max_rel_error < 1e-2);
  }
}

TEST_CASE("replace_head") {
  const Model m = build_model(small_config(2));
  const Model same = replace_head(m, 2, 9);
  CHECK(same_body(m, same));
  const Model three = replace_head(m, 3, 9);
  CHECK(same_body(m, three));
  CHECK(three.config().n_classes == 3);
  CHECK(three.parameter("head.weight").value.dim(1) == 3);
  CHECK(three.parameter("head.weight").group == LayerGroup::Late);
  const Model other = replace_head(m, 3, 10);
  CHECK_FALSE(same_values(three.parameter("head.weight").value, other.parameter("head.weight").value));
  CHECK(same_body(three, other));
  CHECK(same_values(replace_head(m, 3, 9).parameter("head.weight").value, three.parameter("head.weight").value));
  CHECK_THROWS_AS(replace_head(m, 1, 0), std::invalid_argument);
}

TEST_CASE("set_trainable") {
  Model m = build_model(small_config());
  set_trainable(m, {}, true);
  for (const Parameter& p : m.parameters()) CHECK(p.trainable == p.is_head());
  set_trainable(m, {}, false);
  for (const Parameter& p : m.parameters()) CHECK(p.trainable);
  set_trainable(m, {LayerGroup::Early, LayerGroup::Middle}, false);
  for (const Parameter& p : m.parameters()) CHECK(p.trainable == (p.group == LayerGroup::Late));
}

TEST_CASE("checkpoint round trip") {
  const Model m = build_model(small_config(2, 5));
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(m, path);
  const Model loaded = load_checkpoint(path);
  CHECK(loaded.config() == m.config());
  REQUIRE(loaded.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(loaded.parameters()[i].name == m.parameters()[i].name);
    CHECK(loaded.parameters()[i].group == m.parameters()[i].group);
    CHECK(same_values(loaded.parameters()[i].value, m.parameters()[i].value));
  }
  Rng rng(5);
  const auto x = random_tensor({3, 3, 16, 16}, rng);
  CHECK(same_values(loaded.forward(x), m.forward(x)));

  const Model three = replace_head(loaded, 3, 1);
  CHECK(three.forward(x).shape() == Shape{3, 3});
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint header layout") {
  const auto bytes = serialize_checkpoint(build_model(small_config()));
  REQUIRE(bytes.size() > 16);
  CHECK(std::memcmp(bytes.data(), "SSTCKPT1", 8) == 0);
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  CHECK(version == kCheckpointVersion);
}

TEST_CASE("checkpoint errors are distinct") {
  const auto bytes = serialize_checkpoint(build_model(small_config()));
  auto kind_of = [](const std::vector<std::uint8_t>& b) {
    try {
      deserialize_checkpoint(b);
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    FAIL("expected a checkpoint error");
    return CheckpointError::Kind::Io;
  };

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(kind_of(bad_magic) == CheckpointError::Kind::BadMagic);

  auto bad_version = bytes;
  bad_version[8] = 2;
  CHECK(kind_of(bad_version) == CheckpointError::Kind::VersionMismatch);

  for (std::size_t cut : {std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK(kind_of({bytes.begin(), bytes.begin() + static_cast<long>(cut)}) == CheckpointError::Kind::Truncated);
  }

  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), CheckpointError);

  std::vector<Parameter> params = build_model(small_config()).parameters();
  params[0].value = Tensor<float>::zeros({1, 1, 1, 1});
  try {
    assemble_model(small_config(), params);
    FAIL("expected a shape mismatch");
  } catch (const CheckpointError& e) {
    CHECK(e.kind() == CheckpointError::Kind::ShapeMismatch);
  }
}
