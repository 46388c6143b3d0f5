#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cqvpr/backbone.hpp"
#include "cqvpr/errors.hpp"
#include "cqvpr/gradcheck.hpp"
#include "cqvpr/ops.hpp"

using namespace cqvpr;
namespace fs = std::filesystem;

namespace {
BackboneConfig desk_config() {
  BackboneConfig cfg;
  cfg.image_size = 56;
  cfg.patch_size = 7;
  cfg.embed_dim = 64;
  cfg.num_blocks = 2;
  cfg.num_heads = 4;
  cfg.adapter_dim = 4;
  return cfg;
}

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.image_size = 14;
  cfg.patch_size = 7;
  cfg.embed_dim = 8;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  cfg.mlp_ratio = 2;
  cfg.adapter_dim = 2;
  return cfg;
}

Image noise_image(std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  Image img = make_image(size, size);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}
}  // namespace

TEST_CASE("config validation") {
  BackboneConfig cfg = desk_config();
  cfg.patch_size = 5;  // 56 % 5 != 0
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = desk_config();
  cfg.num_heads = 5;  // 64 % 5 != 0
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("token counts for the two grid readings") {
  BackboneConfig paper;
  paper.image_size = 224;
  paper.patch_size = 14;
  paper.embed_dim = 1024;
  paper.num_heads = 16;
  CHECK(paper.grid_size() == 16);
  CHECK(paper.num_patches() == 256);
  CHECK(paper.tokens() == 257);

  CHECK(desk_config().num_patches() == 64);
  CHECK(desk_config().tokens() == 65);
}

TEST_CASE("patchify of a zero image is class token plus positional codes") {
  Rng rng(4);
  Backbone bb(desk_config(), rng);
  const Image zero = make_image(56, 56, 0.0f);
  const Tensor tokens = bb.patchify(zero);
  REQUIRE(tokens.shape() == Shape{65, 64});

  const auto& pos = bb.params().pos_embed.value();
  const auto& cls = bb.params().class_token.value();
  for (std::size_t j = 0; j < 64; ++j) {
    CHECK(tokens.value()[j] == doctest::Approx(cls[j] + pos[j]).epsilon(1e-12));
  }
  // patch rows: zero projection plus zero bias leaves only the positions
  for (std::size_t r = 1; r < 65; ++r) {
    for (std::size_t j = 0; j < 64; ++j) {
      CHECK(tokens.value()[r * 64 + j] ==
            doctest::Approx(pos[r * 64 + j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("patchify rejects mismatched image sizes") {
  Rng rng(4);
  Backbone bb(desk_config(), rng);
  CHECK_THROWS_AS(bb.patchify(make_image(28, 28)), ConfigError);
}

TEST_CASE("extract_pixel_features shape and determinism") {
  Rng rng(4);
  Backbone bb(desk_config(), rng);
  const Image img = noise_image(56, 99);
  NoGradGuard guard;
  const Tensor grid = bb.extract_pixel_features(img);
  REQUIRE(grid.shape() == Shape{8, 8, 64});

  const Tensor again = bb.extract_pixel_features(img);
  CHECK(grid.value() == again.value());
}

TEST_CASE("zeroed adapters reproduce the frozen base exactly") {
  Rng rng(4);
  Backbone bb(desk_config(), rng);
  // fresh adapters already have zero up-projection; also zero the rest
  bb.zero_adapters();
  const Image img = noise_image(56, 123);
  NoGradGuard guard;
  const Tensor adapted = bb.extract_pixel_features(img);
  const Tensor base = bb.extract_pixel_features_base(img);
  double max_abs = 0.0;
  for (std::size_t i = 0; i < adapted.size(); ++i) {
    max_abs = std::max(max_abs, std::abs(adapted.value()[i] - base.value()[i]));
  }
  CHECK(max_abs <= 1e-9);
}

TEST_CASE("frozen weights receive zero gradient after backward") {
  Rng rng(4);
  Backbone bb(tiny_config(), rng);
  const Image img = noise_image(14, 7);
  const Tensor grid = bb.extract_pixel_features(img);
  ops::sum(grid).backward();

  const auto& block = bb.params().blocks[0];
  CHECK(bb.params().patch_w.grad().empty());
  CHECK(block.attention.wq.grad().empty());
  CHECK(block.mlp_w1.grad().empty());
  // trainable adapters did receive gradients
  CHECK_FALSE(block.adapter.down_w.grad().empty());
  CHECK_FALSE(block.adapter.up_w.grad().empty());
}

TEST_CASE("adapter gradients pass a finite-difference check") {
  Rng rng(4);
  Backbone bb(tiny_config(), rng);
  // nonzero up-projection so gradients flow through the whole branch
  Rng wiggle(11);
  for (auto& v : bb.params().blocks[0].adapter.up_w.mutable_value()) {
    v = wiggle.normal(0.0, 0.3);
  }
  const Image img = noise_image(14, 31);
  Tensor weights = Tensor::randn({2, 2, 8}, wiggle);

  const auto& adapter = bb.params().blocks[0].adapter;
  const double err = grad_check_max_error(
      [&](const std::vector<Tensor>&) {
        return ops::sum(ops::mul(bb.extract_pixel_features(img), weights));
      },
      {adapter.down_w, adapter.down_b, adapter.up_w, adapter.up_b,
       adapter.scale},
      1e-4);
  CHECK(err <= 1e-4);
}

TEST_CASE("CQVF round-trip is bit-identical") {
  Rng rng(8);
  const Tensor grid = Tensor::randn({4, 4, 6}, rng);
  const fs::path path = fs::temp_directory_path() / "cqvpr_test_grid.cqvf";
  save_features_cqvf(path, grid);
  const Tensor loaded = load_features_cqvf(path);
  REQUIRE(loaded.shape() == grid.shape());
  // payload is f32; compare at f32 resolution bit-for-bit
  for (std::size_t i = 0; i < grid.size(); ++i) {
    CHECK(static_cast<float>(loaded.value()[i]) ==
          static_cast<float>(grid.value()[i]));
  }
  // second save of the loaded grid must be byte-identical
  const fs::path path2 = fs::temp_directory_path() / "cqvpr_test_grid2.cqvf";
  save_features_cqvf(path2, loaded);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("CQVF header dims dictate the grid shape") {
  const fs::path path = fs::temp_directory_path() / "cqvpr_test_dims.cqvf";
  Rng rng(15);
  save_features_cqvf(path, Tensor::randn({5, 5, 3}, rng));
  const Tensor loaded = load_features_cqvf(path);
  CHECK(loaded.shape() == Shape{5, 5, 3});
  CHECK_THROWS_AS(load_features_cqvf(path, 8, 3), FormatError);
  CHECK_THROWS_AS(load_features_cqvf(path, 5, 64), FormatError);
  fs::remove(path);
}

TEST_CASE("CQVF corrupt magic names offset 0") {
  const fs::path path = fs::temp_directory_path() / "cqvpr_test_bad.cqvf";
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE then some garbage";
  }
  try {
    load_features_cqvf(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }
  fs::remove(path);
}

TEST_CASE("CQVF truncated payload is a format error") {
  const fs::path path = fs::temp_directory_path() / "cqvpr_test_trunc.cqvf";
  {
    Rng rng(1);
    save_features_cqvf(path, Tensor::randn({4, 4, 4}, rng));
    fs::resize_file(path, fs::file_size(path) - 32);
  }
  CHECK_THROWS_AS(load_features_cqvf(path), FormatError);
  fs::remove(path);
}
