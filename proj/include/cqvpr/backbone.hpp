#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cqvpr/image.hpp"
#include "cqvpr/ops.hpp"
#include "cqvpr/rng.hpp"
#include "cqvpr/tensor.hpp"

namespace cqvpr {

struct BackboneConfig {
  std::size_t image_size = 56;
  std::size_t patch_size = 7;
  std::size_t embed_dim = 64;  // D_C
  std::size_t num_blocks = 2;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t adapter_dim = 4;
  double adapter_scale_init = 0.1;

  std::size_t grid_size() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_size() * grid_size(); }
  std::size_t tokens() const { return num_patches() + 1; }
  void validate() const;
};

// Parallel bottleneck branch added to the frozen MLP; up-projection starts
// at zero so a fresh model is function-identical to the frozen base.
struct AdapterParams {
  Tensor down_w, down_b;
  Tensor up_w, up_b;
  Tensor scale;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  ops::AttentionParams attention;
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  AdapterParams adapter;
};

struct BackboneParams {
  Tensor patch_w, patch_b;  // [3p^2 x D], [D]
  Tensor class_token;       // [1 x D]
  Tensor pos_embed;         // [(N+1) x D]
  std::vector<BlockParams> blocks;
};

// Frozen random ViT base plus trainable adapters. Pretrained semantics come
// in through CQVF feature files instead of a checkpoint loader.
class Backbone {
 public:
  Backbone(const BackboneConfig& config, Rng& rng);

  // image -> (N+1) x D token matrix: flattened projected patches, class
  // token at row 0, learned positional encodings added.
  Tensor patchify(const Image& image) const;

  Tensor block_forward(const Tensor& tokens, std::size_t block_index) const;

  // Full stack; drops the class token and reshapes to G x G x D.
  Tensor extract_pixel_features(const Image& image) const;

  // Frozen path only (adapter branches skipped); used by identity checks.
  Tensor extract_pixel_features_base(const Image& image) const;

  const BackboneConfig& config() const { return config_; }
  BackboneParams& params() { return params_; }
  const BackboneParams& params() const { return params_; }

  void collect_named_params(const std::string& prefix, NamedParams& out) const;
  void zero_adapters();

 private:
  Tensor run_blocks(const Tensor& tokens, bool with_adapters) const;
  Tensor tokens_to_grid(const Tensor& tokens) const;

  BackboneConfig config_;
  BackboneParams params_;
};

// CQVF pixel-feature file: magic "CQVF", version u32=1, G u32, G u32,
// D_C u32, then G*G*D_C little-endian f32. All integers little-endian.
void save_features_cqvf(const std::filesystem::path& path, const Tensor& grid);
Tensor load_features_cqvf(const std::filesystem::path& path);
// Dim-checked variant: dims from the file header must match the config.
Tensor load_features_cqvf(const std::filesystem::path& path,
                          std::size_t expected_grid, std::size_t expected_dim);

}  // namespace cqvpr
