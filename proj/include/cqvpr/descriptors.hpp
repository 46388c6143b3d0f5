#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cqvpr/rng.hpp"
#include "cqvpr/tensor.hpp"

namespace cqvpr {

struct DescriptorConfig {
  bool use_pixel = true;
  bool use_context = true;
  std::size_t up_mid_channels = 64;  // 256 at paper scale
  std::size_t local_dim = 128;
  double gem_p_init = 3.0;

  void validate() const;
};

struct DescriptorParams {
  Tensor gem_p;           // trainable scalar, init 3.0
  Tensor up1_k, up1_b;    // 3x3 x fused x mid, stride 2, pad 1
  Tensor up2_k, up2_b;    // 3x3 x mid x local_dim
};

// local grid side length after the two stride-2 up-convolutions
std::size_t local_grid_size(std::size_t grid_size);

// Fuses F_V and F_T and produces the global vector and the local grid.
class DescriptorHead {
 public:
  DescriptorHead(const DescriptorConfig& config, std::size_t pixel_dim,
                 std::size_t context_dim, Rng& rng);

  // Channel concatenation, pixel features first. Honors the use_pixel /
  // use_context flags (ablation variants pass a single input).
  Tensor fuse(const Tensor& pixel_features, const Tensor& context_features) const;

  // G = L2(GeM(fused)) over the N spatial positions.
  Tensor global_descriptor(const Tensor& fused) const;

  // L = per-position L2 of the up-convolved fused grid; U x U x local_dim.
  Tensor local_descriptors(const Tensor& fused) const;

  std::size_t fused_channels() const { return fused_channels_; }
  const DescriptorConfig& config() const { return config_; }
  DescriptorParams& params() { return params_; }
  const DescriptorParams& params() const { return params_; }

  void collect_named_params(const std::string& prefix, NamedParams& out) const;

 private:
  DescriptorConfig config_;
  std::size_t fused_channels_;
  DescriptorParams params_;
};

// f32 storage types shared by the index and the matcher.
struct GlobalStore {
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<float> data;  // count x dim, row-major

  std::size_t count() const { return ids.size(); }
  const float* row(std::size_t i) const { return data.data() + i * dim; }
};

struct LocalGrid {
  std::size_t grid_size = 0;  // U
  std::size_t dim = 0;
  std::vector<float> data;  // U*U x dim, row-major

  std::size_t count() const { return grid_size * grid_size; }
};

// CQVD global-descriptor store: magic "CQVD", version u32, count u32,
// dim u32, count*dim f32, then count newline-terminated UTF-8 image ids.
void save_global_store(const std::filesystem::path& path,
                       const GlobalStore& store);
GlobalStore load_global_store(const std::filesystem::path& path);

// CQVL per-image local store: magic "CQVL", U u32, U u32, dim u32, payload f32.
void save_local_grid(const std::filesystem::path& path, const LocalGrid& grid);
LocalGrid load_local_grid(const std::filesystem::path& path);

std::vector<float> to_f32(const std::vector<double>& values);

}  // namespace cqvpr
