#include "cqvpr/descriptors.hpp"

#include <fstream>
#include <unordered_set>

#include "cqvpr/binio.hpp"
#include "cqvpr/errors.hpp"
#include "cqvpr/ops.hpp"

namespace cqvpr {

void DescriptorConfig::validate() const {
  if (!use_pixel && !use_context) {
    throw ConfigError("descriptor head needs at least one of pixel/context");
  }
  if (up_mid_channels == 0 || local_dim == 0) {
    throw ConfigError("up_mid_channels and local_dim must be >= 1");
  }
}

std::size_t local_grid_size(std::size_t grid_size) {
  const std::size_t once = ops::transposed_conv2d_output_size(grid_size, 3, 2, 1);
  return ops::transposed_conv2d_output_size(once, 3, 2, 1);
}

namespace {
constexpr double kInitStd = 0.02;
}

DescriptorHead::DescriptorHead(const DescriptorConfig& config,
                               std::size_t pixel_dim, std::size_t context_dim,
                               Rng& rng)
    : config_(config) {
  config_.validate();
  fused_channels_ = (config_.use_pixel ? pixel_dim : 0) +
                    (config_.use_context ? context_dim : 0);
  params_.gem_p = Tensor::scalar(config_.gem_p_init, /*requires_grad=*/true);
  params_.up1_k = Tensor::randn({3, 3, fused_channels_, config_.up_mid_channels},
                                rng, kInitStd, true);
  params_.up1_b = Tensor::zeros({config_.up_mid_channels}, true);
  params_.up2_k = Tensor::randn({3, 3, config_.up_mid_channels, config_.local_dim},
                                rng, kInitStd, true);
  params_.up2_b = Tensor::zeros({config_.local_dim}, true);
}

Tensor DescriptorHead::fuse(const Tensor& pixel_features,
                            const Tensor& context_features) const {
  if (config_.use_pixel && config_.use_context) {
    if (pixel_features.shape()[0] != context_features.shape()[0] ||
        pixel_features.shape()[1] != context_features.shape()[1]) {
      throw ShapeError("fuse: spatial grids differ, " +
                       shape_str(pixel_features.shape()) + " vs " +
                       shape_str(context_features.shape()));
    }
    return ops::concat_last({pixel_features, context_features});
  }
  return config_.use_pixel ? pixel_features : context_features;
}

Tensor DescriptorHead::global_descriptor(const Tensor& fused) const {
  if (fused.ndim() != 3 || fused.shape()[2] != fused_channels_) {
    throw ShapeError("global_descriptor: fused grid " +
                     shape_str(fused.shape()) + " does not end in " +
                     std::to_string(fused_channels_) + " channels");
  }
  const std::size_t n = fused.shape()[0] * fused.shape()[1];
  const Tensor flat = ops::reshape(fused, {n, fused_channels_});
  const Tensor pooled = ops::gem_pool(flat, params_.gem_p);
  return ops::l2_normalize(pooled, 0);
}

Tensor DescriptorHead::local_descriptors(const Tensor& fused) const {
  if (fused.ndim() != 3 || fused.shape()[2] != fused_channels_) {
    throw ShapeError("local_descriptors: fused grid " +
                     shape_str(fused.shape()) + " does not end in " +
                     std::to_string(fused_channels_) + " channels");
  }
  const Tensor up1 = ops::transposed_conv2d(fused, params_.up1_k, params_.up1_b,
                                            /*stride=*/2, /*padding=*/1);
  const Tensor up2 = ops::transposed_conv2d(up1, params_.up2_k, params_.up2_b,
                                            /*stride=*/2, /*padding=*/1);
  return ops::l2_normalize(up2, 2);
}

void DescriptorHead::collect_named_params(const std::string& prefix,
                                          NamedParams& out) const {
  out.emplace_back(prefix + "gem_p", params_.gem_p);
  out.emplace_back(prefix + "up1_k", params_.up1_k);
  out.emplace_back(prefix + "up1_b", params_.up1_b);
  out.emplace_back(prefix + "up2_k", params_.up2_k);
  out.emplace_back(prefix + "up2_b", params_.up2_b);
}

void save_global_store(const std::filesystem::path& path,
                       const GlobalStore& store) {
  if (store.data.size() != store.count() * store.dim) {
    throw ShapeError("save_global_store: data size " +
                     std::to_string(store.data.size()) + " != count*dim");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write("CQVD", 4);
  binio::write_u32(f, 1);
  binio::write_u32(f, static_cast<std::uint32_t>(store.count()));
  binio::write_u32(f, static_cast<std::uint32_t>(store.dim));
  binio::write_f32_array(f, store.data);
  for (const auto& id : store.ids) {
    if (id.find('\n') != std::string::npos) {
      throw DataError("image id contains newline: " + id);
    }
    f << id << '\n';
  }
  if (!f) throw IoError("short write to " + path.string());
}

GlobalStore load_global_store(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  binio::expect_magic(f, "CQVD", path.string());
  const std::uint32_t version = binio::read_u32(f, path.string() + " version");
  if (version != 1) {
    throw FormatError(path.string() + ": unsupported CQVD version " +
                      std::to_string(version));
  }
  const std::uint32_t count = binio::read_u32(f, path.string() + " count");
  const std::uint32_t dim = binio::read_u32(f, path.string() + " dim");
  if (count > 0 && dim == 0) {
    throw FormatError(path.string() + ": zero dim with nonzero count");
  }
  GlobalStore store;
  store.dim = dim;
  store.data = binio::read_f32_array(
      f, static_cast<std::size_t>(count) * dim, path.string() + " payload");
  store.ids.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string id;
    if (!std::getline(f, id)) {
      throw FormatError(path.string() + ": missing image id " +
                        std::to_string(i));
    }
    store.ids.push_back(std::move(id));
  }
  return store;
}

void save_local_grid(const std::filesystem::path& path, const LocalGrid& grid) {
  if (grid.data.size() != grid.count() * grid.dim) {
    throw ShapeError("save_local_grid: data size " +
                     std::to_string(grid.data.size()) + " != U*U*dim");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write("CQVL", 4);
  binio::write_u32(f, static_cast<std::uint32_t>(grid.grid_size));
  binio::write_u32(f, static_cast<std::uint32_t>(grid.grid_size));
  binio::write_u32(f, static_cast<std::uint32_t>(grid.dim));
  binio::write_f32_array(f, grid.data);
  if (!f) throw IoError("short write to " + path.string());
}

LocalGrid load_local_grid(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  binio::expect_magic(f, "CQVL", path.string());
  const std::uint32_t u0 = binio::read_u32(f, path.string() + " rows");
  const std::uint32_t u1 = binio::read_u32(f, path.string() + " cols");
  const std::uint32_t dim = binio::read_u32(f, path.string() + " dim");
  if (u0 != u1 || u0 == 0 || dim == 0) {
    throw FormatError(path.string() + ": invalid dims " + std::to_string(u0) +
                      "x" + std::to_string(u1) + "x" + std::to_string(dim));
  }
  LocalGrid grid;
  grid.grid_size = u0;
  grid.dim = dim;
  grid.data = binio::read_f32_array(
      f, static_cast<std::size_t>(u0) * u1 * dim, path.string() + " payload");
  return grid;
}

std::vector<float> to_f32(const std::vector<double>& values) {
  std::vector<float> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    out[i] = static_cast<float>(values[i]);
  return out;
}

}  // namespace cqvpr
