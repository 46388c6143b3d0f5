#include "cqvpr/backbone.hpp"

#include <fstream>

#include "cqvpr/binio.hpp"
#include "cqvpr/errors.hpp"

namespace cqvpr {

void BackboneConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (num_blocks == 0) throw ConfigError("num_blocks must be >= 1");
  if (adapter_dim == 0) throw ConfigError("adapter_dim must be >= 1");
}

namespace {
constexpr double kInitStd = 0.02;

Tensor frozen_randn(const Shape& shape, Rng& rng, double stddev = kInitStd) {
  return Tensor::randn(shape, rng, stddev, /*requires_grad=*/false);
}
}  // namespace

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.embed_dim;
  const std::size_t patch_dim = 3 * config_.patch_size * config_.patch_size;
  const std::size_t hidden = d * config_.mlp_ratio;

  params_.patch_w = frozen_randn({patch_dim, d}, rng);
  params_.patch_b = Tensor::zeros({d});
  params_.class_token = frozen_randn({1, d}, rng);
  params_.pos_embed = frozen_randn({config_.tokens(), d}, rng);

  params_.blocks.resize(config_.num_blocks);
  for (auto& block : params_.blocks) {
    block.ln1_gain = Tensor::full({d}, 1.0);
    block.ln1_bias = Tensor::zeros({d});
    block.attention.wq = frozen_randn({d, d}, rng);
    block.attention.bq = Tensor::zeros({d});
    block.attention.wk = frozen_randn({d, d}, rng);
    block.attention.bk = Tensor::zeros({d});
    block.attention.wv = frozen_randn({d, d}, rng);
    block.attention.bv = Tensor::zeros({d});
    block.attention.wo = frozen_randn({d, d}, rng);
    block.attention.bo = Tensor::zeros({d});
    block.ln2_gain = Tensor::full({d}, 1.0);
    block.ln2_bias = Tensor::zeros({d});
    block.mlp_w1 = frozen_randn({d, hidden}, rng);
    block.mlp_b1 = Tensor::zeros({hidden});
    block.mlp_w2 = frozen_randn({hidden, d}, rng);
    block.mlp_b2 = Tensor::zeros({d});

    // adapter: trainable, up-projection zero so the branch starts silent
    block.adapter.down_w =
        Tensor::randn({d, config_.adapter_dim}, rng, kInitStd, true);
    block.adapter.down_b = Tensor::zeros({config_.adapter_dim}, true);
    block.adapter.up_w = Tensor::zeros({config_.adapter_dim, d}, true);
    block.adapter.up_b = Tensor::zeros({d}, true);
    block.adapter.scale = Tensor::scalar(config_.adapter_scale_init, true);
  }
}

Tensor Backbone::patchify(const Image& image) const {
  if (image.height != config_.image_size || image.width != config_.image_size) {
    throw ConfigError("patchify: image " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) + " does not match config " +
                      std::to_string(config_.image_size));
  }
  const std::size_t g = config_.grid_size();
  const std::size_t p = config_.patch_size;
  const std::size_t patch_dim = 3 * p * p;
  const std::size_t n = config_.num_patches();

  // patches flattened row-major (py, px, channel)
  std::vector<double> flat(n * patch_dim);
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      double* dst = flat.data() + (gy * g + gx) * patch_dim;
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t c = 0; c < 3; ++c)
            *dst++ = image.at(gy * p + py, gx * p + px, c);
    }
  }
  const Tensor patches = Tensor::from_data({n, patch_dim}, std::move(flat));
  const Tensor projected =
      ops::add_bias(ops::matmul(patches, params_.patch_w), params_.patch_b);
  const Tensor tokens = ops::concat_rows({params_.class_token, projected});
  return ops::add(tokens, params_.pos_embed);
}

namespace {
Tensor adapt_mlp(const Tensor& x, const BlockParams& block, bool with_adapter) {
  const Tensor hidden =
      ops::gelu(ops::add_bias(ops::matmul(x, block.mlp_w1), block.mlp_b1));
  const Tensor base =
      ops::add_bias(ops::matmul(hidden, block.mlp_w2), block.mlp_b2);
  if (!with_adapter) return base;
  const Tensor bottleneck = ops::relu(ops::add_bias(
      ops::matmul(x, block.adapter.down_w), block.adapter.down_b));
  const Tensor up = ops::add_bias(ops::matmul(bottleneck, block.adapter.up_w),
                                  block.adapter.up_b);
  return ops::add(base, ops::scale_by(up, block.adapter.scale));
}

Tensor block_step(const Tensor& tokens, const BlockParams& block,
                  std::size_t num_heads, bool with_adapter) {
  const Tensor normed1 =
      ops::layer_norm(tokens, block.ln1_gain, block.ln1_bias);
  const Tensor attended = ops::add(
      ops::multi_head_attention(normed1, normed1, normed1, block.attention,
                                num_heads),
      tokens);
  const Tensor normed2 =
      ops::layer_norm(attended, block.ln2_gain, block.ln2_bias);
  return ops::add(adapt_mlp(normed2, block, with_adapter), attended);
}
}  // namespace

Tensor Backbone::block_forward(const Tensor& tokens,
                               std::size_t block_index) const {
  return block_step(tokens, params_.blocks.at(block_index), config_.num_heads,
                    true);
}

Tensor Backbone::run_blocks(const Tensor& tokens, bool with_adapters) const {
  Tensor x = tokens;
  for (const auto& block : params_.blocks) {
    x = block_step(x, block, config_.num_heads, with_adapters);
  }
  return x;
}

Tensor Backbone::tokens_to_grid(const Tensor& tokens) const {
  const std::size_t g = config_.grid_size();
  const Tensor patch_tokens =
      ops::slice_rows(tokens, 1, config_.tokens());  // drop class token
  return ops::reshape(patch_tokens, {g, g, config_.embed_dim});
}

Tensor Backbone::extract_pixel_features(const Image& image) const {
  return tokens_to_grid(run_blocks(patchify(image), true));
}

Tensor Backbone::extract_pixel_features_base(const Image& image) const {
  return tokens_to_grid(run_blocks(patchify(image), false));
}

void Backbone::collect_named_params(const std::string& prefix,
                                    NamedParams& out) const {
  out.emplace_back(prefix + "patch_w", params_.patch_w);
  out.emplace_back(prefix + "patch_b", params_.patch_b);
  out.emplace_back(prefix + "class_token", params_.class_token);
  out.emplace_back(prefix + "pos_embed", params_.pos_embed);
  for (std::size_t i = 0; i < params_.blocks.size(); ++i) {
    const auto& b = params_.blocks[i];
    const std::string bp = prefix + "block" + std::to_string(i) + ".";
    out.emplace_back(bp + "ln1_gain", b.ln1_gain);
    out.emplace_back(bp + "ln1_bias", b.ln1_bias);
    out.emplace_back(bp + "attn.wq", b.attention.wq);
    out.emplace_back(bp + "attn.bq", b.attention.bq);
    out.emplace_back(bp + "attn.wk", b.attention.wk);
    out.emplace_back(bp + "attn.bk", b.attention.bk);
    out.emplace_back(bp + "attn.wv", b.attention.wv);
    out.emplace_back(bp + "attn.bv", b.attention.bv);
    out.emplace_back(bp + "attn.wo", b.attention.wo);
    out.emplace_back(bp + "attn.bo", b.attention.bo);
    out.emplace_back(bp + "ln2_gain", b.ln2_gain);
    out.emplace_back(bp + "ln2_bias", b.ln2_bias);
    out.emplace_back(bp + "mlp_w1", b.mlp_w1);
    out.emplace_back(bp + "mlp_b1", b.mlp_b1);
    out.emplace_back(bp + "mlp_w2", b.mlp_w2);
    out.emplace_back(bp + "mlp_b2", b.mlp_b2);
    out.emplace_back(bp + "adapter.down_w", b.adapter.down_w);
    out.emplace_back(bp + "adapter.down_b", b.adapter.down_b);
    out.emplace_back(bp + "adapter.up_w", b.adapter.up_w);
    out.emplace_back(bp + "adapter.up_b", b.adapter.up_b);
    out.emplace_back(bp + "adapter.scale", b.adapter.scale);
  }
}

void Backbone::zero_adapters() {
  for (auto& block : params_.blocks) {
    auto zero = [](Tensor& t) {
      std::fill(t.mutable_value().begin(), t.mutable_value().end(), 0.0);
    };
    zero(block.adapter.down_w);
    zero(block.adapter.down_b);
    zero(block.adapter.up_w);
    zero(block.adapter.up_b);
    zero(block.adapter.scale);
  }
}

void save_features_cqvf(const std::filesystem::path& path, const Tensor& grid) {
  if (grid.ndim() != 3 || grid.shape()[0] != grid.shape()[1]) {
    throw ShapeError("save_features_cqvf: expected G x G x D grid, got " +
                     shape_str(grid.shape()));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write("CQVF", 4);
  binio::write_u32(f, 1);
  binio::write_u32(f, static_cast<std::uint32_t>(grid.shape()[0]));
  binio::write_u32(f, static_cast<std::uint32_t>(grid.shape()[1]));
  binio::write_u32(f, static_cast<std::uint32_t>(grid.shape()[2]));
  std::vector<float> payload(grid.size());
  const auto& v = grid.value();
  for (std::size_t i = 0; i < v.size(); ++i) payload[i] = static_cast<float>(v[i]);
  binio::write_f32_array(f, payload);
  if (!f) throw IoError("short write to " + path.string());
}

Tensor load_features_cqvf(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  binio::expect_magic(f, "CQVF", path.string());
  const std::uint32_t version = binio::read_u32(f, path.string() + " version");
  if (version != 1) {
    throw FormatError(path.string() + ": unsupported CQVF version " +
                      std::to_string(version));
  }
  const std::uint32_t g0 = binio::read_u32(f, path.string() + " grid rows");
  const std::uint32_t g1 = binio::read_u32(f, path.string() + " grid cols");
  const std::uint32_t d = binio::read_u32(f, path.string() + " channels");
  if (g0 != g1 || g0 == 0 || d == 0) {
    throw FormatError(path.string() + ": invalid dims " + std::to_string(g0) +
                      "x" + std::to_string(g1) + "x" + std::to_string(d));
  }
  const std::size_t n = static_cast<std::size_t>(g0) * g1 * d;
  const std::vector<float> payload =
      binio::read_f32_array(f, n, path.string() + " payload");
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = payload[i];
  return Tensor::from_data({g0, g1, d}, std::move(values));
}

Tensor load_features_cqvf(const std::filesystem::path& path,
                          std::size_t expected_grid, std::size_t expected_dim) {
  Tensor grid = load_features_cqvf(path);
  if (grid.shape()[0] != expected_grid || grid.shape()[2] != expected_dim) {
    throw FormatError(path.string() + ": dims " + shape_str(grid.shape()) +
                      " do not match configured " +
                      std::to_string(expected_grid) + "x" +
                      std::to_string(expected_grid) + "x" +
                      std::to_string(expected_dim));
  }
  return grid;
}

}  // namespace cqvpr
