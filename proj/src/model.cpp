#include "cqvpr/model.hpp"

#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "cqvpr/binio.hpp"
#include "cqvpr/errors.hpp"

namespace cqvpr {

PipelineConfig PipelineConfig::from_preset(const std::string& name) {
  PipelineConfig cfg;
  cfg.preset = name;
  if (name == "desk") {
    cfg.backbone = {56, 7, 64, 2, 4, 4, 4, 0.1};
    cfg.context.num_queries = 10;
    cfg.context.query_dim = 32;
    cfg.context.num_heads = 8;
    cfg.descriptor.up_mid_channels = 64;
    cfg.descriptor.local_dim = 128;
  } else if (name == "paper") {
    cfg.backbone = {224, 14, 1024, 24, 16, 4, 64, 0.1};
    cfg.context.num_queries = 10;
    cfg.context.query_dim = 256;
    cfg.context.num_heads = 8;
    cfg.descriptor.up_mid_channels = 256;
    cfg.descriptor.local_dim = 128;
  } else if (name == "tiny") {
    // gradcheck-sized: every tensor small enough for finite differences
    cfg.backbone = {14, 7, 8, 1, 2, 2, 2, 0.1};
    cfg.context.num_queries = 2;
    cfg.context.query_dim = 4;
    cfg.context.num_heads = 2;
    cfg.descriptor.up_mid_channels = 6;
    cfg.descriptor.local_dim = 8;
  } else {
    throw ConfigError("unknown preset '" + name +
                      "' (expected desk, paper or tiny)");
  }
  return cfg;
}

std::size_t PipelineConfig::fused_channels() const {
  return (descriptor.use_pixel ? backbone.embed_dim : 0) +
         (descriptor.use_context ? context.query_dim : 0);
}

std::size_t PipelineConfig::local_grid() const {
  return local_grid_size(backbone.grid_size());
}

void PipelineConfig::validate() const {
  backbone.validate();
  context.validate();
  descriptor.validate();
}

namespace {
using nlohmann::json;

std::string norm_to_string(HeatmapNorm n) {
  return n == HeatmapNorm::kSoftmax ? "softmax" : "l2";
}

HeatmapNorm norm_from_string(const std::string& s) {
  if (s == "softmax") return HeatmapNorm::kSoftmax;
  if (s == "l2") return HeatmapNorm::kL2;
  throw ConfigError("unknown heatmap norm '" + s + "'");
}

std::string mode_to_string(ContextFeatureMode m) {
  return m == ContextFeatureMode::kMlp ? "mlp" : "weighted";
}

ContextFeatureMode mode_from_string(const std::string& s) {
  if (s == "mlp") return ContextFeatureMode::kMlp;
  if (s == "weighted") return ContextFeatureMode::kWeightedQueries;
  throw ConfigError("unknown context feature mode '" + s + "'");
}
}  // namespace

std::string config_to_json(const PipelineConfig& config) {
  json j;
  j["preset"] = config.preset;
  j["seed"] = config.seed;
  j["image_size"] = config.backbone.image_size;
  j["patch_size"] = config.backbone.patch_size;
  j["embed_dim"] = config.backbone.embed_dim;
  j["num_blocks"] = config.backbone.num_blocks;
  j["num_heads"] = config.backbone.num_heads;
  j["mlp_ratio"] = config.backbone.mlp_ratio;
  j["adapter_dim"] = config.backbone.adapter_dim;
  j["adapter_scale_init"] = config.backbone.adapter_scale_init;
  j["num_queries"] = config.context.num_queries;
  j["query_dim"] = config.context.query_dim;
  j["context_heads"] = config.context.num_heads;
  j["context_residual"] = config.context.residual;
  j["heatmap_norm"] = norm_to_string(config.context.norm);
  j["context_feature_mode"] = mode_to_string(config.context.feature_mode);
  j["use_pixel"] = config.descriptor.use_pixel;
  j["use_context"] = config.descriptor.use_context;
  j["up_mid_channels"] = config.descriptor.up_mid_channels;
  j["local_dim"] = config.descriptor.local_dim;
  j["gem_p_init"] = config.descriptor.gem_p_init;
  return j.dump(2);
}

PipelineConfig config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config json: ") + e.what());
  }
  PipelineConfig cfg;
  cfg.preset = j.value("preset", std::string("custom"));
  cfg.seed = j.value("seed", std::uint64_t{42});
  cfg.backbone.image_size = j.value("image_size", cfg.backbone.image_size);
  cfg.backbone.patch_size = j.value("patch_size", cfg.backbone.patch_size);
  cfg.backbone.embed_dim = j.value("embed_dim", cfg.backbone.embed_dim);
  cfg.backbone.num_blocks = j.value("num_blocks", cfg.backbone.num_blocks);
  cfg.backbone.num_heads = j.value("num_heads", cfg.backbone.num_heads);
  cfg.backbone.mlp_ratio = j.value("mlp_ratio", cfg.backbone.mlp_ratio);
  cfg.backbone.adapter_dim = j.value("adapter_dim", cfg.backbone.adapter_dim);
  cfg.backbone.adapter_scale_init =
      j.value("adapter_scale_init", cfg.backbone.adapter_scale_init);
  cfg.context.num_queries = j.value("num_queries", cfg.context.num_queries);
  cfg.context.query_dim = j.value("query_dim", cfg.context.query_dim);
  cfg.context.num_heads = j.value("context_heads", cfg.context.num_heads);
  cfg.context.residual = j.value("context_residual", cfg.context.residual);
  cfg.context.norm = norm_from_string(j.value("heatmap_norm", std::string("softmax")));
  cfg.context.feature_mode =
      mode_from_string(j.value("context_feature_mode", std::string("mlp")));
  cfg.descriptor.use_pixel = j.value("use_pixel", cfg.descriptor.use_pixel);
  cfg.descriptor.use_context = j.value("use_context", cfg.descriptor.use_context);
  cfg.descriptor.up_mid_channels =
      j.value("up_mid_channels", cfg.descriptor.up_mid_channels);
  cfg.descriptor.local_dim = j.value("local_dim", cfg.descriptor.local_dim);
  cfg.descriptor.gem_p_init = j.value("gem_p_init", cfg.descriptor.gem_p_init);
  cfg.validate();
  return cfg;
}

Model::Model(const PipelineConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  Rng backbone_rng = rng.fork(1);
  Rng context_rng = rng.fork(2);
  Rng head_rng = rng.fork(3);
  backbone_ = std::make_unique<Backbone>(config_.backbone, backbone_rng);
  context_ = std::make_unique<ContextModule>(config_.context,
                                             config_.backbone.embed_dim,
                                             context_rng);
  head_ = std::make_unique<DescriptorHead>(config_.descriptor,
                                           config_.backbone.embed_dim,
                                           config_.context.query_dim, head_rng);
}

ImageFeatures Model::forward_from_pixel_features(const Tensor& pixel_features,
                                                 bool with_local) const {
  ImageFeatures out;
  out.pixel = pixel_features;
  out.reduced = context_->reduce_features(pixel_features);
  out.queries = context_->update_queries(out.reduced);
  out.heatmap = context_->compute_heatmap(out.queries, out.reduced);
  out.context =
      config_.context.feature_mode == ContextFeatureMode::kMlp
          ? context_->context_feature(out.heatmap)
          : context_->context_feature_weighted(out.heatmap, out.queries);
  out.fused = head_->fuse(out.pixel, out.context);
  out.global_desc = head_->global_descriptor(out.fused);
  if (with_local) out.local = head_->local_descriptors(out.fused);
  return out;
}

ImageFeatures Model::forward(const Image& image, bool with_local) const {
  return forward_from_pixel_features(backbone_->extract_pixel_features(image),
                                     with_local);
}

namespace {
Extraction to_extraction(const ImageFeatures& features, bool with_local,
                         std::size_t local_dim) {
  Extraction e;
  e.global_descriptor = to_f32(features.global_desc.value());
  if (with_local) {
    e.local_grid.grid_size = features.local.shape()[0];
    e.local_grid.dim = local_dim;
    e.local_grid.data = to_f32(features.local.value());
  }
  return e;
}
}  // namespace

Extraction Model::extract(const Image& image, bool with_local) const {
  NoGradGuard guard;
  return to_extraction(forward(image, with_local), with_local,
                       config_.descriptor.local_dim);
}

Extraction Model::extract_from_pixel_features(const Tensor& pixel_features,
                                              bool with_local) const {
  NoGradGuard guard;
  return to_extraction(forward_from_pixel_features(pixel_features, with_local),
                       with_local, config_.descriptor.local_dim);
}

NamedParams Model::named_params() const {
  NamedParams out;
  backbone_->collect_named_params("backbone.", out);
  context_->collect_named_params("context.", out);
  head_->collect_named_params("head.", out);
  return out;
}

std::vector<Tensor> Model::trainable_params(bool include_adapters) const {
  std::vector<Tensor> out;
  for (const auto& [name, tensor] : named_params()) {
    if (!tensor.requires_grad()) continue;
    if (!include_adapters && name.find(".adapter.") != std::string::npos) {
      continue;
    }
    out.push_back(tensor);
  }
  return out;
}

void Model::save_checkpoint(const std::filesystem::path& path,
                            const AdamState* adam) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write("CQVK", 4);
  binio::write_u32(f, 1);
  const std::string cfg = config_to_json(config_);
  binio::write_u32(f, static_cast<std::uint32_t>(cfg.size()));
  f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  const NamedParams params = named_params();
  binio::write_u32(f, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    binio::write_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::write_u32(f, static_cast<std::uint32_t>(tensor.ndim()));
    for (const std::size_t d : tensor.shape())
      binio::write_u32(f, static_cast<std::uint32_t>(d));
    binio::write_f64_array(f, tensor.value());
  }

  f.put(adam ? 1 : 0);
  if (adam) {
    binio::write_u64(f, adam->step_count);
    binio::write_f64(f, adam->options.lr);
    binio::write_f64(f, adam->options.beta1);
    binio::write_f64(f, adam->options.beta2);
    binio::write_f64(f, adam->options.eps);
    binio::write_u32(f, static_cast<std::uint32_t>(adam->first_moment.size()));
    for (std::size_t i = 0; i < adam->first_moment.size(); ++i) {
      binio::write_u32(f, static_cast<std::uint32_t>(adam->first_moment[i].size()));
      binio::write_f64_array(f, adam->first_moment[i]);
      binio::write_f64_array(f, adam->second_moment[i]);
    }
  }
  if (!f) throw IoError("short write to " + path.string());
}

Model Model::load_checkpoint(const std::filesystem::path& path,
                             AdamState* adam) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  binio::expect_magic(f, "CQVK", path.string());
  const std::uint32_t version = binio::read_u32(f, "checkpoint version");
  if (version != 1) {
    throw FormatError(path.string() + ": unsupported checkpoint version " +
                      std::to_string(version));
  }
  const std::uint32_t cfg_len = binio::read_u32(f, "config length");
  std::string cfg_text(cfg_len, '\0');
  f.read(cfg_text.data(), cfg_len);
  if (f.gcount() != static_cast<std::streamsize>(cfg_len)) {
    throw FormatError(path.string() + ": truncated config");
  }

  Model model(config_from_json(cfg_text));
  NamedParams params = model.named_params();
  std::unordered_map<std::string, Tensor*> by_name;
  for (auto& [name, tensor] : params) by_name[name] = &tensor;

  const std::uint32_t count = binio::read_u32(f, "param count");
  if (count != params.size()) {
    throw FormatError(path.string() + ": checkpoint has " +
                      std::to_string(count) + " params, model expects " +
                      std::to_string(params.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = binio::read_u32(f, "param name length");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (f.gcount() != static_cast<std::streamsize>(name_len)) {
      throw FormatError(path.string() + ": truncated param name");
    }
    const std::uint32_t ndim = binio::read_u32(f, "param rank");
    Shape shape(ndim);
    std::size_t total = 1;
    for (auto& d : shape) {
      d = binio::read_u32(f, "param dim");
      total *= d;
    }
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError(path.string() + ": unknown parameter '" + name + "'");
    }
    Tensor& target = *it->second;
    if (target.shape() != shape) {
      throw FormatError(path.string() + ": parameter '" + name + "' has shape " +
                        shape_str(shape) + ", model expects " +
                        shape_str(target.shape()));
    }
    target.mutable_value() = binio::read_f64_array(f, total, name);
  }

  const int has_adam = f.get();
  if (has_adam == 1) {
    AdamState state;
    state.step_count = binio::read_u64(f, "adam step");
    state.options.lr = binio::read_f64(f, "adam lr");
    state.options.beta1 = binio::read_f64(f, "adam beta1");
    state.options.beta2 = binio::read_f64(f, "adam beta2");
    state.options.eps = binio::read_f64(f, "adam eps");
    const std::uint32_t n = binio::read_u32(f, "adam param count");
    state.first_moment.resize(n);
    state.second_moment.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::uint32_t len = binio::read_u32(f, "adam moment length");
      state.first_moment[i] = binio::read_f64_array(f, len, "adam m");
      state.second_moment[i] = binio::read_f64_array(f, len, "adam v");
    }
    if (adam) *adam = std::move(state);
  } else if (has_adam != 0) {
    throw FormatError(path.string() + ": bad optimizer-state flag");
  }
  return model;
}

}  // namespace cqvpr
