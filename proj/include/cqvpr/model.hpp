#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "cqvpr/adam.hpp"
#include "cqvpr/backbone.hpp"
#include "cqvpr/context.hpp"
#include "cqvpr/descriptors.hpp"

namespace cqvpr {

struct PipelineConfig {
  BackboneConfig backbone;
  ContextConfig context;
  DescriptorConfig descriptor;
  std::uint64_t seed = 42;
  std::string preset = "desk";

  // "desk" (56px/G=8/D_C=64), "paper" (224px/G=16/D_C=1024) or "tiny"
  // (gradcheck-sized).
  static PipelineConfig from_preset(const std::string& name);

  std::size_t fused_channels() const;
  std::size_t local_grid() const;  // U
  void validate() const;
};

std::string config_to_json(const PipelineConfig& config);
PipelineConfig config_from_json(const std::string& json_text);

// Everything one image produces on the way to its descriptors.
struct ImageFeatures {
  Tensor pixel;     // F_V: G x G x D_C
  Tensor reduced;   // G x G x D_T
  Tensor queries;   // updated T: K x D_T
  Tensor heatmap;   // K x G x G
  Tensor context;   // F_T (or F_T*): G x G x D_T
  Tensor fused;     // G x G x fused_channels
  Tensor global_desc;  // unit vector
  Tensor local;     // U x U x local_dim; undefined unless requested
};

// f32 products for storage and matching.
struct Extraction {
  std::vector<float> global_descriptor;
  LocalGrid local_grid;  // empty grid when locals were not requested
};

class Model {
 public:
  explicit Model(const PipelineConfig& config);

  ImageFeatures forward(const Image& image, bool with_local) const;
  // Pluggable feature source (CQVF files, tests) bypassing the backbone.
  ImageFeatures forward_from_pixel_features(const Tensor& pixel_features,
                                            bool with_local) const;

  // Inference-mode convenience: no graph, f32 outputs.
  Extraction extract(const Image& image, bool with_local) const;
  Extraction extract_from_pixel_features(const Tensor& pixel_features,
                                         bool with_local) const;

  NamedParams named_params() const;
  // include_adapters=false leaves the backbone entirely frozen.
  std::vector<Tensor> trainable_params(bool include_adapters = true) const;

  const PipelineConfig& config() const { return config_; }
  Backbone& backbone() { return *backbone_; }
  const Backbone& backbone() const { return *backbone_; }
  ContextModule& context() { return *context_; }
  const ContextModule& context() const { return *context_; }
  DescriptorHead& head() { return *head_; }
  const DescriptorHead& head() const { return *head_; }

  void save_checkpoint(const std::filesystem::path& path,
                       const AdamState* adam = nullptr) const;
  static Model load_checkpoint(const std::filesystem::path& path,
                               AdamState* adam = nullptr);

 private:
  PipelineConfig config_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<ContextModule> context_;
  std::unique_ptr<DescriptorHead> head_;
};

}  // namespace cqvpr
