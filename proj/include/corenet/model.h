#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "corenet/cgt.h"
#include "corenet/dataset.h"
#include "corenet/guidance.h"

namespace corenet {

struct ModelConfig {
  BackboneConfig backbone;       // K, M, d and the token grid
  std::uint64_t backbone_seed = 7;
  std::size_t dim = 64;          // correlation token width
  std::size_t heads = 4;
  std::size_t norm_groups = 4;
  std::size_t transformer_layers = 2;
  std::size_t n_background = 5;
  std::vector<std::size_t> kernel_set{1, 3, 5, 7};
  std::size_t embed_dim = 64;
  std::size_t decoder_heads = 4;
  std::size_t decoder_groups = 4;
  bool positional_encoding = true;
  bool normalize = true;
  double init_std = nn::kInitStd;
  DType dtype = DType::f64;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

/// Everything one forward pass produces.
struct ForwardResult {
  guidance::QueryPrediction prediction;
  Tensor distill;            // scalar self-distillation loss
  Tensor refined_attention;  // A_r, [hq, wq]
  Tensor fused;              // C_fusion, [C, hq, wq]
  std::vector<Tensor> layer_maps;
};

class CoreNet {
 public:
  explicit CoreNet(const ModelConfig& cfg);
  CoreNet(const CoreNet&) = delete;
  CoreNet& operator=(const CoreNet&) = delete;

  /// `support_mask` is the binary support mask on the support token grid;
  /// `query_attention` the coarse class attention of the query image.
  ForwardResult forward(const FeatureStack& support, const FeatureStack& query, const MaskGrid& support_mask,
                        const AttentionMap& query_attention, std::size_t height, std::size_t width,
                        std::uint64_t voronoi_seed) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Checkpoint directory: TensorPack of all parameters plus model.json.
  void save(const std::filesystem::path& dir) const;
  static std::unique_ptr<CoreNet> load(const std::filesystem::path& dir);

  cgt::CorrelationTransformer transformer;
  cgt::BackgroundFusion background_fusion;
  cgt::GlobalFusion global_fusion;
  cgt::MultiKernelFusion kernel_fusion;
  guidance::ClassGuidance class_guidance;
  guidance::EmbeddingProjection embedding;
  guidance::Decoder decoder;

 private:
  ModelConfig cfg_;
  ParameterSet params_;
};

/// Frozen backbone features per image id, computed once.
class FeatureBank {
 public:
  /// `backbone` is "synthetic" or "pack:<dir>" (one pack per image id under dir).
  FeatureBank(const Dataset& data, const std::string& backbone, const BackboneConfig& cfg, std::uint64_t seed);
  FeatureBank() = default;

  const FeatureStack& get(const std::string& image_id) const;
  void put(FeatureStack stack);

 private:
  std::map<std::string, FeatureStack> stacks_;
};

}  // namespace corenet
