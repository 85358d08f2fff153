#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "corenet/features.h"
#include "corenet/grid.h"
#include "corenet/layers.h"

/// Correlation-guided transformer: correlation volumes between query and
/// support tokens, the funnel transformer over correlation tokens,
/// foreground/background fusion, multi-kernel fusion and the layer-wise
/// self-distillation loss.
namespace corenet::cgt {

/// Cosine similarity with the convention that a zero vector is similar to
/// nothing (returns 0). Result is clamped into [-1, 1].
double cosine(std::span<const double> a, std::span<const double> b);

/// Flattens patch tokens [K, M, d, h, w] to [K*M, d, h*w] (head-layer index
/// k*M + m).
Tensor flatten_tokens(const FeatureStack& stack);

/// C_local[mk, i, j] = cos(query token i, support token j) per head-layer.
/// Shape [MK, hq*wq, hs*ws]; dtype follows the query stack.
Tensor local_correlation(const FeatureStack& query, const FeatureStack& support);

/// Grid coordinate of a Voronoi seed.
struct Seed {
  std::size_t y = 0, x = 0;
};

/// Assigns every background pixel to its nearest seed (Euclidean on the grid,
/// ties to the lowest seed index). Returns `seeds.size()` disjoint masks.
std::vector<MaskGrid> voronoi_assign(const MaskGrid& background, std::span<const Seed> seeds);

/// Splits `background` into `regions` disjoint masks using seeds drawn
/// without replacement from the background pixels. With fewer background
/// pixels than regions the surplus regions are empty.
std::vector<MaskGrid> voronoi_partition(const MaskGrid& background, std::size_t regions, std::uint64_t seed);

/// Mean of tokens[MK, d, P] over the pixels where mask is 1 -> [MK, d]. An
/// empty mask gives the zero vector.
Tensor masked_avg_pool(const Tensor& tokens, const MaskGrid& mask);

/// Cosine of every query token against the foreground prototype and each
/// background prototype. Returns {fg [MK, Pq, 1], bg [MK, Pq, N]}.
std::pair<Tensor, Tensor> global_correlation(const Tensor& query_tokens, const Tensor& fg_prototype,
                                             std::span<const Tensor> bg_prototypes);

struct CorrelationVolume {
  Tensor local;      // [MK, Pq, Ps]
  Tensor global_fg;  // [MK, Pq, 1]
  Tensor global_bg;  // [MK, Pq, N]
};

/// Local and global volumes for one support/query pair. `support_mask` is the
/// binary support mask at token resolution.
CorrelationVolume build_correlation(const FeatureStack& query, const FeatureStack& support,
                                    const MaskGrid& support_mask, std::size_t n_background,
                                    std::uint64_t voronoi_seed);

/// Concatenates the volume along the token axis and moves channels last:
/// [Pq, 1 + N + Ps, MK].
Tensor correlation_tokens_input(const CorrelationVolume& volume);

struct TransformerConfig {
  std::size_t in_channels = 6;  // M*K
  std::size_t dim = 64;         // C_l
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t norm_groups = 4;
  std::size_t n_background = 5;
  std::size_t support_h = 8, support_w = 8;
  std::size_t mlp_hidden = 64;
  bool normalize = true;  // group norm after each residual
  double init_std = nn::kInitStd;
};

/// Transformer output, token-major: every tensor is [Pq, tokens, C_l].
struct CorrelationTokens {
  Tensor fg;     // [Pq, 1, C]
  Tensor bg;     // [Pq, N, C]
  Tensor local;  // [Pq, 1, C]
  /// Channel- and query-averaged local maps, one per stage (input + each
  /// layer), shapes (h_l, w_l).
  std::vector<Tensor> layer_maps;
  /// Local token extent at the input and after each layer.
  std::vector<std::size_t> local_extents;
  /// Attention weights per layer, [Pq, heads, Tq, T].
  std::vector<Tensor> attention;
};

/// Funnel transformer over correlation tokens. Each layer attends from a
/// pooled query set (foreground and background tokens kept, local tokens
/// window-averaged 2x2, or globally on the last layer) to all current tokens;
/// a learned support-mask embedding is added to the keys of local tokens.
class CorrelationTransformer {
 public:
  CorrelationTransformer() = default;
  CorrelationTransformer(ParameterSet& params, const std::string& prefix, const TransformerConfig& cfg, Rng& rng);

  /// input [Pq, 1 + N + hs*ws, MK]; support_mask at token resolution.
  CorrelationTokens operator()(const Tensor& input, const MaskGrid& support_mask) const;

  const TransformerConfig& config() const { return cfg_; }

  struct Layer {
    nn::MultiHeadAttention attention;
    nn::TokenGroupNorm norm1, norm2;
    nn::Mlp mlp;
    Tensor mask_embedding;  // [2, C]: row 0 background, row 1 foreground
  };
  nn::Linear input_proj;
  std::vector<Layer> layers;

 private:
  TransformerConfig cfg_;
};

/// C_global^b = sum_n w_n bg_n + beta; weights init 1/N.
class BackgroundFusion {
 public:
  BackgroundFusion() = default;
  BackgroundFusion(ParameterSet& params, const std::string& prefix, std::size_t n_background, Rng& rng);
  /// bg [Pq, N, C] -> [Pq, 1, C].
  Tensor operator()(const Tensor& bg) const;

  Tensor weights;  // [N]
  Tensor bias;     // [1]
};

/// 1x1 convolution over Cat(fg, fused bg): [Pq,1,C] x2 -> [Pq,1,C].
class GlobalFusion {
 public:
  GlobalFusion() = default;
  GlobalFusion(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng, double init_std);
  Tensor operator()(const Tensor& fg, const Tensor& bg_fused) const;

  nn::Linear proj;  // weight [2C, C]; rows 0..C-1 act on fg
};

/// Parallel bias-free convolutions with different kernel sizes over
/// Cat(local, global), reduced by a 1x1 conv plus the local residual, then a
/// 3x3 residual refinement.
class MultiKernelFusion {
 public:
  MultiKernelFusion() = default;
  MultiKernelFusion(ParameterSet& params, const std::string& prefix, std::size_t dim,
                    const std::vector<std::size_t>& kernels, Rng& rng, double init_std);

  /// local, global: [C, hq, wq]. If `branch_outputs` is non-null it receives
  /// each branch's output.
  Tensor operator()(const Tensor& local, const Tensor& global, std::vector<Tensor>* branch_outputs = nullptr) const;

  std::vector<std::size_t> kernels;
  std::vector<nn::Conv2d> branches;
  nn::Conv2d reduce;
  nn::Conv2d refine;
};

/// Token-major [Pq, 1, C] -> spatial [C, hq, wq].
Tensor tokens_to_map(const Tensor& tokens, std::size_t hq, std::size_t wq);

/// Mean over layer pairs of KL(teacher || student), where the teacher is the
/// spatial softmax of the deeper map resized to the shallower map's size
/// (gradient stopped) and the student is the spatial softmax of the shallower
/// map. Maps are [h, w]. Fewer than two maps -> 0.
Tensor self_distill_loss(const std::vector<Tensor>& layer_maps);

/// Detached teacher log-distributions [h_l * w_l], one per layer pair.
std::vector<Tensor> distill_teachers(const std::vector<Tensor>& layer_maps);
/// The distillation loss against given teachers. With the teachers of the
/// same maps this equals self_distill_loss; holding them fixed makes the loss
/// an ordinary differentiable function of the student maps.
Tensor distill_against(const std::vector<Tensor>& layer_maps, const std::vector<Tensor>& teachers);

}  // namespace corenet::cgt
