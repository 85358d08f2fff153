#pragma once

#include <vector>

#include "corenet/features.h"
#include "corenet/grid.h"

/// Pseudo-mask generation: class-token cross attention, pixel-adaptive
/// refinement (PAR) and thresholding.
namespace corenet::pseudomask {

struct ParParams {
  std::vector<std::size_t> dilations{1, 2, 4, 8};
  double sigma_rgb = 0.1;  // RGB in [0, 1]
  double sigma_pos = 2.0;  // pixels
  int iterations = 10;

  /// Throws ConfigError on empty/zero dilations, non-positive sigmas or
  /// negative iterations.
  void validate() const;
};

/// Per-token cosine between the last-layer patch tokens of `tokens` and the
/// last-layer class token of `other`, averaged over heads. Shape (h, w).
SoftMask cross_attention_mask(const FeatureStack& tokens, const FeatureStack& other);

/// Iterated affinity-weighted averaging over the center pixel and its
/// 8-neighbors at each dilation. `image` is [3, H, W]; `soft` is H x W.
SoftMask par_refine(const Tensor& image, const SoftMask& soft, const ParParams& params);

/// 1 where value > alpha, else 0.
MaskGrid binarize(const SoftMask& soft, double alpha);

struct PseudoMaskOptions {
  ParParams par;
  double alpha = 0.4;
};

/// One image's pseudo mask at both resolutions.
struct PseudoMask {
  SoftMask refined;    // image resolution, after PAR
  MaskGrid image;      // image resolution, binary
  MaskGrid tokens;     // token grid, majority vote
};

/// Pseudo mask for the image owning `tokens`, guided by the other image's
/// class token.
PseudoMask pseudo_mask(const FeatureStack& tokens, const FeatureStack& other, const Tensor& image,
                       const PseudoMaskOptions& options);

struct PseudoMaskPair {
  PseudoMask support;
  PseudoMask query;
};

/// M_s from (support tokens, query class token) and M_q from (query tokens,
/// support class token).
PseudoMaskPair make_pseudo_masks(const FeatureStack& support, const FeatureStack& query, const Tensor& support_image,
                                 const Tensor& query_image, const PseudoMaskOptions& options);

}  // namespace corenet::pseudomask
