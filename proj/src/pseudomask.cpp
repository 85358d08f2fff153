#include "corenet/pseudomask.h"

#include <algorithm>
#include <cmath>

#include "corenet/cgt.h"

namespace corenet::pseudomask {

void ParParams::validate() const {
  if (dilations.empty()) throw ConfigError("PAR needs at least one dilation");
  for (std::size_t d : dilations) {
    if (d == 0) throw ConfigError("PAR dilations must be positive");
  }
  if (!(sigma_rgb > 0.0) || !(sigma_pos > 0.0)) throw ConfigError("PAR sigmas must be positive");
  if (iterations < 0) throw ConfigError("PAR iterations must be >= 0, got " + std::to_string(iterations));
}

SoftMask cross_attention_mask(const FeatureStack& tokens, const FeatureStack& other) {
  tokens.validate();
  other.validate();
  if (tokens.heads() != other.heads() || tokens.head_dim() != other.head_dim()) {
    throw DimensionError("cross attention: head layout " + shape_str(tokens.class_tokens.shape()) + " vs " +
                         shape_str(other.class_tokens.shape()));
  }
  const std::size_t m_heads = tokens.heads(), d = tokens.head_dim(), p = tokens.tokens();
  const std::size_t last = tokens.layers() - 1, other_last = other.layers() - 1;
  const std::vector<double> patch = tokens.patch_tokens.to_vector();
  const std::vector<double> cls = other.class_tokens.to_vector();
  SoftMask out(tokens.grid_h(), tokens.grid_w());
  std::vector<double> f(d), c(d);
  for (std::size_t m = 0; m < m_heads; ++m) {
    const std::size_t base = (last * m_heads + m) * d;
    for (std::size_t j = 0; j < d; ++j) c[j] = cls[(other_last * m_heads + m) * d + j];
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < d; ++j) f[j] = patch[(base + j) * p + i];
      out.values[i] += cgt::cosine(f, c);
    }
  }
  for (double& v : out.values) v /= static_cast<double>(m_heads);
  return out;
}

SoftMask par_refine(const Tensor& image, const SoftMask& soft, const ParParams& params) {
  params.validate();
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != soft.height || image.dim(2) != soft.width) {
    throw DimensionError("PAR: image " + shape_str(image.shape()) + " vs mask " + std::to_string(soft.height) + "x" +
                         std::to_string(soft.width));
  }
  const std::size_t h = soft.height, w = soft.width, plane = h * w;
  const std::vector<double> rgb = image.to_vector();

  // Offsets: the center plus 8 neighbors per dilation.
  std::vector<std::pair<long, long>> offsets{{0, 0}};
  for (std::size_t d : params.dilations) {
    const long s = static_cast<long>(d);
    for (long dy = -1; dy <= 1; ++dy) {
      for (long dx = -1; dx <= 1; ++dx) {
        if (dy != 0 || dx != 0) offsets.emplace_back(dy * s, dx * s);
      }
    }
  }

  // Affinities depend only on the image, so build the sparse kernel once.
  struct Entry {
    std::size_t index;
    double weight;
  };
  std::vector<std::vector<Entry>> kernel(plane);
  const double rgb_den = 2.0 * params.sigma_rgb * params.sigma_rgb;
  const double pos_den = 2.0 * params.sigma_pos * params.sigma_pos;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      double total = 0.0;
      for (const auto& [dy, dx] : offsets) {
        const long sy = static_cast<long>(y) + dy, sx = static_cast<long>(x) + dx;
        if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
        const std::size_t j = static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx);
        double color = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
          const double diff = rgb[c * plane + i] - rgb[c * plane + j];
          color += diff * diff;
        }
        const double dist = static_cast<double>(dy * dy + dx * dx);
        const double k = std::exp(-color / rgb_den) + std::exp(-dist / pos_den);
        kernel[i].push_back({j, k});
        total += k;
      }
      for (Entry& e : kernel[i]) e.weight /= total;
    }
  }

  SoftMask current = soft;
  SoftMask next(h, w);
  for (int it = 0; it < params.iterations; ++it) {
    for (std::size_t i = 0; i < plane; ++i) {
      // Written relative to the center so constant inputs are exact fixed
      // points; the clamp absorbs rounding outside the neighborhood hull.
      const double center = current.values[i];
      double acc = 0.0, lo = center, hi = center;
      for (const Entry& e : kernel[i]) {
        const double v = current.values[e.index];
        acc += e.weight * (v - center);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      next.values[i] = std::clamp(center + acc, lo, hi);
    }
    std::swap(current, next);
  }
  return current;
}

MaskGrid binarize(const SoftMask& soft, double alpha) {
  MaskGrid out(soft.height, soft.width);
  for (std::size_t i = 0; i < soft.size(); ++i) out.values[i] = soft.values[i] > alpha ? 1.0 : 0.0;
  return out;
}

PseudoMask pseudo_mask(const FeatureStack& tokens, const FeatureStack& other, const Tensor& image,
                       const PseudoMaskOptions& options) {
  if (image.rank() != 3) throw DimensionError("pseudo mask expects an image [3, H, W]");
  const SoftMask coarse = cross_attention_mask(tokens, other);
  PseudoMask out;
  out.refined = par_refine(image, resize_bilinear(coarse, image.dim(1), image.dim(2)), options.par);
  out.image = binarize(out.refined, options.alpha);
  out.tokens = majority_downsample(out.image, tokens.grid_h(), tokens.grid_w());
  return out;
}

PseudoMaskPair make_pseudo_masks(const FeatureStack& support, const FeatureStack& query, const Tensor& support_image,
                                 const Tensor& query_image, const PseudoMaskOptions& options) {
  return {pseudo_mask(support, query, support_image, options), pseudo_mask(query, support, query_image, options)};
}

}  // namespace corenet::pseudomask
