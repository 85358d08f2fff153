#include "corenet/features.h"

#include <algorithm>
#include <array>
#include <cmath>

#include "corenet/rng.h"

namespace corenet {

void FeatureStack::validate() const {
  if (!patch_tokens.defined() || !class_tokens.defined()) throw ContractError("feature stack is empty");
  if (patch_tokens.rank() != 5 || class_tokens.rank() != 3) {
    throw DimensionError("feature stack expects patch_tokens[K,M,d,h,w] and class_tokens[K,M,d], got " +
                         shape_str(patch_tokens.shape()) + " and " + shape_str(class_tokens.shape()));
  }
  for (std::size_t e : patch_tokens.shape()) {
    if (e == 0) throw DimensionError("feature stack has a zero extent: " + shape_str(patch_tokens.shape()));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    if (class_tokens.dim(i) != patch_tokens.dim(i)) {
      throw DimensionError("class tokens " + shape_str(class_tokens.shape()) + " do not match patch tokens " +
                           shape_str(patch_tokens.shape()));
    }
  }
  for (const Tensor* t : {&patch_tokens, &class_tokens}) {
    for (double v : t->to_vector()) {
      if (!std::isfinite(v)) throw NumericalError("feature stack '" + image_id + "' contains non-finite values");
    }
  }
}

FeatureStack FeatureStack::to(DType dtype) const {
  return {patch_tokens.to(dtype), class_tokens.to(dtype), image_id};
}

FeatureStack load_feature_stack(const TensorPack& pack, const std::string& image_id) {
  FeatureStack s{pack.get("patch_tokens"), pack.get("class_tokens"), image_id};
  s.validate();
  return s;
}

void save_feature_stack(const std::filesystem::path& dir, const FeatureStack& stack) {
  TensorPack::write(dir, {{"patch_tokens", stack.patch_tokens}, {"class_tokens", stack.class_tokens}});
}

namespace {

constexpr std::size_t kStatDims = 9;

/// Local summary of one patch. Everything here reads only pixels inside the
/// patch, which is what makes patch tokens local.
std::array<double, kStatDims> patch_stats(const std::vector<double>& img, std::size_t height, std::size_t width,
                                          std::size_t y0, std::size_t x0, std::size_t ph, std::size_t pw,
                                          std::size_t gy, std::size_t gx, std::size_t gh, std::size_t gw,
                                          double* saliency) {
  const std::size_t plane = height * width;
  double mean[3] = {0, 0, 0};
  double sat = 0.0;
  for (std::size_t y = y0; y < y0 + ph; ++y) {
    for (std::size_t x = x0; x < x0 + pw; ++x) {
      const double r = img[y * width + x], g = img[plane + y * width + x], b = img[2 * plane + y * width + x];
      mean[0] += r;
      mean[1] += g;
      mean[2] += b;
      sat += std::max({r, g, b}) - std::min({r, g, b});
    }
  }
  const double n = static_cast<double>(ph * pw);
  for (double& m : mean) m /= n;
  sat /= n;

  double energy = 0.0;
  std::size_t pairs = 0;
  auto intensity = [&](std::size_t y, std::size_t x) {
    return (img[y * width + x] + img[plane + y * width + x] + img[2 * plane + y * width + x]) / 3.0;
  };
  for (std::size_t y = y0; y < y0 + ph; ++y) {
    for (std::size_t x = x0; x < x0 + pw; ++x) {
      if (x + 1 < x0 + pw) {
        const double d = intensity(y, x + 1) - intensity(y, x);
        energy += d * d;
        ++pairs;
      }
      if (y + 1 < y0 + ph) {
        const double d = intensity(y + 1, x) - intensity(y, x);
        energy += d * d;
        ++pairs;
      }
    }
  }
  if (pairs) energy /= static_cast<double>(pairs);

  *saliency = std::clamp(2.5 * sat - 12.0 * energy, 0.0, 1.0);
  const double py = (static_cast<double>(gy) + 0.5) / static_cast<double>(gh);
  const double px = (static_cast<double>(gx) + 0.5) / static_cast<double>(gw);
  return {mean[0] - 0.5, mean[1] - 0.5, mean[2] - 0.5, sat, 10.0 * energy,
          std::sin(M_PI * py), std::cos(M_PI * py), std::sin(M_PI * px), std::cos(M_PI * px)};
}

}  // namespace

FeatureStack synthetic_backbone(const Tensor& image, std::uint64_t seed, const BackboneConfig& cfg,
                                const std::string& image_id) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("synthetic backbone expects an image[3,H,W], got " + shape_str(image.shape()));
  }
  const std::size_t height = image.dim(1), width = image.dim(2);
  if (cfg.layers == 0 || cfg.heads == 0 || cfg.head_dim == 0 || cfg.grid_h == 0 || cfg.grid_w == 0) {
    throw ConfigError("backbone config extents must be positive");
  }
  if (height % cfg.grid_h != 0 || width % cfg.grid_w != 0) {
    throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) + " not divisible into a " +
                      std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w) + " token grid");
  }
  const std::size_t K = cfg.layers, M = cfg.heads, d = cfg.head_dim, gh = cfg.grid_h, gw = cfg.grid_w;
  const std::size_t ph = height / gh, pw = width / gw, P = gh * gw;
  const std::vector<double> img = image.to_vector();

  std::vector<std::array<double, kStatDims>> stats(P);
  std::vector<double> saliency(P);
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const std::size_t p = gy * gw + gx;
      stats[p] = patch_stats(img, height, width, gy * ph, gx * pw, ph, pw, gy, gx, gh, gw, &saliency[p]);
    }
  }

  constexpr double kSaliencyGain = 2.0;
  constexpr double kClassOffset = 5.0;
  std::vector<double> patch(K * M * d * P);
  std::vector<double> cls(K * M * d);
  Rng rng(seed);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t m = 0; m < M; ++m) {
      std::vector<double> proj(d * kStatDims);
      for (double& w : proj) w = rng.normal() * 1.5 / std::sqrt(static_cast<double>(kStatDims));
      std::vector<double> dir(d);
      double norm = 0.0;
      for (double& v : dir) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (double& v : dir) v /= norm;

      const std::size_t km = k * M + m;
      for (std::size_t c = 0; c < d; ++c) {
        double acc_mean = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
          double z = 0.0;
          for (std::size_t j = 0; j < kStatDims; ++j) z += proj[c * kStatDims + j] * stats[p][j];
          const double v = 0.5 * std::tanh(z) + kSaliencyGain * saliency[p] * dir[c];
          patch[(km * d + c) * P + p] = v;
          acc_mean += v;
        }
        cls[km * d + c] = acc_mean / static_cast<double>(P) + kClassOffset * dir[c];
      }
      for (std::size_t p = 0; p < P; ++p) {
        bool all_zero = true;
        for (std::size_t c = 0; c < d && all_zero; ++c) all_zero = patch[(km * d + c) * P + p] == 0.0;
        if (all_zero) throw NumericalError("synthetic backbone produced an all-zero token");
      }
    }
  }
  FeatureStack s{Tensor::from({K, M, d, gh, gw}, std::move(patch)), Tensor::from({K, M, d}, std::move(cls)),
                 image_id};
  return s;
}

AttentionMap synthetic_clip_attention(const MaskGrid& hint, std::size_t blur_radius, double noise_level,
                                      std::uint64_t seed) {
  AttentionMap out;
  out.source = AttentionMap::Source::synthetic;
  const std::size_t h = hint.height, w = hint.width;
  if (hint.count_nonzero() == 0) {
    out.values = Grid2D(h, w, 0.5);
    return out;
  }
  const auto r = static_cast<std::ptrdiff_t>(blur_radius);
  Grid2D blurred(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
          if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx >= static_cast<std::ptrdiff_t>(w)) {
            continue;
          }
          const double weight = static_cast<double>((r + 1 - std::abs(dy)) * (r + 1 - std::abs(dx)));
          acc += weight * hint.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
        }
      }
      blurred.at(y, x) = acc;
    }
  }
  Rng rng(seed);
  const double blur_peak = blurred.max();
  for (double& v : blurred.values) {
    if (noise_level > 0.0) v += noise_level * rng.normal() * blur_peak;
    v = std::max(v, 0.0);
  }
  const double peak = blurred.max();
  if (!(peak > 0.0)) {
    out.values = Grid2D(h, w, 0.5);
    return out;
  }
  for (double& v : blurred.values) v = std::clamp(v / peak, 0.0, 1.0);
  out.values = std::move(blurred);
  return out;
}

AttentionMap attention_from_tensor(const Tensor& t, AttentionMap::Source source) {
  AttentionMap a;
  a.source = source;
  a.values = Grid2D::from_tensor(t);
  for (double& v : a.values.values) {
    if (!std::isfinite(v)) throw NumericalError("attention map contains non-finite values");
    v = std::clamp(v, 0.0, 1.0);
  }
  if (a.values.max() <= 0.0) a.values = Grid2D(a.values.height, a.values.width, 0.5);
  return a;
}

}  // namespace corenet
