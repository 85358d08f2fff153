#pragma once

#include <cstddef>
#include <vector>

#include "corenet/tensor.h"

namespace corenet {

/// Row-major 2-D scalar field: masks, soft masks, attention maps.
struct Grid2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Grid2D() = default;
  Grid2D(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }

  bool is_binary() const;
  std::size_t count_nonzero() const;
  double min() const;
  double max() const;

  /// [1, h, w] tensor.
  Tensor to_tensor(DType dtype = DType::f64) const;
  /// Accepts [h, w] or [1, h, w].
  static Grid2D from_tensor(const Tensor& t);

  bool operator==(const Grid2D&) const = default;
};

/// A binary (0/1) grid.
using MaskGrid = Grid2D;
/// Real-valued mask before thresholding.
using SoftMask = Grid2D;

/// Bilinear resize (align_corners=false).
Grid2D resize_bilinear(const Grid2D& grid, std::size_t height, std::size_t width);

/// Downsamples a binary mask by per-cell majority vote; ties go to 0.
/// Extents must divide evenly.
MaskGrid majority_downsample(const MaskGrid& mask, std::size_t height, std::size_t width);

/// 1 - mask.
MaskGrid complement(const MaskGrid& mask);

}  // namespace corenet
