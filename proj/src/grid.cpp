#include "corenet/grid.h"

#include <algorithm>

#include "corenet/ops.h"

namespace corenet {

bool Grid2D::is_binary() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

std::size_t Grid2D::count_nonzero() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](double v) { return v != 0.0; }));
}

double Grid2D::min() const { return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end()); }
double Grid2D::max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

Tensor Grid2D::to_tensor(DType dtype) const { return Tensor::from({1, height, width}, values, dtype); }

Grid2D Grid2D::from_tensor(const Tensor& t) {
  Grid2D g;
  if (t.rank() == 2) {
    g.height = t.dim(0);
    g.width = t.dim(1);
  } else if (t.rank() == 3 && t.dim(0) == 1) {
    g.height = t.dim(1);
    g.width = t.dim(2);
  } else {
    throw DimensionError("grid from tensor of shape " + shape_str(t.shape()));
  }
  g.values = t.to_vector();
  return g;
}

Grid2D resize_bilinear(const Grid2D& grid, std::size_t height, std::size_t width) {
  NoGradGuard guard;
  return Grid2D::from_tensor(ops::bilinear_resize(grid.to_tensor(), height, width));
}

MaskGrid majority_downsample(const MaskGrid& mask, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || mask.height % height != 0 || mask.width % width != 0) {
    throw ConfigError("majority_downsample: " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                      " does not divide into " + std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t fy = mask.height / height, fx = mask.width / width;
  MaskGrid out(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t on = 0;
      for (std::size_t dy = 0; dy < fy; ++dy) {
        for (std::size_t dx = 0; dx < fx; ++dx) on += mask.at(y * fy + dy, x * fx + dx) > 0.5 ? 1 : 0;
      }
      out.at(y, x) = 2 * on > fy * fx ? 1.0 : 0.0;
    }
  }
  return out;
}

MaskGrid complement(const MaskGrid& mask) {
  MaskGrid out = mask;
  for (double& v : out.values) v = 1.0 - v;
  return out;
}

}  // namespace corenet
