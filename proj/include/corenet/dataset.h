#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "corenet/features.h"
#include "corenet/grid.h"

/// Episodic synthetic dataset: shape-family classes over textured noise,
/// fold splits and episode sampling.
namespace corenet {

/// What training may see of one image: pixels, class id and the coarse class
/// attention map. Ground-truth masks live elsewhere.
struct ImageRecord {
  std::string id;
  int class_id = 0;
  Tensor image;  // [3, H, W], values in [0, 1] on a 1/255 lattice
  AttentionMap attention;
};

struct Dataset {
  std::uint64_t seed = 0;
  std::size_t n_classes = 0;
  std::size_t image_size = 0;
  std::vector<ImageRecord> images;
  std::vector<MaskGrid> gt_masks;  // parallel to images; evaluation only

  std::vector<std::size_t> images_of_class(int class_id) const;
};

struct DatasetOptions {
  std::size_t hint_grid = 16;      // attention maps are computed at this resolution
  std::size_t attention_blur = 1;  // tent radius in hint cells
  double attention_noise = 0.1;
};

/// Names of the shape families in class-id order.
const std::vector<std::string>& shape_families();

/// Deterministic in `seed`. Needs 4 <= n_classes <= number of shape families
/// and size a power of two >= 32.
Dataset gen_synthetic_dataset(std::uint64_t seed, std::size_t n_classes, std::size_t images_per_class,
                              std::size_t size, const DatasetOptions& options = {});

/// Writes images/<id>.ppm (P6), masks/<id>.pgm (P5), attention/ (TensorPack,
/// one entry per image id) and dataset.json.
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

/// 8-bit PPM/PGM codecs. Images are [3, H, W] in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Grid2D& grid);  // values clamped to [0, 1]
Grid2D read_pgm(const std::filesystem::path& path);

inline constexpr std::size_t kFolds = 4;

struct FoldSplit {
  std::set<int> train_classes;
  std::set<int> test_classes;
};

/// Fold of a class: contiguous blocks, class c goes to floor(c * 4 / n).
std::size_t fold_of_class(int class_id, std::size_t n_classes);
FoldSplit fold_split(std::size_t n_classes, std::size_t fold);

/// The part of an episode that training code receives.
struct EpisodeView {
  std::vector<const ImageRecord*> supports;
  const ImageRecord* query = nullptr;
  int class_id = 0;
  std::uint64_t seed = 0;
};

struct Episode {
  EpisodeView view;
  const MaskGrid* gt_query_mask = nullptr;  // evaluation only
};

/// Draws a class uniformly from `classes`, then a query and `shots` distinct
/// supports of that class.
Episode sample_episode(const Dataset& data, const std::set<int>& classes, std::size_t shots, std::uint64_t seed);

}  // namespace corenet
