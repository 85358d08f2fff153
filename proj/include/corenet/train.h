#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "corenet/model.h"
#include "corenet/optim.h"
#include "corenet/pseudomask.h"

/// Episodic training, K-shot inference and IoU evaluation.
namespace corenet {

/// Flat training configuration; JSON keys match the field names.
struct TrainConfig {
  double lr = 5e-4;
  std::size_t batch_size = 16;
  double lambda_distill = 0.5;
  double alpha = 0.4;
  std::size_t n_background = 5;
  std::vector<std::size_t> kernel_set{1, 3, 5, 7};
  std::size_t embed_dim = 64;
  std::size_t dim = 64;
  std::size_t episodes = 500;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::string backbone = "synthetic";
  std::string dtype = "f64";
  std::size_t fold = 0;
  std::string data;  // dataset directory (CLI only)

  void validate() const;
  static TrainConfig from_json(const std::string& text);
  std::string to_json() const;
  /// Model architecture implied by this config.
  ModelConfig model_config(const BackboneConfig& backbone) const;
};

/// Everything a training or inference step may look at for one image.
struct EpisodeContext {
  const FeatureBank* features = nullptr;
  pseudomask::PseudoMaskOptions pseudo;
};

struct EpisodeOutcome {
  guidance::QueryPrediction prediction;
  Tensor seg;       // scalar
  Tensor distill;   // scalar
  Tensor loss;      // seg + lambda * distill
  pseudomask::PseudoMaskPair pseudo;
};

/// Pixelwise cross-entropy of logits [2, H, W] against a binary target.
Tensor segmentation_loss(const Tensor& logits, const MaskGrid& target);

/// One 1-shot training pass: pseudo masks from features, forward, combined
/// loss. Uses only the first support.
EpisodeOutcome run_episode(const CoreNet& model, const EpisodeView& episode, const EpisodeContext& ctx,
                           double lambda_distill);

struct LossRecord {
  std::size_t episode = 0;
  double seg = 0.0;
  double distill = 0.0;
  double total = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> log;
  std::size_t optimizer_steps = 0;
  double seconds = 0.0;
};

/// Samples `cfg.episodes` episodes from the training classes of `cfg.fold`,
/// accumulating gradients over `batch_size` episodes per optimizer step.
/// Throws NumericalError naming the first non-finite tensor.
TrainResult train(CoreNet& model, const Dataset& data, const FeatureBank& features, const TrainConfig& cfg);

/// Tab-separated: episode, seg, distill, total (17 significant digits).
void write_loss_log(const std::filesystem::path& path, const std::vector<LossRecord>& log);
std::vector<LossRecord> read_loss_log(const std::filesystem::path& path);

/// Mean of per-shot foreground probabilities, thresholded at 0.5.
guidance::QueryPrediction kshot_predict(const CoreNet& model, const std::vector<const ImageRecord*>& supports,
                                        const ImageRecord& query, const EpisodeContext& ctx, std::uint64_t seed);

struct IouCounts {
  double intersection = 0.0;
  double union_ = 0.0;
};
IouCounts iou_counts(const MaskGrid& prediction, const MaskGrid& truth);
/// Empty union counts as 1 (both empty).
double iou(const MaskGrid& prediction, const MaskGrid& truth);

struct EvalConfig {
  std::size_t fold = 0;
  std::size_t shots = 1;
  std::size_t episodes_per_class = 20;
  std::uint64_t seed = 1234;
  bool per_episode = false;  // average per-episode IoU instead of pooled counts
};

struct EvalResult {
  std::map<int, double> class_iou;
  double miou = 0.0;
  std::size_t episodes = 0;
  std::vector<std::string> warnings;
};

/// Test episodes of the fold; query and supports are drawn per episode so
/// that the first k supports are shared across shot counts.
std::vector<Episode> test_episodes(const Dataset& data, const EvalConfig& cfg);

/// Per-class IoU from pairs of (class, prediction, truth).
struct ScoredPrediction {
  int class_id = 0;
  MaskGrid prediction;
  const MaskGrid* truth = nullptr;
};
EvalResult summarize_iou(const std::vector<ScoredPrediction>& scored, const std::set<int>& classes,
                         bool per_episode);

EvalResult evaluate(const CoreNet& model, const Dataset& data, const EpisodeContext& ctx, const EvalConfig& cfg);

}  // namespace corenet
