#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <type_traits>

#include "corenet/gradcheck_suite.h"
#include "corenet/train.h"
#include "test_util.h"

using namespace corenet;
using corenet::testing::bit_equal;
using corenet::testing::TempDir;

namespace fs = std::filesystem;

// Training code receives EpisodeView; only Episode carries the GT mask.
template <typename T>
concept HasGroundTruth = requires(const T& t) { t.gt_query_mask; };
static_assert(HasGroundTruth<Episode>);
static_assert(!HasGroundTruth<EpisodeView>);
static_assert(!std::is_convertible_v<const Episode&, const EpisodeView&>);
static_assert(std::is_invocable_v<decltype(&run_episode), const CoreNet&, const EpisodeView&, const EpisodeContext&,
                                  double>);
template <typename T>
concept HasMask = requires(const T& t) { t.mask; };
static_assert(!HasMask<ImageRecord>);

namespace {

// 32x32 images on a 4x4 token grid with narrow widths.
TrainConfig small_train_config() {
  TrainConfig c;
  c.dim = 8;
  c.embed_dim = 4;
  c.n_background = 3;
  c.episodes = 6;
  c.batch_size = 2;
  c.seed = 5;
  return c;
}

BackboneConfig small_backbone() { return gradcheck_model_config().backbone; }

const Dataset& small_data() {
  static const Dataset d = gen_synthetic_dataset(21, 4, 4, 32);
  return d;
}

MaskGrid mask_from(std::size_t h, std::size_t w, std::initializer_list<std::size_t> on) {
  MaskGrid m(h, w);
  for (std::size_t i : on) m.values[i] = 1.0;
  return m;
}

}  // namespace

TEST(Dataset, DeterministicInSeed) {
  const Dataset a = gen_synthetic_dataset(3, 4, 2, 32), b = gen_synthetic_dataset(3, 4, 2, 32);
  ASSERT_EQ(a.images.size(), 8u);
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    EXPECT_EQ(a.images[i].id, b.images[i].id);
    EXPECT_TRUE(bit_equal(a.images[i].image, b.images[i].image));
    EXPECT_EQ(a.gt_masks[i], b.gt_masks[i]);
    EXPECT_EQ(a.images[i].attention.values, b.images[i].attention.values);
  }
  const Dataset c = gen_synthetic_dataset(4, 4, 2, 32);
  EXPECT_FALSE(bit_equal(a.images[0].image, c.images[0].image));
}

TEST(Dataset, MasksNonEmptyAndNotFull) {
  const Dataset d = gen_synthetic_dataset(5, 8, 3, 64);
  for (const MaskGrid& m : d.gt_masks) {
    EXPECT_TRUE(m.is_binary());
    EXPECT_GT(m.count_nonzero(), 0u);
    EXPECT_LT(m.count_nonzero(), m.size());
  }
  for (const ImageRecord& r : d.images) {
    EXPECT_EQ(r.image.shape(), (Shape{3, 64, 64}));
    EXPECT_GE(r.attention.values.min(), 0.0);
    EXPECT_LE(r.attention.values.max(), 1.0);
  }
}

TEST(Dataset, ConfigErrors) {
  EXPECT_THROW(gen_synthetic_dataset(1, 3, 2, 32), ConfigError);
  EXPECT_THROW(gen_synthetic_dataset(1, 4, 2, 48), ConfigError);
  EXPECT_THROW(gen_synthetic_dataset(1, 4, 2, 16), ConfigError);
}

TEST(Dataset, FoldsOfEightClassesAreDisjointPairs) {
  std::set<int> seen;
  for (std::size_t f = 0; f < kFolds; ++f) {
    const FoldSplit s = fold_split(8, f);
    EXPECT_EQ(s.test_classes.size(), 2u);
    EXPECT_EQ(s.train_classes.size(), 6u);
    for (int c : s.test_classes) {
      EXPECT_FALSE(s.train_classes.count(c));
      EXPECT_TRUE(seen.insert(c).second) << "class " << c << " tested twice";
    }
  }
  EXPECT_EQ(seen.size(), 8u);
  EXPECT_THROW(fold_split(8, 4), ConfigError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  TempDir dir("dataset_rt");
  const Dataset& d = small_data();
  save_dataset(dir.path(), d);
  EXPECT_TRUE(fs::exists(dir.path() / "dataset.json"));
  const Dataset r = load_dataset(dir.path());
  ASSERT_EQ(r.images.size(), d.images.size());
  EXPECT_EQ(r.n_classes, d.n_classes);
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    EXPECT_EQ(r.images[i].id, d.images[i].id);
    EXPECT_EQ(r.images[i].class_id, d.images[i].class_id);
    EXPECT_TRUE(bit_equal(r.images[i].image, d.images[i].image));
    EXPECT_EQ(r.gt_masks[i], d.gt_masks[i]);
  }
  EXPECT_THROW(load_dataset(dir.path() / "nope"), NotFoundError);
}

TEST(Netpbm, RoundTripAndBadHeader) {
  TempDir dir("netpbm");
  Grid2D g(3, 2);
  g.values = {0.0, 1.0, 128.0 / 255, 7.0 / 255, 1.0, 0.0};
  write_pgm(dir.path() / "a.pgm", g);
  EXPECT_EQ(read_pgm(dir.path() / "a.pgm"), g);
  const Tensor img = small_data().images[0].image;
  write_ppm(dir.path() / "a.ppm", img);
  EXPECT_TRUE(bit_equal(read_ppm(dir.path() / "a.ppm"), img));
  std::ofstream(dir.path() / "bad.pgm") << "P2\n1 1\n255\n0\n";
  EXPECT_THROW(read_pgm(dir.path() / "bad.pgm"), FormatError);
}

TEST(Episodes, SupportsDistinctFromQueryAndClassConsistent) {
  const Dataset& d = small_data();
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Episode ep = sample_episode(d, {1, 2}, 2, s);
    EXPECT_TRUE(ep.view.class_id == 1 || ep.view.class_id == 2);
    EXPECT_EQ(ep.view.query->class_id, ep.view.class_id);
    ASSERT_EQ(ep.view.supports.size(), 2u);
    EXPECT_NE(ep.view.supports[0], ep.view.supports[1]);
    for (const ImageRecord* r : ep.view.supports) {
      EXPECT_NE(r, ep.view.query);
      EXPECT_EQ(r->class_id, ep.view.class_id);
    }
  }
}

TEST(Episodes, TestEpisodesUseHeldOutClassesAndShareSupports) {
  const Dataset& d = small_data();
  EvalConfig one;
  one.fold = 1;
  one.episodes_per_class = 5;
  EvalConfig three = one;
  three.shots = 3;
  const auto a = test_episodes(d, one), b = test_episodes(d, three);
  ASSERT_EQ(a.size(), b.size());
  const FoldSplit split = fold_split(d.n_classes, 1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(split.test_classes.count(a[i].view.class_id));
    EXPECT_EQ(a[i].view.query, b[i].view.query);
    EXPECT_EQ(a[i].view.supports[0], b[i].view.supports[0]);
  }
  three.shots = 4;
  EXPECT_THROW(test_episodes(d, three), ConfigError);
}

TEST(Iou, HandCases) {
  const MaskGrid pred = mask_from(2, 2, {0, 1}), gt = mask_from(2, 2, {1, 2});
  EXPECT_NEAR(iou(pred, gt), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(iou(gt, gt), 1.0);
  EXPECT_EQ(iou(mask_from(2, 2, {0}), mask_from(2, 2, {3})), 0.0);
  EXPECT_EQ(iou(MaskGrid(2, 2), MaskGrid(2, 2)), 1.0);
  EXPECT_EQ(iou(mask_from(2, 2, {0}), MaskGrid(2, 2)), 0.0);
  EXPECT_THROW(iou(MaskGrid(2, 2), MaskGrid(2, 3)), DimensionError);
}

TEST(Iou, PooledVersusPerEpisodeAndReorderInvariance) {
  const MaskGrid g1 = mask_from(2, 2, {0, 1}), g2 = mask_from(2, 2, {0, 1, 2, 3});
  std::vector<ScoredPrediction> s{{0, mask_from(2, 2, {0}), &g1}, {0, mask_from(2, 2, {0, 1, 2, 3}), &g2},
                                  {1, mask_from(2, 2, {3}), &g1}};
  const EvalResult pooled = summarize_iou(s, {0, 1, 2}, false);
  EXPECT_NEAR(pooled.class_iou.at(0), 5.0 / 6.0, 1e-15);
  EXPECT_EQ(pooled.class_iou.at(1), 0.0);
  EXPECT_NEAR(pooled.miou, (5.0 / 6.0) / 2.0, 1e-15);
  ASSERT_EQ(pooled.warnings.size(), 1u);
  const EvalResult per = summarize_iou(s, {0, 1}, true);
  EXPECT_NEAR(per.class_iou.at(0), 0.75, 1e-15);
  std::reverse(s.begin(), s.end());
  EXPECT_EQ(summarize_iou(s, {0, 1, 2}, false).miou, pooled.miou);
}

TEST(Losses, SegmentationLossHandCase) {
  const Tensor logits = Tensor::from({2, 1, 2}, std::vector<double>{0, 0, 0, std::log(3.0)});
  const MaskGrid target = mask_from(1, 2, {1});
  // Pixel 0: bg with p = 0.5; pixel 1: fg with p = 0.75.
  EXPECT_NEAR(segmentation_loss(logits, target).item(), -(std::log(0.5) + std::log(0.75)) / 2.0, 1e-15);
}

TEST(RunEpisode, LambdaZeroIsSegmentationOnlyAndLossPositive) {
  const Dataset& d = small_data();
  const TrainConfig tc = small_train_config();
  const ModelConfig mc = tc.model_config(small_backbone());
  CoreNet model(mc);
  FeatureBank bank(d, "synthetic", mc.backbone, mc.backbone_seed);
  EpisodeContext ctx;
  ctx.features = &bank;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Episode ep = sample_episode(d, {0, 1, 2, 3}, 1, s);
    const EpisodeOutcome zero = run_episode(model, ep.view, ctx, 0.0);
    EXPECT_EQ(zero.loss.item(), zero.seg.item());
    const EpisodeOutcome half = run_episode(model, ep.view, ctx, 0.5);
    EXPECT_TRUE(std::isfinite(half.loss.item()));
    EXPECT_GT(half.loss.item(), 0.0);
    EXPECT_NEAR(half.loss.item(), half.seg.item() + 0.5 * half.distill.item(), 1e-12);
  }
}

TEST(Train, DeterministicLossLogAndCheckpoint) {
  const Dataset& d = small_data();
  const TrainConfig tc = small_train_config();
  const ModelConfig mc = tc.model_config(small_backbone());
  FeatureBank bank(d, "synthetic", mc.backbone, mc.backbone_seed);
  CoreNet a(mc), b(mc);
  const TrainResult ra = train(a, d, bank, tc), rb = train(b, d, bank, tc);
  ASSERT_EQ(ra.log.size(), 6u);
  EXPECT_EQ(ra.optimizer_steps, 3u);
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    EXPECT_EQ(ra.log[i].total, rb.log[i].total);
    EXPECT_EQ(ra.log[i].seg, rb.log[i].seg);
  }
  const auto pa = a.params().tensors(), pb = b.params().tensors();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bit_equal(pa[i], pb[i]));
}

TEST(Train, NonFiniteLossIsNumericalError) {
  const Dataset& d = small_data();
  TrainConfig tc = small_train_config();
  tc.lr = 1e300;
  tc.episodes = 8;
  const ModelConfig mc = tc.model_config(small_backbone());
  FeatureBank bank(d, "synthetic", mc.backbone, mc.backbone_seed);
  CoreNet model(mc);
  EXPECT_THROW(train(model, d, bank, tc), NumericalError);
}

TEST(Train, LossLogRoundTrip) {
  TempDir dir("losslog");
  const std::vector<LossRecord> log{{0, 0.1, 0.2, 0.2}, {1, 1.0 / 3.0, 1e-17, 0.7}};
  write_loss_log(dir.path() / "l.tsv", log);
  const auto r = read_loss_log(dir.path() / "l.tsv");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[1].seg, 1.0 / 3.0);
  EXPECT_EQ(r[1].distill, 1e-17);
}

TEST(Checkpoint, RoundTripGivesIdenticalLoss) {
  TempDir dir("ckpt");
  const Dataset& d = small_data();
  TrainConfig tc = small_train_config();
  tc.episodes = 2;
  const ModelConfig mc = tc.model_config(small_backbone());
  FeatureBank bank(d, "synthetic", mc.backbone, mc.backbone_seed);
  CoreNet model(mc);
  train(model, d, bank, tc);
  model.save(dir.path());
  const std::unique_ptr<CoreNet> loaded = CoreNet::load(dir.path());
  EpisodeContext ctx;
  ctx.features = &bank;
  const Episode ep = sample_episode(d, {0, 1}, 1, 99);
  const double x = run_episode(model, ep.view, ctx, 0.5).loss.item();
  const double y = run_episode(*loaded, ep.view, ctx, 0.5).loss.item();
  EXPECT_NEAR(x, y, 1e-6);
  EXPECT_EQ(x, y);
}

TEST(Checkpoint, ShapeMismatchRejected) {
  TempDir dir("ckpt_bad");
  const ModelConfig mc = small_train_config().model_config(small_backbone());
  CoreNet model(mc);
  model.save(dir.path());
  nlohmann::json j;
  std::ifstream(dir.path() / "model.json") >> j;
  j["dim"] = 12;
  std::ofstream(dir.path() / "model.json") << j.dump();
  EXPECT_THROW(CoreNet::load(dir.path()), CorruptionError);
}

TEST(KShot, SingleShotAndRepeatedSupports) {
  const Dataset& d = small_data();
  const ModelConfig mc = small_train_config().model_config(small_backbone());
  CoreNet model(mc);
  FeatureBank bank(d, "synthetic", mc.backbone, mc.backbone_seed);
  EpisodeContext ctx;
  ctx.features = &bank;
  const Episode ep = sample_episode(d, {2}, 1, 4);
  const ImageRecord& s = *ep.view.supports[0];
  const ImageRecord& q = *ep.view.query;

  const auto one = kshot_predict(model, {&s}, q, ctx, 17);
  const auto ms = pseudomask::pseudo_mask(bank.get(s.id), bank.get(q.id), s.image, ctx.pseudo);
  const auto direct = model.forward(bank.get(s.id), bank.get(q.id), ms.tokens, q.attention, 32, 32, Rng::mix(17, 0));
  EXPECT_TRUE(bit_equal(one.prob_fg, direct.prediction.prob_fg));

  // Same support repeated: Voronoi seeds differ per shot, so compare with
  // shot-specific single predictions averaged by hand.
  const auto three = kshot_predict(model, {&s, &s, &s}, q, ctx, 17);
  std::vector<double> mean(32 * 32, 0.0);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto p =
        model.forward(bank.get(s.id), bank.get(q.id), ms.tokens, q.attention, 32, 32, Rng::mix(17, k)).prediction;
    const auto v = p.prob_fg.to_vector();
    for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i] / 3.0;
  }
  const auto got = three.prob_fg.to_vector();
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], mean[i], 1e-15);
  EXPECT_THROW(kshot_predict(model, {}, q, ctx, 1), ConfigError);
}

TEST(TrainConfigJson, ParseRoundTripAndErrors) {
  TrainConfig c;
  c.lr = 1e-3;
  c.kernel_set = {1, 3};
  c.optimizer = OptimizerKind::sgd;
  const TrainConfig r = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(r.lr, 1e-3);
  EXPECT_EQ(r.kernel_set, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(r.optimizer, OptimizerKind::sgd);
  const TrainConfig defaults = TrainConfig::from_json("{}");
  EXPECT_EQ(defaults.lr, 5e-4);
  EXPECT_EQ(defaults.batch_size, 16u);
  EXPECT_EQ(defaults.lambda_distill, 0.5);
  EXPECT_EQ(defaults.alpha, 0.4);
  EXPECT_EQ(defaults.n_background, 5u);
  EXPECT_EQ(defaults.embed_dim, 64u);
  EXPECT_THROW(TrainConfig::from_json(R"({"learning_rate": 1})"), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(R"({"kernel_set": [2]})"), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(R"({"lr": "fast"})"), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(R"({"lr": -1})"), ConfigError);
  EXPECT_THROW(TrainConfig::from_json("[1]"), ConfigError);
}

TEST(ModelConfigJson, RoundTrip) {
  ModelConfig m = gradcheck_model_config();
  m.kernel_set = {3, 5};
  const ModelConfig r = ModelConfig::from_json(m.to_json());
  EXPECT_EQ(r.to_json(), m.to_json());
}

TEST(Train, SinglePrecisionRunsAndTracksDoubleRun) {
  const Dataset& d = small_data();
  TrainConfig tc = small_train_config();
  TrainConfig tc32 = tc;
  tc32.dtype = "f32";
  const ModelConfig mc = tc.model_config(small_backbone()), mc32 = tc32.model_config(small_backbone());
  EXPECT_EQ(mc32.dtype, DType::f32);
  FeatureBank bank(d, "synthetic", mc.backbone, mc.backbone_seed);
  CoreNet a(mc), b(mc32);
  const TrainResult ra = train(a, d, bank, tc), rb = train(b, d, bank, tc32);
  ASSERT_EQ(rb.log.size(), ra.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    EXPECT_TRUE(std::isfinite(rb.log[i].total));
    EXPECT_NEAR(rb.log[i].total, ra.log[i].total, 1e-3 * std::max(1.0, ra.log[i].total));
  }
}
