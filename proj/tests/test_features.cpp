#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "corenet/features.h"
#include "corenet/tensor_pack.h"
#include "test_util.h"

using namespace corenet;
using corenet::testing::bit_equal;
using corenet::testing::random_tensor;
using corenet::testing::TempDir;

namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Tensor test_image(std::uint64_t seed, std::size_t size = 32) {
  Rng rng(seed);
  return random_tensor({3, size, size}, rng, 0.0, 1.0);
}

}  // namespace

TEST(TensorPack, EncodeLayout) {
  const Tensor t = Tensor::from({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const auto bytes = encode_tensor(t);
  ASSERT_EQ(bytes.size(), 16u + 2 * 8 + 6 * 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "CORETENS");
  EXPECT_EQ(bytes[8], 1);  // version
  EXPECT_EQ(bytes[9], 1);  // f64
  EXPECT_EQ(bytes[10], 2);
  EXPECT_EQ(bytes[16], 2);  // first extent, little-endian
  EXPECT_EQ(bytes[24], 3);
  EXPECT_TRUE(bit_equal(decode_tensor(bytes, "t"), t));
}

TEST(TensorPack, RoundTripBothDTypes) {
  TempDir dir("pack_rt");
  Rng rng(1);
  const Tensor a = random_tensor({2, 3, 4}, rng);
  const Tensor b = random_tensor({5}, rng).to(DType::f32);
  TensorPack::write(dir.path(), {{"a", a}, {"b", b}});
  const TensorPack pack = TensorPack::load(dir.path());
  EXPECT_EQ(pack.entries().size(), 2u);
  EXPECT_TRUE(bit_equal(pack.get("a"), a));
  const Tensor b2 = pack.get("b");
  EXPECT_EQ(b2.dtype(), DType::f32);
  EXPECT_TRUE(bit_equal(b2, b));
  EXPECT_THROW(pack.get("c"), NotFoundError);
}

TEST(TensorPack, BadMagicIsFormatError) {
  TempDir dir("pack_magic");
  TensorPack::write(dir.path(), {{"a", Tensor::zeros({4})}});
  const fs::path file = dir.path() / TensorPack::load(dir.path()).entries()[0].file;
  auto bytes = read_bytes(file);
  bytes[0] = 'X';
  write_bytes(file, bytes);
  EXPECT_THROW(TensorPack::load(dir.path()), FormatError);
}

TEST(TensorPack, TruncatedPayloadIsCorruption) {
  TempDir dir("pack_trunc");
  TensorPack::write(dir.path(), {{"a", Tensor::zeros({4})}});
  const fs::path file = dir.path() / TensorPack::load(dir.path()).entries()[0].file;
  auto bytes = read_bytes(file);
  bytes.resize(bytes.size() - 3);
  write_bytes(file, bytes);
  try {
    TensorPack::load(dir.path());
    FAIL() << "expected CorruptionError";
  } catch (const CorruptionError& e) {
    EXPECT_NE(std::string(e.what()).find("a"), std::string::npos);
  }
}

TEST(TensorPack, ManifestShapeMismatchIsCorruption) {
  TempDir dir("pack_shape");
  TensorPack::write(dir.path(), {{"a", Tensor::zeros({4})}});
  nlohmann::json j;
  std::ifstream(dir.path() / "manifest.json") >> j;
  j["entries"][0]["shape"] = {2, 3};
  std::ofstream(dir.path() / "manifest.json") << j.dump();
  EXPECT_THROW(TensorPack::load(dir.path()), CorruptionError);
}

TEST(TensorPack, MissingFilesAndBadManifest) {
  TempDir dir("pack_missing");
  EXPECT_THROW(TensorPack::load(dir.path()), NotFoundError);
  TensorPack::write(dir.path(), {{"a", Tensor::zeros({4})}});
  fs::remove(dir.path() / TensorPack::load(dir.path()).entries()[0].file);
  EXPECT_THROW(TensorPack::load(dir.path()), NotFoundError);
  std::ofstream(dir.path() / "manifest.json") << "{not json";
  EXPECT_THROW(TensorPack::load(dir.path()), FormatError);
}

TEST(SyntheticBackbone, ShapesAndDeterminism) {
  const BackboneConfig cfg;
  const Tensor img = test_image(2, 64);
  const FeatureStack a = synthetic_backbone(img, 7, cfg, "x");
  const FeatureStack b = synthetic_backbone(img, 7, cfg, "x");
  EXPECT_EQ(a.patch_tokens.shape(), (Shape{3, 2, 8, 8, 8}));
  EXPECT_EQ(a.class_tokens.shape(), (Shape{3, 2, 8}));
  EXPECT_TRUE(bit_equal(a.patch_tokens, b.patch_tokens));
  EXPECT_TRUE(bit_equal(a.class_tokens, b.class_tokens));
  EXPECT_NO_THROW(a.validate());
  EXPECT_FALSE(bit_equal(a.patch_tokens, synthetic_backbone(img, 8, cfg).patch_tokens));
}

TEST(SyntheticBackbone, PatchTokensAreLocal) {
  const BackboneConfig cfg;
  Tensor img = test_image(3, 64).clone();
  const FeatureStack before = synthetic_backbone(img, 7, cfg);
  // Pixel (1, 1) lies in patch (0, 0) of the 8x8 grid.
  img.set_(1 * 64 + 1, 0.0);
  img.set_(64 * 64 + 1 * 64 + 1, 1.0);
  const FeatureStack after = synthetic_backbone(img, 7, cfg);
  const auto x = before.patch_tokens.to_vector(), y = after.patch_tokens.to_vector();
  bool own_changed = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t p = i % 64;
    if (p == 0) own_changed = own_changed || x[i] != y[i];
    else EXPECT_EQ(x[i], y[i]) << "token " << p << " changed";
  }
  EXPECT_TRUE(own_changed);
}

TEST(SyntheticBackbone, RejectsIndivisibleImage) {
  EXPECT_THROW(synthetic_backbone(test_image(4, 30), 7, BackboneConfig{}), Error);
}

TEST(FeatureStack, ValidateRejectsNonFiniteAndMismatch) {
  FeatureStack s = corenet::testing::random_stack(2, 2, 4, 3, 3, 5);
  s.patch_tokens = s.patch_tokens.clone();
  s.patch_tokens.set_(7, std::nan(""));
  EXPECT_THROW(s.validate(), NumericalError);
  FeatureStack t = corenet::testing::random_stack(2, 2, 4, 3, 3, 6);
  t.class_tokens = Tensor::zeros({2, 3, 4});
  EXPECT_THROW(t.validate(), DimensionError);
}

TEST(FeatureStack, PackRoundTrip) {
  TempDir dir("stack_rt");
  const FeatureStack s = corenet::testing::random_stack(3, 2, 4, 4, 4, 9);
  save_feature_stack(dir.path(), s);
  const FeatureStack r = load_feature_stack(TensorPack::load(dir.path()), "id");
  EXPECT_TRUE(bit_equal(r.patch_tokens, s.patch_tokens));
  EXPECT_TRUE(bit_equal(r.class_tokens, s.class_tokens));
  EXPECT_EQ(r.image_id, "id");
}

TEST(FeatureStack, PackWithTwelveLayersSixHeadsLoads) {
  TempDir dir("stack_vits");
  const FeatureStack s = corenet::testing::random_stack(12, 6, 4, 2, 2, 10);
  save_feature_stack(dir.path(), s.to(DType::f32));
  const FeatureStack r = load_feature_stack(TensorPack::load(dir.path()), "vit");
  EXPECT_EQ(r.layers(), 12u);
  EXPECT_EQ(r.heads(), 6u);
  EXPECT_EQ(r.patch_tokens.dtype(), DType::f32);
}

TEST(ClipAttention, RangeAndEmptyHint) {
  MaskGrid hint(16, 16);
  for (std::size_t y = 4; y < 9; ++y)
    for (std::size_t x = 5; x < 12; ++x) hint.at(y, x) = 1.0;
  const AttentionMap a = synthetic_clip_attention(hint, 1, 0.1, 3);
  EXPECT_GE(a.values.min(), 0.0);
  EXPECT_LE(a.values.max(), 1.0);
  EXPECT_NEAR(a.values.max(), 1.0, 1e-12);
  EXPECT_GT(a.values.at(6, 8), a.values.at(15, 0));
  const AttentionMap e = synthetic_clip_attention(MaskGrid(16, 16), 1, 0.1, 3);
  for (double v : e.values.values) EXPECT_EQ(v, 0.5);
}

TEST(ClipAttention, FromTensorClamps) {
  const AttentionMap a =
      attention_from_tensor(Tensor::from({2, 2}, std::vector<double>{-0.5, 0.25, 1.5, 1.0}), AttentionMap::Source::clip_export);
  EXPECT_EQ(a.values.values, (std::vector<double>{0.0, 0.25, 1.0, 1.0}));
  EXPECT_EQ(a.source, AttentionMap::Source::clip_export);
}

TEST(SyntheticBackbone, ConfiguredShape) {
  BackboneConfig cfg;
  cfg.grid_h = cfg.grid_w = 4;
  const FeatureStack s = synthetic_backbone(test_image(11, 32), 1, cfg);
  EXPECT_EQ(s.patch_tokens.shape(), (Shape{3, 2, 8, 4, 4}));
}

TEST(ClipAttention, NoBlurNoNoiseEqualsHint) {
  Rng rng(12);
  MaskGrid hint = corenet::testing::random_mask(8, 8, 0.3, rng);
  hint.at(0, 0) = 1.0;
  EXPECT_EQ(synthetic_clip_attention(hint, 0, 0.0, 1).values, hint);
}

TEST(ClipAttention, SinglePixelBlurSpreadsOverNeighborhood) {
  MaskGrid hint(7, 7);
  hint.at(3, 4) = 1.0;
  const Grid2D a = synthetic_clip_attention(hint, 1, 0.0, 1).values;
  EXPECT_EQ(a.at(3, 4), 1.0);
  for (std::size_t y = 0; y < 7; ++y)
    for (std::size_t x = 0; x < 7; ++x) {
      const bool near = (y >= 2 && y <= 4 && x >= 3 && x <= 5);
      if (near) EXPECT_GT(a.at(y, x), 0.0);
      else EXPECT_EQ(a.at(y, x), 0.0);
      if (near && !(y == 3 && x == 4)) EXPECT_LT(a.at(y, x), 1.0);
    }
}
