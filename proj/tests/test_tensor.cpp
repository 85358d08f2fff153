#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "corenet/gradcheck.h"
#include "corenet/gradcheck_suite.h"
#include "corenet/ops.h"
#include "corenet/optim.h"
#include "corenet/params.h"
#include "test_util.h"

using namespace corenet;
using corenet::testing::random_tensor;

namespace {

// Plain triple loop, batch extents of `a` only (b is 2-D).
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  const auto x = a.to_vector(), y = b.to_vector();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t bt = 0; bt < batch; ++bt)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < k; ++t) s += x[(bt * m + i) * k + t] * y[t * n + j];
        out[(bt * m + i) * n + j] = s;
      }
  return out;
}

// Zero-padded sliding window, cross-correlation convention.
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  const long cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0), k = w.dim(2), r = k / 2;
  const auto xv = x.to_vector(), wv = w.to_vector(), bv = b.to_vector();
  std::vector<double> out(cout * h * wd, 0.0);
  for (long o = 0; o < cout; ++o)
    for (long y = 0; y < h; ++y)
      for (long xx = 0; xx < wd; ++xx) {
        double s = bv[o];
        for (long c = 0; c < cin; ++c)
          for (long ky = 0; ky < k; ++ky)
            for (long kx = 0; kx < k; ++kx) {
              const long sy = y + ky - r, sx = xx + kx - r;
              if (sy < 0 || sx < 0 || sy >= h || sx >= wd) continue;
              s += xv[(c * h + sy) * wd + sx] * wv[((o * cin + c) * k + ky) * k + kx];
            }
        out[(o * h + y) * wd + xx] = s;
      }
  return out;
}

}  // namespace

TEST(Tensor, FactoryShapesAndValues) {
  const Tensor z = Tensor::zeros({2, 3});
  EXPECT_EQ(z.numel(), 6u);
  EXPECT_EQ(z.at(5), 0.0);
  const Tensor f = Tensor::full({4}, 2.5, DType::f32);
  EXPECT_EQ(f.dtype(), DType::f32);
  EXPECT_EQ(f.at(3), 2.5);
  EXPECT_THROW(Tensor::from({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(3.0).item(), 3.0);
}

TEST(Tensor, DTypeMismatchIsContractError) {
  const Tensor t = Tensor::zeros({2}, DType::f64);
  EXPECT_THROW(t.data<float>(), ContractError);
}

TEST(Ops, MatmulMatchesTripleLoop) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({3, 4, 7}, rng), b = random_tensor({7, 5}, rng);
    const auto got = ops::matmul(a, b).to_vector();
    const auto want = matmul_oracle(a, b);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Ops, MatmulShapeMismatch) {
  EXPECT_THROW(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), DimensionError);
}

TEST(Ops, MatmulFloat32CloseToFloat64) {
  Rng rng(2);
  const Tensor a = random_tensor({6, 9}, rng), b = random_tensor({9, 4}, rng);
  const auto d = ops::matmul(a, b).to_vector();
  const auto f = ops::matmul(a.to(DType::f32), b.to(DType::f32));
  EXPECT_EQ(f.dtype(), DType::f32);
  const auto fv = f.to_vector();
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(fv[i], d[i], 1e-5);
}

TEST(Ops, Conv2dMatchesSlidingWindow) {
  Rng rng(3);
  for (std::size_t k : {1, 3, 5, 7}) {
    const Tensor x = random_tensor({3, 6, 5}, rng), w = random_tensor({4, 3, k, k}, rng), b = random_tensor({4}, rng);
    const auto got = ops::conv2d(x, w, b).to_vector();
    const auto want = conv_oracle(x, w, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12) << "k=" << k;
  }
}

TEST(Ops, Conv2dRejectsEvenKernel) {
  EXPECT_THROW(ops::conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 2, 2})), Error);
}

TEST(Ops, BroadcastAdd) {
  const Tensor a = Tensor::from({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3}, std::vector<double>{10, 20, 30});
  EXPECT_EQ(ops::add(a, b).to_vector(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_THROW(ops::add(a, Tensor::zeros({2})), DimensionError);
}

TEST(Ops, SoftmaxMatchesDirectFormula) {
  Rng rng(4);
  const Tensor a = random_tensor({3, 5}, rng, -4, 4);
  const auto s = ops::softmax(a, 1).to_vector();
  const auto ls = ops::log_softmax(a, 1).to_vector();
  const auto v = a.to_vector();
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(v[r * 5 + c]);
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_NEAR(s[r * 5 + c], std::exp(v[r * 5 + c]) / z, 1e-14);
      EXPECT_NEAR(ls[r * 5 + c], v[r * 5 + c] - std::log(z), 1e-12);
    }
  }
}

TEST(Ops, SoftmaxLargeInputsStayFinite) {
  const Tensor a = Tensor::from({3}, std::vector<double>{1000, 1001, 999});
  for (double v : ops::softmax(a, 0).to_vector()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Ops, GeluAtKnownPoints) {
  const Tensor a = Tensor::from({3}, std::vector<double>{0.0, 1.0, -1.0});
  const auto g = ops::gelu(a).to_vector();
  EXPECT_EQ(g[0], 0.0);
  EXPECT_NEAR(g[1], 0.8413447460685429, 1e-14);
  EXPECT_NEAR(g[2], -0.15865525393145707, 1e-14);
}

TEST(Ops, ElementwiseTableMatchesNamedOps) {
  Rng rng(5);
  const Tensor a = random_tensor({4}, rng), b = random_tensor({4}, rng);
  EXPECT_EQ(ops::elementwise(ops::Elementwise::add, a, &b).to_vector(), ops::add(a, b).to_vector());
  EXPECT_EQ(ops::elementwise(ops::Elementwise::hadamard, a, &b).to_vector(), ops::mul(a, b).to_vector());
  EXPECT_EQ(ops::elementwise(ops::Elementwise::scale, a, nullptr, 3.0).to_vector(), ops::scale(a, 3.0).to_vector());
  EXPECT_EQ(ops::elementwise(ops::Elementwise::relu, a).to_vector(), ops::relu(a).to_vector());
}

TEST(Ops, BilinearIdentityConstantAndHandCase) {
  Rng rng(6);
  const Tensor x = random_tensor({2, 3, 4}, rng);
  EXPECT_EQ(ops::bilinear_resize(x, 3, 4).to_vector(), x.to_vector());
  for (double v : ops::bilinear_resize(Tensor::full({1, 3, 3}, 0.7), 7, 5).to_vector()) EXPECT_NEAR(v, 0.7, 1e-15);
  // align_corners=false: source coordinate (i + 0.5) / 2 - 0.5, clamped.
  const auto up = ops::bilinear_resize(Tensor::from({1, 1, 2}, std::vector<double>{0, 1}), 1, 4).to_vector();
  EXPECT_EQ(up, (std::vector<double>{0.0, 0.25, 0.75, 1.0}));
}

TEST(Ops, GroupNormStandardizesEachGroup) {
  Rng rng(7);
  const Tensor x = random_tensor({2, 4, 6}, rng, -3, 5);
  const auto y = ops::group_norm(x, 2, Tensor::full({4}, 1.0), Tensor::zeros({4})).to_vector();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t g = 0; g < 2; ++g) {
      double m = 0.0, v = 0.0;
      for (std::size_t i = 0; i < 12; ++i) m += y[b * 24 + g * 12 + i];
      m /= 12.0;
      for (std::size_t i = 0; i < 12; ++i) v += std::pow(y[b * 24 + g * 12 + i] - m, 2);
      EXPECT_NEAR(m, 0.0, 1e-12);
      EXPECT_NEAR(v / 12.0, 1.0, 1e-3);
    }
  EXPECT_THROW(ops::group_norm(x, 3, Tensor::full({4}, 1.0), Tensor::zeros({4})), Error);
}

TEST(Ops, WindowAvgPoolHandCase) {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  const auto p = ops::window_avg_pool(Tensor::from({1, 4, 4, 1}, v), 2, 2).to_vector();
  EXPECT_EQ(p, (std::vector<double>{2.5, 4.5, 10.5, 12.5}));
}

TEST(Ops, ReshapePermuteConcatSlice) {
  const Tensor a = Tensor::from({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  EXPECT_EQ(ops::permute(a, {1, 0}).to_vector(), (std::vector<double>{0, 3, 1, 4, 2, 5}));
  EXPECT_THROW(ops::reshape(a, {4}), DimensionError);
  const std::vector<Tensor> parts{a, a};
  const Tensor c = ops::concat(parts, 0);
  EXPECT_EQ(c.shape(), (Shape{4, 3}));
  EXPECT_EQ(ops::slice(c, 1, 1, 2).to_vector(), (std::vector<double>{1, 4, 1, 4}));
  EXPECT_EQ(ops::sum(a, 0).to_vector(), (std::vector<double>{3, 5, 7}));
  EXPECT_EQ(ops::mean(a, 1).to_vector(), (std::vector<double>{1, 4}));
}

TEST(Autodiff, SquareGradientAndAccumulation) {
  Tensor x = Tensor::from({3}, std::vector<double>{1, -2, 0.5});
  x.set_requires_grad(true);
  backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{2, -4, 1}));
  backward(ops::sum(x));
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{3, -3, 2}));
  x.zero_grad();
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{0, 0, 0}));
}

TEST(Autodiff, BroadcastGradientSumsOverExpandedAxes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  backward(ops::sum(ops::add(a, b)));
  EXPECT_EQ(b.grad_vector(), (std::vector<double>{2, 2, 2}));
}

TEST(Autodiff, DetachAndNoGradStopGradients) {
  Tensor x = Tensor::from({2}, std::vector<double>{1, 2});
  x.set_requires_grad(true);
  backward(ops::sum(ops::add(ops::mul(x, x.detach()), x)));
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{2, 3}));
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    EXPECT_FALSE(ops::mul(x, x).requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
}

TEST(Autodiff, BackwardNeedsScalar) {
  Tensor x = Tensor::zeros({2});
  x.set_requires_grad(true);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), ContractError);
}

TEST(Autodiff, InteriorMutationRejected) {
  Tensor x = Tensor::zeros({2});
  x.set_requires_grad(true);
  Tensor y = ops::scale(x, 2.0);
  EXPECT_THROW(y.mutable_data<double>(), ContractError);
}

TEST(Rng, DeterministicAndDistinctStreams) {
  Rng a(9), b(9), c(Rng::mix(9, 1));
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_NE(Rng(9).next(), c.next());
  EXPECT_NE(Rng::mix(9, 1), Rng::mix(9, 2));
}

TEST(Rng, TruncatedNormalBoundsAndSampling) {
  Rng rng(10);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.truncated_normal(0.02);
    ASSERT_LE(std::abs(v), 0.04);
  }
  const auto idx = rng.sample_without_replacement(50, 20);
  EXPECT_EQ(idx.size(), 20u);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 20u);
  for (std::size_t i : idx) EXPECT_LT(i, 50u);
}

TEST(Params, RegistryAndInit) {
  ParameterSet params(DType::f64);
  Rng rng(11);
  const Tensor w = params.add("w", {3, 4}, Init::trunc_normal(0.02), rng);
  params.add("b", {4}, Init::zeros(), rng);
  EXPECT_THROW(params.add("w", {1}, Init::zeros(), rng), ConfigError);
  EXPECT_EQ(params.scalar_count(), 16u);
  EXPECT_TRUE(w.requires_grad());
  for (double v : w.to_vector()) EXPECT_LE(std::abs(v), 0.04);
  for (double v : params.get("b").to_vector()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(params.get("missing"), NotFoundError);
}

TEST(Optim, SgdAndAdamFirstStep) {
  Rng rng(12);
  ParameterSet params(DType::f64);
  Tensor p = params.add("p", {2}, Init::constant(1.0), rng);
  params.zero_grad();
  p.mutable_grad<double>()[0] = 0.5;
  p.mutable_grad<double>()[1] = -2.0;
  Optimizer sgd(OptimizerKind::sgd, 0.1);
  sgd.step(params);
  EXPECT_NEAR(p.at(0), 0.95, 1e-15);
  EXPECT_NEAR(p.at(1), 1.2, 1e-15);

  ParameterSet params2(DType::f64);
  Tensor q = params2.add("q", {2}, Init::constant(1.0), rng);
  params2.zero_grad();
  q.mutable_grad<double>()[0] = 0.5;
  q.mutable_grad<double>()[1] = -2.0;
  Optimizer adam(OptimizerKind::adam, 0.01);
  adam.step(params2);
  // Bias-corrected first step moves each entry by lr * g / (|g| + eps').
  EXPECT_NEAR(q.at(0), 0.99, 1e-7);
  EXPECT_NEAR(q.at(1), 1.01, 1e-7);
  EXPECT_EQ(adam.steps(), 1u);
  EXPECT_EQ(parse_optimizer("adam"), OptimizerKind::adam);
  EXPECT_THROW(parse_optimizer("rmsprop"), ConfigError);
}

TEST(GradCheck, DetectsImpureFunction) {
  Tensor x = Tensor::from({1}, std::vector<double>{1.0});
  x.set_requires_grad(true);
  int calls = 0;
  EXPECT_THROW(finite_diff_check([&] { return ops::scale(ops::sum(x), 1.0 + 1e-3 * ++calls); }, {x}),
               ReproducibilityError);
}

TEST(GradCheck, OpSuitePasses) {
  for (const GradCheckCase& c : run_gradcheck_suite(false)) {
    EXPECT_TRUE(c.passed()) << c.name << " max rel error " << c.report.max_rel_error;
    EXPECT_GT(c.report.entries_checked, 0u) << c.name;
  }
}

TEST(Ops, SmallHandExamples) {
  const Tensor eye = Tensor::from({2, 2}, std::vector<double>{1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(ops::matmul(eye, m).to_vector(), m.to_vector());
  EXPECT_EQ(ops::matmul(Tensor::from({1, 2}, std::vector<double>{1, 0}), Tensor::from({2, 1}, std::vector<double>{0, 1}))
                .to_vector(),
            (std::vector<double>{0}));
  EXPECT_EQ(ops::add(Tensor::from({2}, std::vector<double>{1, 2}), Tensor::from({2}, std::vector<double>{3, 4})).to_vector(),
            (std::vector<double>{4, 6}));
  EXPECT_EQ(ops::mul(m, Tensor::full({2, 2}, 1.0)).to_vector(), m.to_vector());
  EXPECT_EQ(ops::sigmoid(Tensor::zeros({1})).item(), 0.5);
  EXPECT_EQ(ops::softmax(Tensor::zeros({2}), 0).to_vector(), (std::vector<double>{0.5, 0.5}));
  const auto s = ops::softmax(Tensor::from({2}, std::vector<double>{std::log(3.0), 0.0}), 0).to_vector();
  EXPECT_NEAR(s[0], 0.75, 1e-15);
  EXPECT_NEAR(s[1], 0.25, 1e-15);
}

TEST(Ops, SoftmaxShiftInvariance) {
  Rng rng(20);
  const Tensor a = random_tensor({4, 6}, rng, -5, 5);
  const auto x = ops::softmax(a, 1).to_vector(), y = ops::softmax(ops::add_scalar(a, 37.5), 1).to_vector();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-12);
}

TEST(Ops, Conv2dIdentityAndBiasOnly) {
  Rng rng(21);
  const Tensor x = random_tensor({1, 4, 5}, rng);
  EXPECT_EQ(ops::conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0), Tensor::zeros({1})).to_vector(), x.to_vector());
  for (double v : ops::conv2d(x, Tensor::zeros({2, 1, 3, 3}), Tensor::full({2}, 1.5)).to_vector()) EXPECT_EQ(v, 1.5);
}

TEST(Ops, GroupNormDegenerateCases) {
  for (double v : ops::group_norm(Tensor::full({1, 4, 3}, 2.0), 2, Tensor::full({4}, 1.0), Tensor::zeros({4})).to_vector())
    EXPECT_EQ(v, 0.0);
  Rng rng(22);
  for (double v : ops::group_norm(random_tensor({1, 4, 3}, rng), 2, Tensor::zeros({4}), Tensor::full({4}, 5.0)).to_vector())
    EXPECT_EQ(v, 5.0);
}

TEST(Ops, BilinearTwoByTwoToTwoByFour) {
  const auto up = ops::bilinear_resize(Tensor::from({1, 2, 2}, std::vector<double>{0, 1, 0, 1}), 2, 4).to_vector();
  EXPECT_EQ(up, (std::vector<double>{0, 0.25, 0.75, 1, 0, 0.25, 0.75, 1}));
}

TEST(Autodiff, SumAndSquareExamples) {
  Tensor x = Tensor::zeros({3});
  x.set_requires_grad(true);
  backward(ops::sum(x));
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{1, 1, 1}));
  Tensor y = Tensor::from({2}, std::vector<double>{1, 2});
  y.set_requires_grad(true);
  backward(ops::sum(ops::mul(y, y)));
  EXPECT_EQ(y.grad_vector(), (std::vector<double>{2, 4}));
}

TEST(GradCheck, SumOfSquaresAndConvSigmoid) {
  Rng rng(23);
  Tensor x = random_tensor({5}, rng);
  x.set_requires_grad(true);
  EXPECT_LT(finite_diff_check([&] { return ops::sum(ops::mul(x, x)); }, {x}).max_rel_error, 1e-9);
  Tensor img = random_tensor({2, 4, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  for (Tensor* t : {&img, &w, &b}) t->set_requires_grad(true);
  EXPECT_LT(finite_diff_check([&] { return ops::sum(ops::sigmoid(ops::conv2d(img, w, b))); }, {img, w, b}).max_rel_error,
            1e-6);
}

TEST(Optim, ReferenceSteps) {
  Rng rng(24);
  ParameterSet params(DType::f64);
  Tensor p = params.add("p", {1}, Init::constant(1.0), rng);
  Tensor z = params.add("z", {1}, Init::constant(1.0), rng);
  params.zero_grad();
  p.mutable_grad<double>()[0] = 2.0;
  Optimizer(OptimizerKind::sgd, 0.1).step(params);
  EXPECT_NEAR(p.at(0), 0.8, 1e-15);
  EXPECT_EQ(z.at(0), 1.0);

  ParameterSet ap(DType::f64);
  Tensor q = ap.add("q", {1}, Init::constant(1.0), rng);
  Tensor zq = ap.add("z", {1}, Init::constant(1.0), rng);
  ap.zero_grad();
  q.mutable_grad<double>()[0] = 1.0;
  Optimizer(OptimizerKind::adam, 5e-4).step(ap);
  EXPECT_NEAR(q.at(0) - 1.0, -5e-4, 1e-6);
  EXPECT_EQ(zq.at(0), 1.0);
}

TEST(Optim, MissingGradientIsContractError) {
  Rng rng(25);
  ParameterSet params(DType::f64);
  params.add("p", {1}, Init::constant(1.0), rng);
  Optimizer sgd(OptimizerKind::sgd, 0.1);
  EXPECT_THROW(sgd.step(params), ContractError);
}
