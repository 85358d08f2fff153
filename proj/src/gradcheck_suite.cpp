#include "corenet/gradcheck_suite.h"

#include "corenet/layers.h"
#include "corenet/rng.h"
#include "corenet/train.h"

namespace corenet {

namespace {

constexpr double kOpTolerance = 1e-6;
constexpr double kPipelineTolerance = 1e-4;

Tensor random_leaf(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  Tensor t = Tensor::from(shape, std::move(v));
  t.set_requires_grad(true);
  return t;
}

/// Random-weighted sum so every output entry carries a distinct gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  return ops::sum(ops::mul(y, Tensor::from(y.shape(), std::move(w), y.dtype())));
}

GradCheckCase check(const std::string& name, const std::vector<Tensor>& inputs,
                    const std::function<Tensor()>& fn) {
  GradCheckCase c;
  c.name = name;
  c.tolerance = kOpTolerance;
  c.report = finite_diff_check([&] { return probe(fn(), 99); }, inputs);
  return c;
}

}  // namespace

ModelConfig gradcheck_model_config() {
  ModelConfig m;
  m.backbone = {2, 2, 4, 4, 4};
  m.dim = 6;
  m.heads = 2;
  m.norm_groups = 2;
  m.n_background = 3;
  m.embed_dim = 4;
  m.decoder_heads = 2;
  m.decoder_groups = 2;
  m.init_std = 0.3;
  m.dtype = DType::f64;
  m.seed = 11;
  return m;
}

std::vector<GradCheckCase> run_gradcheck_suite(bool full) {
  std::vector<GradCheckCase> cases;
  Rng rng(2024);

  {
    Tensor a = random_leaf({2, 3, 4}, rng), b = random_leaf({3, 1}, rng);
    cases.push_back(check("add_broadcast", {a, b}, [&] { return ops::add(a, b); }));
    cases.push_back(check("sub_broadcast", {a, b}, [&] { return ops::sub(a, b); }));
    cases.push_back(check("mul_broadcast", {a, b}, [&] { return ops::mul(a, b); }));
    cases.push_back(check("scale", {a}, [&] { return ops::add_scalar(ops::scale(a, -1.7), 0.3); }));
    cases.push_back(check("sigmoid", {a}, [&] { return ops::sigmoid(ops::scale(a, 3.0)); }));
    cases.push_back(check("gelu", {a}, [&] { return ops::gelu(ops::scale(a, 2.0)); }));
  }
  {
    // Entries kept away from the kink at 0.
    Tensor a = random_leaf({3, 5}, rng, 0.1, 1.0);
    Tensor sign = Tensor::from({3, 5}, std::vector<double>{1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1});
    cases.push_back(check("relu", {a}, [&] { return ops::relu(ops::mul(a, sign)); }));
  }
  {
    Tensor a = random_leaf({2, 3, 4}, rng), b = random_leaf({4, 5}, rng);
    cases.push_back(check("matmul_broadcast", {a, b}, [&] { return ops::matmul(a, b); }));
  }
  {
    Tensor a = random_leaf({2, 3, 4}, rng), b = random_leaf({2, 2, 4}, rng);
    cases.push_back(check("reshape_permute", {a}, [&] {
      return ops::permute(ops::reshape(a, {3, 2, 4}), {2, 0, 1});
    }));
    cases.push_back(check("concat_slice", {a, b}, [&] {
      const std::vector<Tensor> parts{a, b};
      return ops::slice(ops::concat(parts, 1), 1, 1, 4);
    }));
    cases.push_back(check("expand", {b}, [&] { return ops::expand(ops::slice(b, 1, 0, 1), {2, 3, 4}); }));
    cases.push_back(check("sum_mean_axis", {a}, [&] { return ops::add(ops::sum(a, 1), ops::mean(a, 1, true)); }));
    cases.push_back(check("softmax", {a}, [&] { return ops::softmax(ops::scale(a, 2.0), 2); }));
    cases.push_back(check("log_softmax", {a}, [&] { return ops::log_softmax(ops::scale(a, 2.0), 1); }));
  }
  for (std::size_t k : {1, 3, 5, 7}) {
    Tensor x = random_leaf({2, 5, 4}, rng), w = random_leaf({3, 2, k, k}, rng), bias = random_leaf({3}, rng);
    cases.push_back(check("conv2d_k" + std::to_string(k), {x, w, bias}, [&] { return ops::conv2d(x, w, bias); }));
  }
  {
    Tensor x = random_leaf({3, 4, 2}, rng), gamma = random_leaf({4}, rng, 0.5, 1.5), beta = random_leaf({4}, rng);
    cases.push_back(check("group_norm", {x, gamma, beta}, [&] { return ops::group_norm(x, 2, gamma, beta); }));
  }
  {
    Tensor x = random_leaf({2, 3, 4}, rng);
    cases.push_back(check("bilinear_up", {x}, [&] { return ops::bilinear_resize(x, 7, 9); }));
    cases.push_back(check("bilinear_down", {x}, [&] { return ops::bilinear_resize(x, 2, 3); }));
    Tensor y = random_leaf({2, 4, 4, 3}, rng);
    cases.push_back(check("window_avg_pool", {y}, [&] { return ops::window_avg_pool(y, 2, 2); }));
  }
  {
    ParameterSet params(DType::f64);
    Rng init(5);
    nn::MultiHeadAttention mha(params, "mha", 8, 2, init, 0.5);
    nn::TokenGroupNorm norm(params, "norm", 8, 2, init);
    Tensor q = random_leaf({2, 3, 8}, rng), kv = random_leaf({2, 5, 8}, rng), kb = random_leaf({5, 8}, rng);
    std::vector<Tensor> inputs{q, kv, kb};
    for (const Tensor& t : params.tensors()) inputs.push_back(t);
    cases.push_back(check("attention_layer", inputs, [&] { return norm(ops::add(mha(q, kv, kb), q)); }));
  }

  if (full) {
    const ModelConfig mc = gradcheck_model_config();
    CoreNet model(mc);
    const Dataset data = gen_synthetic_dataset(3, 4, 2, 32);
    FeatureBank bank(data, "synthetic", mc.backbone, mc.backbone_seed);
    const ImageRecord& support = data.images[0];
    const ImageRecord& query = data.images[1];
    const FeatureStack& fs = bank.get(support.id);
    const FeatureStack& fq = bank.get(query.id);
    const pseudomask::PseudoMaskPair pseudo =
        pseudomask::make_pseudo_masks(fs, fq, support.image, query.image, pseudomask::PseudoMaskOptions{});
    // The teacher side of the distillation loss carries a stop-gradient, so
    // it is frozen at the base point for the finite differences to agree.
    std::vector<Tensor> teachers;
    {
      NoGradGuard guard;
      teachers = cgt::distill_teachers(
          model.forward(fs, fq, pseudo.support.tokens, query.attention, 32, 32, 17).layer_maps);
    }
    auto loss_fn = [&] {
      const ForwardResult r = model.forward(fs, fq, pseudo.support.tokens, query.attention, 32, 32, 17);
      return ops::add(segmentation_loss(r.prediction.logits, pseudo.query.image),
                      ops::scale(cgt::distill_against(r.layer_maps, teachers), 0.5));
    };
    std::vector<std::string> labels;
    for (const Parameter& p : model.params().items()) labels.push_back(p.name);
    GradCheckCase c;
    c.name = "full_pipeline";
    c.tolerance = kPipelineTolerance;
    c.report = finite_diff_check(loss_fn, model.params().tensors(), 1e-4, labels);
    cases.push_back(c);
  }
  return cases;
}

}  // namespace corenet
