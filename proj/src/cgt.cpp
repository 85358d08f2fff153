#include "corenet/cgt.h"

#include <algorithm>
#include <cmath>

namespace corenet::cgt {

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

Tensor flatten_tokens(const FeatureStack& stack) {
  stack.validate();
  return ops::reshape(stack.patch_tokens.detach(),
                      {stack.layers() * stack.heads(), stack.head_dim(), stack.grid_h() * stack.grid_w()});
}

namespace {

/// Token-major copy of flattened tokens: out[mk][p] is a d-vector.
std::vector<std::vector<std::vector<double>>> token_vectors(const Tensor& flat) {
  const std::size_t mk = flat.dim(0), d = flat.dim(1), p = flat.dim(2);
  const std::vector<double> v = flat.to_vector();
  std::vector<std::vector<std::vector<double>>> out(mk, std::vector<std::vector<double>>(p, std::vector<double>(d)));
  for (std::size_t c = 0; c < mk; ++c) {
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < p; ++i) out[c][i][j] = v[(c * d + j) * p + i];
    }
  }
  return out;
}

void check_compatible(const FeatureStack& a, const FeatureStack& b) {
  if (a.layers() != b.layers() || a.heads() != b.heads() || a.head_dim() != b.head_dim()) {
    throw DimensionError("feature stacks disagree on (K, M, d): " + shape_str(a.patch_tokens.shape()) + " vs " +
                         shape_str(b.patch_tokens.shape()));
  }
}

}  // namespace

Tensor local_correlation(const FeatureStack& query, const FeatureStack& support) {
  check_compatible(query, support);
  const auto q = token_vectors(flatten_tokens(query));
  const auto s = token_vectors(flatten_tokens(support));
  const std::size_t mk = q.size(), pq = q[0].size(), ps = s[0].size();
  std::vector<double> out(mk * pq * ps);
  for (std::size_t c = 0; c < mk; ++c) {
    for (std::size_t i = 0; i < pq; ++i) {
      for (std::size_t j = 0; j < ps; ++j) out[(c * pq + i) * ps + j] = cosine(q[c][i], s[c][j]);
    }
  }
  return Tensor::from({mk, pq, ps}, std::move(out), query.patch_tokens.dtype());
}

std::vector<MaskGrid> voronoi_assign(const MaskGrid& background, std::span<const Seed> seeds) {
  std::vector<MaskGrid> regions(seeds.size(), MaskGrid(background.height, background.width));
  if (seeds.empty()) return regions;
  for (std::size_t y = 0; y < background.height; ++y) {
    for (std::size_t x = 0; x < background.width; ++x) {
      if (background.at(y, x) == 0.0) continue;
      std::size_t best = 0;
      long best_d2 = -1;
      for (std::size_t n = 0; n < seeds.size(); ++n) {
        const long dy = static_cast<long>(y) - static_cast<long>(seeds[n].y);
        const long dx = static_cast<long>(x) - static_cast<long>(seeds[n].x);
        const long d2 = dy * dy + dx * dx;
        if (best_d2 < 0 || d2 < best_d2) {
          best = n;
          best_d2 = d2;
        }
      }
      regions[best].at(y, x) = 1.0;
    }
  }
  return regions;
}

std::vector<MaskGrid> voronoi_partition(const MaskGrid& background, std::size_t regions, std::uint64_t seed) {
  if (regions < 1) throw ConfigError("voronoi_partition: need at least one region");
  if (!background.is_binary()) throw ContractError("voronoi_partition: background mask must be binary");
  std::vector<Seed> candidates;
  for (std::size_t y = 0; y < background.height; ++y) {
    for (std::size_t x = 0; x < background.width; ++x) {
      if (background.at(y, x) != 0.0) candidates.push_back({y, x});
    }
  }
  Rng rng(seed);
  std::vector<Seed> seeds;
  for (std::size_t idx : rng.sample_without_replacement(candidates.size(), regions)) seeds.push_back(candidates[idx]);
  std::vector<MaskGrid> out = voronoi_assign(background, seeds);
  out.resize(regions, MaskGrid(background.height, background.width));
  return out;
}

Tensor masked_avg_pool(const Tensor& tokens, const MaskGrid& mask) {
  if (tokens.rank() != 3 || tokens.dim(2) != mask.size()) {
    throw DimensionError("masked_avg_pool: tokens " + shape_str(tokens.shape()) + " vs mask " +
                         std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  const std::size_t mk = tokens.dim(0), d = tokens.dim(1), p = tokens.dim(2);
  const std::vector<double> v = tokens.to_vector();
  double area = 0.0;
  for (double m : mask.values) area += m;
  std::vector<double> out(mk * d, 0.0);
  if (area > 0.0) {
    for (std::size_t r = 0; r < mk * d; ++r) {
      double acc = 0.0;
      for (std::size_t i = 0; i < p; ++i) acc += v[r * p + i] * mask.values[i];
      out[r] = acc / area;
    }
  }
  return Tensor::from({mk, d}, std::move(out), tokens.dtype());
}

std::pair<Tensor, Tensor> global_correlation(const Tensor& query_tokens, const Tensor& fg_prototype,
                                             std::span<const Tensor> bg_prototypes) {
  if (query_tokens.rank() != 3) throw DimensionError("global_correlation: query tokens must be [MK, d, P]");
  const std::size_t mk = query_tokens.dim(0), d = query_tokens.dim(1), pq = query_tokens.dim(2);
  const Shape proto_shape{mk, d};
  if (bg_prototypes.empty()) throw DimensionError("global_correlation: no background prototypes");
  if (fg_prototype.shape() != proto_shape) {
    throw DimensionError("global_correlation: foreground prototype " + shape_str(fg_prototype.shape()) +
                         " expected " + shape_str(proto_shape));
  }
  for (const Tensor& p : bg_prototypes) {
    if (p.shape() != proto_shape) {
      throw DimensionError("global_correlation: background prototype " + shape_str(p.shape()) + " expected " +
                           shape_str(proto_shape));
    }
  }
  const std::size_t n = bg_prototypes.size();
  const auto q = token_vectors(query_tokens);
  auto proto_rows = [&](const Tensor& t) {
    const std::vector<double> v = t.to_vector();
    std::vector<std::vector<double>> rows(mk, std::vector<double>(d));
    for (std::size_t c = 0; c < mk; ++c) std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(c * d), d, rows[c].begin());
    return rows;
  };
  const auto pf = proto_rows(fg_prototype);
  std::vector<std::vector<std::vector<double>>> pb;
  for (const Tensor& p : bg_prototypes) pb.push_back(proto_rows(p));

  std::vector<double> fg(mk * pq), bg(mk * pq * n);
  for (std::size_t c = 0; c < mk; ++c) {
    for (std::size_t i = 0; i < pq; ++i) {
      fg[c * pq + i] = cosine(q[c][i], pf[c]);
      for (std::size_t b = 0; b < n; ++b) bg[(c * pq + i) * n + b] = cosine(q[c][i], pb[b][c]);
    }
  }
  return {Tensor::from({mk, pq, 1}, std::move(fg), query_tokens.dtype()),
          Tensor::from({mk, pq, n}, std::move(bg), query_tokens.dtype())};
}

CorrelationVolume build_correlation(const FeatureStack& query, const FeatureStack& support,
                                    const MaskGrid& support_mask, std::size_t n_background,
                                    std::uint64_t voronoi_seed) {
  check_compatible(query, support);
  if (support_mask.height != support.grid_h() || support_mask.width != support.grid_w()) {
    throw DimensionError("support mask " + std::to_string(support_mask.height) + "x" +
                         std::to_string(support_mask.width) + " does not match the support token grid");
  }
  CorrelationVolume vol;
  vol.local = local_correlation(query, support);
  const Tensor fs = flatten_tokens(support);
  const Tensor fq = flatten_tokens(query);
  const Tensor pf = masked_avg_pool(fs, support_mask);
  std::vector<Tensor> pb;
  for (const MaskGrid& region : voronoi_partition(complement(support_mask), n_background, voronoi_seed)) {
    pb.push_back(masked_avg_pool(fs, region));
  }
  auto [fg, bg] = global_correlation(fq, pf, pb);
  vol.global_fg = fg.to(query.patch_tokens.dtype());
  vol.global_bg = bg.to(query.patch_tokens.dtype());
  return vol;
}

Tensor correlation_tokens_input(const CorrelationVolume& volume) {
  const std::vector<Tensor> parts{volume.global_fg, volume.global_bg, volume.local};
  return ops::permute(ops::concat(parts, 2), {1, 2, 0});
}

namespace {

/// Channel- and query-averaged map of the local slice [Pq, s, C] -> [gh, gw].
Tensor local_map(const Tensor& local, std::size_t gh, std::size_t gw) {
  return ops::reshape(ops::mean(ops::mean(local, 2), 0), {gh, gw});
}

/// Window-averages a binary/soft grid by (fh, fw).
Grid2D pool_grid(const Grid2D& g, std::size_t fh, std::size_t fw) {
  Grid2D out(g.height / fh, g.width / fw);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      double acc = 0.0;
      for (std::size_t dy = 0; dy < fh; ++dy) {
        for (std::size_t dx = 0; dx < fw; ++dx) acc += g.at(y * fh + dy, x * fw + dx);
      }
      out.at(y, x) = acc / static_cast<double>(fh * fw);
    }
  }
  return out;
}

}  // namespace

CorrelationTransformer::CorrelationTransformer(ParameterSet& params, const std::string& prefix,
                                               const TransformerConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  if (cfg.layers < 1) throw ConfigError("correlation transformer needs at least one layer");
  if (cfg.n_background < 1) throw ConfigError("correlation transformer needs at least one background region");
  std::size_t gh = cfg.support_h, gw = cfg.support_w;
  for (std::size_t l = 0; l + 1 < cfg.layers; ++l) {
    if (gh % 2 != 0 || gw % 2 != 0) {
      throw ConfigError("support grid " + std::to_string(cfg.support_h) + "x" + std::to_string(cfg.support_w) +
                        " cannot be halved at pooling stage " + std::to_string(l + 1));
    }
    gh /= 2;
    gw /= 2;
  }
  if (cfg.layers > 1 && gh * gw < 2) {
    throw ConfigError("support grid too small for " + std::to_string(cfg.layers) + " pooling stages");
  }
  input_proj = nn::Linear(params, prefix + ".input_proj", cfg.in_channels, cfg.dim, true, rng, cfg.init_std);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    Layer layer;
    layer.attention = nn::MultiHeadAttention(params, p + ".attn", cfg.dim, cfg.heads, rng, cfg.init_std);
    layer.norm1 = nn::TokenGroupNorm(params, p + ".norm1", cfg.dim, cfg.norm_groups, rng);
    layer.mlp = nn::Mlp(params, p + ".mlp", cfg.dim, cfg.mlp_hidden, rng, cfg.init_std);
    layer.norm2 = nn::TokenGroupNorm(params, p + ".norm2", cfg.dim, cfg.norm_groups, rng);
    layer.mask_embedding = params.add(p + ".mask_embedding", {2, cfg.dim}, Init::trunc_normal(cfg.init_std), rng);
    layers.push_back(std::move(layer));
  }
}

CorrelationTokens CorrelationTransformer::operator()(const Tensor& input, const MaskGrid& support_mask) const {
  const std::size_t n_fixed = 1 + cfg_.n_background;
  std::size_t gh = cfg_.support_h, gw = cfg_.support_w;
  if (input.rank() != 3 || input.dim(1) != n_fixed + gh * gw || input.dim(2) != cfg_.in_channels) {
    throw DimensionError("correlation transformer input " + shape_str(input.shape()) + " expected [Pq, " +
                         std::to_string(n_fixed + gh * gw) + ", " + std::to_string(cfg_.in_channels) + "]");
  }
  if (support_mask.height != gh || support_mask.width != gw) {
    throw DimensionError("support mask does not match the support token grid");
  }
  const std::size_t pq = input.dim(0);
  const DType dtype = input.dtype();

  CorrelationTokens out;
  Tensor x = input_proj(input);  // [Pq, T, C]
  Grid2D mask = support_mask;
  out.layer_maps.push_back(local_map(ops::slice(x, 1, n_fixed, n_fixed + gh * gw), gh, gw));
  out.local_extents.push_back(gh * gw);

  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& layer = layers[l];
    const bool last = l + 1 == layers.size();
    const std::size_t fh = last ? gh : 2, fw = last ? gw : 2;
    const std::size_t s = gh * gw;
    const std::size_t t = n_fixed + s;

    // Keys of local tokens carry the support-mask embedding.
    std::vector<double> selector(t * 2, 0.0);
    for (std::size_t j = 0; j < s; ++j) {
      selector[(n_fixed + j) * 2 + 0] = 1.0 - mask.values[j];
      selector[(n_fixed + j) * 2 + 1] = mask.values[j];
    }
    const Tensor key_bias = ops::matmul(Tensor::from({t, 2}, std::move(selector), dtype), layer.mask_embedding);

    const Tensor fixed = ops::slice(x, 1, 0, n_fixed);
    const Tensor local = ops::slice(x, 1, n_fixed, t);
    const std::size_t c = cfg_.dim;
    const Tensor pooled = ops::reshape(ops::window_avg_pool(ops::reshape(local, {pq, gh, gw, c}), fh, fw),
                                       {pq, (gh / fh) * (gw / fw), c});
    const std::vector<Tensor> q_parts{fixed, pooled};
    const Tensor queries = ops::concat(q_parts, 1);

    Tensor weights;
    const Tensor attended = layer.attention(queries, x, key_bias, &weights);
    out.attention.push_back(weights);
    Tensor h = ops::add(attended, queries);
    if (cfg_.normalize) h = layer.norm1(h);
    Tensor y = ops::add(layer.mlp(h), h);
    if (cfg_.normalize) y = layer.norm2(y);

    mask = pool_grid(mask, fh, fw);
    gh /= fh;
    gw /= fw;
    x = y;
    out.layer_maps.push_back(local_map(ops::slice(x, 1, n_fixed, n_fixed + gh * gw), gh, gw));
    out.local_extents.push_back(gh * gw);
  }

  out.fg = ops::slice(x, 1, 0, 1);
  out.bg = ops::slice(x, 1, 1, n_fixed);
  out.local = ops::slice(x, 1, n_fixed, n_fixed + 1);
  return out;
}

BackgroundFusion::BackgroundFusion(ParameterSet& params, const std::string& prefix, std::size_t n_background,
                                   Rng& rng) {
  weights = params.add(prefix + ".weights", {n_background}, Init::constant(1.0 / static_cast<double>(n_background)),
                       rng);
  bias = params.add(prefix + ".bias", {1}, Init::zeros(), rng);
}

Tensor BackgroundFusion::operator()(const Tensor& bg) const {
  const std::size_t n = weights.dim(0);
  if (bg.rank() != 3 || bg.dim(1) != n) {
    throw DimensionError("background fusion: expected [Pq, " + std::to_string(n) + ", C], got " +
                         shape_str(bg.shape()));
  }
  return ops::add(ops::matmul(ops::reshape(weights, {1, n}), bg), bias);
}

GlobalFusion::GlobalFusion(ParameterSet& params, const std::string& prefix, std::size_t dim, Rng& rng,
                           double init_std)
    : proj(params, prefix + ".proj", 2 * dim, dim, false, rng, init_std) {}

Tensor GlobalFusion::operator()(const Tensor& fg, const Tensor& bg_fused) const {
  if (fg.shape() != bg_fused.shape() || fg.rank() != 3 || 2 * fg.dim(2) != proj.weight.dim(0)) {
    throw DimensionError("global fusion: foreground " + shape_str(fg.shape()) + " and background " +
                         shape_str(bg_fused.shape()) + " incompatible with projection " +
                         shape_str(proj.weight.shape()));
  }
  const std::vector<Tensor> parts{fg, bg_fused};
  return proj(ops::concat(parts, 2));
}

MultiKernelFusion::MultiKernelFusion(ParameterSet& params, const std::string& prefix, std::size_t dim,
                                     const std::vector<std::size_t>& kernel_set, Rng& rng, double init_std)
    : kernels(kernel_set) {
  if (kernel_set.empty()) throw ConfigError("multi-kernel fusion needs at least one kernel size");
  for (std::size_t k : kernel_set) {
    if (k % 2 == 0 || k > 7) throw ConfigError("unsupported fusion kernel size " + std::to_string(k));
    branches.emplace_back(params, prefix + ".branch" + std::to_string(k), 2 * dim, dim, k, false, rng, init_std);
  }
  reduce = nn::Conv2d(params, prefix + ".reduce", kernel_set.size() * dim, dim, 1, false, rng, init_std);
  refine = nn::Conv2d(params, prefix + ".refine", dim, dim, 3, false, rng, init_std);
}

Tensor MultiKernelFusion::operator()(const Tensor& local, const Tensor& global,
                                     std::vector<Tensor>* branch_outputs) const {
  if (local.shape() != global.shape() || local.rank() != 3) {
    throw DimensionError("multi-kernel fusion: local " + shape_str(local.shape()) + " vs global " +
                         shape_str(global.shape()));
  }
  const std::vector<Tensor> inputs{local, global};
  const Tensor joined = ops::concat(inputs, 0);
  std::vector<Tensor> outs;
  for (const nn::Conv2d& branch : branches) outs.push_back(branch(joined));
  if (branch_outputs) *branch_outputs = outs;
  const Tensor fused = ops::add(reduce(ops::concat(outs, 0)), local);  // C'
  return ops::add(refine(fused), fused);
}

Tensor tokens_to_map(const Tensor& tokens, std::size_t hq, std::size_t wq) {
  if (tokens.rank() != 3 || tokens.dim(0) != hq * wq || tokens.dim(1) != 1) {
    throw DimensionError("tokens_to_map: " + shape_str(tokens.shape()) + " is not [" + std::to_string(hq * wq) +
                         ", 1, C]");
  }
  const std::size_t c = tokens.dim(2);
  return ops::reshape(ops::transpose(ops::reshape(tokens, {hq * wq, c}), 0, 1), {c, hq, wq});
}

std::vector<Tensor> distill_teachers(const std::vector<Tensor>& layer_maps) {
  NoGradGuard guard;
  std::vector<Tensor> teachers;
  for (std::size_t l = 0; l + 1 < layer_maps.size(); ++l) {
    const Tensor& student = layer_maps[l];
    const Tensor& deeper = layer_maps[l + 1];
    if (student.rank() != 2 || deeper.rank() != 2) throw DimensionError("self_distill_loss: maps must be [h, w]");
    const std::size_t h = student.dim(0), w = student.dim(1);
    const Tensor resized =
        ops::bilinear_resize(ops::reshape(deeper.detach(), {1, deeper.dim(0), deeper.dim(1)}), h, w);
    teachers.push_back(ops::log_softmax(ops::reshape(resized, {h * w}), 0).detach());
  }
  return teachers;
}

Tensor distill_against(const std::vector<Tensor>& layer_maps, const std::vector<Tensor>& teachers) {
  if (layer_maps.size() < 2) {
    return Tensor::scalar(0.0, layer_maps.empty() ? DType::f64 : layer_maps.front().dtype());
  }
  if (teachers.size() + 1 != layer_maps.size()) throw DimensionError("distillation needs one teacher per layer pair");
  std::vector<Tensor> terms;
  for (std::size_t l = 0; l < teachers.size(); ++l) {
    const std::size_t n = layer_maps[l].numel();
    if (teachers[l].numel() != n) throw DimensionError("teacher and student maps differ in size");
    const Tensor teacher_log = teachers[l].detach();
    std::vector<double> p = teacher_log.to_vector();
    for (double& x : p) x = std::exp(x);
    const Tensor teacher = Tensor::from({n}, std::move(p), teacher_log.dtype());
    const Tensor student_log = ops::log_softmax(ops::reshape(layer_maps[l], {n}), 0);
    terms.push_back(ops::sum(ops::mul(teacher, ops::sub(teacher_log, student_log))));
  }
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
  return ops::scale(total, 1.0 / static_cast<double>(terms.size()));
}

Tensor self_distill_loss(const std::vector<Tensor>& layer_maps) {
  return distill_against(layer_maps, distill_teachers(layer_maps));
}

}  // namespace corenet::cgt
