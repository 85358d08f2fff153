#include "corenet/model.h"

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "corenet/rng.h"

namespace corenet {

namespace fs = std::filesystem;
using json = nlohmann::json;

void ModelConfig::validate() const {
  const BackboneConfig& b = backbone;
  if (b.layers == 0 || b.heads == 0 || b.head_dim == 0 || b.grid_h == 0 || b.grid_w == 0) {
    throw ConfigError("backbone extents must be positive");
  }
  if (dim == 0 || heads == 0 || norm_groups == 0 || embed_dim == 0 || decoder_heads == 0 || decoder_groups == 0) {
    throw ConfigError("model widths must be positive");
  }
  if (transformer_layers == 0) throw ConfigError("need at least one transformer layer");
  if (n_background == 0) throw ConfigError("n_background must be positive");
  if (kernel_set.empty()) throw ConfigError("kernel_set must not be empty");
  for (std::size_t k : kernel_set) {
    if (k % 2 == 0 || k > 7) throw ConfigError("kernel sizes must be odd and at most 7, got " + std::to_string(k));
  }
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

std::string ModelConfig::to_json() const {
  const json j = {{"backbone_layers", backbone.layers},
                  {"backbone_heads", backbone.heads},
                  {"backbone_head_dim", backbone.head_dim},
                  {"grid_h", backbone.grid_h},
                  {"grid_w", backbone.grid_w},
                  {"backbone_seed", backbone_seed},
                  {"dim", dim},
                  {"heads", heads},
                  {"norm_groups", norm_groups},
                  {"transformer_layers", transformer_layers},
                  {"n_background", n_background},
                  {"kernel_set", kernel_set},
                  {"embed_dim", embed_dim},
                  {"decoder_heads", decoder_heads},
                  {"decoder_groups", decoder_groups},
                  {"positional_encoding", positional_encoding},
                  {"normalize", normalize},
                  {"init_std", init_std},
                  {"dtype", dtype_name(dtype)},
                  {"seed", seed}};
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.backbone.layers = j.at("backbone_layers");
    c.backbone.heads = j.at("backbone_heads");
    c.backbone.head_dim = j.at("backbone_head_dim");
    c.backbone.grid_h = j.at("grid_h");
    c.backbone.grid_w = j.at("grid_w");
    c.backbone_seed = j.at("backbone_seed");
    c.dim = j.at("dim");
    c.heads = j.at("heads");
    c.norm_groups = j.at("norm_groups");
    c.transformer_layers = j.at("transformer_layers");
    c.n_background = j.at("n_background");
    c.kernel_set = j.at("kernel_set").get<std::vector<std::size_t>>();
    c.embed_dim = j.at("embed_dim");
    c.decoder_heads = j.at("decoder_heads");
    c.decoder_groups = j.at("decoder_groups");
    c.positional_encoding = j.at("positional_encoding");
    c.normalize = j.at("normalize");
    c.init_std = j.at("init_std");
    const std::string dt = j.at("dtype");
    if (dt != "f32" && dt != "f64") throw FormatError("model config: unknown dtype '" + dt + "'");
    c.dtype = dt == "f32" ? DType::f32 : DType::f64;
    c.seed = j.at("seed");
  } catch (const json::exception& e) {
    throw FormatError("model config is malformed: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

CoreNet::CoreNet(const ModelConfig& cfg) : cfg_(cfg), params_(cfg.dtype) {
  cfg.validate();
  Rng rng(Rng::mix(cfg.seed, 0xC0DE));
  cgt::TransformerConfig tc;
  tc.in_channels = cfg.backbone.layers * cfg.backbone.heads;
  tc.dim = cfg.dim;
  tc.heads = cfg.heads;
  tc.layers = cfg.transformer_layers;
  tc.norm_groups = cfg.norm_groups;
  tc.n_background = cfg.n_background;
  tc.support_h = cfg.backbone.grid_h;
  tc.support_w = cfg.backbone.grid_w;
  tc.mlp_hidden = cfg.dim;
  tc.normalize = cfg.normalize;
  tc.init_std = cfg.init_std;
  transformer = cgt::CorrelationTransformer(params_, "cgt.transformer", tc, rng);
  background_fusion = cgt::BackgroundFusion(params_, "cgt.background_fusion", cfg.n_background, rng);
  global_fusion = cgt::GlobalFusion(params_, "cgt.global_fusion", cfg.dim, rng, cfg.init_std);
  kernel_fusion = cgt::MultiKernelFusion(params_, "cgt.kernel_fusion", cfg.dim, cfg.kernel_set, rng, cfg.init_std);
  class_guidance = guidance::ClassGuidance(params_, "cgm", cfg.dim, rng, cfg.init_std);
  embedding = guidance::EmbeddingProjection(params_, "egm.embed", cfg.backbone.heads * cfg.backbone.head_dim,
                                            cfg.embed_dim, rng, cfg.init_std);
  guidance::DecoderConfig dc;
  dc.correlation_channels = cfg.dim;
  dc.embed_channels = cfg.embed_dim;
  dc.heads = cfg.decoder_heads;
  dc.norm_groups = cfg.decoder_groups;
  dc.grid_h = cfg.backbone.grid_h;
  dc.grid_w = cfg.backbone.grid_w;
  dc.positional_encoding = cfg.positional_encoding;
  dc.init_std = cfg.init_std;
  decoder = guidance::Decoder(params_, "egm.decoder", dc, rng);
}

ForwardResult CoreNet::forward(const FeatureStack& support, const FeatureStack& query, const MaskGrid& support_mask,
                               const AttentionMap& query_attention, std::size_t height, std::size_t width,
                               std::uint64_t voronoi_seed) const {
  const FeatureStack s = support.to(cfg_.dtype);
  const FeatureStack q = query.to(cfg_.dtype);
  const std::size_t hq = q.grid_h(), wq = q.grid_w();

  const cgt::CorrelationVolume volume =
      cgt::build_correlation(q, s, support_mask, cfg_.n_background, voronoi_seed);
  const cgt::CorrelationTokens tokens = transformer(cgt::correlation_tokens_input(volume), support_mask);
  const Tensor bg = background_fusion(tokens.bg);
  const Tensor global = global_fusion(tokens.fg, bg);
  const Tensor fused = kernel_fusion(cgt::tokens_to_map(tokens.local, hq, wq), cgt::tokens_to_map(global, hq, wq));

  ForwardResult out;
  out.fused = fused;
  out.refined_attention = class_guidance.refine(fused, query_attention);
  const Tensor guided = guidance::apply_guidance(fused, out.refined_attention);
  out.prediction = decoder(guided, embedding(s), embedding(q), height, width);
  out.layer_maps = tokens.layer_maps;
  out.distill = cgt::self_distill_loss(tokens.layer_maps);
  return out;
}

void CoreNet::save(const fs::path& dir) const {
  std::vector<std::pair<std::string, Tensor>> entries;
  for (const Parameter& p : params_.items()) entries.emplace_back(p.name, p.tensor.detach());
  TensorPack::write(dir, entries);
  std::ofstream out(dir / "model.json", std::ios::trunc);
  if (!out) throw NotFoundError("cannot write " + (dir / "model.json").string());
  out << cfg_.to_json() << '\n';
}

std::unique_ptr<CoreNet> CoreNet::load(const fs::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw NotFoundError("no model.json in checkpoint " + dir.string());
  std::stringstream text;
  text << in.rdbuf();
  auto model = std::make_unique<CoreNet>(ModelConfig::from_json(text.str()));
  const TensorPack pack = TensorPack::load(dir);
  for (Parameter& p : model->params_.items()) {
    const Tensor stored = pack.get(p.name);
    if (stored.shape() != p.tensor.shape()) {
      throw CorruptionError("checkpoint entry '" + p.name + "' has shape " + shape_str(stored.shape()) +
                            ", model expects " + shape_str(p.tensor.shape()));
    }
    p.tensor.assign_(stored.to_vector());
  }
  if (pack.entries().size() != model->params_.items().size()) {
    throw CorruptionError("checkpoint holds " + std::to_string(pack.entries().size()) + " tensors, model has " +
                          std::to_string(model->params_.items().size()));
  }
  return model;
}

FeatureBank::FeatureBank(const Dataset& data, const std::string& backbone, const BackboneConfig& cfg,
                         std::uint64_t seed) {
  if (backbone == "synthetic") {
    for (const ImageRecord& rec : data.images) put(synthetic_backbone(rec.image, seed, cfg, rec.id));
    return;
  }
  if (backbone.rfind("pack:", 0) == 0) {
    const fs::path root = backbone.substr(5);
    for (const ImageRecord& rec : data.images) {
      FeatureStack s = load_feature_stack(TensorPack::load(root / rec.id), rec.id);
      if (s.layers() != cfg.layers || s.heads() != cfg.heads || s.head_dim() != cfg.head_dim ||
          s.grid_h() != cfg.grid_h || s.grid_w() != cfg.grid_w) {
        throw FormatError("feature pack for '" + rec.id + "' has shape " + shape_str(s.patch_tokens.shape()) +
                          ", model expects [" + std::to_string(cfg.layers) + ", " + std::to_string(cfg.heads) +
                          ", " + std::to_string(cfg.head_dim) + ", " + std::to_string(cfg.grid_h) + ", " +
                          std::to_string(cfg.grid_w) + "]");
      }
      put(std::move(s));
    }
    return;
  }
  throw ConfigError("unknown backbone '" + backbone + "' (expected synthetic or pack:<dir>)");
}

const FeatureStack& FeatureBank::get(const std::string& image_id) const {
  auto it = stacks_.find(image_id);
  if (it == stacks_.end()) throw NotFoundError("no features for image '" + image_id + "'");
  return it->second;
}

void FeatureBank::put(FeatureStack stack) {
  const std::string id = stack.image_id;
  stacks_[id] = std::move(stack);
}

}  // namespace corenet
