#include "corenet/train.h"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "corenet/rng.h"

namespace corenet {

namespace fs = std::filesystem;
using json = nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lambda_distill >= 0.0)) throw ConfigError("lambda_distill must be non-negative");
  if (!std::isfinite(alpha)) throw ConfigError("alpha must be finite");
  if (n_background == 0) throw ConfigError("n_background must be positive");
  if (kernel_set.empty()) throw ConfigError("kernel_set must not be empty");
  for (std::size_t k : kernel_set) {
    if (k % 2 == 0 || k > 7) throw ConfigError("kernel_set entries must be odd and at most 7, got " + std::to_string(k));
  }
  if (embed_dim == 0 || dim == 0) throw ConfigError("embed_dim and dim must be positive");
  if (episodes == 0) throw ConfigError("episodes must be positive");
  if (dtype != "f32" && dtype != "f64") throw ConfigError("dtype must be f32 or f64");
  if (fold >= kFolds) throw ConfigError("fold must be in [0, 4)");
  if (backbone != "synthetic" && backbone.rfind("pack:", 0) != 0) {
    throw ConfigError("backbone must be 'synthetic' or 'pack:<dir>', got '" + backbone + "'");
  }
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config does not parse: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "lr") c.lr = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "lambda_distill") c.lambda_distill = value.get<double>();
      else if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "n_background") c.n_background = value.get<std::size_t>();
      else if (key == "kernel_set") c.kernel_set = value.get<std::vector<std::size_t>>();
      else if (key == "embed_dim") c.embed_dim = value.get<std::size_t>();
      else if (key == "dim") c.dim = value.get<std::size_t>();
      else if (key == "episodes") c.episodes = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "optimizer") c.optimizer = parse_optimizer(value.get<std::string>());
      else if (key == "backbone") c.backbone = value.get<std::string>();
      else if (key == "dtype") c.dtype = value.get<std::string>();
      else if (key == "fold") c.fold = value.get<std::size_t>();
      else if (key == "data") c.data = value.get<std::string>();
      else throw ConfigError("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError("config has a value of the wrong type: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

std::string TrainConfig::to_json() const {
  const json j = {{"lr", lr},           {"batch_size", batch_size}, {"lambda_distill", lambda_distill},
                  {"alpha", alpha},     {"n_background", n_background}, {"kernel_set", kernel_set},
                  {"embed_dim", embed_dim}, {"dim", dim},           {"episodes", episodes},
                  {"seed", seed},       {"optimizer", to_string(optimizer)}, {"backbone", backbone},
                  {"dtype", dtype},     {"fold", fold},             {"data", data}};
  return j.dump(2);
}

ModelConfig TrainConfig::model_config(const BackboneConfig& bb) const {
  ModelConfig m;
  m.backbone = bb;
  m.dim = dim;
  m.n_background = n_background;
  m.kernel_set = kernel_set;
  m.embed_dim = embed_dim;
  m.dtype = dtype == "f32" ? DType::f32 : DType::f64;
  m.seed = seed;
  return m;
}

Tensor segmentation_loss(const Tensor& logits, const MaskGrid& target) {
  if (logits.rank() != 3 || logits.dim(0) != 2 || logits.dim(1) != target.height || logits.dim(2) != target.width) {
    throw DimensionError("segmentation loss: logits " + shape_str(logits.shape()) + " vs target " +
                         std::to_string(target.height) + "x" + std::to_string(target.width));
  }
  const std::size_t n = target.size();
  std::vector<double> onehot(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool fg = target.values[i] > 0.5;
    onehot[i] = fg ? 0.0 : 1.0;
    onehot[n + i] = fg ? 1.0 : 0.0;
  }
  const Tensor picked =
      ops::mul(ops::log_softmax(logits, 0), Tensor::from(logits.shape(), std::move(onehot), logits.dtype()));
  return ops::scale(ops::sum(picked), -1.0 / static_cast<double>(n));
}

EpisodeOutcome run_episode(const CoreNet& model, const EpisodeView& episode, const EpisodeContext& ctx,
                           double lambda_distill) {
  if (episode.supports.empty() || episode.query == nullptr) throw ContractError("episode needs a support and a query");
  const ImageRecord& support = *episode.supports.front();
  const ImageRecord& query = *episode.query;
  const FeatureStack& fs = ctx.features->get(support.id);
  const FeatureStack& fq = ctx.features->get(query.id);

  EpisodeOutcome out;
  out.pseudo = pseudomask::make_pseudo_masks(fs, fq, support.image, query.image, ctx.pseudo);
  const ForwardResult fwd = model.forward(fs, fq, out.pseudo.support.tokens, query.attention, query.image.dim(1),
                                          query.image.dim(2), Rng::mix(episode.seed, 0));
  out.prediction = fwd.prediction;
  out.seg = segmentation_loss(fwd.prediction.logits, out.pseudo.query.image);
  out.distill = fwd.distill;
  out.loss = lambda_distill == 0.0 ? out.seg : ops::add(out.seg, ops::scale(fwd.distill, lambda_distill));
  return out;
}

namespace {

bool all_finite(const Tensor& t) {
  for (double v : t.to_vector()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

TrainResult train(CoreNet& model, const Dataset& data, const FeatureBank& features, const TrainConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const FoldSplit split = fold_split(data.n_classes, cfg.fold);
  EpisodeContext ctx;
  ctx.features = &features;
  ctx.pseudo.alpha = cfg.alpha;
  Optimizer opt(cfg.optimizer, cfg.lr);
  ParameterSet& params = model.params();
  params.zero_grad();

  TrainResult result;
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    const Episode ep = sample_episode(data, split.train_classes, 1, Rng::mix(cfg.seed, 0x7a11 + e));
    const EpisodeOutcome out = run_episode(model, ep.view, ctx, cfg.lambda_distill);
    const double seg = out.seg.item(), distill = out.distill.item(), total = out.loss.item();
    if (!std::isfinite(total)) {
      const std::vector<std::pair<std::string, Tensor>> probes{
          {"logits", out.prediction.logits}, {"seg_loss", out.seg}, {"distill_loss", out.distill}};
      std::string culprit = "loss";
      for (const auto& [name, t] : probes) {
        if (!all_finite(t)) {
          culprit = name;
          break;
        }
      }
      throw NumericalError("non-finite loss at episode " + std::to_string(e) + ": first non-finite tensor is '" +
                           culprit + "'");
    }
    backward(ops::scale(out.loss, inv_batch));
    result.log.push_back({e, seg, distill, total});

    if ((e + 1) % cfg.batch_size == 0 || e + 1 == cfg.episodes) {
      for (const Parameter& p : params.items()) {
        for (double g : p.tensor.grad_vector()) {
          if (!std::isfinite(g)) {
            throw NumericalError("non-finite gradient for parameter '" + p.name + "' at episode " +
                                 std::to_string(e));
          }
        }
      }
      opt.step(params);
      params.zero_grad();
      ++result.optimizer_steps;
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void write_loss_log(const fs::path& path, const std::vector<LossRecord>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw NotFoundError("cannot write " + path.string());
  out << "episode\tseg\tdistill\ttotal\n";
  char line[160];
  for (const LossRecord& r : log) {
    std::snprintf(line, sizeof line, "%zu\t%.17g\t%.17g\t%.17g\n", r.episode, r.seg, r.distill, r.total);
    out << line;
  }
}

std::vector<LossRecord> read_loss_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<LossRecord> log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    LossRecord r;
    if (!(row >> r.episode >> r.seg >> r.distill >> r.total)) throw FormatError("bad loss log line: " + line);
    log.push_back(r);
  }
  return log;
}

guidance::QueryPrediction kshot_predict(const CoreNet& model, const std::vector<const ImageRecord*>& supports,
                                        const ImageRecord& query, const EpisodeContext& ctx, std::uint64_t seed) {
  if (supports.empty()) throw ConfigError("k-shot prediction needs at least one support (K >= 1)");
  NoGradGuard guard;
  const FeatureStack& fq = ctx.features->get(query.id);
  const std::size_t h = query.image.dim(1), w = query.image.dim(2);
  std::vector<guidance::QueryPrediction> shots;
  for (std::size_t k = 0; k < supports.size(); ++k) {
    const ImageRecord& s = *supports[k];
    const FeatureStack& fs = ctx.features->get(s.id);
    const pseudomask::PseudoMask ms = pseudomask::pseudo_mask(fs, fq, s.image, ctx.pseudo);
    shots.push_back(model.forward(fs, fq, ms.tokens, query.attention, h, w, Rng::mix(seed, k)).prediction);
  }
  if (shots.size() == 1) return shots.front();

  std::vector<double> mean(h * w, 0.0);
  for (const auto& p : shots) {
    const std::vector<double> prob = p.prob_fg.to_vector();
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += prob[i];
  }
  for (double& v : mean) v /= static_cast<double>(shots.size());
  guidance::QueryPrediction out;
  std::vector<double> logits(2 * h * w);
  out.binary = MaskGrid(h, w);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    logits[i] = std::log1p(-mean[i]);
    logits[h * w + i] = std::log(mean[i]);
    out.binary.values[i] = mean[i] > 0.5 ? 1.0 : 0.0;
  }
  const DType dtype = shots.front().prob_fg.dtype();
  out.prob_fg = Tensor::from({h, w}, std::move(mean), dtype);
  out.logits = Tensor::from({2, h, w}, std::move(logits), dtype);
  return out;
}

IouCounts iou_counts(const MaskGrid& prediction, const MaskGrid& truth) {
  if (prediction.height != truth.height || prediction.width != truth.width) {
    throw DimensionError("IoU of differently sized masks");
  }
  IouCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool p = prediction.values[i] > 0.5, t = truth.values[i] > 0.5;
    c.intersection += (p && t) ? 1.0 : 0.0;
    c.union_ += (p || t) ? 1.0 : 0.0;
  }
  return c;
}

double iou(const MaskGrid& prediction, const MaskGrid& truth) {
  const IouCounts c = iou_counts(prediction, truth);
  return c.union_ == 0.0 ? 1.0 : c.intersection / c.union_;
}

std::vector<Episode> test_episodes(const Dataset& data, const EvalConfig& cfg) {
  const FoldSplit split = fold_split(data.n_classes, cfg.fold);
  if (cfg.shots == 0) throw ConfigError("shots must be at least 1");
  std::vector<Episode> out;
  for (int c : split.test_classes) {
    const std::size_t members = data.images_of_class(c).size();
    if (members < cfg.shots + 1) {
      throw ConfigError("class " + std::to_string(c) + " has too few images for " + std::to_string(cfg.shots) +
                        "-shot episodes");
    }
    for (std::size_t i = 0; i < cfg.episodes_per_class; ++i) {
      Episode ep = sample_episode(data, {c}, members - 1, Rng::mix(cfg.seed, static_cast<std::uint64_t>(c) * 1000003ULL + i));
      ep.view.supports.resize(cfg.shots);
      out.push_back(std::move(ep));
    }
  }
  return out;
}

EvalResult summarize_iou(const std::vector<ScoredPrediction>& scored, const std::set<int>& classes,
                         bool per_episode) {
  EvalResult r;
  std::map<int, IouCounts> pooled;
  std::map<int, std::vector<double>> episodes;
  for (const ScoredPrediction& s : scored) {
    const IouCounts c = iou_counts(s.prediction, *s.truth);
    pooled[s.class_id].intersection += c.intersection;
    pooled[s.class_id].union_ += c.union_;
    episodes[s.class_id].push_back(c.union_ == 0.0 ? 1.0 : c.intersection / c.union_);
  }
  r.episodes = scored.size();
  double sum = 0.0;
  for (int c : classes) {
    if (!episodes.count(c)) {
      r.warnings.push_back("class " + std::to_string(c) + " has no episodes; excluded from mIoU");
      continue;
    }
    double value;
    if (per_episode) {
      value = 0.0;
      for (double v : episodes[c]) value += v;
      value /= static_cast<double>(episodes[c].size());
    } else {
      const IouCounts& c_counts = pooled[c];
      value = c_counts.union_ == 0.0 ? 1.0 : c_counts.intersection / c_counts.union_;
    }
    r.class_iou[c] = value;
    sum += value;
  }
  r.miou = r.class_iou.empty() ? 0.0 : sum / static_cast<double>(r.class_iou.size());
  return r;
}

EvalResult evaluate(const CoreNet& model, const Dataset& data, const EpisodeContext& ctx, const EvalConfig& cfg) {
  std::vector<ScoredPrediction> scored;
  for (const Episode& ep : test_episodes(data, cfg)) {
    const guidance::QueryPrediction p = kshot_predict(model, ep.view.supports, *ep.view.query, ctx, ep.view.seed);
    scored.push_back({ep.view.class_id, p.binary, ep.gt_query_mask});
  }
  return summarize_iou(scored, fold_split(data.n_classes, cfg.fold).test_classes, cfg.per_episode);
}

}  // namespace corenet
