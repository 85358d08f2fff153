// Command-line front end: dataset generation, pseudo masks, training,
// evaluation and the gradient-check suite.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "corenet/gradcheck_suite.h"
#include "corenet/rng.h"
#include "corenet/train.h"

namespace fs = std::filesystem;
using namespace corenet;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumerical = 4 };

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int gen_episodes(std::uint64_t seed, std::size_t classes, std::size_t per_class, std::size_t size,
                 const fs::path& out) {
  const Dataset data = gen_synthetic_dataset(seed, classes, per_class, size);
  save_dataset(out, data);
  std::cout << "wrote " << data.images.size() << " images (" << classes << " classes) to " << out << "\n";
  return kOk;
}

int pseudomask_cmd(const fs::path& data_dir, std::size_t episode, std::size_t fold, std::uint64_t seed,
                   const fs::path& out) {
  const Dataset data = load_dataset(data_dir);
  const BackboneConfig bb;
  const ModelConfig mc;
  FeatureBank bank(data, "synthetic", bb, mc.backbone_seed);
  const Episode ep = sample_episode(data, fold_split(data.n_classes, fold).train_classes, 1,
                                    Rng::mix(seed, 0x7a11 + episode));
  const ImageRecord& s = *ep.view.supports.front();
  const ImageRecord& q = *ep.view.query;
  const auto masks = pseudomask::make_pseudo_masks(bank.get(s.id), bank.get(q.id), s.image, q.image, {});
  fs::create_directories(out);
  write_pgm(out / "support_mask.pgm", masks.support.image);
  write_pgm(out / "query_mask.pgm", masks.query.image);
  write_pgm(out / "support_soft.pgm", masks.support.refined);
  write_pgm(out / "query_soft.pgm", masks.query.refined);
  std::cout << "episode " << episode << ": support " << s.id << ", query " << q.id << " (class " << ep.view.class_id
            << ")\n";
  return kOk;
}

int train_cmd(const fs::path& config_path, const fs::path& out) {
  const TrainConfig cfg = TrainConfig::from_json(read_text(config_path));
  if (cfg.data.empty()) throw ConfigError("config needs a 'data' directory");
  const Dataset data = load_dataset(cfg.data);
  const BackboneConfig bb;
  const ModelConfig mc = cfg.model_config(bb);
  FeatureBank bank(data, cfg.backbone, bb, mc.backbone_seed);
  CoreNet model(mc);
  const TrainResult result = train(model, data, bank, cfg);
  fs::create_directories(out);
  model.save(out / "checkpoint");
  write_loss_log(out / "loss_log.tsv", result.log);
  std::ofstream(out / "config.json") << cfg.to_json() << "\n";
  std::printf("trained %zu episodes (%zu steps) in %.1f s; final loss %.4f\n", result.log.size(),
              result.optimizer_steps, result.seconds, result.log.back().total);
  return kOk;
}

int eval_cmd(const fs::path& checkpoint, const fs::path& data_dir, const EvalConfig& ecfg, bool as_json) {
  const std::unique_ptr<CoreNet> model = CoreNet::load(checkpoint);
  const Dataset data = load_dataset(data_dir);
  FeatureBank bank(data, "synthetic", model->config().backbone, model->config().backbone_seed);
  EpisodeContext ctx;
  ctx.features = &bank;
  const EvalResult r = evaluate(*model, data, ctx, ecfg);
  for (const std::string& w : r.warnings) std::cerr << "warning: " << w << "\n";
  if (as_json) {
    nlohmann::json j;
    j["fold"] = ecfg.fold;
    j["shots"] = ecfg.shots;
    j["episodes"] = r.episodes;
    j["miou"] = r.miou;
    for (const auto& [c, v] : r.class_iou) j["class_iou"][std::to_string(c)] = v;
    std::cout << j.dump(2) << "\n";
  } else {
    std::printf("%-8s %-10s %s\n", "class", "name", "IoU");
    for (const auto& [c, v] : r.class_iou) std::printf("%-8d %-10s %.4f\n", c, shape_families()[c].c_str(), v);
    std::printf("mIoU %.4f over %zu episodes (fold %zu, %zu-shot)\n", r.miou, r.episodes, ecfg.fold, ecfg.shots);
  }
  return kOk;
}

int gradcheck_cmd(bool full) {
  bool ok = true;
  for (const GradCheckCase& c : run_gradcheck_suite(full)) {
    std::printf("%-4s %-20s max_rel_err %.3e (tol %.0e, %zu entries, worst %s[%zu]: %.6e vs %.6e)\n", c.passed() ? "PASS" : "FAIL",
                c.name.c_str(), c.report.max_rel_error, c.tolerance, c.report.entries_checked,
                c.report.worst_tensor.c_str(), c.report.worst_index, c.report.worst_analytic, c.report.worst_numeric);
    ok = ok && c.passed();
  }
  return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised few-shot segmentation toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t classes = 8, per_class = 12, size = 64, episode = 0, fold = 0;
  std::string out, data_dir, config, checkpoint;
  bool full = false, as_json = false;
  EvalConfig ecfg;

  auto* gen = app.add_subcommand("gen-episodes", "Generate a synthetic episodic dataset");
  gen->add_option("--seed", seed, "Random seed");
  gen->add_option("--classes", classes, "Number of classes (4 to 12)");
  gen->add_option("--per-class", per_class, "Images per class");
  gen->add_option("--size", size, "Image side length (power of two >= 32)");
  gen->add_option("--out", out, "Output directory")->required();

  auto* pm = app.add_subcommand("pseudomask", "Write pseudo masks of one training episode as PGM");
  pm->add_option("--data", data_dir, "Dataset directory")->required();
  pm->add_option("--episode", episode, "Training episode index")->required();
  pm->add_option("--fold", fold, "Fold whose training classes are sampled");
  pm->add_option("--seed", seed, "Training seed used for episode sampling");
  pm->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train from a flat JSON config");
  tr->add_option("--config", config, "Config file")->required();
  tr->add_option("--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a held-out fold");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--fold", ecfg.fold, "Test fold");
  ev->add_option("--shots", ecfg.shots, "Support images per episode");
  ev->add_option("--episodes-per-class", ecfg.episodes_per_class, "Test episodes per class");
  ev->add_option("--seed", ecfg.seed, "Episode sampling seed");
  ev->add_flag("--per-episode", ecfg.per_episode, "Average per-episode IoU instead of pooled counts");
  ev->add_flag("--json", as_json, "Machine-readable output");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_flag("--full", full, "Include the composed pipeline");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return gen_episodes(seed, classes, per_class, size, out);
    if (*pm) return pseudomask_cmd(data_dir, episode, fold, seed, out);
    if (*tr) return train_cmd(config, out);
    if (*ev) return eval_cmd(checkpoint, data_dir, ecfg, as_json);
    if (*gc) return gradcheck_cmd(full);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kData;
  } catch (const CorruptionError& e) {
    std::cerr << "corrupt data: " << e.what() << "\n";
    return kData;
  } catch (const NotFoundError& e) {
    std::cerr << "not found: " << e.what() << "\n";
    return kData;
  } catch (const DimensionError& e) {
    std::cerr << "shape mismatch: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
