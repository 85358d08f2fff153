#include "corenet/dataset.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "corenet/rng.h"

namespace corenet {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::vector<std::size_t> Dataset::images_of_class(int class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].class_id == class_id) out.push_back(i);
  }
  return out;
}

const std::vector<std::string>& shape_families() {
  static const std::vector<std::string> names{"disc",    "triangle", "ring",     "bar",     "cross",   "blob",
                                              "square",  "diamond",  "star",     "crescent", "ellipse", "frame"};
  return names;
}

namespace {

/// Shape membership in normalized, rotated coordinates (unit radius).
bool inside_shape(std::size_t family, double u, double v, double phase) {
  const double rho = std::hypot(u, v);
  const double phi = std::atan2(v, u);
  switch (family) {
    case 0:  // disc
      return rho <= 1.0;
    case 1: {  // triangle
      for (int k = 0; k < 3; ++k) {
        const double a = -M_PI / 2.0 + 2.0 * M_PI * k / 3.0;
        if (u * std::cos(a) + v * std::sin(a) > 0.5) return false;
      }
      return true;
    }
    case 2:  // ring
      return rho <= 1.0 && rho >= 0.55;
    case 3:  // bar
      return std::abs(u) <= 1.0 && std::abs(v) <= 0.3;
    case 4:  // cross
      return (std::abs(u) <= 1.0 && std::abs(v) <= 0.3) || (std::abs(v) <= 1.0 && std::abs(u) <= 0.3);
    case 5:  // blob
      return rho <= 0.75 + 0.2 * std::sin(3.0 * phi + phase) + 0.1 * std::cos(5.0 * phi);
    case 6:  // square
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 7:  // diamond
      return std::abs(u) + std::abs(v) <= 1.0;
    case 8: {  // star
      const double lobe = 0.5 + 0.5 * std::cos(5.0 * phi);
      return rho <= 0.45 + 0.55 * lobe * lobe;
    }
    case 9:  // crescent
      return rho <= 1.0 && std::hypot(u - 0.45, v) > 0.75;
    case 10:  // ellipse
      return u * u + (v / 0.55) * (v / 0.55) <= 1.0;
    case 11: {  // frame
      const double m = std::max(std::abs(u), std::abs(v));
      return m <= 0.9 && m >= 0.55;
    }
    default:
      throw ConfigError("unknown shape family " + std::to_string(family));
  }
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

/// One image of the given family: a flat, saturated shape over gray noise.
std::pair<Tensor, MaskGrid> render(std::size_t family, std::size_t size, Rng& rng) {
  const double z = static_cast<double>(size);
  for (;;) {
    const double radius = rng.uniform(0.18, 0.3) * z;
    const double cx = rng.uniform(0.32, 0.68) * z, cy = rng.uniform(0.32, 0.68) * z;
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    double color[3];
    hsv_to_rgb(rng.uniform(), rng.uniform(0.65, 1.0), rng.uniform(0.65, 1.0), color);
    const double base = rng.uniform(0.35, 0.65);

    const std::size_t plane = size * size;
    std::vector<double> img(3 * plane);
    MaskGrid mask(size, size);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / radius;
        const double dy = (static_cast<double>(y) + 0.5 - cy) / radius;
        const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
        const bool on = inside_shape(family, u, v, phase);
        mask.at(y, x) = on ? 1.0 : 0.0;
        const double gray = rng.uniform(-0.18, 0.18);
        for (std::size_t c = 0; c < 3; ++c) {
          const double value = on ? color[c] + rng.uniform(-0.02, 0.02) : base + gray + rng.uniform(-0.03, 0.03);
          img[c * plane + y * size + x] = quantize(value);
        }
      }
    }
    const std::size_t area = mask.count_nonzero();
    if (area > 0 && area < plane) return {Tensor::from({3, size, size}, std::move(img)), std::move(mask)};
  }
}

}  // namespace

Dataset gen_synthetic_dataset(std::uint64_t seed, std::size_t n_classes, std::size_t images_per_class,
                              std::size_t size, const DatasetOptions& options) {
  if (n_classes < kFolds) throw ConfigError("need at least 4 classes for a four-fold split, got " +
                                            std::to_string(n_classes));
  if (n_classes > shape_families().size()) {
    throw ConfigError("at most " + std::to_string(shape_families().size()) + " classes are available");
  }
  if (images_per_class < 2) throw ConfigError("need at least 2 images per class");
  if (size < 32 || (size & (size - 1)) != 0) throw ConfigError("image size must be a power of two >= 32");
  if (options.hint_grid == 0 || size % options.hint_grid != 0) throw ConfigError("hint grid must divide the size");

  Dataset data;
  data.seed = seed;
  data.n_classes = n_classes;
  data.image_size = size;
  for (std::size_t c = 0; c < n_classes; ++c) {
    for (std::size_t i = 0; i < images_per_class; ++i) {
      const std::size_t index = c * images_per_class + i;
      Rng rng(Rng::mix(seed, index));
      auto [image, mask] = render(c, size, rng);
      ImageRecord rec;
      rec.id = "c" + std::to_string(c) + "_" + std::to_string(i);
      rec.class_id = static_cast<int>(c);
      rec.image = std::move(image);
      const MaskGrid hint = majority_downsample(mask, options.hint_grid, options.hint_grid);
      rec.attention = synthetic_clip_attention(hint, options.attention_blur, options.attention_noise,
                                               Rng::mix(seed, 0x5eed0000ULL + index));
      data.images.push_back(std::move(rec));
      data.gt_masks.push_back(std::move(mask));
    }
  }
  return data;
}

void write_ppm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("PPM expects [3, H, W]");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  const std::vector<double> v = image.to_vector();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw NotFoundError("cannot write " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out.put(static_cast<char>(std::lround(std::clamp(v[c * plane + i], 0.0, 1.0) * 255.0)));
  }
}

namespace {

/// Reads a binary netpbm header; returns {width, height} and leaves the
/// stream at the first payload byte.
std::pair<std::size_t, std::size_t> read_netpbm_header(std::istream& in, const std::string& magic,
                                                       const fs::path& path) {
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  if (token() != magic) throw FormatError(path.string() + " is not a binary " + magic + " file");
  try {
    const std::size_t w = std::stoul(token()), h = std::stoul(token()), maxval = std::stoul(token());
    if (maxval != 255) throw FormatError(path.string() + ": only 8-bit netpbm is supported");
    if (w == 0 || h == 0) throw FormatError(path.string() + ": zero image extent");
    return {w, h};
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": malformed netpbm header");
  }
}

std::vector<unsigned char> read_payload(std::istream& in, std::size_t count, const fs::path& path) {
  std::vector<unsigned char> bytes(count);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count) throw CorruptionError(path.string() + ": truncated payload");
  return bytes;
}

}  // namespace

Tensor read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  const auto [w, h] = read_netpbm_header(in, "P6", path);
  const std::vector<unsigned char> bytes = read_payload(in, 3 * w * h, path);
  std::vector<double> v(3 * w * h);
  for (std::size_t i = 0; i < w * h; ++i) {
    for (std::size_t c = 0; c < 3; ++c) v[c * w * h + i] = bytes[3 * i + c] / 255.0;
  }
  return Tensor::from({3, h, w}, std::move(v));
}

void write_pgm(const fs::path& path, const Grid2D& grid) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw NotFoundError("cannot write " + path.string());
  out << "P5\n" << grid.width << " " << grid.height << "\n255\n";
  for (double v : grid.values) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
}

Grid2D read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  const auto [w, h] = read_netpbm_header(in, "P5", path);
  const std::vector<unsigned char> bytes = read_payload(in, w * h, path);
  Grid2D g(h, w);
  for (std::size_t i = 0; i < w * h; ++i) g.values[i] = bytes[i] / 255.0;
  return g;
}

void save_dataset(const fs::path& dir, const Dataset& data) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  json images = json::array();
  std::vector<std::pair<std::string, Tensor>> attention;
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const ImageRecord& rec = data.images[i];
    write_ppm(dir / "images" / (rec.id + ".ppm"), rec.image);
    write_pgm(dir / "masks" / (rec.id + ".pgm"), data.gt_masks[i]);
    const Grid2D& a = rec.attention.values;
    attention.emplace_back(rec.id, Tensor::from({a.height, a.width}, a.values));
    images.push_back({{"id", rec.id},
                      {"class", rec.class_id},
                      {"image", "images/" + rec.id + ".ppm"},
                      {"mask", "masks/" + rec.id + ".pgm"}});
  }
  TensorPack::write(dir / "attention", attention);
  json folds = json::object();
  for (std::size_t c = 0; c < data.n_classes; ++c) {
    folds[std::to_string(c)] = fold_of_class(static_cast<int>(c), data.n_classes);
  }
  json classes = json::array();
  for (std::size_t c = 0; c < data.n_classes; ++c) classes.push_back({{"id", c}, {"name", shape_families()[c]}});
  const json doc = {{"seed", data.seed},   {"image_size", data.image_size}, {"classes", classes},
                    {"folds", folds},      {"images", images}};
  std::ofstream out(dir / "dataset.json", std::ios::trunc);
  out << doc.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw NotFoundError("no dataset.json in " + dir.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw FormatError("dataset.json does not parse: " + std::string(e.what()));
  }
  Dataset data;
  std::vector<std::tuple<std::string, int, std::string, std::string>> listing;
  try {
    data.seed = doc.at("seed").get<std::uint64_t>();
    data.image_size = doc.at("image_size").get<std::size_t>();
    data.n_classes = doc.at("classes").size();
    for (const json& e : doc.at("images")) {
      listing.emplace_back(e.at("id").get<std::string>(), e.at("class").get<int>(), e.at("image").get<std::string>(),
                           e.at("mask").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw FormatError("dataset.json is malformed: " + std::string(e.what()));
  }
  const TensorPack attention = TensorPack::load(dir / "attention");
  for (const auto& [id, cls, image_file, mask_file] : listing) {
    if (cls < 0 || static_cast<std::size_t>(cls) >= data.n_classes) {
      throw FormatError("image '" + id + "' has class " + std::to_string(cls) + " outside the class list");
    }
    ImageRecord rec;
    rec.id = id;
    rec.class_id = cls;
    rec.image = read_ppm(dir / image_file);
    if (rec.image.dim(1) != data.image_size || rec.image.dim(2) != data.image_size) {
      throw FormatError("image '" + id + "' is not " + std::to_string(data.image_size) + " pixels square");
    }
    rec.attention = attention_from_tensor(attention.get(id), AttentionMap::Source::synthetic);
    MaskGrid mask = read_pgm(dir / mask_file);
    for (double& v : mask.values) v = v > 0.5 ? 1.0 : 0.0;
    data.images.push_back(std::move(rec));
    data.gt_masks.push_back(std::move(mask));
  }
  return data;
}

std::size_t fold_of_class(int class_id, std::size_t n_classes) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= n_classes) {
    throw ConfigError("class " + std::to_string(class_id) + " out of range");
  }
  return static_cast<std::size_t>(class_id) * kFolds / n_classes;
}

FoldSplit fold_split(std::size_t n_classes, std::size_t fold) {
  if (n_classes < kFolds) throw ConfigError("need at least 4 classes for a four-fold split");
  if (fold >= kFolds) throw ConfigError("fold must be in [0, 4), got " + std::to_string(fold));
  FoldSplit split;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const int id = static_cast<int>(c);
    (fold_of_class(id, n_classes) == fold ? split.test_classes : split.train_classes).insert(id);
  }
  return split;
}

Episode sample_episode(const Dataset& data, const std::set<int>& classes, std::size_t shots, std::uint64_t seed) {
  if (classes.empty()) throw ConfigError("no classes to sample episodes from");
  if (shots == 0) throw ConfigError("episodes need at least one support image");
  Rng rng(seed);
  const std::vector<int> pool(classes.begin(), classes.end());
  const int cls = pool[rng.below(pool.size())];
  const std::vector<std::size_t> members = data.images_of_class(cls);
  if (members.size() < shots + 1) {
    throw ConfigError("class " + std::to_string(cls) + " has " + std::to_string(members.size()) +
                      " images, need " + std::to_string(shots + 1));
  }
  const std::vector<std::size_t> pick = rng.sample_without_replacement(members.size(), shots + 1);
  Episode ep;
  ep.view.class_id = cls;
  ep.view.seed = seed;
  ep.view.query = &data.images[members[pick[0]]];
  for (std::size_t s = 1; s <= shots; ++s) ep.view.supports.push_back(&data.images[members[pick[s]]]);
  ep.gt_query_mask = &data.gt_masks[members[pick[0]]];
  return ep;
}

}  // namespace corenet
