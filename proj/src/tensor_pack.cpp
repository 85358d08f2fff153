#include "corenet/tensor_pack.h"

#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

namespace corenet {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::size_t kHeaderBytes = 16;

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

DType parse_dtype(const std::string& s, const std::string& label) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw FormatError("pack entry '" + label + "': unknown dtype '" + s + "'");
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::vector<unsigned char> read_file(const fs::path& path, const std::string& label) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("pack entry '" + label + "': cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Header {
  DType dtype;
  Shape shape;
};

Header parse_header(const std::vector<unsigned char>& bytes, const std::string& label) {
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), TensorPack::kMagic, 8) != 0) {
    throw FormatError("pack entry '" + label + "': bad magic (not a CORETENS file)");
  }
  if (bytes[8] != TensorPack::kVersion) {
    throw FormatError("pack entry '" + label + "': unsupported version " + std::to_string(bytes[8]));
  }
  if (bytes[9] > 1) throw FormatError("pack entry '" + label + "': unknown dtype code " + std::to_string(bytes[9]));
  Header h;
  h.dtype = bytes[9] == 0 ? DType::f32 : DType::f64;
  const std::size_t rank = bytes[10];
  if (bytes.size() < kHeaderBytes + 8 * rank) {
    throw CorruptionError("pack entry '" + label + "': truncated header");
  }
  for (std::size_t i = 0; i < rank; ++i) h.shape.push_back(get_u64(bytes.data() + kHeaderBytes + 8 * i));
  const std::size_t expected = kHeaderBytes + 8 * rank + dtype_size(h.dtype) * numel_of(h.shape);
  if (bytes.size() != expected) {
    throw CorruptionError("pack entry '" + label + "': file holds " + std::to_string(bytes.size()) +
                          " bytes, expected " + std::to_string(expected));
  }
  return h;
}

}  // namespace

std::vector<unsigned char> encode_tensor(const Tensor& t) {
  std::vector<unsigned char> out(TensorPack::kMagic, TensorPack::kMagic + 8);
  out.push_back(TensorPack::kVersion);
  out.push_back(t.dtype() == DType::f32 ? 0 : 1);
  if (t.rank() > 255) throw DimensionError("tensor rank too large for pack format");
  out.push_back(static_cast<unsigned char>(t.rank()));
  out.insert(out.end(), 5, 0);
  for (std::size_t e : t.shape()) put_u64(out, e);
  dispatch(t.dtype(), [&]<typename T>() {
    using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
    for (T v : t.data<T>()) {
      Bits bits;
      std::memcpy(&bits, &v, sizeof(T));
      for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
    }
  });
  return out;
}

Tensor decode_tensor(const std::vector<unsigned char>& bytes, const std::string& label) {
  const Header h = parse_header(bytes, label);
  Tensor t = Tensor::zeros(h.shape, h.dtype);
  const std::size_t offset = kHeaderBytes + 8 * h.shape.size();
  dispatch(h.dtype, [&]<typename T>() {
    using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
    auto values = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) {
      Bits bits = 0;
      const unsigned char* p = bytes.data() + offset + i * sizeof(T);
      for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<Bits>(p[b]) << (8 * b);
      std::memcpy(&values[i], &bits, sizeof(T));
    }
  });
  return t;
}

TensorPack TensorPack::load(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw NotFoundError("no manifest.json in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw FormatError("manifest " + manifest_path.string() + " does not parse: " + e.what());
  }

  TensorPack pack;
  pack.dir_ = dir;
  try {
    const json& list = manifest.is_object() ? manifest.at("entries") : manifest;
    for (const json& e : list) {
      PackEntry entry;
      entry.name = e.at("name").get<std::string>();
      entry.dtype = parse_dtype(e.at("dtype").get<std::string>(), entry.name);
      entry.shape = e.at("shape").get<Shape>();
      entry.file = e.at("file").get<std::string>();
      pack.entries_.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest " + manifest_path.string() + " is malformed: " + e.what());
  }

  for (const PackEntry& e : pack.entries_) {
    const std::vector<unsigned char> bytes = read_file(dir / e.file, e.name);
    const Header h = parse_header(bytes, e.name);
    if (h.dtype != e.dtype || h.shape != e.shape) {
      throw CorruptionError("pack entry '" + e.name + "': header " + dtype_name(h.dtype) + shape_str(h.shape) +
                            " disagrees with manifest " + dtype_name(e.dtype) + shape_str(e.shape));
    }
  }
  return pack;
}

void TensorPack::write(const fs::path& dir, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  fs::create_directories(dir);
  json entries = json::array();
  std::size_t index = 0;
  for (const auto& [name, tensor] : tensors) {
    const std::string file = std::to_string(index++) + ".bin";
    const std::vector<unsigned char> bytes = encode_tensor(tensor);
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw NotFoundError("cannot write " + (dir / file).string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    entries.push_back({{"name", name}, {"dtype", dtype_name(tensor.dtype())}, {"shape", tensor.shape()}, {"file", file}});
  }
  json manifest = {{"format", "CORETENS"}, {"version", kVersion}, {"entries", entries}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
}

bool TensorPack::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

const PackEntry& TensorPack::entry(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw NotFoundError("pack " + dir_.string() + " has no entry '" + name + "'");
}

Tensor TensorPack::get(const std::string& name) const {
  const PackEntry& e = entry(name);
  return decode_tensor(read_file(dir_ / e.file, e.name), e.name);
}

}  // namespace corenet
