#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "corenet/tensor.h"

namespace corenet {

/// On-disk tensor collection shared with the offline feature exporter.
///
/// A pack is a directory holding `manifest.json` and one binary file per
/// tensor. Each binary file is laid out as:
///
///   bytes 0..7    magic "CORETENS"
///   byte  8       version (1)
///   byte  9       dtype code (0 = f32, 1 = f64)
///   byte  10      rank
///   bytes 11..15  zero padding
///   rank x u64    extents, little-endian
///   payload       row-major values, little-endian IEEE-754
///
/// Manifest entries are objects {"name", "dtype": "f32"|"f64", "shape": [...],
/// "file"}.
struct PackEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::string file;
};

class TensorPack {
 public:
  static constexpr char kMagic[8] = {'C', 'O', 'R', 'E', 'T', 'E', 'N', 'S'};
  static constexpr std::uint8_t kVersion = 1;

  /// Parses the manifest and validates every entry's header and length.
  /// Throws FormatError (bad manifest/magic/version), CorruptionError (size
  /// or header mismatch, naming the entry) or NotFoundError (missing file).
  static TensorPack load(const std::filesystem::path& dir);

  /// Writes `tensors` as a pack into `dir` (created if needed). Tensor values
  /// are stored in their own dtype.
  static void write(const std::filesystem::path& dir, const std::vector<std::pair<std::string, Tensor>>& tensors);

  bool contains(const std::string& name) const;
  /// Reads one tensor; NotFoundError for unknown names.
  Tensor get(const std::string& name) const;
  const std::vector<PackEntry>& entries() const { return entries_; }
  const std::filesystem::path& directory() const { return dir_; }

 private:
  const PackEntry& entry(const std::string& name) const;

  std::filesystem::path dir_;
  std::vector<PackEntry> entries_;
};

/// Encodes one tensor in the binary layout above.
std::vector<unsigned char> encode_tensor(const Tensor& t);
/// Decodes a buffer produced by encode_tensor; `label` names it in errors.
Tensor decode_tensor(const std::vector<unsigned char>& bytes, const std::string& label);

}  // namespace corenet
