#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgce/classifier.hpp"
#include "cgce/training.hpp"

namespace cgce {

// On-disk layouts, all little-endian:
//
// .cgt tensor file
//   "CGT1" | dtype u8 (1 = binary32) | rank u8 | 2 zero bytes
//   | rank x u64 dims | prod(dims) x f32, row-major
//
// .cgck checkpoint
//   "CGCK" | version u32 | header length u32 | header JSON (UTF-8)
//   | tensor count u32 | per tensor: name length u16 | name | tensor record
//   where a tensor record is a .cgt file without its magic. Header keys:
//   d, h, heads, concept_name, default_tau. Tensors follow
//   ParamTensors::kNames order; biases are rank 1.

inline constexpr std::uint32_t kCheckpointVersion = 1;

// N-dimensional tensor as stored on disk, widened to double.
struct Tensor {
    std::vector<std::uint64_t> shape;
    std::vector<double> values;

    std::uint64_t element_count() const;
    bool operator==(const Tensor&) const = default;
};

Tensor to_tensor(const Matrix& m);

// Rank-2 tensors map directly; rank-1 tensors become a single row.
Matrix to_matrix(const Tensor& t);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const Tensor& t, const std::filesystem::path& path);
void write_tensor(const Matrix& m, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

// read_tensor that also requires rank 2.
Matrix read_matrix(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const ClassifierParams& params);
ClassifierParams decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const ClassifierParams& params, const std::filesystem::path& path);
ClassifierParams read_checkpoint(const std::filesystem::path& path);

struct ManifestEntry {
    std::string id;
    std::string text;
    int label = 0;
    std::string embedding;  // relative to the manifest directory
    std::optional<std::string> pair_id;
    std::string concept_name;
};

// One JSON object per line.
void write_manifest(std::span<const ManifestEntry> entries, const std::filesystem::path& path);

// Loads every referenced tensor. Relative embedding paths resolve against the
// manifest's directory, then against `fallback_dir` when given. A line with
// "encoder_id" and no "label" is a header; its optional "d" is enforced.
std::vector<LabeledExample> read_manifest(const std::filesystem::path& path,
                                          const std::optional<std::filesystem::path>& fallback_dir = std::nullopt);

// Write to a sibling temporary file, then rename over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace cgce
