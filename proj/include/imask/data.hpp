#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "imask/tensor.hpp"

namespace imask {

/// Row-major grayscale image with values nominally in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
};

// 16-bit binary portable graymap (P5, maxval 65535, big-endian samples).
std::string encode_pgm16(const Image& image);
Image decode_pgm16(std::string_view bytes);
void write_pgm16(const std::filesystem::path& path, const Image& image);
Image read_pgm16(const std::filesystem::path& path);

struct SyntheticConfig {
  std::size_t image_side = 32;
  double lesion_probability = 0.35;
  double radius_min = 3.0;
  double radius_max = 5.5;
  // Correlation length (pixels) and half-range of the smooth background field.
  double texture_scale = 8.0;
  double texture_amplitude = 0.08;
  double background_level = 0.35;
  double noise_sigma = 0.02;
  double lesion_intensity = 0.4;
  std::size_t count = 1000;
  std::uint64_t seed = 1;

  void validate() const;
};

struct LesionInfo {
  bool present = false;
  double row = 0.0;  // blob center, pixel coordinates
  double col = 0.0;
  double radius = 0.0;
};

struct RenderedSample {
  Image image;
  Image background;  // the same sample without the lesion
  int label = 0;
  LesionInfo lesion;
};

// Deterministic in (cfg.seed, index); independent of every other index.
RenderedSample render_sample(const SyntheticConfig& cfg, std::size_t index);

enum class Split { kNone, kTrain, kVal, kTest };
std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct ManifestRecord {
  std::string id;
  std::string path;  // relative to the dataset root
  int label = 0;
  Split split = Split::kNone;
};

/// Text format: '#'-prefixed header lines (seed, image side, split fractions)
/// followed by one `id<TAB>relative_path<TAB>label<TAB>split` line per sample.
struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::array<double, 3> fractions{0.0, 0.0, 0.0};
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  std::size_t image_side = 0;

  std::vector<std::size_t> indices(Split s) const;
};

std::string format_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(std::string_view text);

/// Manifest plus pixels and (when known) lesion metadata, all index-aligned.
struct Dataset {
  DatasetManifest manifest;
  std::vector<Image> images;
  std::vector<LesionInfo> lesions;

  std::size_t size() const { return images.size(); }
  std::vector<std::size_t> indices(Split s) const { return manifest.indices(s); }
};

Dataset generate_synthetic_dataset(const SyntheticConfig& cfg);

/// Seeded stratified shuffle followed by contiguous train/val/test cuts.
/// val and test sizes are round(fraction * N); train takes the remainder.
DatasetManifest split(const DatasetManifest& manifest, std::array<double, 3> fractions,
                      std::uint64_t seed);

inline constexpr std::array<std::size_t, 6> kLabelBudgetPresets{192, 480, 961, 13, 66, 129};

/// Stratified subset of n labeled training records (manifest indices, sorted).
/// The whole train split stays available for self-supervision.
std::vector<std::size_t> limit_train_labels(const DatasetManifest& manifest, std::size_t n,
                                            std::uint64_t seed);

// Writes images/, manifest.tsv and lesions.tsv under root.
void write_dataset(const std::filesystem::path& root, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& root);

inline constexpr std::string_view kManifestFile = "manifest.tsv";
inline constexpr std::string_view kLesionFile = "lesions.tsv";

// Stacks the selected images into an N x 1 x H x W tensor.
Tensor stack_images(const std::vector<Image>& images, const std::vector<std::size_t>& which);

}  // namespace imask
