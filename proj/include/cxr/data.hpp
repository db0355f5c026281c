#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cxr/loss.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

// One manifest row: image file, owning patient, binary label per condition.
struct SampleRecord {
  std::string image_path;
  std::string patient_id;
  std::vector<std::uint8_t> labels;
};

struct Manifest {
  std::vector<std::string> class_names;
  std::vector<SampleRecord> records;

  LabelMatrix label_matrix() const;
};

// CSV with header `Image,PatientId,<Condition...>`, binary cells.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

struct SplitResult {
  Manifest train;
  Manifest test;
  std::uint64_t split_seed = 0;
  double train_fraction = 0.0;
};

// Shuffles patients (never single images) by seed and fills the train side
// greedily until the image-count fraction first reaches train_fraction. All
// images of a patient land on exactly one side; both sides end non-empty.
SplitResult patient_level_split(const Manifest& manifest, double train_fraction,
                                std::uint64_t seed);

// --- images -----------------------------------------------------------

// Grayscale raster with values in [0,1].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;  // row-major

  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

// 8-bit binary PGM (P5), maxval 255.
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const GrayImage& img, const std::filesystem::path& path);

// Bilinear resize with center-aligned sampling.
GrayImage resize_bilinear(const GrayImage& img, int target_h, int target_w);

// Resize + optional replication of the single channel into 3. Output layout
// [C,H,W].
Tensor prepare_image(const GrayImage& raw, int target_h, int target_w,
                     bool replicate_to_3);

// --- normalization ------------------------------------------------------

struct NormalizationStats {
  std::vector<double> mean;  // per channel
  std::vector<double> stddev;
};

// Population statistics over every pixel of the training images.
NormalizationStats compute_stats(const std::vector<Tensor>& train_images);
// (x - mean) / max(std, 1e-6), channel-wise.
Tensor apply_stats(const Tensor& image, const NormalizationStats& stats);

void save_stats(const NormalizationStats& stats, const std::filesystem::path& path);
NormalizationStats load_stats(const std::filesystem::path& path);

// --- synthetic dataset --------------------------------------------------

struct SyntheticDatasetSpec {
  int n_images = 2000;
  int height = 32;
  int width = 32;
  int num_classes = 4;
  std::vector<double> prevalence;  // per class, in (0,1)
  double noise_std = 0.20;
  std::uint64_t seed = 0;
};

struct Rect {
  int x = 0, y = 0, w = 0, h = 0;
};

// Quadrant occupied by class c (c mod 4): 0 TL, 1 TR, 2 BL, 3 BR.
Rect quadrant_rect(int class_index, int image_h, int image_w);
// The bright rectangle planted for a positive label of class c.
Rect signal_rect(int class_index, int image_h, int image_w);

// Writes <dir>/imgNNNNN.pgm files, <dir>/manifest.csv and
// <dir>/regions.json (per-class quadrant + signal rectangles). Deterministic
// from the spec seed. Roughly 20% of patients own 2-3 images.
Manifest generate_synthetic(const SyntheticDatasetSpec& spec,
                            const std::filesystem::path& out_dir);

// Loads every manifest image (relative paths resolved against image_dir),
// prepared to the given geometry. Missing files raise IoError naming the path.
std::vector<Tensor> load_images(const Manifest& manifest,
                                const std::filesystem::path& image_dir, int target_h,
                                int target_w, bool replicate_to_3);

}  // namespace cxr
