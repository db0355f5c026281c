#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cxr/data.hpp"
#include "cxr/model.hpp"

namespace cxr {

// Class-discriminative attention map, max-normalized to [0,1]. raw_max keeps
// the pre-normalization peak: raw_max <= 0 marks a degenerate map (the
// weighted activation sum was nowhere positive) that stays identically zero.
struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;
  std::string source_layer;
  int class_index = -1;
  double raw_max = 0.0;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  bool degenerate() const { return raw_max <= 0.0; }
};

// Core map assembly: per-channel weights are the spatial means of `grads`,
// the map is ReLU of the weighted channel sum, normalized by its peak.
Heatmap compute_cam(const std::vector<double>& activations,
                    const std::vector<double>& grads, int channels, int height,
                    int width);

// Evaluation-mode forward of one prepared [C,H,W] image, backward from the
// requested class's pre-sigmoid logit, attention over the final dense block
// output. Never mutates model parameters. Optionally reports the class
// probability from the same forward pass.
Heatmap gradcam(Model& model, const Tensor& image, int class_index,
                double* probability_out = nullptr);

// Bilinear upsample; target must be at least the source size.
Heatmap upsample_heatmap(const Heatmap& map, int target_h, int target_w);

struct OverlayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
  double blend_alpha = 0.0;
};

// Fixed blue->yellow->red ramp: (0,0,1) at 0, (1,1,0) at 1/2, (1,0,0) at 1,
// linearly interpolated.
std::array<double, 3> heat_colormap(double v);

// out = (1 - alpha*v) * gray + alpha*v * colormap(v), per pixel.
OverlayImage make_overlay(const GrayImage& base, const Heatmap& map, double blend_alpha);

// Binary PPM (P6), maxval 255.
void write_ppm(const OverlayImage& overlay, const std::filesystem::path& path);

// Fraction of total map mass inside the region; 0 for an identically-zero map.
double localization_score(const Heatmap& map, const Rect& region);

}  // namespace cxr
