#include "cxr/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace cxr {

Heatmap compute_cam(const std::vector<double>& activations,
                    const std::vector<double>& grads, int channels, int height,
                    int width) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (activations.size() != static_cast<std::size_t>(channels) * plane ||
      grads.size() != activations.size()) {
    throw ShapeError("compute_cam: activation/gradient buffers do not match C*H*W");
  }

  std::vector<double> alpha(static_cast<std::size_t>(channels), 0.0);
  for (int c = 0; c < channels; ++c) {
    const double* gp = grads.data() + static_cast<std::size_t>(c) * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
    alpha[static_cast<std::size_t>(c)] = acc / static_cast<double>(plane);
  }

  Heatmap map;
  map.height = height;
  map.width = width;
  map.values.assign(plane, 0.0);
  double raw_max = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < plane; ++i) {
    double v = 0.0;
    for (int c = 0; c < channels; ++c) {
      v += alpha[static_cast<std::size_t>(c)] *
           activations[static_cast<std::size_t>(c) * plane + i];
    }
    raw_max = std::max(raw_max, v);
    map.values[i] = v > 0.0 ? v : 0.0;
  }
  map.raw_max = raw_max;
  if (raw_max > 0.0) {
    for (double& v : map.values) v /= raw_max;
  } else {
    std::fill(map.values.begin(), map.values.end(), 0.0);
  }
  return map;
}

Heatmap gradcam(Model& model, const Tensor& image, int class_index,
                double* probability_out) {
  if (class_index < 0 || class_index >= model.config.num_classes) {
    throw InvalidArgument("gradcam: class index " + std::to_string(class_index) +
                          " out of range for " + std::to_string(model.config.num_classes) +
                          " classes");
  }
  if (image.ndim() != 3) {
    throw ShapeError("gradcam: expected a prepared [C,H,W] image, got " +
                     shape_str(image.shape()));
  }

  Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)}, image.values());
  Graph g;
  ForwardTrace trace = model_forward_trace(model, g, batch, Mode::Evaluation);
  if (probability_out) {
    *probability_out = trace.probs.values()[static_cast<std::size_t>(class_index)];
  }
  Tensor target = g.select(trace.logits, class_index);
  g.backward(target);

  const Tensor& act = trace.last_block;  // [1, C, h, w]
  Heatmap map = compute_cam(act.values(), g.grad(act), act.dim(1), act.dim(2), act.dim(3));
  map.source_layer = "dense_block" + std::to_string(model.blocks.size() - 1);
  map.class_index = class_index;
  return map;
}

Heatmap upsample_heatmap(const Heatmap& map, int target_h, int target_w) {
  if (map.height < 1 || map.width < 1) throw InvalidArgument("upsample_heatmap: empty map");
  if (target_h < map.height || target_w < map.width) {
    throw InvalidArgument("upsample_heatmap: target " + std::to_string(target_h) + "x" +
                          std::to_string(target_w) + " smaller than source " +
                          std::to_string(map.height) + "x" + std::to_string(map.width));
  }
  GrayImage src;
  src.width = map.width;
  src.height = map.height;
  src.pixels = map.values;
  const GrayImage up = resize_bilinear(src, target_h, target_w);

  Heatmap out;
  out.height = target_h;
  out.width = target_w;
  out.values = up.pixels;
  out.source_layer = map.source_layer;
  out.class_index = map.class_index;
  out.raw_max = map.raw_max;
  return out;
}

std::array<double, 3> heat_colormap(double v) {
  v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  if (v < 0.5) {
    const double t = 2.0 * v;  // blue -> yellow
    return {t, t, 1.0 - t};
  }
  const double t = 2.0 * v - 1.0;  // yellow -> red
  return {1.0, 1.0 - t, 0.0};
}

OverlayImage make_overlay(const GrayImage& base, const Heatmap& map, double blend_alpha) {
  if (base.width != map.width || base.height != map.height) {
    throw InvalidArgument("make_overlay: heatmap must be upsampled to the image size");
  }
  if (!(blend_alpha > 0.0 && blend_alpha < 1.0)) {
    // alpha 1 is allowed for the full-blend case used in tests
    if (blend_alpha != 1.0) {
      throw InvalidArgument("make_overlay: blend alpha must lie in (0,1]");
    }
  }

  OverlayImage out;
  out.width = base.width;
  out.height = base.height;
  out.blend_alpha = blend_alpha;
  out.rgb.resize(static_cast<std::size_t>(base.width) * base.height * 3);
  for (std::size_t i = 0; i < base.pixels.size(); ++i) {
    const double gray = std::clamp(base.pixels[i], 0.0, 1.0);
    const double v = map.values[i];
    const auto color = heat_colormap(v);
    const double mixed = blend_alpha * v;
    for (int ch = 0; ch < 3; ++ch) {
      const double value = (1.0 - mixed) * gray + mixed * color[static_cast<std::size_t>(ch)];
      out.rgb[i * 3 + static_cast<std::size_t>(ch)] =
          static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
    }
  }
  return out;
}

void write_ppm(const OverlayImage& overlay, const std::filesystem::path& path) {
  if (overlay.width < 1 || overlay.height < 1) throw InvalidArgument("ppm: empty overlay");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("ppm: cannot open " + path.string() + " for writing");
  os << "P6\n" << overlay.width << ' ' << overlay.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(overlay.rgb.data()),
           static_cast<std::streamsize>(overlay.rgb.size()));
  if (!os) throw IoError("ppm: write failed for " + path.string());
}

double localization_score(const Heatmap& map, const Rect& region) {
  if (region.w < 1 || region.h < 1) {
    throw InvalidArgument("localization_score: empty region");
  }
  if (region.x < 0 || region.y < 0 || region.x + region.w > map.width ||
      region.y + region.h > map.height) {
    throw InvalidArgument("localization_score: region exceeds map bounds");
  }
  double total = 0.0;
  for (double v : map.values) total += v;
  if (total <= 0.0) return 0.0;

  double inside = 0.0;
  for (int y = region.y; y < region.y + region.h; ++y) {
    for (int x = region.x; x < region.x + region.w; ++x) {
      inside += map.at(y, x);
    }
  }
  return inside / total;
}

}  // namespace cxr
