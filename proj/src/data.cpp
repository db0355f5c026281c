#include "cxr/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cxr/rng.hpp"

namespace cxr {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  return s;
}

}  // namespace

LabelMatrix Manifest::label_matrix() const {
  LabelMatrix m;
  m.rows = static_cast<int>(records.size());
  m.cols = static_cast<int>(class_names.size());
  m.v.reserve(static_cast<std::size_t>(m.rows) * m.cols);
  for (const SampleRecord& r : records) {
    m.v.insert(m.v.end(), r.labels.begin(), r.labels.end());
  }
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("manifest: cannot open " + path.string());

  std::string line;
  if (!std::getline(is, line)) throw FormatError("manifest: missing header row in " + path.string());
  auto header = split_csv_line(strip_cr(line));
  if (header.size() < 3 || header[0] != "Image" || header[1] != "PatientId") {
    std::string missing = header.empty() || header[0] != "Image" ? "Image"
                          : header.size() < 2 || header[1] != "PatientId" ? "PatientId"
                                                                          : "<condition>";
    throw FormatError("manifest: header must start with Image,PatientId and list at "
                      "least one condition; missing column '" + missing + "'");
  }

  Manifest m;
  m.class_names.assign(header.begin() + 2, header.end());

  std::set<std::pair<std::string, std::string>> seen;
  int row_number = 1;
  while (std::getline(is, line)) {
    ++row_number;
    line = strip_cr(line);
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw FormatError("manifest: row " + std::to_string(row_number) + " has " +
                        std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(header.size()));
    }
    SampleRecord rec;
    rec.image_path = cells[0];
    rec.patient_id = cells[1];
    if (rec.image_path.empty() || rec.patient_id.empty()) {
      throw FormatError("manifest: empty Image or PatientId at row " +
                        std::to_string(row_number));
    }
    for (std::size_t c = 2; c < cells.size(); ++c) {
      if (cells[c] == "0") {
        rec.labels.push_back(0);
      } else if (cells[c] == "1") {
        rec.labels.push_back(1);
      } else {
        throw FormatError("manifest: non-binary cell '" + cells[c] + "' at row " +
                          std::to_string(row_number));
      }
    }
    if (!seen.insert({rec.image_path, rec.patient_id}).second) {
      throw FormatError("manifest: duplicate (image, patient) pair at row " +
                        std::to_string(row_number));
    }
    m.records.push_back(std::move(rec));
  }
  return m;
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("manifest: cannot open " + path.string() + " for writing");
  os << "Image,PatientId";
  for (const std::string& c : m.class_names) os << ',' << c;
  os << '\n';
  for (const SampleRecord& r : m.records) {
    os << r.image_path << ',' << r.patient_id;
    for (std::uint8_t y : r.labels) os << ',' << static_cast<int>(y);
    os << '\n';
  }
  if (!os) throw IoError("manifest: write failed for " + path.string());
}

SplitResult patient_level_split(const Manifest& manifest, double train_fraction,
                                std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InvalidArgument("split: train_fraction must lie in (0,1)");
  }
  // distinct patients in first-appearance order, with image counts
  std::vector<std::string> patients;
  std::map<std::string, int> count;
  for (const SampleRecord& r : manifest.records) {
    if (count.emplace(r.patient_id, 0).second) patients.push_back(r.patient_id);
    ++count[r.patient_id];
  }
  if (patients.size() < 2) {
    throw SplitError("split: need at least 2 distinct patients, got " +
                     std::to_string(patients.size()));
  }

  Rng rng(seed);
  rng.shuffle(patients);

  const double target =
      train_fraction * static_cast<double>(manifest.records.size());
  std::set<std::string> train_patients;
  long long train_images = 0;
  std::size_t taken = 0;
  std::string last_added;
  while (taken < patients.size()) {
    const std::string& p = patients[taken];
    train_patients.insert(p);
    train_images += count[p];
    last_added = p;
    ++taken;
    if (static_cast<double>(train_images) + 1e-9 >= target) break;
  }
  // the greedy may swallow every patient; keep the test side non-empty
  if (taken == patients.size()) {
    train_patients.erase(last_added);
  }

  SplitResult result;
  result.split_seed = seed;
  result.train_fraction = train_fraction;
  result.train.class_names = manifest.class_names;
  result.test.class_names = manifest.class_names;
  for (const SampleRecord& r : manifest.records) {
    if (train_patients.count(r.patient_id)) {
      result.train.records.push_back(r);
    } else {
      result.test.records.push_back(r);
    }
  }
  return result;
}

// --- PGM --------------------------------------------------------------

namespace {

int read_pnm_token(std::istream& is, const std::string& path) {
  // skips whitespace and '#' comments
  int c = is.get();
  while (is) {
    if (c == '#') {
      while (is && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  if (!is) throw FormatError("pgm: truncated header in " + path);
  int value = 0;
  bool any = false;
  while (is && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = is.get();
  }
  if (!any) throw FormatError("pgm: malformed header in " + path);
  return value;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("pgm: cannot open " + path.string());
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '5') throw FormatError("pgm: not a binary PGM (P5): " + path.string());
  const int w = read_pnm_token(is, path.string());
  const int h = read_pnm_token(is, path.string());
  const int maxval = read_pnm_token(is, path.string());
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
    throw FormatError("pgm: unsupported geometry or maxval in " + path.string());
  }
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!is) throw FormatError("pgm: truncated raster in " + path.string());

  GrayImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(raw.size());
  const double inv = 1.0 / static_cast<double>(maxval);
  for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] * inv;
  return img;
}

void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
  if (img.width < 1 || img.height < 1) throw InvalidArgument("pgm: empty image");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("pgm: cannot open " + path.string() + " for writing");
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    double v = img.pixels[i];
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  os.write(reinterpret_cast<const char*>(raw.data()),
           static_cast<std::streamsize>(raw.size()));
  if (!os) throw IoError("pgm: write failed for " + path.string());
}

GrayImage resize_bilinear(const GrayImage& img, int target_h, int target_w) {
  if (img.width < 1 || img.height < 1) throw InvalidArgument("resize: empty source image");
  if (target_h < 1 || target_w < 1) throw InvalidArgument("resize: zero-sized target");

  GrayImage out;
  out.width = target_w;
  out.height = target_h;
  out.pixels.resize(static_cast<std::size_t>(target_w) * target_h);

  const double sy_scale = static_cast<double>(img.height) / target_h;
  const double sx_scale = static_cast<double>(img.width) / target_w;
  for (int ty = 0; ty < target_h; ++ty) {
    double sy = (ty + 0.5) * sy_scale - 0.5;
    if (sy < 0.0) sy = 0.0;
    if (sy > img.height - 1) sy = img.height - 1;
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fy = sy - y0;
    for (int tx = 0; tx < target_w; ++tx) {
      double sx = (tx + 0.5) * sx_scale - 0.5;
      if (sx < 0.0) sx = 0.0;
      if (sx > img.width - 1) sx = img.width - 1;
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double fx = sx - x0;
      const double top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
      const double bot = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
      out.pixels[static_cast<std::size_t>(ty) * target_w + tx] =
          top * (1.0 - fy) + bot * fy;
    }
  }
  return out;
}

Tensor prepare_image(const GrayImage& raw, int target_h, int target_w,
                     bool replicate_to_3) {
  const GrayImage resized = resize_bilinear(raw, target_h, target_w);
  const int channels = replicate_to_3 ? 3 : 1;
  Tensor t({channels, target_h, target_w});
  const std::size_t plane = resized.pixels.size();
  for (int c = 0; c < channels; ++c) {
    std::copy(resized.pixels.begin(), resized.pixels.end(),
              t.data() + static_cast<std::size_t>(c) * plane);
  }
  return t;
}

// --- normalization ------------------------------------------------------

NormalizationStats compute_stats(const std::vector<Tensor>& train_images) {
  if (train_images.empty()) throw InvalidArgument("stats: need at least one training image");
  const int channels = train_images.front().dim(0);
  const std::size_t plane = static_cast<std::size_t>(train_images.front().dim(1)) *
                            train_images.front().dim(2);

  NormalizationStats stats;
  stats.mean.assign(static_cast<std::size_t>(channels), 0.0);
  stats.stddev.assign(static_cast<std::size_t>(channels), 0.0);

  const double n = static_cast<double>(train_images.size()) * static_cast<double>(plane);
  for (const Tensor& img : train_images) {
    if (img.dim(0) != channels) throw ShapeError("stats: images disagree on channel count");
    for (int c = 0; c < channels; ++c) {
      const double* p = img.data() + static_cast<std::size_t>(c) * plane;
      for (std::size_t i = 0; i < plane; ++i) stats.mean[static_cast<std::size_t>(c)] += p[i];
    }
  }
  for (double& m : stats.mean) m /= n;
  for (const Tensor& img : train_images) {
    for (int c = 0; c < channels; ++c) {
      const double* p = img.data() + static_cast<std::size_t>(c) * plane;
      const double mu = stats.mean[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = p[i] - mu;
        stats.stddev[static_cast<std::size_t>(c)] += d * d;
      }
    }
  }
  for (double& s : stats.stddev) s = std::sqrt(s / n);
  return stats;
}

Tensor apply_stats(const Tensor& image, const NormalizationStats& stats) {
  if (image.ndim() != 3 || image.dim(0) != static_cast<int>(stats.mean.size())) {
    throw ShapeError("stats: image " + shape_str(image.shape()) + " does not match " +
                     std::to_string(stats.mean.size()) + "-channel statistics");
  }
  Tensor out(image.shape(), image.values());
  const std::size_t plane = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
  for (std::size_t c = 0; c < stats.mean.size(); ++c) {
    const double mu = stats.mean[c];
    const double sd = std::max(stats.stddev[c], 1e-6);
    double* p = out.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mu) / sd;
  }
  return out;
}

void save_stats(const NormalizationStats& stats, const std::filesystem::path& path) {
  nlohmann::json j;
  j["mean"] = stats.mean;
  j["std"] = stats.stddev;
  std::ofstream os(path);
  if (!os) throw IoError("stats: cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

NormalizationStats load_stats(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("stats: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("stats: bad JSON in " + path.string() + ": " + e.what());
  }
  NormalizationStats stats;
  stats.mean = j.at("mean").get<std::vector<double>>();
  stats.stddev = j.at("std").get<std::vector<double>>();
  if (stats.mean.size() != stats.stddev.size() || stats.mean.empty()) {
    throw FormatError("stats: mean/std arrays malformed in " + path.string());
  }
  return stats;
}

// --- synthetic dataset --------------------------------------------------

Rect quadrant_rect(int class_index, int image_h, int image_w) {
  const int q = ((class_index % 4) + 4) % 4;
  const int half_w = image_w / 2;
  const int half_h = image_h / 2;
  Rect r;
  r.x = (q % 2 == 0) ? 0 : half_w;
  r.y = (q < 2) ? 0 : half_h;
  r.w = (q % 2 == 0) ? half_w : image_w - half_w;
  r.h = (q < 2) ? half_h : image_h - half_h;
  return r;
}

Rect signal_rect(int class_index, int image_h, int image_w) {
  const Rect quad = quadrant_rect(class_index, image_h, image_w);
  const int q = ((class_index % 4) + 4) % 4;
  // class-specific footprint inside the quadrant
  const double frac = 0.55 + 0.05 * (class_index % 4) + 0.02 * ((class_index / 4) % 3);
  Rect r;
  r.w = std::max(2, static_cast<int>(std::lround(quad.w * frac)));
  r.h = std::max(2, static_cast<int>(std::lround(quad.h * frac)));
  r.w = std::min(r.w, quad.w);
  r.h = std::min(r.h, quad.h);
  // inset toward the image corner of the quadrant, away from its neighbours
  const int slack_x = quad.w - r.w;
  const int slack_y = quad.h - r.h;
  r.x = quad.x + (q % 2 == 0 ? slack_x / 4 : slack_x - slack_x / 4);
  r.y = quad.y + (q < 2 ? slack_y / 4 : slack_y - slack_y / 4);
  return r;
}

namespace {

// The planted rectangles sit kSignalContrast above the image's background.
// The background itself dims to keep every image's global mean at
// kMeanLevel, the way auto-exposure normalizes radiographs: class evidence
// is spatial structure, not overall brightness.
constexpr double kMeanLevel = 0.25;
constexpr double kSignalContrast = 0.12;

void validate_spec(const SyntheticDatasetSpec& spec) {
  if (spec.n_images < 1) throw InvalidArgument("synth: n_images must be positive");
  if (spec.height < 4 || spec.width < 4) {
    throw InvalidArgument("synth: image size must be at least 4x4");
  }
  if (spec.num_classes < 1) throw InvalidArgument("synth: num_classes must be positive");
  if (spec.prevalence.size() != static_cast<std::size_t>(spec.num_classes)) {
    throw InvalidArgument("synth: need one prevalence per class");
  }
  for (double p : spec.prevalence) {
    if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("synth: prevalence must lie in (0,1)");
    if (p * spec.n_images < 1.0 || (1.0 - p) * spec.n_images < 1.0) {
      throw InvalidArgument("synth: prevalence " + std::to_string(p) +
                            " yields no expected positives or negatives at n=" +
                            std::to_string(spec.n_images));
    }
  }
  if (spec.noise_std < 0.0) throw InvalidArgument("synth: noise_std must be >= 0");
}

}  // namespace

Manifest generate_synthetic(const SyntheticDatasetSpec& spec,
                            const std::filesystem::path& out_dir) {
  validate_spec(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("synth: cannot create output directory " + out_dir.string());

  Rng rng(spec.seed);

  Manifest manifest;
  for (int c = 0; c < spec.num_classes; ++c) {
    manifest.class_names.push_back("Class" + std::to_string(c));
  }

  int patient_counter = 0;
  int patient_quota = 0;
  std::string patient_id;
  char namebuf[64];

  for (int i = 0; i < spec.n_images; ++i) {
    if (patient_quota == 0) {
      ++patient_counter;
      std::snprintf(namebuf, sizeof(namebuf), "P%05d", patient_counter);
      patient_id = namebuf;
      // ~20% of patients own 2-3 images
      patient_quota = rng.bernoulli(0.2) ? (rng.bernoulli(0.5) ? 3 : 2) : 1;
    }
    --patient_quota;

    SampleRecord rec;
    std::snprintf(namebuf, sizeof(namebuf), "img%05d.pgm", i);
    rec.image_path = namebuf;
    rec.patient_id = patient_id;

    GrayImage img;
    img.width = spec.width;
    img.height = spec.height;
    img.pixels.assign(static_cast<std::size_t>(spec.width) * spec.height, 0.0);
    for (int c = 0; c < spec.num_classes; ++c) {
      const std::uint8_t y = rng.bernoulli(spec.prevalence[static_cast<std::size_t>(c)]) ? 1 : 0;
      rec.labels.push_back(y);
      if (y) {
        const Rect r = signal_rect(c, spec.height, spec.width);
        for (int yy = r.y; yy < r.y + r.h; ++yy) {
          for (int xx = r.x; xx < r.x + r.w; ++xx) {
            img.pixels[static_cast<std::size_t>(yy) * spec.width + xx] += kSignalContrast;
          }
        }
      }
    }
    // exposure compensation: flat background level chosen so the image mean
    // is exactly kMeanLevel before noise
    double mass = 0.0;
    for (double px : img.pixels) mass += px;
    const double background = kMeanLevel - mass / static_cast<double>(img.pixels.size());
    for (double& px : img.pixels) px += background;
    if (spec.noise_std > 0.0) {
      for (double& px : img.pixels) {
        px += rng.normal(0.0, spec.noise_std);
        px = px < 0.0 ? 0.0 : (px > 1.0 ? 1.0 : px);
      }
    }
    write_pgm(img, out_dir / rec.image_path);
    manifest.records.push_back(std::move(rec));
  }

  save_manifest(manifest, out_dir / "manifest.csv");

  nlohmann::json regions;
  regions["image_height"] = spec.height;
  regions["image_width"] = spec.width;
  regions["classes"] = nlohmann::json::array();
  for (int c = 0; c < spec.num_classes; ++c) {
    const Rect q = quadrant_rect(c, spec.height, spec.width);
    const Rect s = signal_rect(c, spec.height, spec.width);
    nlohmann::json jc;
    jc["index"] = c;
    jc["name"] = manifest.class_names[static_cast<std::size_t>(c)];
    jc["quadrant"] = ((c % 4) + 4) % 4;
    jc["quadrant_rect"] = {{"x", q.x}, {"y", q.y}, {"w", q.w}, {"h", q.h}};
    jc["signal_rect"] = {{"x", s.x}, {"y", s.y}, {"w", s.w}, {"h", s.h}};
    regions["classes"].push_back(jc);
  }
  std::ofstream os(out_dir / "regions.json");
  if (!os) throw IoError("synth: cannot write regions.json");
  os << regions.dump(2) << '\n';

  return manifest;
}

std::vector<Tensor> load_images(const Manifest& manifest,
                                const std::filesystem::path& image_dir, int target_h,
                                int target_w, bool replicate_to_3) {
  std::vector<Tensor> out;
  out.reserve(manifest.records.size());
  for (const SampleRecord& r : manifest.records) {
    const std::filesystem::path p = image_dir / r.image_path;
    if (!std::filesystem::exists(p)) {
      throw IoError("dataset: image listed in manifest is missing: " + p.string());
    }
    out.push_back(prepare_image(read_pgm(p), target_h, target_w, replicate_to_3));
  }
  return out;
}

}  // namespace cxr
