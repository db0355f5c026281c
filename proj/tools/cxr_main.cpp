// cxr: synthesize data, split by patient, train, evaluate, explain.
//
// Every command stages its outputs in <out-dir>.part and renames on success,
// so a failed run leaves no partial outputs behind. A run_manifest.json with
// the resolved flags lands next to the outputs of every successful run.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cxr/data.hpp"
#include "cxr/gradcam.hpp"
#include "cxr/loss.hpp"
#include "cxr/metrics.hpp"
#include "cxr/model.hpp"
#include "cxr/optimizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cxr;

namespace {

constexpr const char* kToolVersion = "cxr 1.0.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool g_quiet = false;

void say(const std::string& line) {
  if (!g_quiet) std::cout << line << '\n';
}

// All outputs go to a sibling .part directory first; commit() swaps it in.
class StagedDir {
 public:
  explicit StagedDir(fs::path final_dir)
      : final_(std::move(final_dir)), tmp_(final_.string() + ".part") {
    std::error_code ec;
    fs::remove_all(tmp_, ec);
    fs::create_directories(tmp_);
  }
  ~StagedDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(tmp_, ec);
    }
  }
  const fs::path& dir() const { return tmp_; }
  void commit() {
    std::error_code ec;
    fs::remove_all(final_, ec);
    if (!final_.parent_path().empty()) fs::create_directories(final_.parent_path(), ec);
    fs::rename(tmp_, final_);
    committed_ = true;
  }

 private:
  fs::path final_;
  fs::path tmp_;
  bool committed_ = false;
};

class RunClock {
 public:
  RunClock() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void write_run_manifest(const fs::path& dir, const std::string& command,
                        const json& flags, const RunClock& clock) {
  json j;
  j["command"] = command;
  j["tool_version"] = kToolVersion;
  j["flags"] = flags;
  j["wall_seconds"] = clock.seconds();
  std::ofstream os(dir / "run_manifest.json");
  if (!os) throw IoError("cannot write run_manifest.json under " + dir.string());
  os << j.dump(2) << '\n';
}

std::vector<double> per_class_prevalence(const Manifest& m) {
  std::vector<double> out(m.class_names.size(), 0.0);
  if (m.records.empty()) return out;
  for (const SampleRecord& r : m.records) {
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += r.labels[c];
  }
  for (double& v : out) v /= static_cast<double>(m.records.size());
  return out;
}

// --- synth --------------------------------------------------------------

struct SynthOpts {
  int n = 2000;
  int size = 32;
  int classes = 4;
  std::vector<double> prevalence;
  double noise = 0.20;
  std::uint64_t seed = 0;
  std::string out_dir;
};

void run_synth(const SynthOpts& o) {
  if (o.n < 1) throw UsageError("synth: --n must be at least 1");
  if (o.size < 4) throw UsageError("synth: --size must be at least 4");
  if (o.classes < 1) throw UsageError("synth: --classes must be at least 1");
  SyntheticDatasetSpec spec;
  spec.n_images = o.n;
  spec.height = o.size;
  spec.width = o.size;
  spec.num_classes = o.classes;
  spec.prevalence = o.prevalence.empty()
                        ? std::vector<double>(static_cast<std::size_t>(o.classes), 0.2)
                        : o.prevalence;
  if (spec.prevalence.size() != static_cast<std::size_t>(o.classes)) {
    throw UsageError("synth: --prevalence needs one value per class");
  }
  for (double p : spec.prevalence) {
    if (!(p > 0.0 && p < 1.0)) throw UsageError("synth: prevalence values must lie in (0,1)");
  }
  if (o.noise < 0.0) throw UsageError("synth: --noise must be >= 0");
  spec.noise_std = o.noise;
  spec.seed = o.seed;

  RunClock clock;
  StagedDir staged{fs::path(o.out_dir)};
  Manifest m = generate_synthetic(spec, staged.dir());
  say("synth: wrote " + std::to_string(m.records.size()) + " images to " + o.out_dir);

  json flags{{"n", o.n},       {"size", o.size},   {"classes", o.classes},
             {"prevalence", spec.prevalence},      {"noise", o.noise},
             {"seed", o.seed}, {"out_dir", o.out_dir}};
  write_run_manifest(staged.dir(), "synth", flags, clock);
  staged.commit();
}

// --- split --------------------------------------------------------------

struct SplitOpts {
  std::string manifest;
  double fraction = 0.8;
  std::uint64_t seed = 0;
  std::string out_dir;
};

void run_split(const SplitOpts& o) {
  if (!(o.fraction > 0.0 && o.fraction < 1.0)) {
    throw UsageError("split: --fraction must lie strictly between 0 and 1");
  }
  RunClock clock;
  Manifest m = load_manifest(o.manifest);
  SplitResult split = patient_level_split(m, o.fraction, o.seed);

  StagedDir staged{fs::path(o.out_dir)};
  save_manifest(split.train, staged.dir() / "train.csv");
  save_manifest(split.test, staged.dir() / "test.csv");

  auto patients = [](const Manifest& man) {
    std::set<std::string> p;
    for (const auto& r : man.records) p.insert(r.patient_id);
    return p;
  };
  const auto train_p = patients(split.train);
  const auto test_p = patients(split.test);
  long long overlap = 0;
  for (const auto& p : train_p) overlap += static_cast<long long>(test_p.count(p));

  json report;
  report["train_images"] = split.train.records.size();
  report["test_images"] = split.test.records.size();
  report["train_patients"] = train_p.size();
  report["test_patients"] = test_p.size();
  report["patient_overlap"] = overlap;
  report["train_prevalence"] = per_class_prevalence(split.train);
  report["test_prevalence"] = per_class_prevalence(split.test);
  report["class_names"] = m.class_names;
  std::ofstream os(staged.dir() / "split_report.json");
  os << report.dump(2) << '\n';

  say("split: " + std::to_string(split.train.records.size()) + " train / " +
      std::to_string(split.test.records.size()) + " test images, patient overlap " +
      std::to_string(overlap));

  json flags{{"manifest", o.manifest},
             {"fraction", o.fraction},
             {"seed", o.seed},
             {"out_dir", o.out_dir}};
  write_run_manifest(staged.dir(), "split", flags, clock);
  staged.commit();
}

// --- train --------------------------------------------------------------

struct TrainOpts {
  std::string manifest;
  std::string data_dir;
  std::string out_dir;
  int epochs = 20;
  int batch = 8;
  double lr = 0.001;
  std::uint64_t seed = 0;
  std::string weighted = "on";
  int size = 32;
  bool replicate3 = false;
  int initial = 16;
  int growth = 8;
  std::vector<int> blocks{2, 2, 2};
  double dropout = 0.10;
  bool no_batch_norm = false;
  double lr_decay = 0.5;
  int lr_patience = 1;
  double min_lr = 1e-5;
  bool checkpoint_epochs = false;
};

void run_train(const TrainOpts& o) {
  if (o.epochs < 1) throw UsageError("train: --epochs must be at least 1");
  if (o.batch < 1) throw UsageError("train: --batch must be at least 1");
  if (!(o.lr > 0.0)) throw UsageError("train: --lr must be positive");
  if (o.weighted != "on" && o.weighted != "off") {
    throw UsageError("train: --weighted-loss takes 'on' or 'off'");
  }
  if (o.min_lr > o.lr) throw UsageError("train: --min-lr must not exceed --lr");

  RunClock clock;
  const fs::path data_dir = o.data_dir.empty() ? fs::path(o.manifest).parent_path()
                                               : fs::path(o.data_dir);
  Manifest manifest = load_manifest(o.manifest);
  if (manifest.records.empty()) throw Error("train: manifest lists no images");

  say("train: loading " + std::to_string(manifest.records.size()) + " images");
  TrainingData data;
  data.images = load_images(manifest, data_dir, o.size, o.size, o.replicate3);
  data.labels = manifest.label_matrix();

  NormalizationStats stats = compute_stats(data.images);
  for (Tensor& img : data.images) img = apply_stats(img, stats);

  const ClassFrequencies freqs = compute_frequencies(data.labels);
  const ClassWeights weights = o.weighted == "on"
                                   ? compute_weights(freqs)
                                   : ClassWeights::unit(data.labels.cols);
  for (int c : weights.degenerate) {
    say("train: warning: class " + manifest.class_names[static_cast<std::size_t>(c)] +
        " is degenerate in the training split (one-sided loss)");
  }

  ModelConfig config;
  config.input_channels = o.replicate3 ? 3 : 1;
  config.input_h = o.size;
  config.input_w = o.size;
  config.initial_channels = o.initial;
  config.growth_rate = o.growth;
  config.block_layout = o.blocks;
  config.num_classes = data.labels.cols;
  config.dropout_rate = o.dropout;
  config.use_batch_norm = !o.no_batch_norm;
  Model model = build_model(config, o.seed);

  TrainConfig tc;
  tc.batch_size = o.batch;
  tc.epochs = o.epochs;
  tc.initial_lr = o.lr;
  tc.lr_decay_factor = o.lr_decay;
  tc.lr_patience = o.lr_patience;
  tc.min_lr = o.min_lr;
  tc.seed = o.seed;

  StagedDir staged{fs::path(o.out_dir)};
  TrainResult result = train_model(model, data, weights, tc, [&](const EpochStats& s) {
    char line[160];
    std::snprintf(line, sizeof(line), "epoch %3d  loss %.6f  lr %.2e  (%.1fs)", s.epoch,
                  s.mean_loss, s.lr, s.wall_seconds);
    say(line);
    if (o.checkpoint_epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "weights_epoch%03d.bin", s.epoch);
      save_weights(model, staged.dir() / name);
    }
  });

  save_weights(model, staged.dir() / "weights.bin");
  save_stats(stats, staged.dir() / "stats.json");
  write_train_log(result.epochs, staged.dir() / "train_log.csv");
  write_contribution_csv(contribution_report(data.labels, weights, manifest.class_names),
                         staged.dir() / "contributions.csv");

  json flags{{"manifest", o.manifest},
             {"data_dir", data_dir.string()},
             {"out_dir", o.out_dir},
             {"epochs", o.epochs},
             {"batch", o.batch},
             {"lr", o.lr},
             {"seed", o.seed},
             {"weighted_loss", o.weighted},
             {"size", o.size},
             {"replicate3", o.replicate3},
             {"initial", o.initial},
             {"growth", o.growth},
             {"blocks", o.blocks},
             {"dropout", o.dropout},
             {"batch_norm", !o.no_batch_norm},
             {"lr_decay", o.lr_decay},
             {"lr_patience", o.lr_patience},
             {"min_lr", o.min_lr}};
  write_run_manifest(staged.dir(), "train", flags, clock);
  staged.commit();
  say("train: done, final loss " + std::to_string(result.epochs.back().mean_loss));
}

// --- eval ---------------------------------------------------------------

struct EvalOpts {
  std::string weights;
  std::string manifest;
  std::string data_dir;
  std::string stats;
  std::string out_dir;
  double threshold = 0.5;
  int bootstrap = 1000;
  double confidence = 0.95;
  std::uint64_t bootstrap_seed = 0;
  int batch = 64;
};

std::vector<std::vector<double>> score_images(Model& model,
                                              const std::vector<Tensor>& images,
                                              int batch_size) {
  const int n = static_cast<int>(images.size());
  const int k = model.config.num_classes;
  std::vector<std::vector<double>> per_class(static_cast<std::size_t>(k));
  for (auto& v : per_class) v.reserve(static_cast<std::size_t>(n));

  const int c = model.config.input_channels;
  const int h = model.config.input_h;
  const int w = model.config.input_w;
  const std::size_t image_len = static_cast<std::size_t>(c) * h * w;
  for (int start = 0; start < n; start += batch_size) {
    const int b = std::min(batch_size, n - start);
    Tensor batch({b, c, h, w});
    for (int i = 0; i < b; ++i) {
      std::copy_n(images[static_cast<std::size_t>(start + i)].data(), image_len,
                  batch.data() + static_cast<std::size_t>(i) * image_len);
    }
    Graph g;
    Tensor probs = model_forward_trace(model, g, batch, Mode::Evaluation).probs;
    for (int i = 0; i < b; ++i) {
      for (int cls = 0; cls < k; ++cls) {
        per_class[static_cast<std::size_t>(cls)].push_back(
            probs.values()[static_cast<std::size_t>(i) * k + cls]);
      }
    }
  }
  return per_class;
}

void run_eval(const EvalOpts& o) {
  if (!(o.threshold >= 0.0 && o.threshold <= 1.0)) {
    throw UsageError("eval: --threshold must lie in [0,1]");
  }
  if (o.bootstrap != 0 && o.bootstrap < 100) {
    throw UsageError("eval: --bootstrap takes 0 (off) or at least 100 resamples");
  }
  RunClock clock;
  Model model = load_model(o.weights);
  Manifest manifest = load_manifest(o.manifest);
  if (manifest.records.empty()) throw Error("eval: manifest lists no images");
  if (static_cast<int>(manifest.class_names.size()) != model.config.num_classes) {
    throw Error("eval: manifest lists " + std::to_string(manifest.class_names.size()) +
                " classes but the weight file was trained for " +
                std::to_string(model.config.num_classes));
  }
  NormalizationStats stats = load_stats(o.stats);  // train-split statistics

  const fs::path data_dir = o.data_dir.empty() ? fs::path(o.manifest).parent_path()
                                               : fs::path(o.data_dir);
  std::vector<Tensor> images =
      load_images(manifest, data_dir, model.config.input_h, model.config.input_w,
                  model.config.input_channels == 3);
  for (Tensor& img : images) img = apply_stats(img, stats);

  say("eval: scoring " + std::to_string(images.size()) + " images");
  auto per_class_scores = score_images(model, images, o.batch);

  std::vector<std::vector<std::uint8_t>> per_class_labels(manifest.class_names.size());
  for (std::size_t c = 0; c < manifest.class_names.size(); ++c) {
    for (const SampleRecord& r : manifest.records) {
      per_class_labels[c].push_back(r.labels[c]);
    }
  }

  BootstrapConfig boot;
  boot.n_resamples = o.bootstrap;
  boot.confidence_level = o.confidence;
  boot.seed = o.bootstrap_seed;
  EvalReport report = metrics_table(per_class_scores, per_class_labels,
                                    manifest.class_names, o.threshold,
                                    o.bootstrap > 0 ? &boot : nullptr);

  StagedDir staged{fs::path(o.out_dir)};
  write_metrics_csv(report, staged.dir() / "metrics.csv");
  write_metrics_json(report, staged.dir() / "metrics.json");
  if (o.bootstrap > 0) write_bootstrap_csv(report, staged.dir() / "bootstrap.csv");
  write_roc_csvs(report, staged.dir());

  {
    std::ofstream os(staged.dir() / "predictions.csv");
    os << "Image";
    for (const std::string& c : manifest.class_names) os << ',' << c;
    os << '\n';
    char buf[64];
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      os << manifest.records[i].image_path;
      for (std::size_t c = 0; c < manifest.class_names.size(); ++c) {
        std::snprintf(buf, sizeof(buf), ",%.10g", per_class_scores[c][i]);
        os << buf;
      }
      os << '\n';
    }
  }

  for (std::size_t c = 0; c < report.rows.size(); ++c) {
    const MetricRow& r = report.rows[c];
    char line[200];
    if (report.bootstraps[c]) {
      std::snprintf(line, sizeof(line), "%-16s AUC %.3f  CI %s  sens %.3f  spec %.3f",
                    r.class_name.c_str(), r.auc,
                    report.bootstraps[c]->interval_text().c_str(), r.sensitivity,
                    r.specificity);
    } else {
      std::snprintf(line, sizeof(line), "%-16s AUC %.3f  sens %.3f  spec %.3f",
                    r.class_name.c_str(), r.auc, r.sensitivity, r.specificity);
    }
    say(line);
  }

  json flags{{"weights", o.weights},
             {"manifest", o.manifest},
             {"data_dir", data_dir.string()},
             {"stats", o.stats},
             {"out_dir", o.out_dir},
             {"threshold", o.threshold},
             {"bootstrap", o.bootstrap},
             {"confidence", o.confidence},
             {"bootstrap_seed", o.bootstrap_seed}};
  write_run_manifest(staged.dir(), "eval", flags, clock);
  staged.commit();
}

// --- gradcam ------------------------------------------------------------

struct GradcamOpts {
  std::string weights;
  std::string stats;
  std::string out_dir;
  std::vector<std::string> images;
  std::string image_list;
  std::string data_dir;
  std::vector<int> classes;
  double alpha = 0.5;
  std::string regions;
};

void run_gradcam(const GradcamOpts& o) {
  if (!(o.alpha > 0.0 && o.alpha <= 1.0)) {
    throw UsageError("gradcam: --alpha must lie in (0,1]");
  }
  if (o.classes.empty()) throw UsageError("gradcam: --classes requires at least one class");

  std::vector<std::string> image_paths = o.images;
  if (!o.image_list.empty()) {
    std::ifstream is(o.image_list);
    if (!is) throw Error("gradcam: cannot open --image-list " + o.image_list);
    std::string line;
    while (std::getline(is, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
      if (!line.empty()) image_paths.push_back(line);
    }
  }
  if (image_paths.empty()) {
    throw UsageError("gradcam: no input images (--images or --image-list)");
  }

  RunClock clock;
  Model model = load_model(o.weights);
  for (int c : o.classes) {
    if (c < 0 || c >= model.config.num_classes) {
      throw UsageError("gradcam: class " + std::to_string(c) + " out of range, model has " +
                       std::to_string(model.config.num_classes) + " classes");
    }
  }
  NormalizationStats stats = load_stats(o.stats);

  // optional synthetic ground truth: per-class quadrant rectangles
  std::map<int, Rect> regions;
  if (!o.regions.empty()) {
    std::ifstream is(o.regions);
    if (!is) throw Error("gradcam: cannot open --regions " + o.regions);
    json j;
    is >> j;
    const double sy = static_cast<double>(model.config.input_h) /
                      j.at("image_height").get<double>();
    const double sx = static_cast<double>(model.config.input_w) /
                      j.at("image_width").get<double>();
    for (const json& jc : j.at("classes")) {
      const json& q = jc.at("quadrant_rect");
      Rect r;
      r.x = static_cast<int>(std::lround(q.at("x").get<double>() * sx));
      r.y = static_cast<int>(std::lround(q.at("y").get<double>() * sy));
      r.w = static_cast<int>(std::lround(q.at("w").get<double>() * sx));
      r.h = static_cast<int>(std::lround(q.at("h").get<double>() * sy));
      regions[jc.at("index").get<int>()] = r;
    }
  }

  StagedDir staged{fs::path(o.out_dir)};
  const fs::path prefix = o.data_dir.empty() ? fs::path() : fs::path(o.data_dir);
  int written = 0;
  for (const std::string& image_path : image_paths) {
    const fs::path full = prefix.empty() ? fs::path(image_path) : prefix / image_path;
    GrayImage raw = read_pgm(full);
    GrayImage display = resize_bilinear(raw, model.config.input_h, model.config.input_w);
    Tensor prepared = apply_stats(
        prepare_image(raw, model.config.input_h, model.config.input_w,
                      model.config.input_channels == 3),
        stats);

    for (int cls : o.classes) {
      double prob = 0.0;
      Heatmap map = gradcam(model, prepared, cls, &prob);
      Heatmap up = upsample_heatmap(map, model.config.input_h, model.config.input_w);
      OverlayImage overlay = make_overlay(display, up, o.alpha);

      const std::string stem = full.stem().string() + "_class" + std::to_string(cls);
      write_ppm(overlay, staged.dir() / (stem + ".ppm"));

      json side;
      side["image"] = image_path;
      side["class_index"] = cls;
      side["probability"] = prob;
      side["raw_max"] = map.raw_max;
      side["degenerate"] = map.degenerate();
      side["source_layer"] = map.source_layer;
      auto region = regions.find(cls);
      if (region != regions.end()) {
        side["localization_score"] = localization_score(up, region->second);
        side["region"] = {{"x", region->second.x},
                          {"y", region->second.y},
                          {"w", region->second.w},
                          {"h", region->second.h}};
      }
      std::ofstream os(staged.dir() / (stem + ".json"));
      os << side.dump(2) << '\n';
      ++written;
    }
  }
  say("gradcam: wrote " + std::to_string(written) + " overlays to " + o.out_dir);

  json flags{{"weights", o.weights}, {"stats", o.stats},
             {"out_dir", o.out_dir}, {"images", image_paths},
             {"classes", o.classes}, {"alpha", o.alpha},
             {"regions", o.regions}, {"data_dir", o.data_dir}};
  write_run_manifest(staged.dir(), "gradcam", flags, clock);
  staged.commit();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-label chest-pathology pipeline: synthetic data, patient-level "
               "splits, dense-net training, metric reports, attention overlays"};
  app.set_version_flag("--version", kToolVersion);
  app.add_flag("--quiet", g_quiet, "suppress progress output");
  app.require_subcommand(1);

  SynthOpts synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  synth_cmd->add_option("--n", synth.n, "number of images");
  synth_cmd->add_option("--size", synth.size, "square image size in pixels");
  synth_cmd->add_option("--classes", synth.classes, "number of classes");
  synth_cmd->add_option("--prevalence", synth.prevalence, "per-class positive rate")
      ->delimiter(',');
  synth_cmd->add_option("--noise", synth.noise, "gaussian pixel noise stddev");
  synth_cmd->add_option("--seed", synth.seed, "generator seed");
  synth_cmd->add_option("--out-dir", synth.out_dir, "output directory")->required();

  SplitOpts split;
  CLI::App* split_cmd = app.add_subcommand("split", "patient-level train/test split");
  split_cmd->add_option("--manifest", split.manifest, "input manifest CSV")->required();
  split_cmd->add_option("--fraction", split.fraction, "train image fraction");
  split_cmd->add_option("--seed", split.seed, "shuffle seed");
  split_cmd->add_option("--out-dir", split.out_dir, "output directory")->required();

  TrainOpts train;
  CLI::App* train_cmd = app.add_subcommand("train", "train the classifier");
  train_cmd->add_option("--manifest", train.manifest, "training manifest CSV")->required();
  train_cmd->add_option("--data-dir", train.data_dir,
                        "image directory (default: manifest dir)");
  train_cmd->add_option("--out-dir", train.out_dir, "output directory")->required();
  train_cmd->add_option("--epochs", train.epochs, "training epochs");
  train_cmd->add_option("--batch", train.batch, "mini-batch size");
  train_cmd->add_option("--lr", train.lr, "initial learning rate");
  train_cmd->add_option("--seed", train.seed, "model init and shuffle seed");
  train_cmd->add_option("--weighted-loss", train.weighted,
                        "frequency-balanced loss: on|off");
  train_cmd->add_option("--size", train.size, "input image size");
  train_cmd->add_flag("--replicate3", train.replicate3, "replicate grayscale to 3 channels");
  train_cmd->add_option("--initial", train.initial, "stem output channels");
  train_cmd->add_option("--growth", train.growth, "dense layer growth rate");
  train_cmd->add_option("--blocks", train.blocks, "dense layers per block")->delimiter(',');
  train_cmd->add_option("--dropout", train.dropout, "dropout rate before the head");
  train_cmd->add_flag("--no-batch-norm", train.no_batch_norm, "disable batch normalization");
  train_cmd->add_option("--lr-decay", train.lr_decay, "plateau decay factor");
  train_cmd->add_option("--lr-patience", train.lr_patience, "plateau patience in epochs");
  train_cmd->add_option("--min-lr", train.min_lr, "learning-rate floor");
  train_cmd->add_flag("--checkpoint-epochs", train.checkpoint_epochs,
                      "write a weight file after every epoch");

  EvalOpts eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a test split and emit reports");
  eval_cmd->add_option("--weights", eval.weights, "trained weight file")->required();
  eval_cmd->add_option("--manifest", eval.manifest, "test manifest CSV")->required();
  eval_cmd->add_option("--data-dir", eval.data_dir, "image directory (default: manifest dir)");
  eval_cmd->add_option("--stats", eval.stats, "training-split normalization stats JSON")
      ->required();
  eval_cmd->add_option("--out-dir", eval.out_dir, "output directory")->required();
  eval_cmd->add_option("--threshold", eval.threshold, "decision threshold");
  eval_cmd->add_option("--bootstrap", eval.bootstrap, "bootstrap resamples (0 = off)");
  eval_cmd->add_option("--confidence", eval.confidence, "bootstrap confidence level");
  eval_cmd->add_option("--bootstrap-seed", eval.bootstrap_seed, "bootstrap seed");
  eval_cmd->add_option("--batch", eval.batch, "scoring batch size");

  GradcamOpts gradcam;
  CLI::App* gradcam_cmd = app.add_subcommand("gradcam", "write attention overlays");
  gradcam_cmd->add_option("--weights", gradcam.weights, "trained weight file")->required();
  gradcam_cmd->add_option("--stats", gradcam.stats, "normalization stats JSON")->required();
  gradcam_cmd->add_option("--out-dir", gradcam.out_dir, "output directory")->required();
  gradcam_cmd->add_option("--images", gradcam.images, "comma-separated PGM paths")
      ->delimiter(',');
  gradcam_cmd->add_option("--image-list", gradcam.image_list,
                          "file with one PGM path per line");
  gradcam_cmd->add_option("--data-dir", gradcam.data_dir, "prefix for relative image paths");
  gradcam_cmd->add_option("--classes", gradcam.classes, "class indices")->delimiter(',');
  gradcam_cmd->add_option("--alpha", gradcam.alpha, "overlay blend strength");
  gradcam_cmd->add_option("--regions", gradcam.regions,
                          "regions.json with planted ground-truth rectangles");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth_cmd->parsed()) run_synth(synth);
    if (split_cmd->parsed()) run_split(split);
    if (train_cmd->parsed()) run_train(train);
    if (eval_cmd->parsed()) run_eval(eval);
    if (gradcam_cmd->parsed()) run_gradcam(gradcam);
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
