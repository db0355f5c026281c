#include "cxr/loss.hpp"

#include <cstdio>
#include <fstream>

namespace cxr {

ClassWeights ClassWeights::unit(int num_classes) {
  ClassWeights w;
  w.w_pos.assign(static_cast<std::size_t>(num_classes), 1.0);
  w.w_neg.assign(static_cast<std::size_t>(num_classes), 1.0);
  return w;
}

ClassFrequencies compute_frequencies(const LabelMatrix& labels) {
  if (labels.rows < 1 || labels.cols < 1) {
    throw InvalidArgument("compute_frequencies: empty label matrix");
  }
  ClassFrequencies f;
  f.n_examples = labels.rows;
  f.freq_pos.assign(static_cast<std::size_t>(labels.cols), 0.0);
  for (int r = 0; r < labels.rows; ++r) {
    for (int c = 0; c < labels.cols; ++c) {
      const std::uint8_t y = labels.at(r, c);
      if (y != 0 && y != 1) {
        throw InvalidArgument("compute_frequencies: non-binary label at row " +
                              std::to_string(r) + ", column " + std::to_string(c));
      }
      f.freq_pos[static_cast<std::size_t>(c)] += y;
    }
  }
  f.freq_neg.resize(f.freq_pos.size());
  for (std::size_t c = 0; c < f.freq_pos.size(); ++c) {
    f.freq_pos[c] /= static_cast<double>(labels.rows);
    f.freq_neg[c] = 1.0 - f.freq_pos[c];
  }
  return f;
}

ClassWeights compute_weights(const ClassFrequencies& freqs) {
  ClassWeights w;
  w.w_pos = freqs.freq_neg;
  w.w_neg = freqs.freq_pos;
  for (std::size_t c = 0; c < freqs.freq_pos.size(); ++c) {
    if (freqs.freq_pos[c] == 0.0 || freqs.freq_pos[c] == 1.0) {
      w.degenerate.push_back(static_cast<int>(c));
    }
  }
  return w;
}

Tensor weighted_bce(Graph& g, const Tensor& probabilities, const LabelMatrix& labels,
                    const ClassWeights& weights, double clamp_eps) {
  if (probabilities.ndim() != 2 || probabilities.dim(0) != labels.rows ||
      probabilities.dim(1) != labels.cols) {
    throw ShapeError("weighted_bce: probabilities " + shape_str(probabilities.shape()) +
                     " do not match labels [" + std::to_string(labels.rows) + "x" +
                     std::to_string(labels.cols) + "]");
  }
  return g.bce_loss(probabilities, labels.as_doubles(), weights.w_pos, weights.w_neg,
                    clamp_eps);
}

Tensor plain_bce(Graph& g, const Tensor& probabilities, const LabelMatrix& labels,
                 double clamp_eps) {
  return weighted_bce(g, probabilities, labels, ClassWeights::unit(labels.cols),
                      clamp_eps);
}

std::vector<ContributionRow> contribution_report(const LabelMatrix& labels,
                                                 const ClassWeights& weights,
                                                 const std::vector<std::string>& class_names) {
  const ClassFrequencies freqs = compute_frequencies(labels);
  if (weights.w_pos.size() != freqs.freq_pos.size()) {
    throw InvalidArgument("contribution_report: weights cover " +
                          std::to_string(weights.w_pos.size()) + " classes, labels " +
                          std::to_string(freqs.freq_pos.size()));
  }
  std::vector<ContributionRow> rows;
  for (std::size_t c = 0; c < freqs.freq_pos.size(); ++c) {
    ContributionRow row;
    row.class_name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
    row.freq_pos = freqs.freq_pos[c];
    row.freq_neg = freqs.freq_neg[c];
    row.w_pos = weights.w_pos[c];
    row.w_neg = weights.w_neg[c];
    row.pos_contribution = row.w_pos * row.freq_pos;
    row.neg_contribution = row.w_neg * row.freq_neg;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_contribution_csv(const std::vector<ContributionRow>& rows,
                            const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("contribution report: cannot open " + path.string());
  os << "class,freq_p,freq_n,w_pos,w_neg,pos_contribution,neg_contribution\n";
  char buf[256];
  for (const ContributionRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  r.class_name.c_str(), r.freq_pos, r.freq_neg, r.w_pos, r.w_neg,
                  r.pos_contribution, r.neg_contribution);
    os << buf;
  }
  if (!os) throw IoError("contribution report: write failed for " + path.string());
}

}  // namespace cxr
