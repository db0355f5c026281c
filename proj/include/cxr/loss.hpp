#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cxr/graph.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

// Binary label matrix, one row per example, one column per class.
struct LabelMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> v;  // row-major 0/1

  std::uint8_t at(int r, int c) const {
    return v[static_cast<std::size_t>(r) * cols + c];
  }
  std::vector<double> as_doubles() const {
    return std::vector<double>(v.begin(), v.end());
  }
};

struct ClassFrequencies {
  std::vector<double> freq_pos;
  std::vector<double> freq_neg;  // 1 - freq_pos per class
  long long n_examples = 0;
};

struct ClassWeights {
  std::vector<double> w_pos;  // = freq_neg
  std::vector<double> w_neg;  // = freq_pos
  // classes with freq_pos of exactly 0 or 1; loss is one-sided for them
  std::vector<int> degenerate;

  static ClassWeights unit(int num_classes);
};

// freq_pos[c] = (count of 1s in column c) / N. Throws on non-binary cells.
ClassFrequencies compute_frequencies(const LabelMatrix& labels);

// w_pos = freq_neg, w_neg = freq_pos, so w_pos*freq_p == w_neg*freq_n exactly.
ClassWeights compute_weights(const ClassFrequencies& freqs);

inline constexpr double kDefaultClampEps = 1e-7;

// Differentiable losses; mean over examples and classes.
Tensor weighted_bce(Graph& g, const Tensor& probabilities, const LabelMatrix& labels,
                    const ClassWeights& weights, double clamp_eps = kDefaultClampEps);
Tensor plain_bce(Graph& g, const Tensor& probabilities, const LabelMatrix& labels,
                 double clamp_eps = kDefaultClampEps);

// Expected per-class loss-weight mass of each label polarity. With weights
// from compute_weights the two columns are equal class by class.
struct ContributionRow {
  std::string class_name;
  double freq_pos = 0.0;
  double freq_neg = 0.0;
  double w_pos = 0.0;
  double w_neg = 0.0;
  double pos_contribution = 0.0;  // w_pos * freq_pos
  double neg_contribution = 0.0;  // w_neg * freq_neg
};

std::vector<ContributionRow> contribution_report(const LabelMatrix& labels,
                                                 const ClassWeights& weights,
                                                 const std::vector<std::string>& class_names);

void write_contribution_csv(const std::vector<ContributionRow>& rows,
                            const std::filesystem::path& path);

}  // namespace cxr
