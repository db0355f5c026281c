#include <doctest.h>

#include <cmath>

#include "cxr/loss.hpp"
#include "test_helpers.hpp"

using namespace cxr;

namespace {

LabelMatrix make_labels(int rows, int cols, const std::vector<std::uint8_t>& v) {
  LabelMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.v = v;
  return m;
}

}  // namespace

TEST_CASE("compute_frequencies counts positives per column") {
  LabelMatrix m = make_labels(4, 3, {1, 1, 1,
                                     0, 0, 1,
                                     0, 1, 1,
                                     0, 0, 1});
  ClassFrequencies f = compute_frequencies(m);
  CHECK(f.n_examples == 4);
  CHECK(f.freq_pos[0] == doctest::Approx(0.25));
  CHECK(f.freq_neg[0] == doctest::Approx(0.75));
  CHECK(f.freq_pos[1] == doctest::Approx(0.5));
  CHECK(f.freq_pos[2] == 1.0);  // degenerate all-positive column
  CHECK(f.freq_neg[2] == 0.0);

  LabelMatrix bad = make_labels(1, 1, {2});
  CHECK_THROWS_AS(compute_frequencies(bad), InvalidArgument);
}

TEST_CASE("compute_weights swaps frequencies and flags degenerate classes") {
  LabelMatrix m = make_labels(4, 3, {1, 1, 1,
                                     0, 0, 1,
                                     0, 1, 1,
                                     0, 0, 1});
  ClassWeights w = compute_weights(compute_frequencies(m));
  CHECK(w.w_pos[0] == doctest::Approx(0.75));
  CHECK(w.w_neg[0] == doctest::Approx(0.25));
  CHECK(w.w_pos[0] * 0.25 == doctest::Approx(0.1875));
  CHECK(w.w_neg[0] * 0.75 == doctest::Approx(0.1875));
  CHECK(w.w_pos[1] == doctest::Approx(0.5));  // balanced column
  CHECK(w.w_neg[1] == doctest::Approx(0.5));
  CHECK(w.degenerate == std::vector<int>{2});
  // all-positive class: the negative term can never fire
  CHECK(w.w_neg[2] == 1.0);
  CHECK(w.w_pos[2] == 0.0);
}

TEST_CASE("balance identity holds exactly for random label matrices") {
  Rng rng(404);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(40));
    const int k = 1 + static_cast<int>(rng.below(8));
    LabelMatrix m;
    m.rows = n;
    m.cols = k;
    for (int i = 0; i < n * k; ++i) m.v.push_back(rng.bernoulli(0.3) ? 1 : 0);
    ClassFrequencies f = compute_frequencies(m);
    ClassWeights w = compute_weights(f);
    for (int c = 0; c < k; ++c) {
      CHECK(w.w_pos[c] * f.freq_pos[c] == w.w_neg[c] * f.freq_neg[c]);  // exact
    }
  }
}

TEST_CASE("weighted_bce evaluates the hand-worked single example") {
  Graph g;
  Tensor probs({1, 1}, {0.8});
  LabelMatrix y = make_labels(1, 1, {1});
  ClassWeights w;
  w.w_pos = {0.75};
  w.w_neg = {0.25};
  Tensor loss = weighted_bce(g, g.var(probs), y, w);
  CHECK(loss.item() == doctest::Approx(0.75 * -std::log(0.8)).epsilon(1e-9));
  CHECK(loss.item() == doctest::Approx(0.16736).epsilon(1e-4));
}

TEST_CASE("unit weights reduce weighted_bce to plain_bce bit-for-bit") {
  Rng rng(7);
  const int n = 6, k = 4;
  Tensor probs({n, k});
  LabelMatrix y;
  y.rows = n;
  y.cols = k;
  for (int i = 0; i < n * k; ++i) {
    probs.data()[i] = rng.uniform(0.01, 0.99);
    y.v.push_back(rng.bernoulli(0.4) ? 1 : 0);
  }
  Graph g;
  Tensor pr = g.var(probs);
  Tensor a = weighted_bce(g, pr, y, ClassWeights::unit(k));
  Tensor b = plain_bce(g, pr, y);
  CHECK(a.item() == b.item());
}

TEST_CASE("plain_bce: ln 2 at f=0.5 either way, batches average") {
  Graph g;
  LabelMatrix pos = make_labels(1, 1, {1});
  LabelMatrix neg = make_labels(1, 1, {0});
  Tensor half({1, 1}, {0.5});
  CHECK(plain_bce(g, g.var(half), pos).item() == doctest::Approx(std::log(2.0)));
  CHECK(plain_bce(g, g.var(half), neg).item() == doctest::Approx(std::log(2.0)));

  // two examples average their losses
  Tensor two({2, 1}, {0.8, 0.3});
  LabelMatrix both = make_labels(2, 1, {1, 1});
  const double a = -std::log(0.8), b = -std::log(0.3);
  CHECK(plain_bce(g, g.var(two), both).item() == doctest::Approx((a + b) / 2.0));
}

TEST_CASE("perfect prediction limit drives the loss to the clamp floor") {
  Graph g;
  LabelMatrix pos = make_labels(1, 1, {1});
  Tensor nearly({1, 1}, {1.0 - 1e-9});
  ClassWeights w = ClassWeights::unit(1);
  const double loss = weighted_bce(g, g.var(nearly), pos, w).item();
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-6);
  // f -> 1 exactly: clamped at 1-eps, still finite and tiny
  Tensor one({1, 1}, {1.0});
  CHECK(weighted_bce(g, g.var(one), pos, w).item() == doctest::Approx(1e-7).epsilon(0.01));
}

TEST_CASE("weighted_bce is monotone decreasing in f for a positive example") {
  Graph g;
  LabelMatrix pos = make_labels(1, 1, {1});
  ClassWeights w;
  w.w_pos = {0.9};
  w.w_neg = {0.1};
  double prev = 1e300;
  for (double f = 0.05; f < 1.0; f += 0.05) {
    Tensor p({1, 1}, {f});
    const double loss = weighted_bce(g, g.var(p), pos, w).item();
    CHECK(loss < prev);
    CHECK(loss >= 0.0);
    prev = loss;
  }
}

TEST_CASE("weighted_bce gradient matches finite differences at 1e-6") {
  Rng rng(909);
  const int n = 5, k = 3;
  Tensor probs({n, k});
  LabelMatrix y;
  y.rows = n;
  y.cols = k;
  for (int i = 0; i < n * k; ++i) {
    probs.data()[i] = rng.uniform(0.05, 0.95);
    y.v.push_back(rng.bernoulli(0.5) ? 1 : 0);
  }
  ClassWeights w;
  for (int c = 0; c < k; ++c) {
    w.w_pos.push_back(rng.uniform(0.1, 0.9));
    w.w_neg.push_back(1.0 - w.w_pos.back());
  }
  auto fn = [&](Graph& g) { return weighted_bce(g, g.var(probs), y, w); };
  FdReport report = finite_difference_check(fn, {&probs}, {"probs"}, 1e-6, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("weighted_bce rejects shape mismatches") {
  Graph g;
  Tensor probs({2, 2}, {0.5, 0.5, 0.5, 0.5});
  LabelMatrix y = make_labels(2, 3, {0, 1, 0, 1, 0, 1});
  CHECK_THROWS_AS(weighted_bce(g, g.var(probs), y, ClassWeights::unit(3)), ShapeError);
}

TEST_CASE("contribution report balances exactly under computed weights") {
  Rng rng(11);
  LabelMatrix m;
  m.rows = 50;
  m.cols = 4;
  for (int i = 0; i < 200; ++i) m.v.push_back(rng.bernoulli(0.2) ? 1 : 0);
  ClassWeights w = compute_weights(compute_frequencies(m));
  auto rows = contribution_report(m, w, {"a", "b", "c", "d"});
  REQUIRE(rows.size() == 4);
  for (const auto& r : rows) {
    CHECK(r.pos_contribution == r.neg_contribution);  // machine-exact
  }
}

TEST_CASE("unit weights reproduce the raw imbalance split") {
  LabelMatrix m;
  m.rows = 100;
  m.cols = 1;
  for (int i = 0; i < 100; ++i) m.v.push_back(i < 2 ? 1 : 0);  // 0.02 prevalence
  auto rows = contribution_report(m, ClassWeights::unit(1), {"Hernia"});
  CHECK(rows[0].pos_contribution == doctest::Approx(0.02));
  CHECK(rows[0].neg_contribution == doctest::Approx(0.98));

  LabelMatrix balanced;
  balanced.rows = 4;
  balanced.cols = 1;
  balanced.v = {1, 0, 1, 0};
  auto b = contribution_report(balanced, ClassWeights::unit(1), {"x"});
  CHECK(b[0].pos_contribution == doctest::Approx(b[0].neg_contribution));
}

TEST_CASE("contribution CSV has the documented columns") {
  test_util::TempDir dir("contrib");
  LabelMatrix m = make_labels(4, 1, {1, 0, 0, 0});
  auto rows = contribution_report(m, compute_weights(compute_frequencies(m)), {"c0"});
  const auto path = dir.path() / "contributions.csv";
  write_contribution_csv(rows, path);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "class,freq_p,freq_n,w_pos,w_neg,pos_contribution,neg_contribution");
  std::string row;
  std::getline(is, row);
  CHECK(row.substr(0, 3) == "c0,");
}
