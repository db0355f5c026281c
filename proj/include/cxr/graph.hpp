#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cxr/rng.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

// Taped computation graph for reverse-mode differentiation. Nodes are
// appended in forward order; backward() replays them in exact reverse
// insertion order and accumulates gradients additively, so a tensor feeding
// several consumers receives the sum of their contributions.
//
// A graph is built per forward pass and discarded (or reset) afterwards.
// Recording and backward are single-threaded; recorded payloads are only
// read, never written.
class Graph {
 public:
  // The seed pins stochastic ops (dropout) so a rebuilt graph replays the
  // same masks.
  explicit Graph(std::uint64_t seed = 0);

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Records `t` as a leaf and stamps the node handle back onto the caller's
  // tensor so its gradient can be fetched after backward().
  Tensor var(Tensor& t);
  // Leaf whose gradient nobody will ask for (network inputs, labels).
  Tensor input(const Tensor& t);

  // --- differentiable primitives -------------------------------------
  // x: [N,Ci,H,W], kernel: [Co,Ci,Kh,Kw], bias: [Co] (optional).
  Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                int stride, int padding);
  Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int padding);

  Tensor relu(const Tensor& x);
  Tensor sigmoid(const Tensor& x);

  // x: [N,F], w: [F,K], b: [K] -> [N,K]
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

  // Per-channel normalization of [N,C,H,W] or [N,C]. In training mode the
  // batch statistics are used and the running buffers updated in place;
  // in evaluation mode the running buffers are read.
  Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    std::vector<double>* running_mean,
                    std::vector<double>* running_var, bool training,
                    double eps = 1e-5, double momentum = 0.9);

  // Inverted dropout: train-time survivors scaled by 1/(1-rate); evaluation
  // mode is the identity.
  Tensor dropout(const Tensor& x, double rate, bool training);

  // Concatenate along the channel axis of [N,C,H,W].
  Tensor concat_channels(const Tensor& a, const Tensor& b);

  Tensor avg_pool2d(const Tensor& x, int kernel, int stride);
  // [N,C,H,W] -> [N,C]
  Tensor global_avg_pool(const Tensor& x);

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor sum(const Tensor& x);
  // Scalar pick of one element (used to seed backward from one logit).
  Tensor select(const Tensor& x, long long flat_index);

  // Identity in the forward pass, multiplies the gradient by `scale` in the
  // backward pass (gradient-surgery diagnostic, also how the fault-injection
  // tests plant a wrong backward).
  Tensor scale_gradient(const Tensor& x, double scale);

  // Mean over examples and classes of
  //   -(w_pos[c] * y * log f + w_neg[c] * (1-y) * log(1-f))
  // with f clamped to [clamp_eps, 1-clamp_eps]. probs: [N,K]; labels: N*K
  // row-major 0/1; weights: per class, size K.
  Tensor bce_loss(const Tensor& probs, const std::vector<double>& labels,
                  const std::vector<double>& w_pos,
                  const std::vector<double>& w_neg, double clamp_eps);

  // --- reverse pass ---------------------------------------------------
  void backward(const Tensor& loss);
  const std::vector<double>& grad(const Tensor& t) const;

  bool is_recorded(const Tensor& t) const;
  std::size_t node_count() const { return nodes_.size(); }
  // Drops all nodes; previously issued handles become stale.
  void reset();

 private:
  using BackFn = std::function<void(Graph&)>;

  struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> values;
    std::vector<double> grad;
    std::vector<int> inputs;
    BackFn back;
    const char* op;
  };

  int add_node(Shape shape, std::shared_ptr<std::vector<double>> values,
               std::vector<int> inputs, BackFn back, const char* op);
  Tensor make_result(int node, const Shape& shape,
                     const std::shared_ptr<std::vector<double>>& values) const;
  int expect_recorded(const Tensor& t, const char* who) const;

  std::vector<double>& grad_buf(int node) { return nodes_[static_cast<std::size_t>(node)].grad; }
  const std::vector<double>& node_values(int node) const {
    return *nodes_[static_cast<std::size_t>(node)].values;
  }

  std::vector<Node> nodes_;
  Rng rng_;
  std::uint64_t id_;
};

// --- gradient verification oracle ------------------------------------
// Compares the analytic gradient of `loss_fn` against central finite
// differences, parameter by parameter. `loss_fn` must rebuild the loss on the
// graph it is handed (registering every tensor in `params` via Graph::var)
// and be deterministic given the parameter values; all probe graphs are
// seeded identically so dropout masks replay.
struct FdEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct FdReport {
  std::vector<FdEntry> entries;
  double max_rel_err = 0.0;
  bool pass = true;
};

FdReport finite_difference_check(const std::function<Tensor(Graph&)>& loss_fn,
                                 const std::vector<Tensor*>& params,
                                 const std::vector<std::string>& names,
                                 double step, double tolerance,
                                 std::uint64_t graph_seed = 0);

}  // namespace cxr
