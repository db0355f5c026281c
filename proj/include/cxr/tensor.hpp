#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cxr/errors.hpp"

namespace cxr {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
long long shape_numel(const Shape& s);

class Graph;

// N-dimensional array of doubles in row-major order. Copying a Tensor copies
// the handle, not the payload; payloads are treated as immutable once an op
// has recorded them on a graph. `node()` is the handle into the graph the
// tensor was last recorded on (-1 when unrecorded).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  long long size() const { return values_ ? static_cast<long long>(values_->size()) : 0; }

  double* data() { return values_->data(); }
  const double* data() const { return values_->data(); }
  std::vector<double>& values() { return *values_; }
  const std::vector<double>& values() const { return *values_; }
  const std::shared_ptr<std::vector<double>>& storage() const { return values_; }

  // Scalar read; throws unless the tensor holds exactly one element.
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  int node() const { return node_; }
  std::uint64_t graph_id() const { return graph_id_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> values_;
  bool requires_grad_ = false;
  int node_ = -1;
  std::uint64_t graph_id_ = 0;  // 0 = not recorded anywhere

  friend class Graph;
};

}  // namespace cxr
