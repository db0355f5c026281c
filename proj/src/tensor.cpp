#include "cxr/tensor.hpp"

#include <sstream>

namespace cxr {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)),
      values_(std::make_shared<std::vector<double>>(
          static_cast<std::size_t>(shape_numel(shape_)), 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<long long>(values.size())) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape_));
  }
  values_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : *t.values_) v = value;
  return t;
}

double Tensor::item() const {
  if (size() != 1) {
    throw InvalidArgument("item(): tensor has shape " + shape_str(shape_) +
                          ", expected a scalar");
  }
  return (*values_)[0];
}

}  // namespace cxr
