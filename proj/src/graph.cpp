#include "cxr/graph.hpp"

#include <atomic>
#include <cfloat>
#include <cmath>
#include <cstring>
#include <limits>

namespace cxr {

namespace {

std::atomic<std::uint64_t> g_next_graph_id{1};

// First output index oy with 0 <= oy*stride + k - pad, clamped at 0.
inline int range_lo(int k, int pad, int stride) {
  int a = pad - k;
  return a > 0 ? (a + stride - 1) / stride : 0;
}

// Dot product with four independent accumulation chains; fixed order, so the
// result is deterministic, and the chains let the compiler use SIMD without
// reassociating under -O3's strict FP rules.
inline double dot_stride1(const double* __restrict__ a, const double* __restrict__ b,
                          int len) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int t = 0;
  for (; t + 4 <= len; t += 4) {
    s0 += a[t] * b[t];
    s1 += a[t + 1] * b[t + 1];
    s2 += a[t + 2] * b[t + 2];
    s3 += a[t + 3] * b[t + 3];
  }
  for (; t < len; ++t) s0 += a[t] * b[t];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy_stride1(double* __restrict__ y, const double* __restrict__ x,
                         double a, int len) {
  for (int t = 0; t < len; ++t) y[t] += a * x[t];
}

// Last output index oy with oy*stride + k - pad <= in-1, clamped at out-1.
inline int range_hi(int k, int pad, int stride, int in, int out) {
  int a = in - 1 + pad - k;
  if (a < 0) return -1;
  int hi = a / stride;
  return hi < out - 1 ? hi : out - 1;
}

double stable_sigmoid(double x) {
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    double e = std::exp(x);
    s = e / (1.0 + e);
  }
  // keep the output in the open interval (0,1) even for extreme inputs
  if (s < DBL_MIN) s = DBL_MIN;
  const double one_minus = 1.0 - DBL_EPSILON / 2.0;
  if (s > one_minus) s = one_minus;
  return s;
}

}  // namespace

Graph::Graph(std::uint64_t seed) : rng_(seed), id_(g_next_graph_id.fetch_add(1)) {}

int Graph::add_node(Shape shape, std::shared_ptr<std::vector<double>> values,
                    std::vector<int> inputs, BackFn back, const char* op) {
  Node n;
  n.shape = std::move(shape);
  n.values = std::move(values);
  n.inputs = std::move(inputs);
  n.back = std::move(back);
  n.op = op;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Graph::make_result(int node, const Shape& shape,
                          const std::shared_ptr<std::vector<double>>& values) const {
  Tensor t;
  t.shape_ = shape;
  t.values_ = values;
  t.node_ = node;
  t.graph_id_ = id_;
  return t;
}

int Graph::expect_recorded(const Tensor& t, const char* who) const {
  if (t.graph_id_ != id_ || t.node_ < 0 ||
      t.node_ >= static_cast<int>(nodes_.size())) {
    throw NoGraphError(std::string(who) +
                       ": tensor is not recorded on the active graph");
  }
  return t.node_;
}

Tensor Graph::var(Tensor& t) {
  if (!t.storage()) throw InvalidArgument("var: tensor has no storage");
  int node = add_node(t.shape_, t.values_, {}, nullptr, "leaf");
  t.node_ = node;
  t.graph_id_ = id_;
  return t;
}

Tensor Graph::input(const Tensor& t) {
  if (!t.storage()) throw InvalidArgument("input: tensor has no storage");
  int node = add_node(t.shape_, t.values_, {}, nullptr, "leaf");
  return make_result(node, t.shape_, t.values_);
}

Tensor Graph::conv2d(const Tensor& x, const Tensor& kernel, int stride, int padding) {
  return conv2d(x, kernel, Tensor(), stride, padding);
}

Tensor Graph::conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                     int stride, int padding) {
  int xn = expect_recorded(x, "conv2d");
  int kn = expect_recorded(kernel, "conv2d");
  const bool has_bias = bias.storage() != nullptr;
  int bn = has_bias ? expect_recorded(bias, "conv2d") : -1;

  if (x.ndim() != 4 || kernel.ndim() != 4) {
    throw ShapeError("conv2d: expected 4-d input and kernel, got " +
                     shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  }
  if (stride < 1) throw InvalidArgument("conv2d: stride must be >= 1");
  if (padding < 0) throw InvalidArgument("conv2d: padding must be >= 0");

  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = kernel.dim(0), Kci = kernel.dim(1), Kh = kernel.dim(2), Kw = kernel.dim(3);
  if (Ci != Kci) {
    throw ShapeError("conv2d: input channels mismatch, input " + shape_str(x.shape()) +
                     " vs kernel " + shape_str(kernel.shape()));
  }
  if (H + 2 * padding < Kh || W + 2 * padding < Kw) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) +
                     " larger than padded input " + shape_str(x.shape()));
  }
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != Co)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " does not match kernel " + shape_str(kernel.shape()));
  }

  const int Ho = (H + 2 * padding - Kh) / stride + 1;
  const int Wo = (W + 2 * padding - Kw) / stride + 1;

  auto out = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(N) * Co * Ho * Wo, 0.0);

  const double* xd = x.data();
  const double* kd = kernel.data();
  double* od = out->data();

  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Co; ++co) {
      double* op = od + (static_cast<std::size_t>(n) * Co + co) * Ho * Wo;
      if (has_bias) {
        const double b = bias.data()[co];
        for (int i = 0; i < Ho * Wo; ++i) op[i] = b;
      }
      for (int ci = 0; ci < Ci; ++ci) {
        const double* xp = xd + (static_cast<std::size_t>(n) * Ci + ci) * H * W;
        const double* kp = kd + (static_cast<std::size_t>(co) * Ci + ci) * Kh * Kw;
        for (int kh = 0; kh < Kh; ++kh) {
          const int oy0 = range_lo(kh, padding, stride);
          const int oy1 = range_hi(kh, padding, stride, H, Ho);
          for (int kw = 0; kw < Kw; ++kw) {
            const double w = kp[kh * Kw + kw];
            const int ox0 = range_lo(kw, padding, stride);
            const int ox1 = range_hi(kw, padding, stride, W, Wo);
            if (ox1 < ox0) continue;
            const int len = ox1 - ox0 + 1;
            for (int oy = oy0; oy <= oy1; ++oy) {
              const int iy = oy * stride + kh - padding;
              const double* xr = xp + static_cast<std::size_t>(iy) * W +
                                 (ox0 * stride + kw - padding);
              double* orow = op + static_cast<std::size_t>(oy) * Wo + ox0;
              if (stride == 1) {
                axpy_stride1(orow, xr, w, len);
              } else {
                for (int t = 0; t < len; ++t) orow[t] += w * xr[static_cast<std::size_t>(t) * stride];
              }
            }
          }
        }
      }
    }
  }

  auto xvals = x.storage();
  auto kvals = kernel.storage();
  std::vector<int> inputs = has_bias ? std::vector<int>{xn, kn, bn}
                                     : std::vector<int>{xn, kn};
  int node = add_node({N, Co, Ho, Wo}, out, inputs, nullptr, "conv2d");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& dx = g.grad_buf(xn);
    std::vector<double>& dk = g.grad_buf(kn);
    const double* xd2 = xvals->data();
    const double* kd2 = kvals->data();
    const double* gd = go.data();
    for (int n = 0; n < N; ++n) {
      for (int co = 0; co < Co; ++co) {
        const double* gp = gd + (static_cast<std::size_t>(n) * Co + co) * Ho * Wo;
        if (has_bias) {
          double acc = 0.0;
          for (int i = 0; i < Ho * Wo; ++i) acc += gp[i];
          g.grad_buf(bn)[static_cast<std::size_t>(co)] += acc;
        }
        for (int ci = 0; ci < Ci; ++ci) {
          const double* xp = xd2 + (static_cast<std::size_t>(n) * Ci + ci) * H * W;
          double* dxp = dx.data() + (static_cast<std::size_t>(n) * Ci + ci) * H * W;
          const double* kp = kd2 + (static_cast<std::size_t>(co) * Ci + ci) * Kh * Kw;
          double* dkp = dk.data() + (static_cast<std::size_t>(co) * Ci + ci) * Kh * Kw;
          for (int kh = 0; kh < Kh; ++kh) {
            const int oy0 = range_lo(kh, padding, stride);
            const int oy1 = range_hi(kh, padding, stride, H, Ho);
            for (int kw = 0; kw < Kw; ++kw) {
              const double w = kp[kh * Kw + kw];
              const int ox0 = range_lo(kw, padding, stride);
              const int ox1 = range_hi(kw, padding, stride, W, Wo);
              if (ox1 < ox0) continue;
              const int len = ox1 - ox0 + 1;
              double wacc = 0.0;
              for (int oy = oy0; oy <= oy1; ++oy) {
                const int iy = oy * stride + kh - padding;
                const std::size_t xoff = static_cast<std::size_t>(iy) * W +
                                         (ox0 * stride + kw - padding);
                const double* xr = xp + xoff;
                double* dxr = dxp + xoff;
                const double* grow = gp + static_cast<std::size_t>(oy) * Wo + ox0;
                if (stride == 1) {
                  wacc += dot_stride1(grow, xr, len);
                  axpy_stride1(dxr, grow, w, len);
                } else {
                  for (int t = 0; t < len; ++t) {
                    const double gv = grow[t];
                    const std::size_t off = static_cast<std::size_t>(t) * stride;
                    wacc += gv * xr[off];
                    dxr[off] += gv * w;
                  }
                }
              }
              dkp[kh * Kw + kw] += wacc;
            }
          }
        }
      }
    }
  };

  return make_result(node, {N, Co, Ho, Wo}, out);
}

Tensor Graph::relu(const Tensor& x) {
  int xn = expect_recorded(x, "relu");
  auto out = std::make_shared<std::vector<double>>(x.values());
  for (double& v : *out) v = v > 0.0 ? v : 0.0;
  auto xvals = x.storage();
  const std::size_t count = out->size();
  int node = add_node(x.shape(), out, {xn}, nullptr, "relu");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& dx = g.grad_buf(xn);
    const double* xd = xvals->data();
    for (std::size_t i = 0; i < count; ++i) {
      if (xd[i] > 0.0) dx[i] += go[i];
    }
  };
  return make_result(node, x.shape(), out);
}

Tensor Graph::sigmoid(const Tensor& x) {
  int xn = expect_recorded(x, "sigmoid");
  auto out = std::make_shared<std::vector<double>>(x.values());
  for (double& v : *out) v = stable_sigmoid(v);
  const std::size_t count = out->size();
  int node = add_node(x.shape(), out, {xn}, nullptr, "sigmoid");
  auto ovals = out;
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& dx = g.grad_buf(xn);
    const double* s = ovals->data();
    for (std::size_t i = 0; i < count; ++i) dx[i] += go[i] * s[i] * (1.0 - s[i]);
  };
  return make_result(node, x.shape(), out);
}

Tensor Graph::linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  int xn = expect_recorded(x, "linear");
  int wn = expect_recorded(w, "linear");
  int bn = expect_recorded(b, "linear");
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1) {
    throw ShapeError("linear: expected x[N,F], w[F,K], b[K], got " +
                     shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                     shape_str(b.shape()));
  }
  const int N = x.dim(0), F = x.dim(1), K = w.dim(1);
  if (w.dim(0) != F || b.dim(0) != K) {
    throw ShapeError("linear: x " + shape_str(x.shape()) + " incompatible with w " +
                     shape_str(w.shape()) + " / b " + shape_str(b.shape()));
  }

  auto out = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * K);
  const double* xd = x.data();
  const double* wd = w.data();
  const double* bd = b.data();
  double* od = out->data();
  for (int n = 0; n < N; ++n) {
    double* orow = od + static_cast<std::size_t>(n) * K;
    for (int k = 0; k < K; ++k) orow[k] = bd[k];
    const double* xrow = xd + static_cast<std::size_t>(n) * F;
    for (int f = 0; f < F; ++f) {
      const double xv = xrow[f];
      const double* wrow = wd + static_cast<std::size_t>(f) * K;
      for (int k = 0; k < K; ++k) orow[k] += xv * wrow[k];
    }
  }

  auto xvals = x.storage();
  auto wvals = w.storage();
  int node = add_node({N, K}, out, {xn, wn, bn}, nullptr, "linear");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& dx = g.grad_buf(xn);
    std::vector<double>& dw = g.grad_buf(wn);
    std::vector<double>& db = g.grad_buf(bn);
    const double* xd2 = xvals->data();
    const double* wd2 = wvals->data();
    for (int n = 0; n < N; ++n) {
      const double* grow = go.data() + static_cast<std::size_t>(n) * K;
      const double* xrow = xd2 + static_cast<std::size_t>(n) * F;
      double* dxrow = dx.data() + static_cast<std::size_t>(n) * F;
      for (int k = 0; k < K; ++k) db[static_cast<std::size_t>(k)] += grow[k];
      for (int f = 0; f < F; ++f) {
        const double* wrow = wd2 + static_cast<std::size_t>(f) * K;
        double* dwrow = dw.data() + static_cast<std::size_t>(f) * K;
        double acc = 0.0;
        const double xv = xrow[f];
        for (int k = 0; k < K; ++k) {
          acc += grow[k] * wrow[k];
          dwrow[k] += grow[k] * xv;
        }
        dxrow[f] += acc;
      }
    }
  };
  return make_result(node, {N, K}, out);
}

Tensor Graph::batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         std::vector<double>* running_mean,
                         std::vector<double>* running_var, bool training,
                         double eps, double momentum) {
  int xn = expect_recorded(x, "batch_norm");
  int gn = expect_recorded(gamma, "batch_norm");
  int bn = expect_recorded(beta, "batch_norm");
  if (x.ndim() != 4 && x.ndim() != 2) {
    throw ShapeError("batch_norm: expected [N,C,H,W] or [N,C], got " +
                     shape_str(x.shape()));
  }
  const int N = x.dim(0);
  const int C = x.dim(1);
  const int S = x.ndim() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.size() != C || beta.size() != C) {
    throw ShapeError("batch_norm: scale/shift size must equal channel count " +
                     std::to_string(C));
  }
  if (!running_mean || !running_var ||
      running_mean->size() != static_cast<std::size_t>(C) ||
      running_var->size() != static_cast<std::size_t>(C)) {
    throw InvalidArgument("batch_norm: running statistics buffers of size C required");
  }

  const std::size_t plane = static_cast<std::size_t>(S);
  const double m = static_cast<double>(N) * S;

  auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
  const double* xd = x.data();

  if (training) {
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = xd + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double mu = acc / m;
      double vacc = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = xd + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          vacc += d * d;
        }
      }
      const double var = vacc / m;
      (*mean)[static_cast<std::size_t>(c)] = mu;
      (*inv_std)[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
      (*running_mean)[static_cast<std::size_t>(c)] =
          momentum * (*running_mean)[static_cast<std::size_t>(c)] + (1.0 - momentum) * mu;
      (*running_var)[static_cast<std::size_t>(c)] =
          momentum * (*running_var)[static_cast<std::size_t>(c)] + (1.0 - momentum) * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[static_cast<std::size_t>(c)] = (*running_mean)[static_cast<std::size_t>(c)];
      (*inv_std)[static_cast<std::size_t>(c)] =
          1.0 / std::sqrt((*running_var)[static_cast<std::size_t>(c)] + eps);
    }
  }

  auto out = std::make_shared<std::vector<double>>(x.values().size());
  const double* gd = gamma.data();
  const double* bd = beta.data();
  double* od = out->data();
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double mu = (*mean)[static_cast<std::size_t>(c)];
      const double is = (*inv_std)[static_cast<std::size_t>(c)];
      const double ga = gd[c], be = bd[c];
      const double* p = xd + (static_cast<std::size_t>(n) * C + c) * plane;
      double* q = od + (static_cast<std::size_t>(n) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) q[i] = ga * (p[i] - mu) * is + be;
    }
  }

  auto xvals = x.storage();
  auto gvals = gamma.storage();
  int node = add_node(x.shape(), out, {xn, gn, bn}, nullptr, "batch_norm");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& dx = g.grad_buf(xn);
    std::vector<double>& dgamma = g.grad_buf(gn);
    std::vector<double>& dbeta = g.grad_buf(bn);
    const double* xd2 = xvals->data();
    const double* gd2 = gvals->data();
    for (int c = 0; c < C; ++c) {
      const double mu = (*mean)[static_cast<std::size_t>(c)];
      const double is = (*inv_std)[static_cast<std::size_t>(c)];
      const double ga = gd2[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int n = 0; n < N; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double dy = go[base + i];
          sum_dy += dy;
          sum_dy_xhat += dy * (xd2[base + i] - mu) * is;
        }
      }
      dgamma[static_cast<std::size_t>(c)] += sum_dy_xhat;
      dbeta[static_cast<std::size_t>(c)] += sum_dy;
      if (training) {
        const double inv_m = 1.0 / m;
        for (int n = 0; n < N; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (xd2[base + i] - mu) * is;
            dx[base + i] +=
                ga * is * (go[base + i] - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
          }
        }
      } else {
        for (int n = 0; n < N; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) dx[base + i] += ga * is * go[base + i];
        }
      }
    }
  };
  return make_result(node, x.shape(), out);
}

Tensor Graph::dropout(const Tensor& x, double rate, bool training) {
  expect_recorded(x, "dropout");
  if (rate < 0.0 || rate >= 1.0) {
    throw InvalidArgument("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;  // identity in evaluation mode

  const double scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.values().size());
  for (double& mv : *mask) mv = rng_.uniform() >= rate ? scale : 0.0;

  auto out = std::make_shared<std::vector<double>>(x.values());
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] *= (*mask)[i];

  const int xn = x.node();
  const std::size_t count = out->size();
  int node = add_node(x.shape(), out, {xn}, nullptr, "dropout");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& dx = g.grad_buf(xn);
    for (std::size_t i = 0; i < count; ++i) dx[i] += go[i] * (*mask)[i];
  };
  return make_result(node, x.shape(), out);
}

Tensor Graph::concat_channels(const Tensor& a, const Tensor& b) {
  int an = expect_recorded(a, "concat_channels");
  int bn = expect_recorded(b, "concat_channels");
  if (a.ndim() != 4 || b.ndim() != 4) {
    throw ShapeError("concat_channels: expected 4-d tensors, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: non-channel dims differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const int S = a.dim(2) * a.dim(3);
  const std::size_t plane = static_cast<std::size_t>(S);

  auto out = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(N) * (Ca + Cb) * plane);
  double* od = out->data();
  const double* ad = a.data();
  const double* bd = b.data();
  for (int n = 0; n < N; ++n) {
    std::memcpy(od + static_cast<std::size_t>(n) * (Ca + Cb) * plane,
                ad + static_cast<std::size_t>(n) * Ca * plane,
                static_cast<std::size_t>(Ca) * plane * sizeof(double));
    std::memcpy(od + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane,
                bd + static_cast<std::size_t>(n) * Cb * plane,
                static_cast<std::size_t>(Cb) * plane * sizeof(double));
  }

  Shape oshape{N, Ca + Cb, a.dim(2), a.dim(3)};
  int node = add_node(oshape, out, {an, bn}, nullptr, "concat_channels");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& da = g.grad_buf(an);
    std::vector<double>& db = g.grad_buf(bn);
    for (int n = 0; n < N; ++n) {
      const double* gp = go.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane;
      double* dap = da.data() + static_cast<std::size_t>(n) * Ca * plane;
      double* dbp = db.data() + static_cast<std::size_t>(n) * Cb * plane;
      for (std::size_t i = 0; i < static_cast<std::size_t>(Ca) * plane; ++i) dap[i] += gp[i];
      const double* gpb = gp + static_cast<std::size_t>(Ca) * plane;
      for (std::size_t i = 0; i < static_cast<std::size_t>(Cb) * plane; ++i) dbp[i] += gpb[i];
    }
  };
  return make_result(node, oshape, out);
}

Tensor Graph::avg_pool2d(const Tensor& x, int kernel, int stride) {
  int xn = expect_recorded(x, "avg_pool2d");
  if (x.ndim() != 4) {
    throw ShapeError("avg_pool2d: expected [N,C,H,W], got " + shape_str(x.shape()));
  }
  if (kernel < 1 || stride < 1) throw InvalidArgument("avg_pool2d: kernel and stride must be >= 1");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < kernel || W < kernel) {
    throw ShapeError("avg_pool2d: window " + std::to_string(kernel) +
                     " exceeds input " + shape_str(x.shape()));
  }
  const int Ho = (H - kernel) / stride + 1;
  const int Wo = (W - kernel) / stride + 1;
  const double inv = 1.0 / (static_cast<double>(kernel) * kernel);

  auto out = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(N) * C * Ho * Wo);
  const double* xd = x.data();
  double* od = out->data();
  for (int nc = 0; nc < N * C; ++nc) {
    const double* xp = xd + static_cast<std::size_t>(nc) * H * W;
    double* op = od + static_cast<std::size_t>(nc) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = 0.0;
        for (int ky = 0; ky < kernel; ++ky) {
          const double* row = xp + static_cast<std::size_t>(oy * stride + ky) * W + ox * stride;
          for (int kx = 0; kx < kernel; ++kx) acc += row[kx];
        }
        op[static_cast<std::size_t>(oy) * Wo + ox] = acc * inv;
      }
    }
  }

  Shape oshape{N, C, Ho, Wo};
  int node = add_node(oshape, out, {xn}, nullptr, "avg_pool2d");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& dx = g.grad_buf(xn);
    for (int nc = 0; nc < N * C; ++nc) {
      const double* gp = go.data() + static_cast<std::size_t>(nc) * Ho * Wo;
      double* dxp = dx.data() + static_cast<std::size_t>(nc) * H * W;
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          const double gv = gp[static_cast<std::size_t>(oy) * Wo + ox] * inv;
          for (int ky = 0; ky < kernel; ++ky) {
            double* row = dxp + static_cast<std::size_t>(oy * stride + ky) * W + ox * stride;
            for (int kx = 0; kx < kernel; ++kx) row[kx] += gv;
          }
        }
      }
    }
  };
  return make_result(node, oshape, out);
}

Tensor Graph::global_avg_pool(const Tensor& x) {
  int xn = expect_recorded(x, "global_avg_pool");
  if (x.ndim() != 4) {
    throw ShapeError("global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()));
  }
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < 1 || W < 1) {
    throw ShapeError("global_avg_pool: empty spatial dimensions in " + shape_str(x.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const double inv = 1.0 / static_cast<double>(plane);

  auto out = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * C);
  const double* xd = x.data();
  for (int nc = 0; nc < N * C; ++nc) {
    const double* p = xd + static_cast<std::size_t>(nc) * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    (*out)[static_cast<std::size_t>(nc)] = acc * inv;
  }

  Shape oshape{N, C};
  int node = add_node(oshape, out, {xn}, nullptr, "global_avg_pool");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& dx = g.grad_buf(xn);
    for (int nc = 0; nc < N * C; ++nc) {
      const double gv = go[static_cast<std::size_t>(nc)] * inv;
      double* p = dx.data() + static_cast<std::size_t>(nc) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += gv;
    }
  };
  return make_result(node, oshape, out);
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  int an = expect_recorded(a, "add");
  int bn = expect_recorded(b, "add");
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  auto out = std::make_shared<std::vector<double>>(a.values());
  const double* bd = b.data();
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] += bd[i];
  const std::size_t count = out->size();
  int node = add_node(a.shape(), out, {an, bn}, nullptr, "add");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& da = g.grad_buf(an);
    std::vector<double>& db = g.grad_buf(bn);
    for (std::size_t i = 0; i < count; ++i) {
      da[i] += go[i];
      db[i] += go[i];
    }
  };
  return make_result(node, a.shape(), out);
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  int an = expect_recorded(a, "mul");
  int bn = expect_recorded(b, "mul");
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  auto out = std::make_shared<std::vector<double>>(a.values());
  const double* bd = b.data();
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] *= bd[i];
  auto avals = a.storage();
  auto bvals = b.storage();
  const std::size_t count = out->size();
  int node = add_node(a.shape(), out, {an, bn}, nullptr, "mul");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& da = g.grad_buf(an);
    std::vector<double>& db = g.grad_buf(bn);
    for (std::size_t i = 0; i < count; ++i) {
      da[i] += go[i] * (*bvals)[i];
      db[i] += go[i] * (*avals)[i];
    }
  };
  return make_result(node, a.shape(), out);
}

Tensor Graph::sum(const Tensor& x) {
  int xn = expect_recorded(x, "sum");
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  auto out = std::make_shared<std::vector<double>>(1, acc);
  const std::size_t count = x.values().size();
  int node = add_node({1}, out, {xn}, nullptr, "sum");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const double gv = g.grad_buf(node)[0];
    std::vector<double>& dx = g.grad_buf(xn);
    for (std::size_t i = 0; i < count; ++i) dx[i] += gv;
  };
  return make_result(node, {1}, out);
}

Tensor Graph::select(const Tensor& x, long long flat_index) {
  int xn = expect_recorded(x, "select");
  if (flat_index < 0 || flat_index >= x.size()) {
    throw InvalidArgument("select: index " + std::to_string(flat_index) +
                          " out of range for " + shape_str(x.shape()));
  }
  auto out = std::make_shared<std::vector<double>>(
      1, x.values()[static_cast<std::size_t>(flat_index)]);
  int node = add_node({1}, out, {xn}, nullptr, "select");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    g.grad_buf(xn)[static_cast<std::size_t>(flat_index)] += g.grad_buf(node)[0];
  };
  return make_result(node, {1}, out);
}

Tensor Graph::scale_gradient(const Tensor& x, double scale) {
  int xn = expect_recorded(x, "scale_gradient");
  const std::size_t count = x.values().size();
  int node = add_node(x.shape(), x.storage(), {xn}, nullptr, "scale_gradient");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const std::vector<double>& go = g.grad_buf(node);
    std::vector<double>& dx = g.grad_buf(xn);
    for (std::size_t i = 0; i < count; ++i) dx[i] += go[i] * scale;
  };
  return make_result(node, x.shape(), x.storage());
}

Tensor Graph::bce_loss(const Tensor& probs, const std::vector<double>& labels,
                       const std::vector<double>& w_pos,
                       const std::vector<double>& w_neg, double clamp_eps) {
  int pn = expect_recorded(probs, "bce_loss");
  if (probs.ndim() != 2) {
    throw ShapeError("bce_loss: expected probabilities [N,K], got " +
                     shape_str(probs.shape()));
  }
  const int N = probs.dim(0), K = probs.dim(1);
  if (labels.size() != static_cast<std::size_t>(N) * K) {
    throw ShapeError("bce_loss: labels size " + std::to_string(labels.size()) +
                     " does not match probabilities " + shape_str(probs.shape()));
  }
  if (w_pos.size() != static_cast<std::size_t>(K) ||
      w_neg.size() != static_cast<std::size_t>(K)) {
    throw ShapeError("bce_loss: per-class weights must have size " + std::to_string(K));
  }
  if (!(clamp_eps > 0.0 && clamp_eps < 0.5)) {
    throw InvalidArgument("bce_loss: clamp_eps must lie in (0, 0.5)");
  }

  const double lo = clamp_eps, hi = 1.0 - clamp_eps;
  const double inv_nk = 1.0 / (static_cast<double>(N) * K);
  const double* pd = probs.data();
  double acc = 0.0;
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < K; ++k) {
      const std::size_t i = static_cast<std::size_t>(n) * K + k;
      double f = pd[i];
      f = f < lo ? lo : (f > hi ? hi : f);
      const double y = labels[i];
      acc -= w_pos[static_cast<std::size_t>(k)] * y * std::log(f) +
             w_neg[static_cast<std::size_t>(k)] * (1.0 - y) * std::log(1.0 - f);
    }
  }
  auto out = std::make_shared<std::vector<double>>(1, acc * inv_nk);

  auto pvals = probs.storage();
  auto lab = std::make_shared<std::vector<double>>(labels);
  auto wp = std::make_shared<std::vector<double>>(w_pos);
  auto wn = std::make_shared<std::vector<double>>(w_neg);
  int node = add_node({1}, out, {pn}, nullptr, "bce_loss");
  nodes_[static_cast<std::size_t>(node)].back = [=](Graph& g) {
    const double gv = g.grad_buf(node)[0];
    std::vector<double>& dp = g.grad_buf(pn);
    const double* pdv = pvals->data();
    for (int n = 0; n < N; ++n) {
      for (int k = 0; k < K; ++k) {
        const std::size_t i = static_cast<std::size_t>(n) * K + k;
        const double f = pdv[i];
        if (f <= lo || f >= hi) continue;  // clamped region: flat
        const double y = (*lab)[i];
        const double d = -((*wp)[static_cast<std::size_t>(k)] * y / f -
                           (*wn)[static_cast<std::size_t>(k)] * (1.0 - y) / (1.0 - f));
        dp[i] += gv * d * inv_nk;
      }
    }
  };
  return make_result(node, {1}, out);
}

void Graph::backward(const Tensor& loss) {
  int ln = expect_recorded(loss, "backward");
  if (loss.size() != 1) {
    throw InvalidArgument("backward: loss must be a scalar, got shape " +
                          shape_str(loss.shape()));
  }
  for (Node& n : nodes_) {
    n.grad.assign(n.values->size(), 0.0);
  }
  nodes_[static_cast<std::size_t>(ln)].grad[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].back) nodes_[i].back(*this);
  }
}

const std::vector<double>& Graph::grad(const Tensor& t) const {
  int n = expect_recorded(t, "grad");
  const Node& node = nodes_[static_cast<std::size_t>(n)];
  if (node.grad.size() != node.values->size()) {
    throw Error("grad: backward() has not been run on this graph");
  }
  return node.grad;
}

bool Graph::is_recorded(const Tensor& t) const {
  return t.graph_id() == id_ && t.node() >= 0 &&
         t.node() < static_cast<int>(nodes_.size());
}

void Graph::reset() {
  nodes_.clear();
  id_ = g_next_graph_id.fetch_add(1);
}

FdReport finite_difference_check(const std::function<Tensor(Graph&)>& loss_fn,
                                 const std::vector<Tensor*>& params,
                                 const std::vector<std::string>& names,
                                 double step, double tolerance,
                                 std::uint64_t graph_seed) {
  if (step <= 0.0) throw InvalidArgument("finite_difference_check: step must be > 0");

  auto param_name = [&](std::size_t i) {
    return i < names.size() ? names[i] : "param" + std::to_string(i);
  };

  std::vector<std::vector<double>> analytic;
  {
    Graph g(graph_seed);
    Tensor loss = loss_fn(g);
    if (!std::isfinite(loss.item())) {
      throw NumericError("finite_difference_check: loss is non-finite at the base point");
    }
    g.backward(loss);
    analytic.reserve(params.size());
    for (const Tensor* p : params) analytic.push_back(g.grad(*p));
  }

  FdReport report;
  report.entries.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor* p = params[i];
    FdEntry entry;
    entry.name = param_name(i);
    for (long long j = 0; j < p->size(); ++j) {
      double* slot = p->data() + j;
      const double orig = *slot;
      *slot = orig + step;
      double f_plus;
      {
        Graph g(graph_seed);
        f_plus = loss_fn(g).item();
      }
      *slot = orig - step;
      double f_minus;
      {
        Graph g(graph_seed);
        f_minus = loss_fn(g).item();
      }
      *slot = orig;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        throw NumericError("finite_difference_check: non-finite value while probing " +
                           entry.name + "[" + std::to_string(j) + "]");
      }
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[i][static_cast<std::size_t>(j)];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > entry.max_rel_err) entry.max_rel_err = rel;
    }
    entry.pass = entry.max_rel_err <= tolerance;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace cxr
