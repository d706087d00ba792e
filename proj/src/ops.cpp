#include "scedit/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <Eigen/Core>

#include "scedit/autograd.hpp"

namespace scedit::ops {

namespace {

using detail::Node;
using Grads = std::vector<Tensor>;
using BackwardFn = std::function<Grads(const Tensor&, const Node&)>;

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

void require_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                     dtype_name(b.dtype()) + ")");
  }
}

void require_rank(const char* op, const char* operand, const Tensor& t, int rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": operand '" + operand + "' must have rank " +
                     std::to_string(rank) + ", got shape " + shape_str(t.shape()));
  }
}

void require_shape(const char* op, const char* operand, const Tensor& t, const Shape& expected) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(op) + ": operand '" + operand + "' has shape " +
                     shape_str(t.shape()) + ", expected " + shape_str(expected));
  }
}

Tensor finish(Tensor out, const char* kind, std::initializer_list<Tensor> operands,
              std::vector<Tensor> saved, BackwardFn fn) {
  detail::mark_op_output(out);
  std::vector<Tensor> ops_vec(operands);
  if (detail::should_record(ops_vec)) {
    detail::record(out, kind, ops_vec, std::move(saved), std::move(fn));
  }
  return out;
}

bool needs(const Node& node, std::size_t i) { return i < node.next.size() && node.next[i].live(); }

// Dot product with fixed lane-wise accumulation order.
template <class T>
T dot(const T* a, const T* b, std::int64_t n) {
  std::array<T, 8> acc{};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  T total = 0;
  for (int l = 0; l < 8; ++l) total += acc[l];
  return total + tail;
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// ---------------------------------------------------------------- conv2d

struct ConvGeom {
  std::int64_t n, c, h, w, o, k, stride, pad, ho, wo;
  std::int64_t ck() const { return c * k * k; }
  std::int64_t p() const { return ho * wo; }
  bool direct() const { return k == 1 && stride == 1; }
};

// Output columns [lo, hi) whose input column ow * stride + off lies inside
// the image.
std::pair<std::int64_t, std::int64_t> valid_columns(const ConvGeom& g, std::int64_t off) {
  std::int64_t lo = 0;
  while (lo < g.wo && lo * g.stride + off < 0) ++lo;
  std::int64_t hi = g.wo;
  while (hi > lo && (hi - 1) * g.stride + off >= g.w) --hi;
  return {lo, hi};
}

template <class T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const std::int64_t P = g.p();
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t kh = 0; kh < g.k; ++kh) {
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        T* row = col + ((c * g.k + kh) * g.k + kw) * P;
        const std::int64_t off = kw - g.pad;
        const auto [lo, hi] = valid_columns(g, off);
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + kh;
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + ih) * g.w;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo + off, src + hi + off, dst + lo);
          } else {
            for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride + off];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
    }
  }
}

template <class T>
void col2im_add(const ConvGeom& g, const T* col, T* dx) {
  const std::int64_t P = g.p();
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t kh = 0; kh < g.k; ++kh) {
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        const T* row = col + ((c * g.k + kh) * g.k + kw) * P;
        const std::int64_t off = kw - g.pad;
        const auto [lo, hi] = valid_columns(g, off);
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.h) continue;
          T* dst = dx + (c * g.h + ih) * g.w;
          const T* src = row + oh * g.wo;
          for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow * g.stride + off] += src[ow];
        }
      }
    }
  }
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
void conv_forward(const ConvGeom& g, const T* x, const T* w, const T* b, T* out) {
  const std::int64_t CK = g.ck(), P = g.p();
  std::vector<T> col(g.direct() ? 0 : static_cast<std::size_t>(CK * P));
  const ConstMatMap<T> W(w, g.o, CK);
  for (std::int64_t n = 0; n < g.n; ++n) {
    const T* xn = x + n * g.c * g.h * g.w;
    const T* cn = xn;
    if (!g.direct()) {
      im2col(g, xn, col.data());
      cn = col.data();
    }
    MatMap<T> O(out + n * g.o * P, g.o, P);
    O.noalias() = W * ConstMatMap<T>(cn, CK, P);
    if (b) {
      for (std::int64_t o = 0; o < g.o; ++o) O.row(o).array() += b[o];
    }
  }
}

template <class T>
void conv_backward(const ConvGeom& g, const T* x, const T* w, const T* gout, T* gx, T* gw, T* gb) {
  const std::int64_t CK = g.ck(), P = g.p();
  std::vector<T> col(g.direct() ? 0 : static_cast<std::size_t>(CK * P));
  std::vector<T> dcol(g.direct() ? 0 : static_cast<std::size_t>(CK * P));
  const ConstMatMap<T> W(w, g.o, CK);
  for (std::int64_t n = 0; n < g.n; ++n) {
    const T* gn = gout + n * g.o * P;
    const ConstMatMap<T> G(gn, g.o, P);
    if (gb) {
      for (std::int64_t o = 0; o < g.o; ++o) {
        const T* grow = gn + o * P;
        T s = 0;
        for (std::int64_t p = 0; p < P; ++p) s += grow[p];
        gb[o] += s;
      }
    }
    if (gw) {
      const T* xn = x + n * g.c * g.h * g.w;
      const T* cn = xn;
      if (!g.direct()) {
        im2col(g, xn, col.data());
        cn = col.data();
      }
      MatMap<T>(gw, g.o, CK).noalias() += G * ConstMatMap<T>(cn, CK, P).transpose();
    }
    if (gx) {
      T* dxn = gx + n * g.c * g.h * g.w;
      if (g.direct()) {
        MatMap<T>(dxn, CK, P).noalias() += W.transpose() * G;
      } else {
        MatMap<T>(dcol.data(), CK, P).noalias() = W.transpose() * G;
        col2im_add(g, dcol.data(), dxn);
      }
    }
  }
}

// ------------------------------------------------------------ group norm

template <class T>
void group_stats(const T* x, std::int64_t count, double eps, double& mean, double& rstd) {
  double s = 0.0;
  for (std::int64_t i = 0; i < count; ++i) s += static_cast<double>(x[i]);
  mean = s / static_cast<double>(count);
  double v = 0.0;
  for (std::int64_t i = 0; i < count; ++i) {
    const double d = static_cast<double>(x[i]) - mean;
    v += d * d;
  }
  v /= static_cast<double>(count);
  rstd = 1.0 / std::sqrt(v + eps);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride) {
  require_rank("conv2d", "input", x, 4);
  require_rank("conv2d", "weight", weight, 4);
  require_same_dtype("conv2d", x, weight);
  const std::int64_t k = weight.dim(2);
  if (weight.dim(3) != k || k % 2 == 0) {
    throw ShapeError("conv2d: operand 'weight' must have an odd square kernel, got shape " +
                     shape_str(weight.shape()));
  }
  if (stride != 1 && stride != 2) throw ConfigError("conv2d: stride must be 1 or 2");
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: operand 'weight' has shape " + shape_str(weight.shape()) +
                     ", expected input channels " + std::to_string(x.dim(1)) + " for input " +
                     shape_str(x.shape()));
  }
  if (bias.defined()) {
    require_shape("conv2d", "bias", bias, {weight.dim(0)});
    require_same_dtype("conv2d", x, bias);
  }
  ConvGeom g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = weight.dim(0);
  g.k = k;
  g.stride = stride;
  g.pad = k / 2;
  g.ho = (g.h + 2 * g.pad - k) / stride + 1;
  g.wo = (g.w + 2 * g.pad - k) / stride + 1;

  Tensor out = Tensor::empty({g.n, g.o, g.ho, g.wo}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    conv_forward<T>(g, x.data<T>().data(), weight.data<T>().data(),
                    bias.defined() ? bias.data<T>().data() : nullptr,
                    out.mutable_data<T>().data());
  });
  return finish(std::move(out), "conv2d", {x, weight, bias}, {x, weight},
                [g, has_bias = bias.defined()](const Tensor& gout, const Node& node) {
                  const Tensor& xs = node.saved[0];
                  const Tensor& ws = node.saved[1];
                  Grads grads(3);
                  if (needs(node, 0)) grads[0] = Tensor::zeros(xs.shape(), xs.dtype());
                  if (needs(node, 1)) grads[1] = Tensor::zeros(ws.shape(), ws.dtype());
                  if (has_bias && needs(node, 2)) grads[2] = Tensor::zeros({g.o}, xs.dtype());
                  visit_dtype(xs.dtype(), [&]<class T>() {
                    conv_backward<T>(
                        g, xs.data<T>().data(), ws.data<T>().data(), gout.data<T>().data(),
                        grads[0].defined() ? grads[0].mutable_data<T>().data() : nullptr,
                        grads[1].defined() ? grads[1].mutable_data<T>().data() : nullptr,
                        grads[2].defined() ? grads[2].mutable_data<T>().data() : nullptr);
                  });
                  return grads;
                });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", "input", x, 2);
  require_rank("linear", "weight", weight, 2);
  require_same_dtype("linear", x, weight);
  const std::int64_t N = x.dim(0), In = x.dim(1), Out = weight.dim(0);
  if (weight.dim(1) != In) {
    throw ShapeError("linear: operand 'weight' has shape " + shape_str(weight.shape()) +
                     ", expected [" + std::to_string(Out) + "," + std::to_string(In) + "]");
  }
  if (bias.defined()) require_shape("linear", "bias", bias, {Out});
  Tensor out = Tensor::empty({N, Out}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    auto wd = weight.data<T>();
    auto od = out.mutable_data<T>();
    const T* bd = bias.defined() ? bias.data<T>().data() : nullptr;
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t o = 0; o < Out; ++o) {
        od[n * Out + o] = (bd ? bd[o] : T(0)) + dot(&xd[n * In], &wd[o * In], In);
      }
    }
  });
  return finish(std::move(out), "linear", {x, weight, bias}, {x, weight},
                [N, In, Out, has_bias = bias.defined()](const Tensor& g, const Node& node) {
                  const Tensor& xs = node.saved[0];
                  const Tensor& ws = node.saved[1];
                  Grads grads(3);
                  visit_dtype(xs.dtype(), [&]<class T>() {
                    auto gd = g.data<T>();
                    if (needs(node, 0)) {
                      grads[0] = Tensor::zeros(xs.shape(), xs.dtype());
                      auto gx = grads[0].mutable_data<T>();
                      auto wd = ws.data<T>();
                      for (std::int64_t n = 0; n < N; ++n)
                        for (std::int64_t o = 0; o < Out; ++o)
                          axpy(gd[n * Out + o], &wd[o * In], &gx[n * In], In);
                    }
                    if (needs(node, 1)) {
                      grads[1] = Tensor::zeros(ws.shape(), ws.dtype());
                      auto gw = grads[1].mutable_data<T>();
                      auto xd = xs.data<T>();
                      for (std::int64_t n = 0; n < N; ++n)
                        for (std::int64_t o = 0; o < Out; ++o)
                          axpy(gd[n * Out + o], &xd[n * In], &gw[o * In], In);
                    }
                    if (has_bias && needs(node, 2)) {
                      grads[2] = Tensor::zeros({Out}, xs.dtype());
                      auto gb = grads[2].mutable_data<T>();
                      for (std::int64_t n = 0; n < N; ++n)
                        for (std::int64_t o = 0; o < Out; ++o) gb[o] += gd[n * Out + o];
                    }
                  });
                  return grads;
                });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require_rank("group_norm", "input", x, 4);
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (groups <= 0 || C % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  require_shape("group_norm", "gamma", gamma, {C});
  require_shape("group_norm", "beta", beta, {C});
  require_same_dtype("group_norm", x, gamma);
  require_same_dtype("group_norm", x, beta);
  const std::int64_t cpg = C / groups, count = cpg * HW;
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    auto gd = gamma.data<T>();
    auto bd = beta.data<T>();
    auto od = out.mutable_data<T>();
    for (std::int64_t n = 0; n < N; ++n) {
      for (std::int64_t gi = 0; gi < groups; ++gi) {
        const std::int64_t base = (n * C + gi * cpg) * HW;
        double mu, rstd;
        group_stats(&xd[base], count, eps, mu, rstd);
        for (std::int64_t cc = 0; cc < cpg; ++cc) {
          const std::int64_t c = gi * cpg + cc;
          const T scale = static_cast<T>(rstd * static_cast<double>(gd[c]));
          const T shift = static_cast<T>(static_cast<double>(bd[c]) -
                                         mu * rstd * static_cast<double>(gd[c]));
          const T* src = &xd[base + cc * HW];
          T* dst = &od[base + cc * HW];
          for (std::int64_t i = 0; i < HW; ++i) dst[i] = src[i] * scale + shift;
        }
      }
    }
  });
  return finish(
      std::move(out), "group_norm", {x, gamma, beta}, {x, gamma},
      [N, C, HW, groups, cpg, count, eps](const Tensor& g, const Node& node) {
        const Tensor& xs = node.saved[0];
        const Tensor& gam = node.saved[1];
        Grads grads(3);
        if (needs(node, 0)) grads[0] = Tensor::zeros(xs.shape(), xs.dtype());
        if (needs(node, 1)) grads[1] = Tensor::zeros({C}, xs.dtype());
        if (needs(node, 2)) grads[2] = Tensor::zeros({C}, xs.dtype());
        visit_dtype(xs.dtype(), [&]<class T>() {
          auto xd = xs.data<T>();
          auto gd = g.data<T>();
          auto gmd = gam.data<T>();
          T* gx = grads[0].defined() ? grads[0].mutable_data<T>().data() : nullptr;
          T* ggam = grads[1].defined() ? grads[1].mutable_data<T>().data() : nullptr;
          T* gbet = grads[2].defined() ? grads[2].mutable_data<T>().data() : nullptr;
          for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t gi = 0; gi < groups; ++gi) {
              const std::int64_t base = (n * C + gi * cpg) * HW;
              double mu, rstd;
              group_stats(&xd[base], count, eps, mu, rstd);
              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
              for (std::int64_t cc = 0; cc < cpg; ++cc) {
                const std::int64_t c = gi * cpg + cc;
                double s_dy = 0.0, s_dy_xhat = 0.0;
                for (std::int64_t i = 0; i < HW; ++i) {
                  const double dy = gd[base + cc * HW + i];
                  const double xhat = (static_cast<double>(xd[base + cc * HW + i]) - mu) * rstd;
                  s_dy += dy;
                  s_dy_xhat += dy * xhat;
                }
                if (ggam) ggam[c] += static_cast<T>(s_dy_xhat);
                if (gbet) gbet[c] += static_cast<T>(s_dy);
                sum_dxhat += s_dy * gmd[c];
                sum_dxhat_xhat += s_dy_xhat * gmd[c];
              }
              if (!gx) continue;
              const double m1 = sum_dxhat / static_cast<double>(count);
              const double m2 = sum_dxhat_xhat / static_cast<double>(count);
              for (std::int64_t cc = 0; cc < cpg; ++cc) {
                const std::int64_t c = gi * cpg + cc;
                for (std::int64_t i = 0; i < HW; ++i) {
                  const std::int64_t idx = base + cc * HW + i;
                  const double xhat = (static_cast<double>(xd[idx]) - mu) * rstd;
                  const double dxhat = static_cast<double>(gd[idx]) * gmd[c];
                  gx[idx] += static_cast<T>(rstd * (dxhat - m1 - xhat * m2));
                }
              }
            }
          }
        });
        return grads;
      });
}

namespace {

template <class Fwd, class Deriv>
Tensor unary(const char* kind, const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    auto od = out.mutable_data<T>();
    for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  });
  return finish(std::move(out), kind, {x}, {x}, [deriv](const Tensor& g, const Node& node) {
    const Tensor& xs = node.saved[0];
    Grads grads(1);
    grads[0] = Tensor::empty(xs.shape(), xs.dtype());
    visit_dtype(xs.dtype(), [&]<class T>() {
      auto xd = xs.data<T>();
      auto gd = g.data<T>();
      auto od = grads[0].mutable_data<T>();
      for (std::size_t i = 0; i < xd.size(); ++i) od[i] = gd[i] * deriv(xd[i]);
    });
    return grads;
  });
}

}  // namespace

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluCubic * x * x * x)));
}

double gelu_grad_scalar(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  const double th = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x,
      []<class T>(T v) { return v / (T(1) + std::exp(-v)); },
      []<class T>(T v) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x,
      []<class T>(T v) {
        const T c = static_cast<T>(kSqrt2OverPi), a = static_cast<T>(kGeluCubic);
        return T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
      },
      []<class T>(T v) {
        const T c = static_cast<T>(kSqrt2OverPi), a = static_cast<T>(kGeluCubic);
        const T th = std::tanh(c * (v + a * v * v * v));
        return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * a * v * v);
      });
}

namespace {

template <class Op>
Tensor binary_same_shape(const char* kind, const Tensor& a, const Tensor& b, Op op) {
  require_same_dtype(kind, a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(kind) + ": operand 'b' has shape " + shape_str(b.shape()) +
                     ", expected " + shape_str(a.shape()));
  }
  Tensor out = Tensor::empty(a.shape(), a.dtype());
  visit_dtype(a.dtype(), [&]<class T>() {
    auto ad = a.data<T>();
    auto bd = b.data<T>();
    auto od = out.mutable_data<T>();
    for (std::size_t i = 0; i < ad.size(); ++i) od[i] = op(ad[i], bd[i]);
  });
  return out;
}

Tensor scaled_copy(const Tensor& g, double s) {
  Tensor out = Tensor::empty(g.shape(), g.dtype());
  visit_dtype(g.dtype(), [&]<class T>() {
    auto gd = g.data<T>();
    auto od = out.mutable_data<T>();
    const T st = static_cast<T>(s);
    for (std::size_t i = 0; i < gd.size(); ++i) od[i] = gd[i] * st;
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = binary_same_shape("add", a, b, []<class T>(T x, T y) { return x + y; });
  return finish(std::move(out), "add", {a, b}, {}, [](const Tensor& g, const Node& node) {
    Grads grads(2);
    if (needs(node, 0)) grads[0] = g;
    if (needs(node, 1)) grads[1] = g;
    return grads;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary_same_shape("sub", a, b, []<class T>(T x, T y) { return x - y; });
  return finish(std::move(out), "sub", {a, b}, {}, [](const Tensor& g, const Node& node) {
    Grads grads(2);
    if (needs(node, 0)) grads[0] = g;
    if (needs(node, 1)) grads[1] = scaled_copy(g, -1.0);
    return grads;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary_same_shape("mul", a, b, []<class T>(T x, T y) { return x * y; });
  return finish(std::move(out), "mul", {a, b}, {a, b}, [](const Tensor& g, const Node& node) {
    Grads grads(2);
    const Tensor& as = node.saved[0];
    const Tensor& bs = node.saved[1];
    visit_dtype(g.dtype(), [&]<class T>() {
      auto gd = g.data<T>();
      if (needs(node, 0)) {
        grads[0] = Tensor::empty(g.shape(), g.dtype());
        auto o = grads[0].mutable_data<T>();
        auto bd = bs.data<T>();
        for (std::size_t i = 0; i < gd.size(); ++i) o[i] = gd[i] * bd[i];
      }
      if (needs(node, 1)) {
        grads[1] = Tensor::empty(g.shape(), g.dtype());
        auto o = grads[1].mutable_data<T>();
        auto ad = as.data<T>();
        for (std::size_t i = 0; i < gd.size(); ++i) o[i] = gd[i] * ad[i];
      }
    });
    return grads;
  });
}

Tensor mul_scalar(const Tensor& x, double s) {
  Tensor out = scaled_copy(x, s);
  return finish(std::move(out), "mul_scalar", {x}, {}, [s](const Tensor& g, const Node&) {
    return Grads{scaled_copy(g, s)};
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_channel_bias", "input", x, 4);
  require_same_dtype("add_channel_bias", x, bias);
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require_shape("add_channel_bias", "bias", bias, {N, C});
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    auto bd = bias.data<T>();
    auto od = out.mutable_data<T>();
    for (std::int64_t nc = 0; nc < N * C; ++nc)
      for (std::int64_t i = 0; i < HW; ++i) od[nc * HW + i] = xd[nc * HW + i] + bd[nc];
  });
  return finish(std::move(out), "add_channel_bias", {x, bias}, {},
                [N, C, HW](const Tensor& g, const Node& node) {
                  Grads grads(2);
                  if (needs(node, 0)) grads[0] = g;
                  if (needs(node, 1)) {
                    grads[1] = Tensor::zeros({N, C}, g.dtype());
                    visit_dtype(g.dtype(), [&]<class T>() {
                      auto gd = g.data<T>();
                      auto gb = grads[1].mutable_data<T>();
                      for (std::int64_t nc = 0; nc < N * C; ++nc) {
                        T s = 0;
                        for (std::int64_t i = 0; i < HW; ++i) s += gd[nc * HW + i];
                        gb[nc] = s;
                      }
                    });
                  }
                  return grads;
                });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no operands");
  const Tensor& first = parts[0];
  require_rank("concat_channels", "part 0", first, 4);
  const std::int64_t N = first.dim(0), H = first.dim(2), W = first.dim(3);
  std::vector<std::int64_t> chans;
  std::int64_t total = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& p = parts[i];
    const std::string name = "part " + std::to_string(i);
    require_rank("concat_channels", name.c_str(), p, 4);
    require_same_dtype("concat_channels", first, p);
    if (p.dim(0) != N || p.dim(2) != H || p.dim(3) != W) {
      throw ShapeError("concat_channels: operand '" + name + "' has shape " +
                       shape_str(p.shape()) + ", expected [" + std::to_string(N) + ",*," +
                       std::to_string(H) + "," + std::to_string(W) + "]");
    }
    chans.push_back(p.dim(1));
    total += p.dim(1);
  }
  const std::int64_t HW = H * W;
  Tensor out = Tensor::empty({N, total, H, W}, first.dtype());
  visit_dtype(first.dtype(), [&]<class T>() {
    auto od = out.mutable_data<T>();
    for (std::int64_t n = 0; n < N; ++n) {
      std::int64_t offset = 0;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        auto pd = parts[i].data<T>();
        const std::int64_t len = chans[i] * HW;
        std::copy_n(&pd[n * len], len, &od[(n * total + offset) * HW]);
        offset += chans[i];
      }
    }
  });
  detail::mark_op_output(out);
  std::vector<Tensor> operands(parts.begin(), parts.end());
  if (detail::should_record(operands)) {
    std::vector<Shape> shapes;
    for (const auto& p : parts) shapes.push_back(p.shape());
    detail::record(out, "concat_channels", operands, {},
                   [N, HW, total, chans, shapes](const Tensor& g, const Node& node) {
                     Grads grads(chans.size());
                     visit_dtype(g.dtype(), [&]<class T>() {
                       auto gd = g.data<T>();
                       std::int64_t offset = 0;
                       for (std::size_t i = 0; i < chans.size(); ++i) {
                         if (needs(node, i)) {
                           grads[i] = Tensor::empty(shapes[i], g.dtype());
                           auto o = grads[i].mutable_data<T>();
                           const std::int64_t len = chans[i] * HW;
                           for (std::int64_t n = 0; n < N; ++n)
                             std::copy_n(&gd[(n * total + offset) * HW], len, &o[n * len]);
                         }
                         offset += chans[i];
                       }
                     });
                     return grads;
                   });
  }
  return out;
}

Tensor avgpool2x(const Tensor& x) {
  require_rank("avgpool2x", "input", x, 4);
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw ShapeError("avgpool2x: spatial size " + shape_str(x.shape()) + " is not even");
  const std::int64_t Ho = H / 2, Wo = W / 2;
  Tensor out = Tensor::empty({N, C, Ho, Wo}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    auto od = out.mutable_data<T>();
    for (std::int64_t nc = 0; nc < N * C; ++nc)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          const T* r0 = &xd[(nc * H + 2 * i) * W + 2 * j];
          const T* r1 = r0 + W;
          od[(nc * Ho + i) * Wo + j] = (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
        }
  });
  return finish(std::move(out), "avgpool2x", {x}, {}, [N, C, H, W](const Tensor& g, const Node&) {
    Grads grads(1);
    grads[0] = Tensor::empty({N, C, H, W}, g.dtype());
    visit_dtype(g.dtype(), [&]<class T>() {
      auto gd = g.data<T>();
      auto o = grads[0].mutable_data<T>();
      const std::int64_t Wo = W / 2;
      for (std::int64_t nc = 0; nc < N * C; ++nc)
        for (std::int64_t i = 0; i < H; ++i)
          for (std::int64_t j = 0; j < W; ++j)
            o[(nc * H + i) * W + j] = gd[(nc * (H / 2) + i / 2) * Wo + j / 2] * T(0.25);
    });
    return grads;
  });
}

Tensor nearest_upsample2x(const Tensor& x) {
  require_rank("nearest_upsample2x", "input", x, 4);
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Ho = 2 * H, Wo = 2 * W;
  Tensor out = Tensor::empty({N, C, Ho, Wo}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    auto od = out.mutable_data<T>();
    for (std::int64_t nc = 0; nc < N * C; ++nc)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j)
          od[(nc * Ho + i) * Wo + j] = xd[(nc * H + i / 2) * W + j / 2];
  });
  return finish(std::move(out), "nearest_upsample2x", {x}, {},
                [N, C, H, W](const Tensor& g, const Node&) {
                  Grads grads(1);
                  grads[0] = Tensor::zeros({N, C, H, W}, g.dtype());
                  visit_dtype(g.dtype(), [&]<class T>() {
                    auto gd = g.data<T>();
                    auto o = grads[0].mutable_data<T>();
                    const std::int64_t Ho = 2 * H, Wo = 2 * W;
                    for (std::int64_t nc = 0; nc < N * C; ++nc)
                      for (std::int64_t i = 0; i < Ho; ++i)
                        for (std::int64_t j = 0; j < Wo; ++j)
                          o[(nc * H + i / 2) * W + j / 2] += gd[(nc * Ho + i) * Wo + j];
                  });
                  return grads;
                });
}

namespace {

// probs[i * L + j] = softmax_j(scale * sum_c q[c, i] k[c, j]) for one sample.
template <class T>
void attention_probs(const T* q, const T* k, std::int64_t C, std::int64_t L, T scale,
                     std::vector<T>& probs) {
  probs.assign(static_cast<std::size_t>(L * L), T(0));
  for (std::int64_t c = 0; c < C; ++c) {
    const T* qc = q + c * L;
    const T* kc = k + c * L;
    for (std::int64_t i = 0; i < L; ++i) axpy(qc[i], kc, &probs[i * L], L);
  }
  for (std::int64_t i = 0; i < L; ++i) {
    T* row = &probs[i * L];
    T mx = row[0] * scale;
    for (std::int64_t j = 0; j < L; ++j) {
      row[j] *= scale;
      mx = std::max(mx, row[j]);
    }
    T s = 0;
    for (std::int64_t j = 0; j < L; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    const T inv = T(1) / s;
    for (std::int64_t j = 0; j < L; ++j) row[j] *= inv;
  }
}

}  // namespace

Tensor attention_self(const Tensor& q, const Tensor& k, const Tensor& v) {
  require_rank("attention_self", "q", q, 4);
  require_shape("attention_self", "k", k, q.shape());
  require_shape("attention_self", "v", v, q.shape());
  require_same_dtype("attention_self", q, k);
  require_same_dtype("attention_self", q, v);
  const std::int64_t N = q.dim(0), C = q.dim(1), L = q.dim(2) * q.dim(3);
  const double scale = 1.0 / std::sqrt(static_cast<double>(C));
  Tensor out = Tensor::empty(q.shape(), q.dtype());
  visit_dtype(q.dtype(), [&]<class T>() {
    auto qd = q.data<T>();
    auto kd = k.data<T>();
    auto vd = v.data<T>();
    auto od = out.mutable_data<T>();
    std::vector<T> probs;
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t off = n * C * L;
      attention_probs<T>(&qd[off], &kd[off], C, L, static_cast<T>(scale), probs);
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < L; ++i)
          od[off + c * L + i] = dot(&probs[i * L], &vd[off + c * L], L);
    }
  });
  return finish(
      std::move(out), "attention_self", {q, k, v}, {q, k, v},
      [N, C, L, scale](const Tensor& g, const Node& node) {
        const Tensor& qs = node.saved[0];
        const Tensor& ks = node.saved[1];
        const Tensor& vs = node.saved[2];
        Grads grads(3);
        for (int i = 0; i < 3; ++i) grads[i] = Tensor::zeros(qs.shape(), qs.dtype());
        visit_dtype(qs.dtype(), [&]<class T>() {
          auto qd = qs.data<T>();
          auto kd = ks.data<T>();
          auto vd = vs.data<T>();
          auto gd = g.data<T>();
          auto gq = grads[0].mutable_data<T>();
          auto gk = grads[1].mutable_data<T>();
          auto gv = grads[2].mutable_data<T>();
          std::vector<T> probs, dprobs(static_cast<std::size_t>(L * L));
          const T st = static_cast<T>(scale);
          for (std::int64_t n = 0; n < N; ++n) {
            const std::int64_t off = n * C * L;
            attention_probs<T>(&qd[off], &kd[off], C, L, st, probs);
            std::fill(dprobs.begin(), dprobs.end(), T(0));
            // dP[i, j] = sum_c g[c, i] v[c, j];  dV[c, j] = sum_i P[i, j] g[c, i]
            for (std::int64_t c = 0; c < C; ++c) {
              const T* gc = &gd[off + c * L];
              const T* vc = &vd[off + c * L];
              T* gvc = &gv[off + c * L];
              for (std::int64_t i = 0; i < L; ++i) {
                axpy(gc[i], vc, &dprobs[i * L], L);
                axpy(gc[i], &probs[i * L], gvc, L);
              }
            }
            // dS = P * (dP - rowsum(dP * P)), folded with the logit scale.
            for (std::int64_t i = 0; i < L; ++i) {
              T* dp = &dprobs[i * L];
              const T r = dot(dp, &probs[i * L], L);
              for (std::int64_t j = 0; j < L; ++j) dp[j] = probs[i * L + j] * (dp[j] - r) * st;
            }
            for (std::int64_t c = 0; c < C; ++c) {
              const T* qc = &qd[off + c * L];
              const T* kc = &kd[off + c * L];
              T* gqc = &gq[off + c * L];
              T* gkc = &gk[off + c * L];
              for (std::int64_t i = 0; i < L; ++i) {
                gqc[i] += dot(&dprobs[i * L], kc, L);
                axpy(qc[i], &dprobs[i * L], gkc, L);
              }
            }
          }
        });
        for (int i = 0; i < 3; ++i)
          if (!needs(node, static_cast<std::size_t>(i))) grads[i] = Tensor();
        return grads;
      });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank("embedding", "table", table, 2);
  const std::int64_t V = table.dim(0), D = table.dim(1);
  const auto R = static_cast<std::int64_t>(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= V) {
      throw ShapeError("embedding: id " + std::to_string(id) + " outside table of " +
                       std::to_string(V) + " rows");
    }
  }
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor out = Tensor::empty({R, D}, table.dtype());
  visit_dtype(table.dtype(), [&]<class T>() {
    auto td = table.data<T>();
    auto od = out.mutable_data<T>();
    for (std::int64_t r = 0; r < R; ++r) std::copy_n(&td[idv[r] * D], D, &od[r * D]);
  });
  return finish(std::move(out), "embedding", {table}, {}, [V, D, idv](const Tensor& g, const Node&) {
    Grads grads(1);
    grads[0] = Tensor::zeros({V, D}, g.dtype());
    visit_dtype(g.dtype(), [&]<class T>() {
      auto gd = g.data<T>();
      auto o = grads[0].mutable_data<T>();
      for (std::size_t r = 0; r < idv.size(); ++r)
        for (std::int64_t d = 0; d < D; ++d) o[idv[r] * D + d] += gd[r * D + d];
    });
    return grads;
  });
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::empty({}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    double s = 0.0;
    for (T v : x.data<T>()) s += static_cast<double>(v);
    out.mutable_data<T>()[0] = static_cast<T>(s);
  });
  Shape shape = x.shape();
  return finish(std::move(out), "sum", {x}, {}, [shape](const Tensor& g, const Node&) {
    return Grads{Tensor::full(shape, g.item(), g.dtype())};
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  Tensor out = Tensor::empty({}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    double s = 0.0;
    for (T v : x.data<T>()) s += static_cast<double>(v);
    out.mutable_data<T>()[0] = static_cast<T>(s / n);
  });
  Shape shape = x.shape();
  return finish(std::move(out), "mean", {x}, {}, [shape, n](const Tensor& g, const Node&) {
    return Grads{Tensor::full(shape, g.item() / n, g.dtype())};
  });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  require_same_dtype("mse_loss", a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError("mse_loss: operand 'target' has shape " + shape_str(b.shape()) +
                     ", expected " + shape_str(a.shape()));
  }
  const double n = static_cast<double>(a.numel());
  Tensor out = Tensor::empty({}, a.dtype());
  visit_dtype(a.dtype(), [&]<class T>() {
    auto ad = a.data<T>();
    auto bd = b.data<T>();
    double s = 0.0;
    for (std::size_t i = 0; i < ad.size(); ++i) {
      const double d = static_cast<double>(ad[i]) - static_cast<double>(bd[i]);
      s += d * d;
    }
    out.mutable_data<T>()[0] = static_cast<T>(s / n);
  });
  return finish(std::move(out), "mse_loss", {a, b}, {a, b}, [n](const Tensor& g, const Node& node) {
    const Tensor& as = node.saved[0];
    const Tensor& bs = node.saved[1];
    Grads grads(2);
    const double scale = 2.0 * g.item() / n;
    visit_dtype(as.dtype(), [&]<class T>() {
      auto ad = as.data<T>();
      auto bd = bs.data<T>();
      Tensor diff = Tensor::empty(as.shape(), as.dtype());
      auto dd = diff.mutable_data<T>();
      for (std::size_t i = 0; i < ad.size(); ++i)
        dd[i] = static_cast<T>(scale * (static_cast<double>(ad[i]) - static_cast<double>(bd[i])));
      if (needs(node, 0)) grads[0] = diff;
      if (needs(node, 1)) grads[1] = scaled_copy(diff, -1.0);
    });
    return grads;
  });
}

// ------------------------------------------------------- primitive table

namespace {
constexpr std::array<std::pair<PrimitiveKind, std::string_view>, 11> kPrimitiveNames{{
    {PrimitiveKind::kConv2d, "conv2d"},
    {PrimitiveKind::kLinear, "linear"},
    {PrimitiveKind::kGroupNorm, "group_norm"},
    {PrimitiveKind::kSilu, "silu"},
    {PrimitiveKind::kGelu, "gelu"},
    {PrimitiveKind::kAdd, "add"},
    {PrimitiveKind::kMulScalar, "mul_scalar"},
    {PrimitiveKind::kConcatChannels, "concat_channels"},
    {PrimitiveKind::kAvgPool2x, "avgpool2x"},
    {PrimitiveKind::kNearestUpsample2x, "nearest_upsample2x"},
    {PrimitiveKind::kAttentionSelf, "attention_self"},
}};

constexpr std::array<PrimitiveKind, 11> kAllPrimitives{
    PrimitiveKind::kConv2d,          PrimitiveKind::kLinear,
    PrimitiveKind::kGroupNorm,       PrimitiveKind::kSilu,
    PrimitiveKind::kGelu,            PrimitiveKind::kAdd,
    PrimitiveKind::kMulScalar,       PrimitiveKind::kConcatChannels,
    PrimitiveKind::kAvgPool2x,       PrimitiveKind::kNearestUpsample2x,
    PrimitiveKind::kAttentionSelf,
};

void require_arity(PrimitiveKind kind, std::span<const Tensor> inputs, std::size_t lo,
                   std::size_t hi) {
  if (inputs.size() < lo || inputs.size() > hi) {
    throw ShapeError(std::string(primitive_name(kind)) + ": expected " + std::to_string(lo) +
                     (lo == hi ? "" : "-" + std::to_string(hi)) + " operands, got " +
                     std::to_string(inputs.size()));
  }
}
}  // namespace

PrimitiveKind parse_primitive(std::string_view name) {
  for (const auto& [kind, n] : kPrimitiveNames) {
    if (n == name) return kind;
  }
  throw ConfigError("unknown primitive kind '" + std::string(name) + "'");
}

std::string_view primitive_name(PrimitiveKind kind) {
  for (const auto& [k, n] : kPrimitiveNames) {
    if (k == kind) return n;
  }
  return "?";
}

std::span<const PrimitiveKind> all_primitives() { return kAllPrimitives; }

Tensor primitive_forward(PrimitiveKind kind, std::span<const Tensor> in, const PrimitiveAttrs& attrs) {
  switch (kind) {
    case PrimitiveKind::kConv2d:
      require_arity(kind, in, 2, 3);
      return conv2d(in[0], in[1], in.size() > 2 ? in[2] : Tensor(), attrs.stride);
    case PrimitiveKind::kLinear:
      require_arity(kind, in, 2, 3);
      return linear(in[0], in[1], in.size() > 2 ? in[2] : Tensor());
    case PrimitiveKind::kGroupNorm:
      require_arity(kind, in, 3, 3);
      return group_norm(in[0], attrs.groups, in[1], in[2], attrs.eps);
    case PrimitiveKind::kSilu:
      require_arity(kind, in, 1, 1);
      return silu(in[0]);
    case PrimitiveKind::kGelu:
      require_arity(kind, in, 1, 1);
      return gelu(in[0]);
    case PrimitiveKind::kAdd:
      require_arity(kind, in, 2, 2);
      return add(in[0], in[1]);
    case PrimitiveKind::kMulScalar:
      require_arity(kind, in, 1, 1);
      return mul_scalar(in[0], attrs.scalar);
    case PrimitiveKind::kConcatChannels:
      require_arity(kind, in, 1, 64);
      return concat_channels(in);
    case PrimitiveKind::kAvgPool2x:
      require_arity(kind, in, 1, 1);
      return avgpool2x(in[0]);
    case PrimitiveKind::kNearestUpsample2x:
      require_arity(kind, in, 1, 1);
      return nearest_upsample2x(in[0]);
    case PrimitiveKind::kAttentionSelf:
      require_arity(kind, in, 3, 3);
      return attention_self(in[0], in[1], in[2]);
  }
  throw ConfigError("unhandled primitive kind");
}

}  // namespace scedit::ops
