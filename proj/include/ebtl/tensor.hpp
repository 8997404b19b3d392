#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <vector>

#include <cblas.h>

#include "ebtl/common.hpp"

namespace ebtl::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// Immutable dense tensor of 64-bit floats, row-major. Copies share the
// underlying buffer, so tensors are cheap value types and safe to pass
// between threads. `node` is a handle into the tape that produced it
// (-1 when the tensor is a plain constant).
class Tensor {
 public:
  Tensor() : shape_{}, data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(values))) {
    EBTL_REQUIRE_SHAPE(shape_numel(shape_) == data_->size(),
                       "Tensor: shape ", fmt_shape(shape_), " does not match data length ",
                       data_->size());
#ifndef NDEBUG
    EBTL_REQUIRE(all_finite(*data_), "Tensor: non-finite entry in new tensor of shape ",
                 fmt_shape(shape_));
#endif
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor row(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
  }
  static Tensor matrix(std::size_t m, std::size_t n, std::vector<double> v) {
    return Tensor({m, n}, std::move(v));
  }
  static Tensor zeros(Shape shape) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_->size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  const std::vector<double>& data() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t i, std::size_t j) const {
    EBTL_REQUIRE_SHAPE(rank() == 2, "Tensor::at(i,j) requires rank 2, got ", fmt_shape(shape_));
    return (*data_)[i * shape_[1] + j];
  }
  double value() const {
    EBTL_REQUIRE_SHAPE(numel() == 1, "Tensor::value requires a scalar, got ", fmt_shape(shape_));
    return (*data_)[0];
  }

  int node() const { return node_; }
  std::uint64_t epoch() const { return epoch_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  int node_ = -1;
  std::uint64_t epoch_ = 0;
};

// Recorded computation graph. Nodes are appended in execution order, so the
// list is topologically sorted by construction and a single reverse sweep
// computes all gradients. clear() invalidates tensors recorded so far;
// backward on them reports a cleared tape.
class Tape {
 public:
  using GradMap = std::map<int, Tensor>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    leaves_.clear();
    ++epoch_;
  }

  // Registers a differentiable input. The returned tensor participates in
  // backward(); gradients are keyed by its node id.
  Tensor leaf(const Tensor& t) {
    Tensor out = t;
    out.node_ = static_cast<int>(nodes_.size());
    out.epoch_ = epoch_;
    Node node;
    node.out_shape = t.shape();
    node.out_numel = t.numel();
    nodes_.push_back(std::move(node));
    leaves_.push_back(out.node_);
    return out;
  }

  // ---- elementwise binary ops ----

  Tensor add(const Tensor& a, const Tensor& b) {
    if (b.rank() == 1 && a.rank() == 2 && a.dim(1) == b.dim(0)) return add_row_bias(a, b);
    check_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return record(a.shape(), std::move(out), {in_id(a), in_id(b)},
                  [](Ctx& c) {
                    c.accum(0, [&](std::size_t i) { return c.gout[i]; });
                    c.accum(1, [&](std::size_t i) { return c.gout[i]; });
                  });
  }

  Tensor subtract(const Tensor& a, const Tensor& b) {
    check_same_shape("subtract", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return record(a.shape(), std::move(out), {in_id(a), in_id(b)},
                  [](Ctx& c) {
                    c.accum(0, [&](std::size_t i) { return c.gout[i]; });
                    c.accum(1, [&](std::size_t i) { return -c.gout[i]; });
                  });
  }

  Tensor multiply(const Tensor& a, const Tensor& b) {
    check_same_shape("multiply", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto da = a.data_;
    auto db = b.data_;
    return record(a.shape(), std::move(out), {in_id(a), in_id(b)},
                  [da, db](Ctx& c) {
                    c.accum(0, [&](std::size_t i) { return c.gout[i] * (*db)[i]; });
                    c.accum(1, [&](std::size_t i) { return c.gout[i] * (*da)[i]; });
                  });
  }

  Tensor minimum(const Tensor& a, const Tensor& b) { return min_max("minimum", a, b, true); }
  Tensor maximum(const Tensor& a, const Tensor& b) { return min_max("maximum", a, b, false); }

  // ---- elementwise unary ops ----

  Tensor negate(const Tensor& a) {
    return unary(a, [](double x) { return -x; }, [](double, double, double g) { return -g; });
  }

  Tensor scale(const Tensor& a, double c) {
    return unary(a, [c](double x) { return c * x; }, [c](double, double, double g) { return c * g; });
  }

  Tensor shift(const Tensor& a, double c) {
    return unary(a, [c](double x) { return x + c; }, [](double, double, double g) { return g; });
  }

  Tensor relu(const Tensor& a) {
    // Subgradient at the kink passes through (x == 0 behaves like x > 0).
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double, double g) { return x >= 0.0 ? g : 0.0; });
  }

  Tensor tanh(const Tensor& a) {
    return unary(a, [](double x) { return std::tanh(x); },
                 [](double, double y, double g) { return g * (1.0 - y * y); });
  }

  Tensor exponent(const Tensor& a) {
    return unary(a, [](double x) { return std::exp(x); },
                 [](double, double y, double g) { return g * y; });
  }

  Tensor logarithm(const Tensor& a) {
    return unary(a, [](double x) { return std::log(x); },
                 [](double x, double, double g) { return g / x; });
  }

  Tensor square(const Tensor& a) {
    return unary(a, [](double x) { return x * x; },
                 [](double x, double, double g) { return 2.0 * x * g; });
  }

  Tensor clip(const Tensor& a, double lo, double hi) {
    EBTL_REQUIRE(lo <= hi, "clip: lo (", lo, ") must be <= hi (", hi, ")");
    // Pass-through at the boundaries themselves.
    return unary(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                 [lo, hi](double x, double, double g) { return (x >= lo && x <= hi) ? g : 0.0; });
  }

  // ---- matrix / reduction ops ----

  Tensor matmul(const Tensor& a, const Tensor& b) {
    EBTL_REQUIRE_SHAPE(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                       "matmul: incompatible shapes ", fmt_shape(a.shape()), " x ",
                       fmt_shape(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    dgemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
    auto da = a.data_;
    auto db = b.data_;
    return record({m, n}, std::move(out), {in_id(a), in_id(b)},
                  [da, db, m, n, k](Ctx& c) {
                    if (c.wants(0)) {
                      // dA = G * B^T
                      std::vector<double> g(m * k, 0.0);
                      dgemm(false, true, m, k, n, c.gout.data(), db->data(), g.data());
                      c.accum_vec(0, g);
                    }
                    if (c.wants(1)) {
                      // dB = A^T * G
                      std::vector<double> g(k * n, 0.0);
                      dgemm(true, false, k, n, m, da->data(), c.gout.data(), g.data());
                      c.accum_vec(1, g);
                    }
                  });
  }

  // Valid (no padding) stride-1 2-D convolution over channel-major samples.
  // x: [N, c_in*h*w], w: [c_out, c_in*kh*kw], b: [c_out] -> [N, c_out*ho*wo].
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t c_in,
                std::size_t h, std::size_t win, std::size_t kh, std::size_t kw) {
    EBTL_REQUIRE_SHAPE(x.rank() == 2 && x.dim(1) == c_in * h * win,
                       "conv2d: input shape ", fmt_shape(x.shape()), " does not match channels ",
                       c_in, "x", h, "x", win);
    EBTL_REQUIRE_SHAPE(w.rank() == 2 && w.dim(1) == c_in * kh * kw, "conv2d: weight shape ",
                       fmt_shape(w.shape()), " does not match patch size ", c_in * kh * kw);
    EBTL_REQUIRE_SHAPE(b.rank() == 1 && b.dim(0) == w.dim(0), "conv2d: bias shape ",
                       fmt_shape(b.shape()), " does not match out channels ", w.dim(0));
    EBTL_REQUIRE(h >= kh && win >= kw, "conv2d: kernel larger than input");
    const std::size_t n = x.dim(0), c_out = w.dim(0);
    const std::size_t ho = h - kh + 1, wo = win - kw + 1, patch = c_in * kh * kw;
    const std::size_t pos = ho * wo;

    // im2col: [n*pos, patch]
    auto col = std::make_shared<std::vector<double>>(n * pos * patch);
    {
      const double* xd = x.data().data();
      double* cd = col->data();
      for (std::size_t s = 0; s < n; ++s) {
        const double* xs = xd + s * c_in * h * win;
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            double* crow = cd + ((s * pos) + oy * wo + ox) * patch;
            for (std::size_t c = 0; c < c_in; ++c)
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const double* src = xs + c * h * win + (oy + ky) * win + ox;
                double* dst = crow + c * kh * kw + ky * kw;
                for (std::size_t kx = 0; kx < kw; ++kx) dst[kx] = src[kx];
              }
          }
      }
    }

    // rows = col * w^T : [n*pos, c_out]
    std::vector<double> rows(n * pos * c_out, 0.0);
    dgemm(false, true, n * pos, c_out, patch, col->data(), w.data().data(), rows.data());

    // reorder to channel-major [n, c_out*pos] and add bias
    std::vector<double> out(n * c_out * pos);
    const double* bd = b.data().data();
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < pos; ++p) {
        const double* r = rows.data() + (s * pos + p) * c_out;
        for (std::size_t c = 0; c < c_out; ++c) out[s * c_out * pos + c * pos + p] = r[c] + bd[c];
      }

    auto wd = w.data_;
    std::array<int, 3> ins{in_id(x), in_id(w), in_id(b)};
    return record_n({n, c_out * pos}, std::move(out), ins,
                    [col, wd, n, c_in, h, win, kh, kw, ho, wo, c_out, patch, pos](Ctx& c) {
                      // gout back to row-major [n*pos, c_out]
                      std::vector<double> grows(n * pos * c_out);
                      for (std::size_t s = 0; s < n; ++s)
                        for (std::size_t p = 0; p < pos; ++p)
                          for (std::size_t ch = 0; ch < c_out; ++ch)
                            grows[(s * pos + p) * c_out + ch] =
                                c.gout[s * c_out * pos + ch * pos + p];
                      if (c.wants(1)) {
                        // dW = grows^T * col
                        std::vector<double> gw(c_out * patch, 0.0);
                        dgemm(true, false, c_out, patch, n * pos, grows.data(), col->data(),
                              gw.data());
                        c.accum_vec(1, gw);
                      }
                      if (c.wants(2)) {
                        std::vector<double> gb(c_out, 0.0);
                        for (std::size_t r = 0; r < n * pos; ++r)
                          for (std::size_t ch = 0; ch < c_out; ++ch)
                            gb[ch] += grows[r * c_out + ch];
                        c.accum_vec(2, gb);
                      }
                      if (c.wants(0)) {
                        // dcol = grows * W, then col2im scatter-add
                        std::vector<double> gcol(n * pos * patch, 0.0);
                        dgemm(false, false, n * pos, patch, c_out, grows.data(), wd->data(),
                              gcol.data());
                        std::vector<double> gx(n * c_in * h * win, 0.0);
                        for (std::size_t s = 0; s < n; ++s) {
                          double* gxs = gx.data() + s * c_in * h * win;
                          for (std::size_t oy = 0; oy < ho; ++oy)
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                              const double* crow = gcol.data() + ((s * pos) + oy * wo + ox) * patch;
                              for (std::size_t ch = 0; ch < c_in; ++ch)
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                  double* dst = gxs + ch * h * win + (oy + ky) * win + ox;
                                  const double* src = crow + ch * kh * kw + ky * kw;
                                  for (std::size_t kx = 0; kx < kw; ++kx) dst[kx] += src[kx];
                                }
                            }
                        }
                        c.accum_vec(0, gx);
                      }
                    });
  }

  // Row-wise log-sum-exp, stabilized by max subtraction.
  // [m,n] -> [m]; rank-1 [n] -> scalar.
  Tensor log_sum_exp(const Tensor& a) {
    auto [m, n] = rows_cols("log_sum_exp", a);
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = lse_row(a.data().data() + i * n, n);
    auto da = a.data_;
    Shape out_shape = a.rank() == 1 ? Shape{} : Shape{m};
    auto outv = out;  // keep values for backward softmax
    return record(std::move(out_shape), std::move(out), {in_id(a), -1},
                  [da, outv, m, n](Ctx& c) {
                    c.accum_fn(0, [&](std::vector<double>& g) {
                      for (std::size_t i = 0; i < m; ++i) {
                        const double go = c.gout[i];
                        if (go == 0.0) continue;
                        const double* x = da->data() + i * n;
                        for (std::size_t j = 0; j < n; ++j)
                          g[i * n + j] += go * std::exp(x[j] - outv[i]);
                      }
                    });
                  });
  }

  // Row-wise log-softmax. [m,n] -> [m,n]; rank-1 stays rank-1.
  Tensor log_softmax(const Tensor& a) {
    auto [m, n] = rows_cols("log_softmax", a);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
      const double l = lse_row(a.data().data() + i * n, n);
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] - l;
    }
    auto outv = std::make_shared<std::vector<double>>(out);
    return record(a.shape(), std::move(out), {in_id(a), -1},
                  [outv, m, n](Ctx& c) {
                    c.accum_fn(0, [&](std::vector<double>& g) {
                      for (std::size_t i = 0; i < m; ++i) {
                        double gsum = 0.0;
                        for (std::size_t j = 0; j < n; ++j) gsum += c.gout[i * n + j];
                        for (std::size_t j = 0; j < n; ++j)
                          g[i * n + j] += c.gout[i * n + j] - std::exp((*outv)[i * n + j]) * gsum;
                      }
                    });
                  });
  }

  // Index selection: out[i] = a[i, idx[i]].
  Tensor gather(const Tensor& a, const std::vector<std::size_t>& idx) {
    EBTL_REQUIRE_SHAPE(a.rank() == 2, "gather: expected rank-2 input, got ", fmt_shape(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    EBTL_REQUIRE_SHAPE(idx.size() == m, "gather: index count ", idx.size(), " != rows ", m);
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
      EBTL_REQUIRE(idx[i] < n, "gather: index ", idx[i], " out of range for ", n, " columns");
      out[i] = a[i * n + idx[i]];
    }
    auto ix = idx;
    return record({m}, std::move(out), {in_id(a), -1},
                  [ix, n](Ctx& c) {
                    c.accum_fn(0, [&](std::vector<double>& g) {
                      for (std::size_t i = 0; i < ix.size(); ++i) g[i * n + ix[i]] += c.gout[i];
                    });
                  });
  }

  // Row sums: [m,n] -> [m].
  Tensor sum_rows(const Tensor& a) {
    EBTL_REQUIRE_SHAPE(a.rank() == 2, "sum_rows: expected rank-2 input, got ",
                       fmt_shape(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j];
    return record({m}, std::move(out), {in_id(a), -1},
                  [m, n](Ctx& c) {
                    c.accum_fn(0, [&](std::vector<double>& g) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += c.gout[i];
                    });
                  });
  }

  Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
    const std::size_t numel = a.numel();
    return record({}, {s}, {in_id(a), -1},
                  [numel](Ctx& c) {
                    c.accum(0, [&](std::size_t) { return c.gout[0]; });
                  });
  }

  Tensor mean(const Tensor& a) {
    EBTL_REQUIRE(a.numel() > 0, "mean: empty tensor");
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
    const double inv = 1.0 / static_cast<double>(a.numel());
    return record({}, {s * inv}, {in_id(a), -1},
                  [inv](Ctx& c) {
                    c.accum(0, [&](std::size_t) { return c.gout[0] * inv; });
                  });
  }

  // Reverse sweep from a scalar loss. Returns dLoss/dLeaf for every
  // registered leaf; leaves the loss does not depend on get zero tensors.
  GradMap backward(const Tensor& loss) {
    EBTL_REQUIRE(loss.node_ >= 0, "backward: loss tensor was not recorded on a tape");
    EBTL_REQUIRE(loss.epoch_ == epoch_ && static_cast<std::size_t>(loss.node_) < nodes_.size(),
                 "backward: tape has been cleared since this tensor was recorded");
    EBTL_REQUIRE(loss.numel() == 1 && loss.rank() == 0, "backward: loss must be a scalar, got ",
                 fmt_shape(loss.shape()));
    std::vector<std::vector<double>> grads(nodes_.size());
    grads[loss.node_] = {1.0};
    for (int i = loss.node_; i >= 0; --i) {
      if (grads[i].empty() || !nodes_[i].back) continue;
      Ctx ctx{grads[i], nodes_[i], grads};
      nodes_[i].back(ctx);
    }
    GradMap out;
    for (int id : leaves_) {
      auto& g = grads[id];
      if (g.empty()) g.assign(nodes_[id].out_numel, 0.0);
      out.emplace(id, Tensor(nodes_[id].out_shape, std::move(g)));
    }
    return out;
  }

 private:
  struct Node;

  // Handed to backward rules: upstream gradient plus accumulation helpers.
  struct Ctx {
    const std::vector<double>& gout;
    const Node& node;
    std::vector<std::vector<double>>& grads;

    bool wants(std::size_t slot) const { return node.in[slot] >= 0; }

    std::vector<double>& buf(std::size_t slot) {
      auto& g = grads[node.in[slot]];
      if (g.empty()) g.assign(node.in_numel[slot], 0.0);
      return g;
    }

    template <typename F>
    void accum(std::size_t slot, F&& f) {
      if (!wants(slot)) return;
      auto& g = buf(slot);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += f(i);
    }

    void accum_vec(std::size_t slot, const std::vector<double>& v) {
      if (!wants(slot)) return;
      auto& g = buf(slot);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += v[i];
    }

    template <typename F>
    void accum_fn(std::size_t slot, F&& f) {
      if (!wants(slot)) return;
      f(buf(slot));
    }
  };

  struct Node {
    std::array<int, 3> in{-1, -1, -1};
    std::array<std::size_t, 3> in_numel{0, 0, 0};
    Shape out_shape;
    std::size_t out_numel = 0;
    std::function<void(Ctx&)> back;  // null for leaves
  };

  // Inputs recorded before the last clear() are treated as constants.
  int in_id(const Tensor& t) const { return t.epoch_ == epoch_ ? t.node_ : -1; }

  static void dgemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                    const double* a, const double* b, double* c) {
    if (m == 0 || n == 0) return;
    if (k == 0) return;  // c stays zero
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a,
                static_cast<int>(ta ? m : k), b, static_cast<int>(tb ? k : n), 0.0, c,
                static_cast<int>(n));
  }

  static double lse_row(const double* x, std::size_t n) {
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
    return mx + std::log(s);
  }

  static void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    EBTL_REQUIRE_SHAPE(a.shape() == b.shape(), op, ": shape mismatch ", fmt_shape(a.shape()),
                       " vs ", fmt_shape(b.shape()));
  }

  static std::pair<std::size_t, std::size_t> rows_cols(const char* op, const Tensor& a) {
    EBTL_REQUIRE_SHAPE(a.rank() == 1 || a.rank() == 2, op, ": expected rank 1 or 2, got ",
                       fmt_shape(a.shape()));
    EBTL_REQUIRE(a.numel() > 0, op, ": empty tensor");
    if (a.rank() == 1) return {1, a.dim(0)};
    return {a.dim(0), a.dim(1)};
  }

  Tensor add_row_bias(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + b[j];
    return record(a.shape(), std::move(out), {in_id(a), in_id(b)},
                  [m, n](Ctx& c) {
                    c.accum(0, [&](std::size_t i) { return c.gout[i]; });
                    c.accum_fn(1, [&](std::vector<double>& g) {
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) g[j] += c.gout[i * n + j];
                    });
                  });
  }

  Tensor min_max(const char* op, const Tensor& a, const Tensor& b, bool is_min) {
    check_same_shape(op, a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = is_min ? std::min(a[i], b[i]) : std::max(a[i], b[i]);
    auto da = a.data_;
    auto db = b.data_;
    // Ties pass through to the first argument.
    return record(a.shape(), std::move(out), {in_id(a), in_id(b)},
                  [da, db, is_min](Ctx& c) {
                    c.accum(0, [&](std::size_t i) {
                      bool first = is_min ? (*da)[i] <= (*db)[i] : (*da)[i] >= (*db)[i];
                      return first ? c.gout[i] : 0.0;
                    });
                    c.accum(1, [&](std::size_t i) {
                      bool second = is_min ? (*db)[i] < (*da)[i] : (*db)[i] > (*da)[i];
                      return second ? c.gout[i] : 0.0;
                    });
                  });
  }

  template <typename Fwd, typename Bwd>
  Tensor unary(const Tensor& a, Fwd&& f, Bwd&& df) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
    auto da = a.data_;
    auto outv = std::make_shared<std::vector<double>>(out);
    return record(a.shape(), std::move(out), {in_id(a), -1},
                  [da, outv, df](Ctx& c) {
                    c.accum(0, [&](std::size_t i) { return df((*da)[i], (*outv)[i], c.gout[i]); });
                  });
  }

  Tensor record(Shape shape, std::vector<double> values, std::array<int, 2> in,
                std::function<void(Ctx&)> back) {
    return record_n(std::move(shape), std::move(values), {in[0], in[1], -1}, std::move(back));
  }

  Tensor record_n(Shape shape, std::vector<double> values, std::array<int, 3> in,
                  std::function<void(Ctx&)> back) {
#ifndef NDEBUG
    EBTL_REQUIRE(all_finite(values), "op produced a non-finite value (shape ", fmt_shape(shape),
                 ")");
#endif
    Node node;
    node.in = in;
    node.out_shape = shape;
    node.out_numel = values.size();
    node.back = std::move(back);
    for (std::size_t s = 0; s < 3; ++s)
      if (in[s] >= 0) {
        EBTL_REQUIRE(static_cast<std::size_t>(in[s]) < nodes_.size(),
                     "op input references an unknown node");
        node.in_numel[s] = nodes_[in[s]].out_numel;
      }
    Tensor out(std::move(shape), std::move(values));
    out.node_ = static_cast<int>(nodes_.size());
    out.epoch_ = epoch_;
    nodes_.push_back(std::move(node));
    return out;
  }

  std::vector<Node> nodes_;
  std::vector<int> leaves_;
  std::uint64_t epoch_ = 1;
};

}  // namespace ebtl::nn
