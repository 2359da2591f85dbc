// SPDX-License-Identifier: Apache-2.0
#include "fedsim/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fedsim/errors.hpp"
#include "fedsim/kernels.hpp"

namespace fedsim {

const Tensor* Gradients::find(Var v) const noexcept {
  if (v.id >= slots_.size() || !slots_[v.id]) return nullptr;
  return &*slots_[v.id];
}

const Tensor& Gradients::at(Var v) const {
  const Tensor* t = find(v);
  if (!t) throw ContractError("node " + std::to_string(v.id) + " has no gradient");
  return *t;
}

Var Graph::constant(Tensor value) {
  nodes_.push_back({"constant", std::move(value), {}, nullptr, false});
  return {nodes_.size() - 1};
}

Var Graph::parameter(Tensor value) {
  nodes_.push_back({"parameter", std::move(value), {}, nullptr, true});
  return {nodes_.size() - 1};
}

Var Graph::detach(Var v) { return constant(value(v)); }

Var Graph::record(const char* op, Tensor value, std::vector<Var> inputs, Adjoint adjoint) {
#ifndef NDEBUG
  value.require_finite(op);
#endif
  bool needs = false;
  for (Var in : inputs) {
    if (in.id >= nodes_.size()) throw ContractError(std::string(op) + ": unknown input node");
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back({op, std::move(value), std::move(inputs),
                    needs ? std::move(adjoint) : Adjoint{}, needs});
  return {nodes_.size() - 1};
}

Gradients Graph::backward(Var loss) const {
  const Tensor& out = value(loss);
  if (out.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(out.shape()));
  }
  Gradients grads;
  grads.slots_.resize(loss.id + 1);
  if (!nodes_[loss.id].requires_grad) return grads;
  grads.slots_[loss.id] = Tensor::filled(out.shape(), 1.0);

  std::vector<Tensor*> grad_in;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads.slots_[id] || !node.adjoint) continue;
    grad_in.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      const std::size_t in = node.inputs[j].id;
      if (!nodes_[in].requires_grad) continue;
      if (!grads.slots_[in]) grads.slots_[in] = Tensor(nodes_[in].value.shape());
      grad_in[j] = &*grads.slots_[in];
    }
    node.adjoint(*this, *grads.slots_[id], grad_in);
  }
  return grads;
}

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

Tensor matmul_value(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) +
                         " * " + shape_string(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  kernels::gemm_nn(a.dim(0), a.dim(1), b.dim(1), a.data(), b.data(), c.data());
  return c;
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, std::size_t stride,
                           std::size_t pad) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                 kernel.dim(2), kernel.dim(3), stride, pad, 0, 0};
  if (kernel.dim(1) != g.c) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " does not match input channels of " + shape_string(input.shape()));
  }
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " larger than padded input " + shape_string(input.shape()));
  }
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// Columns of one image: [C*kh*kw x oh*ow].
void im2col(const ConvGeometry& g, const double* image, double* cols) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.pixels();
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const long y = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const long x = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(g.h) &&
                                x < static_cast<long>(g.w);
            row[oi * g.ow + oj] = inside ? image[(c * g.h + y) * g.w + x] : 0.0;
          }
        }
      }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* image) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.pixels();
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const long y = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const long x = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            if (x < 0 || x >= static_cast<long>(g.w)) continue;
            image[(c * g.h + y) * g.w + x] += row[oi * g.ow + oj];
          }
        }
      }
}

Tensor conv_value(const ConvGeometry& g, const Tensor& input, const Tensor& kernel) {
  Tensor out({g.n, g.f, g.oh, g.ow});
  std::vector<double> cols(g.patch() * g.pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, input.data() + n * g.c * g.h * g.w, cols.data());
    kernels::gemm_nn(g.f, g.patch(), g.pixels(), kernel.data(), cols.data(),
                     out.data() + n * g.f * g.pixels());
  }
  return out;
}

Tensor softmax_value(const Tensor& z) {
  require_rank(z, 2, "softmax");
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  if (cols < 2) throw DimensionError("softmax: needs at least 2 classes, got " + shape_string(z.shape()));
  Tensor p(z.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* zi = z.data() + i * cols;
    double* pi = p.data() + i * cols;
    const double top = *std::max_element(zi, zi + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += pi[j] = std::exp(zi[j] - top);
    for (std::size_t j = 0; j < cols; ++j) pi[j] /= total;
  }
  return p;
}

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace

namespace ag {

Var matmul(Graph& g, Var a, Var b) {
  Tensor c = matmul_value(g.value(a), g.value(b));
  return g.record("matmul", std::move(c), {a, b},
                  [a, b](const Graph& graph, const Tensor& dc, std::span<Tensor* const> din) {
                    const Tensor& av = graph.value(a);
                    const Tensor& bv = graph.value(b);
                    const std::size_t p = av.dim(0), k = av.dim(1), q = bv.dim(1);
                    if (din[0]) kernels::gemm_nt(p, q, k, dc.data(), bv.data(), din[0]->data());
                    if (din[1]) kernels::gemm_tn(k, p, q, av.data(), dc.data(), din[1]->data());
                  });
}

Var add_bias(Graph& g, Var x, Var bias) {
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.value(bias);
  require_rank(xv, 2, "add_bias");
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " does not match " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += bv[j];
  return g.record("add_bias", std::move(out), {x, bias},
                  [rows, cols](const Graph&, const Tensor& d, std::span<Tensor* const> din) {
                    if (din[0]) {
                      for (std::size_t i = 0; i < d.size(); ++i) (*din[0])[i] += d[i];
                    }
                    if (din[1]) {
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < cols; ++j) (*din[1])[j] += d[i * cols + j];
                    }
                  });
}

Var add_channel_bias(Graph& g, Var x, Var bias) {
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.value(bias);
  require_rank(xv, 4, "add_channel_bias");
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw DimensionError("add_channel_bias: bias " + shape_string(bv.shape()) +
                         " does not match " + shape_string(xv.shape()));
  }
  const std::size_t n = xv.dim(0), f = xv.dim(1), px = xv.dim(2) * xv.dim(3);
  Tensor out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < f; ++c)
      for (std::size_t k = 0; k < px; ++k) out[(i * f + c) * px + k] += bv[c];
  return g.record("add_channel_bias", std::move(out), {x, bias},
                  [n, f, px](const Graph&, const Tensor& d, std::span<Tensor* const> din) {
                    if (din[0]) {
                      for (std::size_t i = 0; i < d.size(); ++i) (*din[0])[i] += d[i];
                    }
                    if (din[1]) {
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t c = 0; c < f; ++c)
                          for (std::size_t k = 0; k < px; ++k)
                            (*din[1])[c] += d[(i * f + c) * px + k];
                    }
                  });
}

Var conv2d(Graph& g, Var input, Var kernel, std::size_t stride, std::size_t padding) {
  const ConvGeometry geo = conv_geometry(g.value(input), g.value(kernel), stride, padding);
  Tensor out = conv_value(geo, g.value(input), g.value(kernel));
  return g.record(
      "conv2d", std::move(out), {input, kernel},
      [geo, input, kernel](const Graph& graph, const Tensor& d, std::span<Tensor* const> din) {
        const Tensor& x = graph.value(input);
        const Tensor& k = graph.value(kernel);
        std::vector<double> cols(geo.patch() * geo.pixels());
        const std::size_t image = geo.c * geo.h * geo.w;
        const std::size_t out_image = geo.f * geo.pixels();
        for (std::size_t n = 0; n < geo.n; ++n) {
          const double* dn = d.data() + n * out_image;
          if (din[1]) {
            im2col(geo, x.data() + n * image, cols.data());
            kernels::gemm_nt(geo.f, geo.pixels(), geo.patch(), dn, cols.data(), din[1]->data());
          }
          if (din[0]) {
            std::fill(cols.begin(), cols.end(), 0.0);
            kernels::gemm_tn(geo.patch(), geo.f, geo.pixels(), k.data(), dn, cols.data());
            col2im_add(geo, cols.data(), din[0]->data() + n * image);
          }
        }
      });
}

Var max_pool2d(Graph& g, Var input, std::size_t window) {
  const Tensor& x = g.value(input);
  require_rank(x, 4, "max_pool2d");
  if (window == 0 || x.dim(2) < window || x.dim(3) < window) {
    throw DimensionError("max_pool2d: window " + std::to_string(window) + " on " +
                         shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / window, ow = w / window;
  Tensor out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = x.data() + plane * h * w;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (i * window) * w + j * window;
        for (std::size_t a = 0; a < window; ++a)
          for (std::size_t b = 0; b < window; ++b) {
            const std::size_t at = (i * window + a) * w + j * window + b;
            if (src[at] > src[best]) best = at;
          }
        const std::size_t o = (plane * oh + i) * ow + j;
        out[o] = src[best];
        argmax[o] = plane * h * w + best;
      }
  }
  return g.record("max_pool2d", std::move(out), {input},
                  [argmax = std::move(argmax)](const Graph&, const Tensor& d,
                                               std::span<Tensor* const> din) {
                    for (std::size_t o = 0; o < d.size(); ++o) (*din[0])[argmax[o]] += d[o];
                  });
}

Var reshape(Graph& g, Var x, Shape shape) {
  Tensor out = g.value(x).reshaped(std::move(shape));
  return g.record("reshape", std::move(out), {x},
                  [](const Graph&, const Tensor& d, std::span<Tensor* const> din) {
                    for (std::size_t i = 0; i < d.size(); ++i) (*din[0])[i] += d[i];
                  });
}

Var relu(Graph& g, Var x) {
  Tensor out = fedsim::relu(g.value(x));
  return g.record("relu", std::move(out), {x},
                  [x](const Graph& graph, const Tensor& d, std::span<Tensor* const> din) {
                    const Tensor& xv = graph.value(x);
                    for (std::size_t i = 0; i < d.size(); ++i)
                      if (xv[i] > 0.0) (*din[0])[i] += d[i];
                  });
}

Var log(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  for (double v : xv.values()) {
    if (!(v > 0.0)) throw ContractError("log of non-positive value");
  }
  Tensor out = map(xv, [](double v) { return std::log(v); });
  return g.record("log", std::move(out), {x},
                  [x](const Graph& graph, const Tensor& d, std::span<Tensor* const> din) {
                    const Tensor& xv = graph.value(x);
                    for (std::size_t i = 0; i < d.size(); ++i) (*din[0])[i] += d[i] / xv[i];
                  });
}

Var clamp(Graph& g, Var x, double lo, double hi) {
  Tensor out = map(g.value(x), [lo, hi](double v) { return std::clamp(v, lo, hi); });
  return g.record("clamp", std::move(out), {x},
                  [x, lo, hi](const Graph& graph, const Tensor& d, std::span<Tensor* const> din) {
                    const Tensor& xv = graph.value(x);
                    for (std::size_t i = 0; i < d.size(); ++i)
                      if (xv[i] >= lo && xv[i] <= hi) (*din[0])[i] += d[i];
                  });
}

Var square(Graph& g, Var x) {
  Tensor out = map(g.value(x), [](double v) { return v * v; });
  return g.record("square", std::move(out), {x},
                  [x](const Graph& graph, const Tensor& d, std::span<Tensor* const> din) {
                    const Tensor& xv = graph.value(x);
                    for (std::size_t i = 0; i < d.size(); ++i) (*din[0])[i] += 2.0 * xv[i] * d[i];
                  });
}

Var softmax(Graph& g, Var logits) {
  Tensor p = softmax_value(g.value(logits));
  const Var self{g.size()};  // id this node will receive
  return g.record(
      "softmax", std::move(p), {logits},
      [self](const Graph& graph, const Tensor& d, std::span<Tensor* const> din) {
        const Tensor& p = graph.value(self);
        const std::size_t rows = p.dim(0), cols = p.dim(1);
        for (std::size_t i = 0; i < rows; ++i) {
          const double* pi = p.data() + i * cols;
          const double* di = d.data() + i * cols;
          double inner = 0.0;
          for (std::size_t j = 0; j < cols; ++j) inner += pi[j] * di[j];
          for (std::size_t j = 0; j < cols; ++j) (*din[0])[i * cols + j] += pi[j] * (di[j] - inner);
        }
      });
}

Var add(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "add");
  Tensor out = g.value(a);
  const Tensor& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.record("add", std::move(out), {a, b},
                  [](const Graph&, const Tensor& d, std::span<Tensor* const> din) {
                    for (Tensor* t : din)
                      if (t)
                        for (std::size_t i = 0; i < d.size(); ++i) (*t)[i] += d[i];
                  });
}

Var sub(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "sub");
  Tensor out = g.value(a);
  const Tensor& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.record("sub", std::move(out), {a, b},
                  [](const Graph&, const Tensor& d, std::span<Tensor* const> din) {
                    if (din[0])
                      for (std::size_t i = 0; i < d.size(); ++i) (*din[0])[i] += d[i];
                    if (din[1])
                      for (std::size_t i = 0; i < d.size(); ++i) (*din[1])[i] -= d[i];
                  });
}

Var mul(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "mul");
  Tensor out = g.value(a);
  const Tensor& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.record("mul", std::move(out), {a, b},
                  [a, b](const Graph& graph, const Tensor& d, std::span<Tensor* const> din) {
                    const Tensor& av = graph.value(a);
                    const Tensor& bv = graph.value(b);
                    if (din[0])
                      for (std::size_t i = 0; i < d.size(); ++i) (*din[0])[i] += d[i] * bv[i];
                    if (din[1])
                      for (std::size_t i = 0; i < d.size(); ++i) (*din[1])[i] += d[i] * av[i];
                  });
}

Var scale(Graph& g, Var x, double factor) {
  Tensor out = map(g.value(x), [factor](double v) { return v * factor; });
  return g.record("scale", std::move(out), {x},
                  [factor](const Graph&, const Tensor& d, std::span<Tensor* const> din) {
                    for (std::size_t i = 0; i < d.size(); ++i) (*din[0])[i] += factor * d[i];
                  });
}

Var offset(Graph& g, Var x, double shift) {
  Tensor out = map(g.value(x), [shift](double v) { return v + shift; });
  return g.record("offset", std::move(out), {x},
                  [](const Graph&, const Tensor& d, std::span<Tensor* const> din) {
                    for (std::size_t i = 0; i < d.size(); ++i) (*din[0])[i] += d[i];
                  });
}

Var div(Graph& g, Var num, Var den) {
  const Tensor& nv = g.value(num);
  const Tensor& dv = g.value(den);
  if (nv.size() != 1 || dv.size() != 1) {
    throw DimensionError("div: expects single-element operands, got " + shape_string(nv.shape()) +
                         " / " + shape_string(dv.shape()));
  }
  if (dv[0] == 0.0) throw ContractError("div: zero denominator");
  Tensor out(nv.shape(), {nv[0] / dv[0]});
  return g.record("div", std::move(out), {num, den},
                  [num, den](const Graph& graph, const Tensor& d, std::span<Tensor* const> din) {
                    const double n = graph.value(num)[0];
                    const double q = graph.value(den)[0];
                    if (din[0]) (*din[0])[0] += d[0] / q;
                    if (din[1]) (*din[1])[0] -= d[0] * n / (q * q);
                  });
}

Var sum(Graph& g, Var x) {
  double s = 0.0;
  for (double v : g.value(x).values()) s += v;
  return g.record("sum", Tensor::scalar(s), {x},
                  [](const Graph&, const Tensor& d, std::span<Tensor* const> din) {
                    for (double& v : din[0]->values()) v += d[0];
                  });
}

Var mean(Graph& g, Var x) {
  const double n = static_cast<double>(g.value(x).size());
  double s = 0.0;
  for (double v : g.value(x).values()) s += v;
  return g.record("mean", Tensor::scalar(s / n), {x},
                  [n](const Graph&, const Tensor& d, std::span<Tensor* const> din) {
                    for (double& v : din[0]->values()) v += d[0] / n;
                  });
}

Var pick(Graph& g, Var x, std::span<const std::size_t> index) {
  const Tensor& xv = g.value(x);
  require_rank(xv, 2, "pick");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (index.size() != rows) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " +
                         shape_string(xv.shape()));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  Tensor out({rows});
  for (std::size_t i = 0; i < rows; ++i) {
    if (idx[i] >= cols) {
      throw ContractError("pick: index " + std::to_string(idx[i]) + " out of range for " +
                          std::to_string(cols) + " columns");
    }
    out[i] = xv[i * cols + idx[i]];
  }
  return g.record("pick", std::move(out), {x},
                  [idx = std::move(idx), cols](const Graph&, const Tensor& d,
                                               std::span<Tensor* const> din) {
                    for (std::size_t i = 0; i < idx.size(); ++i) (*din[0])[i * cols + idx[i]] += d[i];
                  });
}

}  // namespace ag

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_value(a, b); }

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  return conv_value(conv_geometry(input, kernel, stride, padding), input, kernel);
}

Tensor relu(const Tensor& x) {
  return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

Tensor softmax(const Tensor& logits) { return softmax_value(logits); }

}  // namespace fedsim
