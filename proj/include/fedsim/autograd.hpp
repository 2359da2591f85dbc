// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

// Handle to a node on a Graph.
struct Var {
  std::size_t id = 0;
};

class Graph;

// Gradients produced by one backward pass. Nodes that are not reachable from
// the loss, or do not depend on any parameter, have no gradient.
class Gradients {
 public:
  const Tensor* find(Var v) const noexcept;
  const Tensor& at(Var v) const;
  bool has(Var v) const noexcept { return find(v) != nullptr; }

 private:
  friend class Graph;
  std::vector<std::optional<Tensor>> slots_;
};

// Append-only tape. Inputs always precede outputs, so the node order is a
// topological order and backward is a single reverse sweep.
class Graph {
 public:
  // Adjoint of one node: reads the upstream gradient and accumulates into the
  // gradient slots of its inputs. Slots of inputs that need no gradient are null.
  using Adjoint = std::function<void(const Graph& graph, const Tensor& grad_out,
                                     std::span<Tensor* const> grad_in)>;

  Var constant(Tensor value);
  Var parameter(Tensor value);
  // Constant copy of v's value; gradient does not flow through it.
  Var detach(Var v);

  Var record(const char* op, Tensor value, std::vector<Var> inputs, Adjoint adjoint);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Reverse-mode sweep from a single-element loss node.
  Gradients backward(Var loss) const;

 private:
  struct Node {
    const char* op;
    Tensor value;
    std::vector<Var> inputs;
    Adjoint adjoint;
    bool requires_grad;
  };
  std::vector<Node> nodes_;
};

namespace ag {

Var matmul(Graph& g, Var a, Var b);
// x[N x F] + b[F] broadcast over rows.
Var add_bias(Graph& g, Var x, Var bias);
// x[N x F x H x W] + b[F] broadcast over images and pixels.
Var add_channel_bias(Graph& g, Var x, Var bias);
Var conv2d(Graph& g, Var input, Var kernel, std::size_t stride, std::size_t padding);
Var max_pool2d(Graph& g, Var input, std::size_t window);
Var reshape(Graph& g, Var x, Shape shape);

Var relu(Graph& g, Var x);
Var log(Graph& g, Var x);
Var clamp(Graph& g, Var x, double lo, double hi);
Var square(Graph& g, Var x);
// Row-wise softmax of an [N x C] matrix with max subtraction.
Var softmax(Graph& g, Var logits);

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double factor);
Var offset(Graph& g, Var x, double shift);
// Quotient of two single-element nodes.
Var div(Graph& g, Var num, Var den);

Var sum(Graph& g, Var x);
Var mean(Graph& g, Var x);
// out[i] = x[i, index[i]] for an [N x C] matrix.
Var pick(Graph& g, Var x, std::span<const std::size_t> index);

}  // namespace ag

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& logits);

}  // namespace fedsim
