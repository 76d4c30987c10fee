#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "r2r/kernels.hpp"
#include "r2r/tensor.hpp"

// Tape-based reverse-mode differentiation over tensors.
//
// Every backward rule is expressed with operations that are themselves
// recorded on the tape, so a gradient computed with `create_graph` can be
// differentiated again. That is what lets a penalty on an input gradient
// send its own gradient back into the parameters.
namespace r2r::ad {

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Affine,  // scale * x + shift
  MatMul,
  ChannelBroadcast,
  ChannelSum,
  Conv2d,
  ConvInputGrad,
  ConvWeightGrad,
  Relu,
  ReluMask,  // g * [x > 0]; x is not differentiated
  Softplus,
  Sigmoid,
  Abs,
  SignMul,  // g * sign(x); x is not differentiated
  Sqrt,
  Gather,
  Scatter,
  AvgPool,
  AvgPoolTranspose,
  Reshape,
  Softmax,
  LogSoftmax,
  RowSum,
  Sum,
  Fill,
  CrossEntropyFused,  // first-order only
};

const char* op_name(Op op);

class UnsupportedSecondOrderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

struct OpAttrs {
  float scale = 1.0f;
  float shift = 0.0f;
  bool trans_a = false;
  bool trans_b = false;
  kernels::ConvGeometry conv{};
  std::size_t kernel = 0;
  std::size_t stride = 0;
  Shape shape;
  std::shared_ptr<const std::vector<std::uint32_t>> indices;
  std::shared_ptr<const std::vector<std::size_t>> labels;
};

struct Node {
  Op op = Op::Leaf;
  std::vector<std::size_t> inputs;
  OpAttrs attrs;
  Tensor value;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf holding a copy of `value`. Non-finite values are rejected.
  Var leaf(Tensor value);
  Var push(Op op, std::initializer_list<Var> inputs, OpAttrs attrs = {});

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  bool owns(Var v) const { return v.tape == this && v.id < nodes_.size(); }

  // Reverse-mode gradient of a scalar node with respect to `wrt`. Nodes not
  // reachable from the output get a zero gradient. With `create_graph` the
  // result is itself differentiable.
  std::vector<Var> gradient(Var output, std::span<const Var> wrt, bool create_graph = false);

  // Recomputes every non-leaf node from its inputs, in recorded order.
  void replay();

 private:
  friend struct Var;
  std::vector<Node> nodes_;
};

// ---- operations ----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var affine(Var x, float scale, float shift);
inline Var scale(Var x, float s) { return affine(x, s, 0.0f); }
Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
Var channel_broadcast(Var v, const Shape& shape);
Var channel_sum(Var x);
// x + b broadcast over axis 1.
Var bias_add(Var x, Var b);
Var conv2d(Var x, Var w, kernels::ConvGeometry g);
Var relu(Var x);
Var softplus(Var x);
Var sigmoid(Var x);
Var abs(Var x);
Var sqrt(Var x);
Var maxpool(Var x, std::size_t kernel, std::size_t stride);
// out[i] = x[indices[i]] over flat positions.
Var gather(Var x, std::shared_ptr<const std::vector<std::uint32_t>> indices, const Shape& out);
Var avgpool(Var x, std::size_t kernel, std::size_t stride);
Var reshape(Var x, const Shape& shape);
Var softmax(Var x);
Var log_softmax(Var x);
Var row_sum(Var x);
Var sum(Var x);
Var fill(Var scalar, const Shape& shape);

inline Var dot(Var a, Var b) { return sum(mul(a, b)); }
inline Var l2_norm(Var x) { return sqrt(sum(mul(x, x))); }

// Mean softmax cross-entropy over the batch, built from differentiable pieces.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);
// Same value with a fused first-order backward; cheaper for plain training.
Var cross_entropy_fused(Var logits, std::span<const std::size_t> labels);

// ---- graph-level entry points --------------------------------------------

struct GraphDescription {
  std::vector<Shape> input_shapes;
  std::function<std::vector<Var>(Tape&, std::span<const Var>)> build;
};

struct Evaluation {
  std::vector<Tensor> outputs;
  std::vector<Var> inputs;
  std::vector<Var> output_vars;
  std::unique_ptr<Tape> record;
};

// Runs the graph on the given inputs and keeps the full record.
Evaluation evaluate(const GraphDescription& graph, std::span<const Tensor> inputs);

std::vector<Tensor> gradient(Tape& record, Var scalar_output, std::span<const Var> wrt);

// Gradient w.r.t. `wrt` of penalty(d inner_output / d input).
using InputGradientPenalty = std::function<Var(Var input_gradient)>;
std::vector<Tensor> gradient_of_penalty(Tape& record, Var inner_output, Var input,
                                        const InputGradientPenalty& penalty,
                                        std::span<const Var> wrt);

}  // namespace r2r::ad
