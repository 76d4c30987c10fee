#include "r2r/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace r2r::ad {

const Tensor& Var::value() const {
  if (!tape) throw GraphError("value of an invalid Var");
  return tape->nodes_.at(id).value;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Affine: return "affine";
    case Op::MatMul: return "matmul";
    case Op::ChannelBroadcast: return "channel_broadcast";
    case Op::ChannelSum: return "channel_sum";
    case Op::Conv2d: return "conv2d";
    case Op::ConvInputGrad: return "conv2d_input_grad";
    case Op::ConvWeightGrad: return "conv2d_weight_grad";
    case Op::Relu: return "relu";
    case Op::ReluMask: return "relu_mask";
    case Op::Softplus: return "softplus";
    case Op::Sigmoid: return "sigmoid";
    case Op::Abs: return "abs";
    case Op::SignMul: return "sign_mul";
    case Op::Sqrt: return "sqrt";
    case Op::Gather: return "gather";
    case Op::Scatter: return "scatter";
    case Op::AvgPool: return "avgpool";
    case Op::AvgPoolTranspose: return "avgpool_transpose";
    case Op::Reshape: return "reshape";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::RowSum: return "row_sum";
    case Op::Sum: return "sum";
    case Op::Fill: return "fill";
    case Op::CrossEntropyFused: return "cross_entropy_fused";
  }
  return "?";
}

namespace {

template <typename F>
Tensor map1(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return out;
}

template <typename F>
Tensor map2(const Tensor& a, const Tensor& b, Op op, F f) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op_name(op)) + ": " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

float softplus_f(float v) { return kernels::softplus(v); }

float sigmoid_f(float v) {
  if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
  const float e = std::exp(v);
  return e / (1.0f + e);
}

Tensor fused_ce_value(const Tensor& z, const std::vector<std::size_t>& labels) {
  if (z.rank() != 2 || z.dim(0) != labels.size()) throw ShapeError("cross_entropy: label count");
  const Tensor ls = kernels::log_softmax_rows(z);
  double s = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= z.dim(1)) throw ShapeError("cross_entropy: label out of range");
    s -= ls[r * z.dim(1) + labels[r]];
  }
  return Tensor::scalar(static_cast<float>(s / static_cast<double>(labels.size())));
}

Tensor compute(Op op, const OpAttrs& at, std::span<const Tensor* const> in) {
  switch (op) {
    case Op::Leaf: throw GraphError("compute on leaf");
    case Op::Add: return map2(*in[0], *in[1], op, [](float a, float b) { return a + b; });
    case Op::Sub: return map2(*in[0], *in[1], op, [](float a, float b) { return a - b; });
    case Op::Mul: return map2(*in[0], *in[1], op, [](float a, float b) { return a * b; });
    case Op::Div: return map2(*in[0], *in[1], op, [](float a, float b) { return a / b; });
    case Op::Affine: {
      const float s = at.scale, c = at.shift;
      return map1(*in[0], [s, c](float v) { return s * v + c; });
    }
    case Op::MatMul: return kernels::matmul(*in[0], *in[1], at.trans_a, at.trans_b);
    case Op::ChannelBroadcast: return kernels::channel_broadcast(*in[0], at.shape);
    case Op::ChannelSum: return kernels::channel_sum(*in[0]);
    case Op::Conv2d: return kernels::conv2d(*in[0], *in[1], at.conv);
    case Op::ConvInputGrad: return kernels::conv2d_input_grad(*in[0], *in[1], at.conv, at.shape);
    case Op::ConvWeightGrad:
      return kernels::conv2d_weight_grad(*in[0], *in[1], at.conv, at.shape);
    case Op::Relu: return map1(*in[0], [](float v) { return v > 0.0f ? v : 0.0f; });
    case Op::ReluMask:
      return map2(*in[0], *in[1], op, [](float g, float x) { return x > 0.0f ? g : 0.0f; });
    case Op::Softplus: return map1(*in[0], softplus_f);
    case Op::Sigmoid: return map1(*in[0], sigmoid_f);
    case Op::Abs: return map1(*in[0], [](float v) { return std::fabs(v); });
    case Op::SignMul:
      return map2(*in[0], *in[1], op, [](float g, float x) {
        return x > 0.0f ? g : (x < 0.0f ? -g : 0.0f);
      });
    case Op::Sqrt: return map1(*in[0], [](float v) { return std::sqrt(v); });
    case Op::Gather: return kernels::gather(*in[0], *at.indices, at.shape);
    case Op::Scatter: return kernels::scatter_add(*in[0], *at.indices, at.shape);
    case Op::AvgPool: return kernels::avgpool(*in[0], at.kernel, at.stride);
    case Op::AvgPoolTranspose:
      return kernels::avgpool_transpose(*in[0], at.kernel, at.stride, at.shape);
    case Op::Reshape: return in[0]->reshaped(at.shape);
    case Op::Softmax: return kernels::softmax_rows(*in[0]);
    case Op::LogSoftmax: return kernels::log_softmax_rows(*in[0]);
    case Op::RowSum: return kernels::row_sum_broadcast(*in[0]);
    case Op::Sum: return Tensor::scalar(static_cast<float>(in[0]->sum()));
    case Op::Fill: {
      if (in[0]->numel() != 1) throw ShapeError("fill: scalar source required");
      return Tensor::full(at.shape, (*in[0])[0]);
    }
    case Op::CrossEntropyFused: return fused_ce_value(*in[0], *at.labels);
  }
  throw GraphError("unknown op");
}

}  // namespace

Var Tape::leaf(Tensor value) {
  value.require_finite("graph input");
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::push(Op op, std::initializer_list<Var> inputs, OpAttrs attrs) {
  std::array<const Tensor*, 2> vals{};
  std::size_t k = 0;
  Node n;
  n.op = op;
  for (const Var& v : inputs) {
    if (!owns(v)) throw GraphError(std::string(op_name(op)) + ": input from another record");
    vals.at(k++) = &nodes_[v.id].value;
    n.inputs.push_back(v.id);
  }
  n.value = compute(op, attrs, std::span<const Tensor* const>(vals.data(), k));
  n.attrs = std::move(attrs);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::replay() {
  for (auto& n : nodes_) {
    if (n.op == Op::Leaf) continue;
    std::array<const Tensor*, 2> vals{};
    for (std::size_t k = 0; k < n.inputs.size(); ++k) vals[k] = &nodes_[n.inputs[k]].value;
    n.value = compute(n.op, n.attrs, std::span<const Tensor* const>(vals.data(), n.inputs.size()));
  }
}

// ---- operations ----------------------------------------------------------

Var add(Var a, Var b) { return a.tape->push(Op::Add, {a, b}); }
Var sub(Var a, Var b) { return a.tape->push(Op::Sub, {a, b}); }
Var mul(Var a, Var b) { return a.tape->push(Op::Mul, {a, b}); }
Var div(Var a, Var b) { return a.tape->push(Op::Div, {a, b}); }

Var affine(Var x, float scale, float shift) {
  OpAttrs at;
  at.scale = scale;
  at.shift = shift;
  return x.tape->push(Op::Affine, {x}, std::move(at));
}

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
  OpAttrs at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return a.tape->push(Op::MatMul, {a, b}, std::move(at));
}

Var channel_broadcast(Var v, const Shape& shape) {
  OpAttrs at;
  at.shape = shape;
  return v.tape->push(Op::ChannelBroadcast, {v}, std::move(at));
}

Var channel_sum(Var x) { return x.tape->push(Op::ChannelSum, {x}); }

Var bias_add(Var x, Var b) { return add(x, channel_broadcast(b, x.shape())); }

Var conv2d(Var x, Var w, kernels::ConvGeometry g) {
  OpAttrs at;
  at.conv = g;
  return x.tape->push(Op::Conv2d, {x, w}, std::move(at));
}

namespace {

Var conv_input_grad(Var g, Var w, kernels::ConvGeometry geom, const Shape& in_shape) {
  OpAttrs at;
  at.conv = geom;
  at.shape = in_shape;
  return g.tape->push(Op::ConvInputGrad, {g, w}, std::move(at));
}

Var conv_weight_grad(Var x, Var g, kernels::ConvGeometry geom, const Shape& w_shape) {
  OpAttrs at;
  at.conv = geom;
  at.shape = w_shape;
  return x.tape->push(Op::ConvWeightGrad, {x, g}, std::move(at));
}

Var relu_mask(Var g, Var x) { return g.tape->push(Op::ReluMask, {g, x}); }
Var sign_mul(Var g, Var x) { return g.tape->push(Op::SignMul, {g, x}); }

Var gather_idx(Var x, std::shared_ptr<const std::vector<std::uint32_t>> idx, const Shape& out) {
  OpAttrs at;
  at.indices = std::move(idx);
  at.shape = out;
  return x.tape->push(Op::Gather, {x}, std::move(at));
}

Var scatter_idx(Var g, std::shared_ptr<const std::vector<std::uint32_t>> idx, const Shape& in) {
  OpAttrs at;
  at.indices = std::move(idx);
  at.shape = in;
  return g.tape->push(Op::Scatter, {g}, std::move(at));
}

Var avgpool_transpose(Var g, std::size_t kernel, std::size_t stride, const Shape& in) {
  OpAttrs at;
  at.kernel = kernel;
  at.stride = stride;
  at.shape = in;
  return g.tape->push(Op::AvgPoolTranspose, {g}, std::move(at));
}

}  // namespace

Var relu(Var x) { return x.tape->push(Op::Relu, {x}); }
Var softplus(Var x) { return x.tape->push(Op::Softplus, {x}); }
Var sigmoid(Var x) { return x.tape->push(Op::Sigmoid, {x}); }
Var abs(Var x) { return x.tape->push(Op::Abs, {x}); }
Var sqrt(Var x) { return x.tape->push(Op::Sqrt, {x}); }

Var maxpool(Var x, std::size_t kernel, std::size_t stride) {
  Shape out;
  auto idx = std::make_shared<const std::vector<std::uint32_t>>(
      kernels::maxpool_indices(x.value(), kernel, stride, &out));
  return gather_idx(x, std::move(idx), out);
}

Var gather(Var x, std::shared_ptr<const std::vector<std::uint32_t>> indices, const Shape& out) {
  return gather_idx(x, std::move(indices), out);
}

Var avgpool(Var x, std::size_t kernel, std::size_t stride) {
  OpAttrs at;
  at.kernel = kernel;
  at.stride = stride;
  return x.tape->push(Op::AvgPool, {x}, std::move(at));
}

Var reshape(Var x, const Shape& shape) {
  OpAttrs at;
  at.shape = shape;
  return x.tape->push(Op::Reshape, {x}, std::move(at));
}

Var softmax(Var x) { return x.tape->push(Op::Softmax, {x}); }
Var log_softmax(Var x) { return x.tape->push(Op::LogSoftmax, {x}); }
Var row_sum(Var x) { return x.tape->push(Op::RowSum, {x}); }
Var sum(Var x) { return x.tape->push(Op::Sum, {x}); }

Var fill(Var scalar, const Shape& shape) {
  OpAttrs at;
  at.shape = shape;
  return scalar.tape->push(Op::Fill, {scalar}, std::move(at));
}

namespace {

Tensor one_hot(const Shape& logits_shape, std::span<const std::size_t> labels) {
  if (logits_shape.size() != 2 || logits_shape[0] != labels.size()) {
    throw ShapeError("cross_entropy: expected [batch, classes] logits matching labels");
  }
  Tensor t(logits_shape);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= logits_shape[1]) throw ShapeError("cross_entropy: label out of range");
    t[r * logits_shape[1] + labels[r]] = 1.0f;
  }
  return t;
}

}  // namespace

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor oh = one_hot(logits.shape(), labels);
  Var target = logits.tape->leaf(oh);
  const float inv_b = 1.0f / static_cast<float>(labels.size());
  return scale(sum(mul(log_softmax(logits), target)), -inv_b);
}

Var cross_entropy_fused(Var logits, std::span<const std::size_t> labels) {
  OpAttrs at;
  at.labels = std::make_shared<const std::vector<std::size_t>>(labels.begin(), labels.end());
  return logits.tape->push(Op::CrossEntropyFused, {logits}, std::move(at));
}

// ---- reverse mode --------------------------------------------------------

namespace {

// Adds the vector-Jacobian products of node `id` for upstream gradient `g`
// into `grads`, only for inputs flagged in `needed`.
void backprop_node(Tape& tape, std::size_t id, Var g, const std::vector<char>& needed,
                   std::vector<Var>& grads, bool create_graph) {
  const Node& n = tape.node(id);
  const Op op = n.op;
  const OpAttrs at = n.attrs;
  const std::vector<std::size_t> ins = n.inputs;
  Var self{&tape, id};
  auto in = [&](std::size_t k) { return Var{&tape, ins[k]}; };
  auto want = [&](std::size_t k) { return k < ins.size() && needed[ins[k]] != 0; };
  auto acc = [&](std::size_t k, Var contrib) {
    Var& slot = grads[ins[k]];
    slot = slot.valid() ? add(slot, contrib) : contrib;
  };

  switch (op) {
    case Op::Leaf: return;
    case Op::Add:
      if (want(0)) acc(0, g);
      if (want(1)) acc(1, g);
      return;
    case Op::Sub:
      if (want(0)) acc(0, g);
      if (want(1)) acc(1, scale(g, -1.0f));
      return;
    case Op::Mul:
      if (want(0)) acc(0, mul(g, in(1)));
      if (want(1)) acc(1, mul(g, in(0)));
      return;
    case Op::Div:
      if (want(0)) acc(0, div(g, in(1)));
      if (want(1)) acc(1, scale(div(mul(g, self), in(1)), -1.0f));
      return;
    case Op::Affine:
      if (want(0)) acc(0, scale(g, at.scale));
      return;
    case Op::MatMul: {
      const bool ta = at.trans_a, tb = at.trans_b;
      if (want(0)) acc(0, ta ? matmul(in(1), g, tb, true) : matmul(g, in(1), false, !tb));
      if (want(1)) acc(1, tb ? matmul(g, in(0), true, ta) : matmul(in(0), g, !ta, false));
      return;
    }
    case Op::ChannelBroadcast:
      if (want(0)) acc(0, channel_sum(g));
      return;
    case Op::ChannelSum:
      if (want(0)) acc(0, channel_broadcast(g, in(0).shape()));
      return;
    case Op::Conv2d:
      if (want(0)) acc(0, conv_input_grad(g, in(1), at.conv, in(0).shape()));
      if (want(1)) acc(1, conv_weight_grad(in(0), g, at.conv, in(1).shape()));
      return;
    case Op::ConvInputGrad:
      if (want(0)) acc(0, conv2d(g, in(1), at.conv));
      if (want(1)) acc(1, conv_weight_grad(g, in(0), at.conv, in(1).shape()));
      return;
    case Op::ConvWeightGrad:
      if (want(0)) acc(0, conv_input_grad(in(1), g, at.conv, in(0).shape()));
      if (want(1)) acc(1, conv2d(in(0), g, at.conv));
      return;
    case Op::Relu:
      if (want(0)) acc(0, relu_mask(g, in(0)));
      return;
    case Op::ReluMask:
      if (want(0)) acc(0, relu_mask(g, in(1)));
      return;
    case Op::Softplus:
      if (want(0)) acc(0, mul(g, sigmoid(in(0))));
      return;
    case Op::Sigmoid:
      if (want(0)) acc(0, mul(g, mul(self, affine(self, -1.0f, 1.0f))));
      return;
    case Op::Abs:
      if (want(0)) acc(0, sign_mul(g, in(0)));
      return;
    case Op::SignMul:
      if (want(0)) acc(0, sign_mul(g, in(1)));
      return;
    case Op::Sqrt:
      if (want(0)) acc(0, div(scale(g, 0.5f), self));
      return;
    case Op::Gather:
      if (want(0)) acc(0, scatter_idx(g, at.indices, in(0).shape()));
      return;
    case Op::Scatter:
      if (want(0)) acc(0, gather_idx(g, at.indices, in(0).shape()));
      return;
    case Op::AvgPool:
      if (want(0)) acc(0, avgpool_transpose(g, at.kernel, at.stride, in(0).shape()));
      return;
    case Op::AvgPoolTranspose:
      if (want(0)) acc(0, avgpool(g, at.kernel, at.stride));
      return;
    case Op::Reshape:
      if (want(0)) acc(0, reshape(g, in(0).shape()));
      return;
    case Op::Softmax:
      if (want(0)) acc(0, mul(self, sub(g, row_sum(mul(g, self)))));
      return;
    case Op::LogSoftmax:
      if (want(0)) acc(0, sub(g, mul(softmax(in(0)), row_sum(g))));
      return;
    case Op::RowSum:
      if (want(0)) acc(0, row_sum(g));
      return;
    case Op::Sum:
      if (want(0)) acc(0, fill(g, in(0).shape()));
      return;
    case Op::Fill:
      if (want(0)) acc(0, sum(g));
      return;
    case Op::CrossEntropyFused: {
      if (create_graph) {
        throw UnsupportedSecondOrderError(
            "cross_entropy_fused has no differentiable backward; use cross_entropy");
      }
      if (!want(0)) return;
      const Tensor& z = in(0).value();
      Tensor local = kernels::softmax_rows(z);
      const auto& labels = *at.labels;
      const float inv_b = 1.0f / static_cast<float>(labels.size());
      for (std::size_t r = 0; r < labels.size(); ++r) local[r * z.dim(1) + labels[r]] -= 1.0f;
      for (auto& v : local.vec()) v *= inv_b;
      acc(0, mul(fill(g, z.shape()), tape.leaf(std::move(local))));
      return;
    }
  }
}

}  // namespace

std::vector<Var> Tape::gradient(Var output, std::span<const Var> wrt, bool create_graph) {
  if (!owns(output)) throw GraphError("gradient: output node not in this record");
  if (nodes_[output.id].value.numel() != 1) {
    throw GraphError("gradient: output must be scalar, got " +
                     shape_str(nodes_[output.id].value.shape()));
  }
  for (const Var& w : wrt) {
    if (!owns(w)) throw GraphError("gradient: node not in this record");
  }
  const std::size_t last = output.id;
  std::vector<char> needed(last + 1, 0);
  for (const Var& w : wrt) {
    if (w.id <= last) needed[w.id] = 1;
  }
  for (std::size_t i = 0; i <= last; ++i) {
    if (needed[i]) continue;
    for (std::size_t j : nodes_[i].inputs) {
      if (needed[j]) {
        needed[i] = 1;
        break;
      }
    }
  }

  std::vector<Var> grads(last + 1);
  if (needed[last]) {
    grads[last] = leaf(Tensor::full(nodes_[last].value.shape(), 1.0f));
  }
  for (std::size_t i = last + 1; i-- > 0;) {
    if (!needed[i] || !grads[i].valid() || nodes_[i].op == Op::Leaf) continue;
    backprop_node(*this, i, grads[i], needed, grads, create_graph);
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id <= last && grads[w.id].valid()) {
      out.push_back(grads[w.id]);
    } else {
      out.push_back(leaf(Tensor::zeros(nodes_[w.id].value.shape())));
    }
  }
  return out;
}

// ---- graph-level entry points --------------------------------------------

Evaluation evaluate(const GraphDescription& graph, std::span<const Tensor> inputs) {
  if (inputs.size() != graph.input_shapes.size()) {
    throw ShapeError("evaluate: expected " + std::to_string(graph.input_shapes.size()) +
                     " inputs, got " + std::to_string(inputs.size()));
  }
  Evaluation ev;
  ev.record = std::make_unique<Tape>();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape() != graph.input_shapes[i]) {
      throw ShapeError("evaluate: input " + std::to_string(i) + " has shape " +
                       shape_str(inputs[i].shape()) + ", graph declares " +
                       shape_str(graph.input_shapes[i]));
    }
    ev.inputs.push_back(ev.record->leaf(inputs[i]));
  }
  ev.output_vars = graph.build(*ev.record, ev.inputs);
  for (const Var& v : ev.output_vars) ev.outputs.push_back(v.value());
  return ev;
}

std::vector<Tensor> gradient(Tape& record, Var scalar_output, std::span<const Var> wrt) {
  std::vector<Tensor> out;
  for (const Var& g : record.gradient(scalar_output, wrt, false)) out.push_back(g.value());
  return out;
}

std::vector<Tensor> gradient_of_penalty(Tape& record, Var inner_output, Var input,
                                        const InputGradientPenalty& penalty,
                                        std::span<const Var> wrt) {
  const std::array<Var, 1> x{input};
  Var gx = record.gradient(inner_output, x, true).front();
  Var p = penalty(gx);
  if (!record.owns(p) || p.value().numel() != 1) {
    throw GraphError("gradient_of_penalty: penalty must be a scalar node of the record");
  }
  return gradient(record, p, wrt);
}

}  // namespace r2r::ad
