#include "r2r/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "r2r/kernels.hpp"
#include "r2r/rng.hpp"

namespace r2r::nn {

namespace {

constexpr std::pair<LayerKind, const char*> kKindNames[] = {
    {LayerKind::Conv2d, "conv"},       {LayerKind::Dense, "dense"},
    {LayerKind::Relu, "relu"},         {LayerKind::Softplus, "softplus"},
    {LayerKind::MaxPool, "maxpool"},   {LayerKind::AvgPool, "avgpool"},
    {LayerKind::Flatten, "flatten"},
};

// Per-sample output shapes of every layer; throws on an incompatible chain.
std::vector<Shape> infer_shapes(const ModelSpec& spec) {
  if (spec.in_channels == 0 || spec.in_height == 0 || spec.in_width == 0) {
    throw InvalidSpecError("model spec: input shape must be positive");
  }
  if (spec.num_classes == 0) throw InvalidSpecError("model spec: class count must be positive");
  if (spec.layers.empty()) throw InvalidSpecError("model spec: no layers");

  std::vector<Shape> shapes;
  Shape cur{spec.in_channels, spec.in_height, spec.in_width};
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerDesc& d = spec.layers[l];
    const std::string where = "layer " + std::to_string(l) + " (" + d.name + ")";
    switch (d.kind) {
      case LayerKind::Conv2d: {
        if (cur.size() != 3) throw InvalidSpecError(where + ": conv after flatten");
        if (d.units == 0 || d.kernel == 0 || d.stride == 0) {
          throw InvalidSpecError(where + ": conv needs channels, kernel and stride > 0");
        }
        if (cur[1] + 2 * d.pad < d.kernel || cur[2] + 2 * d.pad < d.kernel) {
          throw InvalidSpecError(where + ": kernel larger than padded input");
        }
        cur = {d.units, kernels::conv_out_size(cur[1], d.kernel, d.stride, d.pad),
               kernels::conv_out_size(cur[2], d.kernel, d.stride, d.pad)};
        break;
      }
      case LayerKind::MaxPool:
      case LayerKind::AvgPool: {
        if (cur.size() != 3) throw InvalidSpecError(where + ": pooling after flatten");
        if (d.kernel == 0 || d.stride == 0) throw InvalidSpecError(where + ": bad pool geometry");
        if (cur[1] < d.kernel || cur[2] < d.kernel) {
          throw InvalidSpecError(where + ": pool kernel larger than input");
        }
        cur = {cur[0], kernels::pool_out_size(cur[1], d.kernel, d.stride),
               kernels::pool_out_size(cur[2], d.kernel, d.stride)};
        break;
      }
      case LayerKind::Flatten:
        cur = {shape_numel(cur)};
        break;
      case LayerKind::Dense:
        if (cur.size() != 1) throw InvalidSpecError(where + ": dense needs a flat input");
        if (d.units == 0) throw InvalidSpecError(where + ": dense width must be positive");
        cur = {d.units};
        break;
      case LayerKind::Relu:
      case LayerKind::Softplus:
        break;
    }
    shapes.push_back(cur);
  }
  const LayerDesc& last = spec.layers.back();
  if (last.kind != LayerKind::Dense) throw InvalidSpecError("model spec: last layer must be dense");
  if (last.units != spec.num_classes) {
    throw InvalidSpecError("model spec: last dense width " + std::to_string(last.units) +
                           " != class count " + std::to_string(spec.num_classes));
  }
  return shapes;
}

void assign_names(ModelSpec& spec) {
  std::map<LayerKind, std::size_t> counters;
  for (auto& d : spec.layers) {
    const std::size_t k = ++counters[d.kind];
    if (d.name.empty()) d.name = std::string(layer_kind_name(d.kind)) + std::to_string(k);
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    for (std::size_t j = i + 1; j < spec.layers.size(); ++j)
      if (spec.layers[i].name == spec.layers[j].name) {
        throw InvalidSpecError("model spec: duplicate layer name '" + spec.layers[i].name + "'");
      }
}

Shape weight_shape(const LayerDesc& d, const Shape& in) {
  if (d.kind == LayerKind::Conv2d) return {d.units, in[0], d.kernel, d.kernel};
  return {d.units, in[0]};
}

Tensor add_bias(Tensor x, const Tensor& b) {
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.numel() / (n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      float* p = x.data() + (i * c + k) * inner;
      for (std::size_t j = 0; j < inner; ++j) p[j] = p[j] + b[k];
    }
  return x;
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (name == n) return k;
  throw InvalidSpecError("unknown layer kind '" + std::string(name) + "'");
}

LayerDesc LayerDesc::conv(std::size_t out_channels, std::size_t kernel, std::size_t stride,
                          std::size_t pad) {
  return LayerDesc{LayerKind::Conv2d, out_channels, kernel, stride, pad, {}};
}
LayerDesc LayerDesc::dense(std::size_t width) {
  return LayerDesc{LayerKind::Dense, width, 0, 1, 0, {}};
}
LayerDesc LayerDesc::relu() { return LayerDesc{LayerKind::Relu, 0, 0, 1, 0, {}}; }
LayerDesc LayerDesc::softplus() { return LayerDesc{LayerKind::Softplus, 0, 0, 1, 0, {}}; }
LayerDesc LayerDesc::maxpool(std::size_t kernel, std::size_t stride) {
  return LayerDesc{LayerKind::MaxPool, 0, kernel, stride, 0, {}};
}
LayerDesc LayerDesc::avgpool(std::size_t kernel, std::size_t stride) {
  return LayerDesc{LayerKind::AvgPool, 0, kernel, stride, 0, {}};
}
LayerDesc LayerDesc::flatten() { return LayerDesc{LayerKind::Flatten, 0, 0, 1, 0, {}}; }

ModelSpec mini_cnn(std::size_t channels, std::size_t side, std::size_t classes,
                   LayerKind activation) {
  if (activation != LayerKind::Relu && activation != LayerKind::Softplus) {
    throw InvalidSpecError("mini_cnn: activation must be relu or softplus");
  }
  auto act = [&] { return LayerDesc{activation, 0, 0, 1, 0, {}}; };
  ModelSpec s;
  s.in_channels = channels;
  s.in_height = side;
  s.in_width = side;
  s.num_classes = classes;
  s.layers = {LayerDesc::conv(16, 3, 1, 1), act(), LayerDesc::maxpool(2, 2),
              LayerDesc::conv(32, 3, 1, 1), act(), LayerDesc::maxpool(2, 2),
              LayerDesc::flatten(),         LayerDesc::dense(64), act(),
              LayerDesc::dense(classes)};
  return s;
}

nlohmann::json spec_to_json(const ModelSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& d : spec.layers) {
    layers.push_back({{"name", d.name},
                      {"kind", layer_kind_name(d.kind)},
                      {"units", d.units},
                      {"kernel", d.kernel},
                      {"stride", d.stride},
                      {"pad", d.pad}});
  }
  return {{"input", {spec.in_channels, spec.in_height, spec.in_width}},
          {"num_classes", spec.num_classes},
          {"layers", layers}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  try {
    ModelSpec s;
    const auto& in = j.at("input");
    s.in_channels = in.at(0).get<std::size_t>();
    s.in_height = in.at(1).get<std::size_t>();
    s.in_width = in.at(2).get<std::size_t>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    for (const auto& l : j.at("layers")) {
      LayerDesc d;
      d.kind = parse_layer_kind(l.at("kind").get<std::string>());
      d.name = l.value("name", std::string{});
      d.units = l.value("units", std::size_t{0});
      d.kernel = l.value("kernel", std::size_t{0});
      d.stride = l.value("stride", std::size_t{1});
      d.pad = l.value("pad", std::size_t{0});
      s.layers.push_back(d);
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidSpecError(std::string("model spec json: ") + e.what());
  }
}

// ---- Model -----------------------------------------------------------------

Model::Model(ModelSpec spec, std::vector<Parameter> params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  assign_names(spec_);
  shapes_ = infer_shapes(spec_);
  weight_idx_.assign(spec_.layers.size(), -1);
  bias_idx_.assign(spec_.layers.size(), -1);

  std::size_t next = 0;
  Shape in = input_shape();
  for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
    const LayerDesc& d = spec_.layers[l];
    if (d.has_params()) {
      const Shape ws = weight_shape(d, in);
      const Shape bs{d.units};
      if (next + 2 > params_.size()) {
        throw InvalidSpecError("model: missing parameters for layer " + d.name);
      }
      const Parameter& w = params_[next];
      const Parameter& b = params_[next + 1];
      if (w.layer != l || b.layer != l || w.value.shape() != ws || b.value.shape() != bs) {
        throw InvalidSpecError("model: parameter shapes do not match layer " + d.name +
                               " (expected weight " + shape_str(ws) + ", bias " +
                               shape_str(bs) + ")");
      }
      weight_idx_[l] = static_cast<int>(next);
      bias_idx_[l] = static_cast<int>(next + 1);
      next += 2;
    }
    in = shapes_[l];
  }
  if (next != params_.size()) throw InvalidSpecError("model: unexpected extra parameters");
}

std::size_t Model::layer_index(std::string_view name) const {
  for (std::size_t l = 0; l < spec_.layers.size(); ++l)
    if (spec_.layers[l].name == name) return l;
  throw std::out_of_range("unknown layer '" + std::string(name) + "'");
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

const Tensor& Model::weight(std::size_t layer) const {
  if (layer >= weight_idx_.size() || weight_idx_[layer] < 0) {
    throw std::out_of_range("layer " + std::to_string(layer) + " has no weight");
  }
  return params_[static_cast<std::size_t>(weight_idx_[layer])].value;
}

const Tensor& Model::bias(std::size_t layer) const {
  if (layer >= bias_idx_.size() || bias_idx_[layer] < 0) {
    throw std::out_of_range("layer " + std::to_string(layer) + " has no bias");
  }
  return params_[static_cast<std::size_t>(bias_idx_[layer])].value;
}

std::vector<std::size_t> Model::last_dense_layers() const {
  std::size_t start = 0;
  for (std::size_t l = 0; l < spec_.layers.size(); ++l)
    if (spec_.layers[l].kind == LayerKind::Flatten) start = l + 1;
  std::vector<std::size_t> out;
  for (std::size_t l = start; l < spec_.layers.size(); ++l)
    if (spec_.layers[l].kind == LayerKind::Dense) out.push_back(l);
  return out;
}

std::vector<std::size_t> Model::conv_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < spec_.layers.size(); ++l)
    if (spec_.layers[l].kind == LayerKind::Conv2d) out.push_back(l);
  return out;
}

void Model::check_input(const Shape& s) const {
  const Shape want = input_shape();
  if (s.size() != 4 || s[0] == 0 || !std::equal(want.begin(), want.end(), s.begin() + 1)) {
    throw ShapeError("model input: expected [N," + std::to_string(want[0]) + "," +
                     std::to_string(want[1]) + "," + std::to_string(want[2]) + "], got " +
                     shape_str(s));
  }
}

namespace {

Tensor apply_layer(const Model& m, std::size_t l, const Tensor& x) {
  const LayerDesc& d = m.layer(l);
  switch (d.kind) {
    case LayerKind::Conv2d:
      return add_bias(kernels::conv2d(x, m.weight(l), {d.stride, d.pad}), m.bias(l));
    case LayerKind::Dense:
      return add_bias(kernels::matmul(x, m.weight(l), false, true), m.bias(l));
    case LayerKind::Relu: {
      Tensor y = x;
      for (float& v : y.vec()) v = v > 0.0f ? v : 0.0f;
      return y;
    }
    case LayerKind::Softplus: {
      Tensor y = x;
      for (float& v : y.vec()) v = kernels::softplus(v);
      return y;
    }
    case LayerKind::MaxPool: {
      Shape out;
      const auto idx = kernels::maxpool_indices(x, d.kernel, d.stride, &out);
      return kernels::gather(x, idx, out);
    }
    case LayerKind::AvgPool: return kernels::avgpool(x, d.kernel, d.stride);
    case LayerKind::Flatten: return x.reshaped({x.dim(0), x.numel() / x.dim(0)});
  }
  throw InvalidSpecError("unknown layer kind");
}

}  // namespace

Tensor Model::forward(const Tensor& batch, ActivationCache* cache,
                      const InferenceHook* hook) const {
  check_input(batch.shape());
  batch.require_finite("model input");
  if (hook && hook->layer >= num_layers()) throw std::out_of_range("inference hook layer");
  if (cache) {
    cache->input = batch;
    cache->outputs.clear();
  }
  Tensor cur = batch;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    cur = apply_layer(*this, l, cur);
    if (hook && hook->layer == l && hook->apply) hook->apply(cur);
    if (cache) cache->outputs.push_back(cur);
  }
  return cur;
}

Tensor Model::forward_from(std::size_t from, const Tensor& activation) const {
  if (from >= num_layers()) throw std::out_of_range("forward_from: layer index");
  const Shape& want = shapes_[from];
  if (activation.rank() != want.size() + 1 ||
      !std::equal(want.begin(), want.end(), activation.shape().begin() + 1)) {
    throw ShapeError("forward_from: activation shape " + shape_str(activation.shape()) +
                     " does not match layer output " + shape_str(want));
  }
  Tensor cur = activation;
  for (std::size_t l = from + 1; l < num_layers(); ++l) cur = apply_layer(*this, l, cur);
  return cur;
}

std::vector<ad::Var> Model::forward(ad::Tape& tape, ad::Var x, std::span<const ad::Var> params,
                                    const TapeHook& hook) const {
  check_input(x.shape());
  if (!tape.owns(x)) throw ad::GraphError("model forward: input not in this record");
  if (params.size() != params_.size()) {
    throw ad::GraphError("model forward: expected " + std::to_string(params_.size()) +
                         " parameter nodes, got " + std::to_string(params.size()));
  }
  std::vector<ad::Var> outs;
  ad::Var cur = x;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const LayerDesc& d = spec_.layers[l];
    switch (d.kind) {
      case LayerKind::Conv2d: {
        const auto w = params[static_cast<std::size_t>(weight_idx_[l])];
        const auto b = params[static_cast<std::size_t>(bias_idx_[l])];
        cur = ad::bias_add(ad::conv2d(cur, w, {d.stride, d.pad}), b);
        break;
      }
      case LayerKind::Dense: {
        const auto w = params[static_cast<std::size_t>(weight_idx_[l])];
        const auto b = params[static_cast<std::size_t>(bias_idx_[l])];
        cur = ad::bias_add(ad::matmul(cur, w, false, true), b);
        break;
      }
      case LayerKind::Relu: cur = ad::relu(cur); break;
      case LayerKind::Softplus: cur = ad::softplus(cur); break;
      case LayerKind::MaxPool: cur = ad::maxpool(cur, d.kernel, d.stride); break;
      case LayerKind::AvgPool: cur = ad::avgpool(cur, d.kernel, d.stride); break;
      case LayerKind::Flatten: {
        const std::size_t n = cur.shape()[0];
        cur = ad::reshape(cur, {n, shape_numel(cur.shape()) / n});
        break;
      }
    }
    if (hook) cur = hook(l, cur);
    outs.push_back(cur);
  }
  return outs;
}

Model build_model(ModelSpec spec, std::uint64_t seed) {
  assign_names(spec);
  const std::vector<Shape> shapes = infer_shapes(spec);
  std::vector<Parameter> params;
  Shape in{spec.in_channels, spec.in_height, spec.in_width};
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerDesc& d = spec.layers[l];
    if (d.has_params()) {
      const Shape ws = weight_shape(d, in);
      const std::size_t fan_in = shape_numel(ws) / ws[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      Rng rng(derive_seed(seed, l));
      Tensor w(ws);
      for (float& v : w.vec()) v = static_cast<float>(uniform(rng, -bound, bound));
      params.push_back({d.name + ".weight", l, std::move(w)});
      params.push_back({d.name + ".bias", l, Tensor::zeros({d.units})});
    }
    in = shapes[l];
  }
  return Model(std::move(spec), std::move(params));
}

Tensor predict(const Model& model, const Tensor& batch, ActivationCache* cache,
               const InferenceHook* hook) {
  return model.forward(batch, cache, hook);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: rank-2 logits required");
  std::vector<std::size_t> out(logits.dim(0));
  const std::size_t c = logits.dim(1);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const float* row = logits.data() + r * c;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

std::vector<std::size_t> predict_labels(const Model& model, const data::Dataset& data,
                                        const InferenceHook* hook, std::size_t batch_size) {
  std::vector<std::size_t> out;
  out.reserve(data.size());
  const auto all = data.all_indices();
  for (std::size_t s = 0; s < all.size(); s += batch_size) {
    const std::size_t e = std::min(all.size(), s + batch_size);
    const std::span<const std::size_t> idx(all.data() + s, e - s);
    const auto labels = argmax_rows(model.forward(data.batch(idx), nullptr, hook));
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

}  // namespace r2r::nn
