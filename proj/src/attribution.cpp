#include "r2r/attribution.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "r2r/image_io.hpp"
#include "r2r/kernels.hpp"

namespace r2r::xai {

using nn::LayerKind;

const char* rule_name(Rule r) {
  switch (r) {
    case Rule::Epsilon: return "epsilon";
    case Rule::ZPlus: return "z-plus";
    case Rule::WinnerTakeAll: return "winner-take-all";
    case Rule::Proportional: return "proportional";
    case Rule::PassThrough: return "pass-through";
  }
  return "?";
}

RuleComposite RuleComposite::standard() {
  RuleComposite c;
  c.rules = {{LayerKind::Dense, Rule::Epsilon},       {LayerKind::Conv2d, Rule::ZPlus},
             {LayerKind::MaxPool, Rule::WinnerTakeAll}, {LayerKind::AvgPool, Rule::Proportional},
             {LayerKind::Relu, Rule::PassThrough},     {LayerKind::Softplus, Rule::PassThrough},
             {LayerKind::Flatten, Rule::PassThrough}};
  return c;
}

Rule RuleComposite::rule_for(LayerKind kind) const {
  const auto it = rules.find(kind);
  if (it == rules.end()) {
    throw UnsupportedLayerError(std::string("no LRP rule for layer kind '") +
                                nn::layer_kind_name(kind) + "'");
  }
  return it->second;
}

void RuleComposite::validate(const nn::Model& model) const {
  if (!(epsilon > 0.0f)) throw std::invalid_argument("LRP epsilon must be > 0");
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const LayerKind kind = model.layer(l).kind;
    const Rule r = rule_for(kind);
    const bool affine = kind == LayerKind::Dense || kind == LayerKind::Conv2d;
    const bool ok = affine ? (r == Rule::Epsilon || r == Rule::ZPlus)
                 : kind == LayerKind::MaxPool ? (r == Rule::WinnerTakeAll || r == Rule::Proportional)
                 : kind == LayerKind::AvgPool ? (r == Rule::Proportional)
                                              : (r == Rule::PassThrough);
    if (!ok) {
      throw UnsupportedLayerError(std::string("rule '") + rule_name(r) +
                                  "' cannot be applied to layer " + model.layer(l).name);
    }
  }
}

namespace {

Tensor with_batch(const Tensor& t) {
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return t.reshaped(std::move(s));
}

Tensor drop_batch(const Tensor& t) {
  return t.reshaped(Shape(t.shape().begin() + 1, t.shape().end()));
}

Tensor add_channel_bias(Tensor z, const Tensor& b) {
  return z + kernels::channel_broadcast(b, z.shape());
}

Tensor affine_forward(const nn::Model& m, std::size_t l, const Tensor& x, const Tensor& w) {
  const auto& d = m.layer(l);
  if (d.kind == LayerKind::Conv2d) return kernels::conv2d(x, w, {d.stride, d.pad});
  return kernels::matmul(x, w, false, true);
}

Tensor affine_transpose(const nn::Model& m, std::size_t l, const Tensor& s, const Tensor& w,
                        const Shape& in_shape) {
  const auto& d = m.layer(l);
  if (d.kind == LayerKind::Conv2d) return kernels::conv2d_input_grad(s, w, {d.stride, d.pad}, in_shape);
  return kernels::matmul(s, w, false, false);
}

Tensor map(const Tensor& t, float (*f)(float)) {
  Tensor out = t;
  for (float& v : out.vec()) v = f(v);
  return out;
}

float pos(float v) { return v > 0.0f ? v : 0.0f; }
float neg(float v) { return v < 0.0f ? v : 0.0f; }

// Relevance at the input of affine layer l.
Tensor affine_relevance(const nn::Model& m, std::size_t l, const Tensor& x, const Tensor& R,
                        Rule rule, float eps) {
  const Tensor& w = m.weight(l);
  if (rule == Rule::Epsilon) {
    const Tensor z = add_channel_bias(affine_forward(m, l, x, w), m.bias(l));
    Tensor s(z.shape());
    for (std::size_t i = 0; i < z.numel(); ++i) {
      const float zi = z[i];
      s[i] = R[i] / (zi + (zi >= 0.0f ? eps : -eps));
    }
    return x * affine_transpose(m, l, s, w, x.shape());
  }
  const Tensor wp = map(w, pos), wn = map(w, neg);
  const Tensor xp = map(x, pos), xn = map(x, neg);
  const Tensor z = affine_forward(m, l, xp, wp) + affine_forward(m, l, xn, wn);
  Tensor s(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) s[i] = z[i] > 0.0f ? R[i] / z[i] : 0.0f;
  return xp * affine_transpose(m, l, s, wp, x.shape()) + xn * affine_transpose(m, l, s, wn, x.shape());
}

Tensor pool_relevance(const nn::Model& m, std::size_t l, const Tensor& x, const Tensor& R,
                      Rule rule, float eps) {
  const auto& d = m.layer(l);
  if (d.kind == LayerKind::MaxPool && rule == Rule::WinnerTakeAll) {
    Shape out;
    const auto idx = kernels::maxpool_indices(x, d.kernel, d.stride, &out);
    return kernels::scatter_add(R, idx, x.shape());
  }
  const Tensor z = kernels::avgpool(x, d.kernel, d.stride);
  Tensor s(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    s[i] = R[i] / (z[i] + (z[i] >= 0.0f ? eps : -eps));
  }
  return x * kernels::avgpool_transpose(s, d.kernel, d.stride, x.shape());
}

void apply_mask(Tensor& R, const ChannelMask& mask) {
  const std::size_t c = R.dim(1);
  std::vector<char> keep(c, 0);
  for (auto ch : mask.channels) {
    if (ch >= c) throw std::out_of_range("target_concept channel " + std::to_string(ch) + " >= " + std::to_string(c));
    keep[ch] = 1;
  }
  const std::size_t inner = R.numel() / c;
  for (std::size_t k = 0; k < c; ++k)
    if (!keep[k]) std::fill_n(R.data() + k * inner, inner, 0.0f);
}

Tensor as_batch1(const Tensor& input) {
  Tensor x = input.rank() == 3 ? with_batch(input) : input;
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("attribution: one input sample expected");
  return x;
}

}  // namespace

BackwardResult lrp_backward(const nn::Model& model, const nn::ActivationCache& cache,
                            std::size_t start_layer, const Tensor& relevance,
                            const RuleComposite& rules, const ChannelMask* mask) {
  rules.validate(model);
  if (start_layer >= model.num_layers()) throw std::out_of_range("lrp: start layer");
  if (cache.outputs.size() != model.num_layers() || cache.input.rank() != 4 ||
      cache.input.dim(0) != 1) {
    throw ShapeError("lrp: activation cache of a single-sample forward pass required");
  }
  if (mask && mask->layer > start_layer) {
    throw std::invalid_argument("lrp: target_concept layer lies above the start layer");
  }
  Tensor R = relevance.shape() == cache.outputs[start_layer].shape() ? relevance : with_batch(relevance);
  if (R.shape() != cache.outputs[start_layer].shape()) {
    throw ShapeError("lrp: relevance " + shape_str(relevance.shape()) + " does not match layer output " +
                     shape_str(cache.outputs[start_layer].shape()));
  }

  BackwardResult out;
  out.layer_relevance.assign(model.num_layers(), Tensor{});
  for (std::size_t l = start_layer + 1; l-- > 0;) {
    if (mask && mask->layer == l) apply_mask(R, *mask);
    out.layer_relevance[l] = drop_batch(R);
    const Tensor& x = l == 0 ? cache.input : cache.outputs[l - 1];
    const LayerKind kind = model.layer(l).kind;
    const Rule rule = rules.rule_for(kind);
    switch (kind) {
      case LayerKind::Conv2d:
      case LayerKind::Dense: R = affine_relevance(model, l, x, R, rule, rules.epsilon); break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool: R = pool_relevance(model, l, x, R, rule, rules.epsilon); break;
      case LayerKind::Flatten: R = R.reshaped(x.shape()); break;
      case LayerKind::Relu:
      case LayerKind::Softplus: break;
    }
  }
  out.input_relevance = drop_batch(R);
  return out;
}

namespace {

AttributionMap attribute_impl(const nn::Model& model, const Tensor& input, std::size_t target,
                              const RuleComposite& rules, const ChannelMask* mask,
                              const nn::InferenceHook* hook) {
  const Tensor x = as_batch1(input);
  if (target >= model.spec().num_classes) throw std::out_of_range("lrp: target class");
  nn::ActivationCache cache;
  const Tensor logits = model.forward(x, &cache, hook);
  Tensor R0(logits.shape());
  R0[target] = logits[target];
  auto back = lrp_backward(model, cache, model.num_layers() - 1, R0, rules, mask);
  AttributionMap map;
  map.input_relevance = std::move(back.input_relevance);
  map.layer_relevance = std::move(back.layer_relevance);
  map.target_logit_index = target;
  map.target_logit_value = logits[target];
  return map;
}

}  // namespace

AttributionMap lrp_attribute(const nn::Model& model, const Tensor& input, std::size_t target,
                             const RuleComposite& rules, const nn::InferenceHook* hook) {
  return attribute_impl(model, input, target, rules, nullptr, hook);
}

AttributionMap crp_conditional_attribute(const nn::Model& model, const Tensor& input,
                                         std::size_t target, std::span<const ConceptId> concepts,
                                         const RuleComposite& rules) {
  if (concepts.empty()) throw std::invalid_argument("crp: no concepts given");
  ChannelMask mask;
  mask.layer = model.layer_index(concepts.front().layer);
  for (const auto& c : concepts) {
    if (c.layer != concepts.front().layer) {
      throw std::invalid_argument("crp: concepts span layers '" + concepts.front().layer +
                                  "' and '" + c.layer + "'");
    }
    const std::size_t width = model.output_shape(mask.layer)[0];
    if (c.channel >= width) {
      throw std::out_of_range("crp: channel " + std::to_string(c.channel) + " >= layer width " +
                              std::to_string(width));
    }
    mask.channels.push_back(c.channel);
  }
  return attribute_impl(model, input, target, rules, &mask, nullptr);
}

std::vector<double> channel_relevance(const AttributionMap& map, const nn::Model& model,
                                      std::size_t layer) {
  if (layer >= model.num_layers()) throw std::out_of_range("channel_relevance: layer");
  const Tensor& R = map.layer_relevance.at(layer);
  if (R.empty()) throw std::invalid_argument("channel_relevance: layer has no relevance record");
  const std::size_t c = R.dim(0);
  const std::size_t inner = R.numel() / c;
  std::vector<double> out(c, 0.0);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < inner; ++i) out[k] += R[k * inner + i];
  return out;
}

std::vector<double> channel_relevance(const nn::Model& model, const Tensor& input,
                                      std::size_t target, const std::string& layer,
                                      const RuleComposite& rules) {
  const std::size_t l = model.layer_index(layer);
  return channel_relevance(lrp_attribute(model, input, target, rules), model, l);
}

ChannelRelevanceTable channel_relevance_table(const nn::Model& model, const data::Dataset& data,
                                              std::size_t layer,
                                              std::span<const std::size_t> indices,
                                              const RuleComposite& rules) {
  ChannelRelevanceTable t;
  t.layer = layer;
  for (std::size_t i : indices) {
    const Tensor x = data.input(i);
    const std::size_t pred = nn::argmax_rows(model.forward(x)).front();
    const AttributionMap map = lrp_attribute(model, x, pred, rules);
    t.sample_indices.push_back(i);
    t.predicted.push_back(pred);
    t.relevance.push_back(channel_relevance(map, model, layer));
  }
  return t;
}

std::vector<ReferenceSample> collect_reference_samples(const nn::Model& model,
                                                       const data::Dataset& data,
                                                       const ConceptId& target_concept, std::size_t k,
                                                       const RuleComposite& rules,
                                                       const ChannelRelevanceTable* precomputed) {
  if (k > data.size()) {
    throw std::invalid_argument("reference samples: k = " + std::to_string(k) +
                                " exceeds dataset size " + std::to_string(data.size()));
  }
  const std::size_t layer = model.layer_index(target_concept.layer);
  if (target_concept.channel >= model.output_shape(layer)[0]) {
    throw std::out_of_range("reference samples: channel out of range");
  }
  ChannelRelevanceTable local;
  if (!precomputed || precomputed->layer != layer) {
    const auto all = data.all_indices();
    local = channel_relevance_table(model, data, layer, all, rules);
    precomputed = &local;
  }
  std::vector<std::size_t> order(precomputed->sample_indices.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ra = precomputed->relevance[a][target_concept.channel];
    const double rb = precomputed->relevance[b][target_concept.channel];
    if (ra != rb) return ra > rb;
    return data.samples[precomputed->sample_indices[a]].id <
           data.samples[precomputed->sample_indices[b]].id;
  });
  std::vector<ReferenceSample> out;
  const std::array<ConceptId, 1> concepts{target_concept};
  for (std::size_t r = 0; r < std::min(k, order.size()); ++r) {
    const std::size_t row = order[r];
    const std::size_t idx = precomputed->sample_indices[row];
    ReferenceSample s;
    s.id = data.samples[idx].id;
    s.index = idx;
    s.predicted = precomputed->predicted[row];
    s.relevance = precomputed->relevance[row][target_concept.channel];
    s.conditional_heatmap = spatial_map(
        crp_conditional_attribute(model, data.input(idx), s.predicted, concepts, rules)
            .input_relevance);
    out.push_back(std::move(s));
  }
  return out;
}

Tensor spatial_map(const Tensor& r) {
  if (r.rank() != 3) throw ShapeError("spatial_map: [C,H,W] relevance expected");
  const std::size_t c = r.dim(0), hw = r.dim(1) * r.dim(2);
  Tensor out({r.dim(1), r.dim(2)});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < hw; ++i) out[i] += r[k * hw + i];
  return out;
}

void write_heatmap(const std::filesystem::path& png, const Tensor& map,
                   const std::optional<std::filesystem::path>& sidecar) {
  if (map.rank() != 2) throw ShapeError("write_heatmap: [H,W] map expected");
  const float m = map.max_abs();
  io::Raster r;
  r.height = map.dim(0);
  r.width = map.dim(1);
  r.channels = 3;
  r.pixels.resize(map.numel() * 3);
  for (std::size_t i = 0; i < map.numel(); ++i) {
    const float v = m > 0.0f ? map[i] / m : 0.0f;  // [-1, 1]
    // White at zero, saturating to red (positive) or blue (negative).
    const float a = std::fabs(v);
    const auto hi = std::uint8_t{255};
    const auto lo = static_cast<std::uint8_t>(std::lround(255.0f * (1.0f - a)));
    r.pixels[3 * i + 0] = v >= 0 ? hi : lo;
    r.pixels[3 * i + 1] = lo;
    r.pixels[3 * i + 2] = v >= 0 ? lo : hi;
  }
  io::write_png(png, r);
  if (sidecar) io::write_float32(*sidecar, map);
}

}  // namespace r2r::xai
