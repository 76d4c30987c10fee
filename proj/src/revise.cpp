#include "r2r/revise.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "r2r/kernels.hpp"

namespace r2r::revise {

using nn::LayerKind;

const char* method_name(Method m) {
  switch (m) {
    case Method::Vanilla: return "vanilla";
    case Method::Rrr: return "rrr";
    case Method::RrrCosine: return "rrr-cosine";
    case Method::Cdep: return "cdep";
    case Method::AClarc: return "aclarc";
    case Method::PClarc: return "pclarc";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::Vanilla, Method::Rrr, Method::RrrCosine, Method::Cdep, Method::AClarc, Method::PClarc})
    if (name == method_name(m)) return m;
  throw CorrectionError("unknown correction method '" + std::string(name) +
                        "' (vanilla, rrr, rrr-cosine, cdep, aclarc, pclarc)");
}

bool uses_masks(Method m) { return m == Method::Rrr || m == Method::RrrCosine || m == Method::Cdep; }
bool uses_cav(Method m) { return m == Method::AClarc || m == Method::PClarc; }

namespace {

// [1, C, H, W] replica of an [H, W] mask.
Tensor expand_mask(const Tensor& mask, const Shape& input_shape) {
  const std::size_t c = input_shape[1], hw = input_shape[2] * input_shape[3];
  if (mask.numel() != hw) {
    throw ShapeError("mask " + shape_str(mask.shape()) + " does not match input " + shape_str(input_shape));
  }
  Tensor out(input_shape);
  for (std::size_t k = 0; k < c; ++k) std::copy(mask.vec().begin(), mask.vec().end(), out.data() + k * hw);
  return out;
}

struct Slots {
  std::size_t weight = 0;
  std::size_t bias = 0;
};

std::vector<Slots> param_slots(const nn::Model& model) {
  std::vector<Slots> s(model.num_layers());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& p = model.params()[i];
    const bool is_bias = p.name.size() >= 5 && p.name.compare(p.name.size() - 5, 5, ".bias") == 0;
    (is_bias ? s[p.layer].bias : s[p.layer].weight) = i;
  }
  return s;
}

// Tiny offset that leaves any non-zero norm unchanged in float32 while
// turning 0/0 into 1/2.
constexpr float kShareGuard = 1e-30f;

}  // namespace

std::optional<ad::Var> rrr_loss(ad::Tape& tape, const nn::Model& model,
                                std::span<const ad::Var> params, ad::Var x, std::size_t label,
                                const Tensor& mask, RrrVariant variant) {
  const double mask_norm = std::sqrt(static_cast<double>((mask * mask).sum()));
  if (mask_norm == 0.0) return std::nullopt;
  const ad::Var m = tape.leaf(expand_mask(mask, x.shape()));
  const ad::Var logits = model.forward(tape, x, params).back();
  const ad::Var xs[] = {x};

  if (variant == RrrVariant::Original) {
    const std::size_t labels[] = {label};
    const ad::Var ce = ad::cross_entropy(logits, labels);
    const ad::Var g = tape.gradient(ce, xs, true)[0];
    const ad::Var gm = ad::mul(g, m);
    return ad::sum(ad::mul(gm, gm));
  }
  const std::size_t p = nn::argmax_rows(logits.value())[0];
  Tensor onehot(logits.shape());
  onehot[p] = 1.0f;
  const ad::Var fp = ad::sum(ad::mul(logits, tape.leaf(onehot)));
  const ad::Var g = tape.gradient(fp, xs, true)[0];
  const ad::Var num = ad::sum(ad::mul(ad::abs(g), m));
  const ad::Var gnorm = ad::sqrt(ad::affine(ad::sum(ad::mul(g, g)), 1.0f, kShareGuard));
  return ad::scale(ad::div(num, gnorm), static_cast<float>(1.0 / mask_norm));
}

CdStreams cd_forward(ad::Tape& tape, const nn::Model& model, std::span<const ad::Var> params,
                     ad::Var x, const Tensor& mask) {
  if (x.shape().size() != 4 || x.shape()[0] != 1) throw ShapeError("cd: single-sample [1, C, H, W] input required");
  if (params.size() != model.params().size()) throw ad::GraphError("cd: parameter count mismatch");
  const auto slots = param_slots(model);
  const ad::Var m = tape.leaf(expand_mask(mask, x.shape()));
  const ad::Var one_minus = tape.leaf(expand_mask(Tensor(mask.shape(), 1.0f) - mask, x.shape()));
  ad::Var beta = ad::mul(x, m);
  ad::Var gamma = ad::mul(x, one_minus);

  CdStreams out;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const nn::LayerDesc& d = model.layer(l);
    switch (d.kind) {
      case LayerKind::Conv2d:
      case LayerKind::Dense: {
        const ad::Var w = params[slots[l].weight];
        const ad::Var b = params[slots[l].bias];
        // Bias split by the L1 share of each incoming stream.
        const ad::Var nb = ad::sum(ad::abs(beta));
        const ad::Var ng = ad::sum(ad::abs(gamma));
        const ad::Var share =
            ad::div(ad::affine(nb, 1.0f, kShareGuard), ad::affine(ad::add(nb, ng), 1.0f, 2 * kShareGuard));
        const ad::Var b_rel = ad::mul(b, ad::fill(share, b.shape()));
        const ad::Var b_irr = ad::sub(b, b_rel);
        auto lin = [&](ad::Var v) {
          return d.kind == LayerKind::Conv2d ? ad::conv2d(v, w, {d.stride, d.pad}) : ad::matmul(v, w, false, true);
        };
        beta = ad::bias_add(lin(beta), b_rel);
        gamma = ad::bias_add(lin(gamma), b_irr);
        break;
      }
      case LayerKind::Relu:
      case LayerKind::Softplus: {
        auto act = [&](ad::Var v) { return d.kind == LayerKind::Relu ? ad::relu(v) : ad::softplus(v); };
        const ad::Var g2 = act(gamma);
        beta = ad::sub(act(ad::add(beta, gamma)), g2);
        gamma = g2;
        break;
      }
      case LayerKind::MaxPool: {
        // Both streams follow the argmax of the full activation.
        const Tensor full = beta.value() + gamma.value();
        Shape pooled;
        auto idx = std::make_shared<const std::vector<std::uint32_t>>(
            kernels::maxpool_indices(full, d.kernel, d.stride, &pooled));
        beta = ad::gather(beta, idx, pooled);
        gamma = ad::gather(gamma, idx, pooled);
        break;
      }
      case LayerKind::AvgPool:
        beta = ad::avgpool(beta, d.kernel, d.stride);
        gamma = ad::avgpool(gamma, d.kernel, d.stride);
        break;
      case LayerKind::Flatten: {
        const Shape flat{1, shape_numel(beta.shape())};
        beta = ad::reshape(beta, flat);
        gamma = ad::reshape(gamma, flat);
        break;
      }
    }
    out.relevant.push_back(beta);
    out.irrelevant.push_back(gamma);
  }
  return out;
}

CdDecomposition cd_decompose(const nn::Model& model, const Tensor& input, const Tensor& mask) {
  for (float v : mask.vec())
    if (v != 0.0f && v != 1.0f) throw std::invalid_argument("cd: mask must be binary");
  const Tensor x = input.rank() == 3 ? input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}) : input;
  ad::Tape tape;
  std::vector<ad::Var> params;
  for (const auto& p : model.params()) params.push_back(tape.leaf(p.value));
  const auto s = cd_forward(tape, model, params, tape.leaf(x), mask);
  CdDecomposition out;
  for (std::size_t l = 0; l < s.relevant.size(); ++l) {
    out.relevant.push_back(s.relevant[l].value());
    out.irrelevant.push_back(s.irrelevant[l].value());
  }
  return out;
}

ad::Var cdep_loss(ad::Var masked_scores, ad::Var complement_scores) {
  // e^a / (e^a + e^b) == sigmoid(a - b), which never overflows.
  return ad::sum(ad::sigmoid(ad::sub(masked_scores, complement_scores)));
}

double cdep_value(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("cdep: score shapes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double hi = std::max<double>(a[i], b[i]);
    const double ea = std::exp(a[i] - hi), eb = std::exp(b[i] - hi);
    acc += ea / (ea + eb);
  }
  return acc;
}

void clarc_shift(Tensor& a, const cav::Cav& cav, double target) {
  if (a.rank() != 4 && a.rank() != 2) throw ShapeError("clarc: batched activations expected");
  const std::size_t n = a.dim(0), c = a.dim(1);
  if (c != cav.direction.size()) {
    throw ShapeError("clarc: layer has " + std::to_string(c) + " channels, CAV has " +
                     std::to_string(cav.direction.size()));
  }
  const std::size_t pos = a.numel() / (n * c);
  for (std::size_t s = 0; s < n; ++s) {
    float* p = a.data() + s * c * pos;
    double proj = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      double sk = 0.0;
      for (std::size_t i = 0; i < pos; ++i) sk += p[k * pos + i];
      proj += sk * cav.direction[k];
    }
    const double delta = target - proj / static_cast<double>(pos);
    for (std::size_t k = 0; k < c; ++k) {
      const auto add = static_cast<float>(delta * cav.direction[k]);
      for (std::size_t i = 0; i < pos; ++i) p[k * pos + i] += add;
    }
  }
}

nn::InferenceHook pclarc_hook(const nn::Model& model, const cav::Cav& cav) {
  const std::size_t l = model.layer_index(cav.layer);
  if (model.output_shape(l)[0] != cav.direction.size()) throw ShapeError("pclarc: CAV width differs from layer");
  return {l, [cav](Tensor& a) { clarc_shift(a, cav, cav.mu_clean); }};
}

nn::TapeHook aclarc_hook(const nn::Model& model, const cav::Cav& cav) {
  const std::size_t l = model.layer_index(cav.layer);
  if (model.output_shape(l)[0] != cav.direction.size()) throw ShapeError("aclarc: CAV width differs from layer");
  return [l, cav](std::size_t layer, ad::Var out) {
    if (layer != l) return out;
    Tensor shifted = out.value();
    clarc_shift(shifted, cav, cav.mu_artifact);
    return ad::add(out, out.tape->leaf(shifted - out.value()));
  };
}

void validate(const CorrectionConfig& cfg) {
  if (!(cfg.lambda >= 0.0f) || !std::isfinite(cfg.lambda)) throw CorrectionError("lambda must be finite and >= 0");
  if (!(cfg.learning_rate > 0.0f)) throw CorrectionError("learning rate must be positive");
  if (cfg.batch_size == 0) throw CorrectionError("batch size must be positive");
}

nn::AuxLoss make_aux_loss(Method method, float lambda, const MaskSet& masks,
                          std::shared_ptr<std::vector<std::string>> zero_masks) {
  if (!uses_masks(method)) throw CorrectionError(std::string("method ") + method_name(method) + " has no mask loss");
  auto set = std::make_shared<const MaskSet>(masks);
  nn::AuxLoss aux;
  aux.name = std::string(method_name(method)) + ":" + masks.artifact_name;
  aux.weight = lambda;
  aux.fn = [method, set, zero_masks](nn::AuxContext& ctx) -> std::optional<ad::Var> {
    const auto& sample = ctx.data.samples[ctx.sample_index];
    const auto it = set->masks.find(sample.id);
    if (it == set->masks.end()) return std::nullopt;
    const Tensor& mask = it->second;
    if (mask.abs_sum() == 0.0) {
      if (zero_masks) zero_masks->push_back(sample.id);
      return std::nullopt;
    }
    const ad::Var x = ctx.tape.leaf(ctx.data.input(ctx.sample_index));
    if (method == Method::Cdep) {
      const Tensor complement = Tensor(mask.shape(), 1.0f) - mask;
      const auto a = cd_forward(ctx.tape, ctx.model, ctx.params, x, mask).relevant.back();
      const auto b = cd_forward(ctx.tape, ctx.model, ctx.params, x, complement).relevant.back();
      return cdep_loss(a, b);
    }
    return rrr_loss(ctx.tape, ctx.model, ctx.params, x, sample.label, mask,
                    method == Method::Rrr ? RrrVariant::Original : RrrVariant::Cosine);
  };
  return aux;
}

CorrectionResult finetune_correct(const nn::Model& base, const data::Dataset& train,
                                  const CorrectionConfig& cfg, const MaskSet* masks,
                                  const cav::Cav* cav, std::span<const RetainedLoss> retained,
                                  const data::Dataset* validation) {
  validate(cfg);
  if (uses_masks(cfg.method) && !masks) throw CorrectionError(std::string(method_name(cfg.method)) + " needs artifact masks");
  if (uses_cav(cfg.method) && !cav) throw CorrectionError(std::string(method_name(cfg.method)) + " needs a CAV");

  CorrectionResult res;
  res.model = base;
  if (cfg.method == Method::PClarc) {
    res.inference_hook = pclarc_hook(base, *cav);
    return res;
  }

  auto zero = std::make_shared<std::vector<std::string>>();
  std::vector<nn::AuxLoss> aux;
  for (const auto& r : retained) aux.push_back(make_aux_loss(r.method, r.lambda, r.masks));
  if (uses_masks(cfg.method)) aux.push_back(make_aux_loss(cfg.method, cfg.lambda, *masks, zero));

  nn::TrainConfig tc;
  tc.optimizer = nn::Optimizer::Sgd;
  tc.learning_rate = cfg.learning_rate;
  tc.momentum = cfg.momentum;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.seed = cfg.seed;
  tc.trainable = cfg.trainable;

  nn::TrainOptions opts;
  opts.validation = validation;
  if (cfg.method == Method::AClarc) {
    const nn::TapeHook hook = aclarc_hook(base, *cav);
    const bool alternate = cfg.aclarc_alternate;
    opts.hook_for_step = [hook, alternate](std::size_t step) {
      return alternate && step % 2 == 1 ? nn::TapeHook{} : hook;
    };
  }
  res.history = nn::train(res.model, train, tc, aux, opts);
  std::set<std::string> uniq(zero->begin(), zero->end());
  res.zero_mask_samples.assign(uniq.begin(), uniq.end());
  return res;
}

void write_loss_log(const nn::TrainHistory& h, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw CorrectionError("cannot write " + file.string());
  out << "epoch,ce_loss";
  for (const auto& name : h.aux_names) out << ',' << name << "_loss," << name << "_lambda";
  out << ",total_loss\n";
  out.precision(9);
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << e.ce_loss;
    for (std::size_t k = 0; k < h.aux_names.size(); ++k) out << ',' << e.aux_losses[k] << ',' << h.aux_weights[k];
    out << ',' << e.total_loss << '\n';
  }
}

}  // namespace r2r::revise
