#include <algorithm>
#include <cmath>
#include <sstream>

#include "r2r/nn.hpp"
#include "r2r/rng.hpp"

namespace r2r::nn {

void validate(const TrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0f) || !std::isfinite(cfg.learning_rate)) {
    throw std::invalid_argument("train config: learning rate must be > 0");
  }
  if (cfg.epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
  if (cfg.momentum < 0.0f || cfg.momentum >= 1.0f) {
    throw std::invalid_argument("train config: momentum must be in [0, 1)");
  }
  if (cfg.adam_beta1 < 0.0f || cfg.adam_beta1 >= 1.0f || cfg.adam_beta2 < 0.0f ||
      cfg.adam_beta2 >= 1.0f || !(cfg.adam_eps > 0.0f)) {
    throw std::invalid_argument("train config: invalid adam moments");
  }
}

std::vector<char> trainable_mask(const Model& model, TrainableFilter filter) {
  std::vector<char> mask(model.params().size(), 1);
  if (filter == TrainableFilter::All) return mask;
  const auto dense = model.last_dense_layers();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const std::size_t l = model.params()[i].layer;
    mask[i] = std::find(dense.begin(), dense.end(), l) != dense.end() ? 1 : 0;
  }
  return mask;
}

namespace {

void check_dataset(const Model& model, const data::Dataset& data) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  const Shape want = model.input_shape();
  if (data.channels != want[0] || data.height != want[1] || data.width != want[2]) {
    throw ShapeError("train: dataset images do not match the model input " + shape_str(want));
  }
  for (const auto& s : data.samples) {
    if (s.label >= model.spec().num_classes) {
      throw std::invalid_argument("train: sample " + s.id + " has label " +
                                  std::to_string(s.label) + " >= class count");
    }
  }
}

class ParamUpdater {
 public:
  ParamUpdater(const TrainConfig& cfg, const Model& model) : cfg_(cfg) {
    for (const auto& p : model.params()) {
      m_.emplace_back(p.value.shape());
      if (cfg.optimizer == Optimizer::Adam) v_.emplace_back(p.value.shape());
    }
  }

  void step(Tensor& param, const Tensor& grad, std::size_t slot) {
    Tensor& m = m_[slot];
    if (cfg_.optimizer == Optimizer::Sgd) {
      for (std::size_t i = 0; i < param.numel(); ++i) {
        m[i] = cfg_.momentum * m[i] + grad[i];
        param[i] -= cfg_.learning_rate * m[i];
      }
      return;
    }
    Tensor& v = v_[slot];
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < param.numel(); ++i) {
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * grad[i]);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * grad[i] * grad[i]);
      const double mh = m[i] / c1, vh = v[i] / c2;
      param[i] -= static_cast<float>(cfg_.learning_rate * mh / (std::sqrt(vh) + cfg_.adam_eps));
    }
  }

  void tick() { ++t_; }

 private:
  const TrainConfig& cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

double accuracy(const Model& model, const data::Dataset& data) {
  if (data.empty()) return 0.0;
  const auto pred = predict_labels(model, data);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.samples[i].label;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace

TrainHistory train(Model& model, const data::Dataset& data, const TrainConfig& cfg,
                   std::span<const AuxLoss> aux_losses, const TrainOptions& options) {
  validate(cfg);
  check_dataset(model, data);
  for (const auto& a : aux_losses) {
    if (!(a.weight >= 0.0f) || !std::isfinite(a.weight)) {
      throw std::invalid_argument("train: aux loss '" + a.name + "' weight must be >= 0");
    }
    if (a.weight != 0.0f && !a.fn) throw std::invalid_argument("train: aux loss without callback");
  }

  TrainHistory hist;
  for (const auto& a : aux_losses) {
    hist.aux_names.push_back(a.name);
    hist.aux_weights.push_back(a.weight);
  }

  const std::vector<char> mask = trainable_mask(model, cfg.trainable);
  ParamUpdater opt(cfg, model);
  std::vector<std::size_t> order = data.all_indices();
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, epoch));
    shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.aux_losses.assign(aux_losses.size(), 0.0);
    rec.aux_counts.assign(aux_losses.size(), 0);
    double ce_sum = 0.0, total_sum = 0.0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const auto batch_n = static_cast<float>(idx.size());

      ad::Tape tape;
      std::vector<ad::Var> params;
      params.reserve(model.params().size());
      for (const auto& p : model.params()) params.push_back(tape.leaf(p.value));
      const ad::Var x = tape.leaf(data.batch(idx));
      const TapeHook hook = options.hook_for_step ? options.hook_for_step(step) : TapeHook{};
      const auto outs = model.forward(tape, x, params, hook);
      const auto labels = data.labels(idx);
      ad::Var total = ad::cross_entropy_fused(outs.back(), labels);
      ce_sum += static_cast<double>(total.value()[0]) * idx.size();

      for (std::size_t k = 0; k < aux_losses.size(); ++k) {
        const AuxLoss& aux = aux_losses[k];
        if (aux.weight == 0.0f) continue;
        std::optional<ad::Var> acc;
        for (std::size_t i : idx) {
          AuxContext ctx{tape, model, params, data, i};
          const auto term = aux.fn(ctx);
          if (!term) continue;
          if (!tape.owns(*term) || term->value().numel() != 1) {
            throw ad::GraphError("aux loss '" + aux.name + "' must return a scalar on the tape");
          }
          rec.aux_losses[k] += term->value()[0];
          ++rec.aux_counts[k];
          acc = acc ? ad::add(*acc, *term) : *term;
        }
        if (acc) total = ad::add(total, ad::scale(*acc, aux.weight / batch_n));
      }

      const float loss = total.value()[0];
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "training diverged: non-finite loss at epoch " << epoch + 1 << ", step " << step
            << " (lr " << cfg.learning_rate << ")";
        throw TrainingDivergedError(msg.str());
      }
      total_sum += static_cast<double>(loss) * idx.size();

      std::vector<ad::Var> wrt;
      std::vector<std::size_t> slots;
      for (std::size_t i = 0; i < params.size(); ++i)
        if (mask[i]) {
          wrt.push_back(params[i]);
          slots.push_back(i);
        }
      const auto grads = tape.gradient(total, wrt, false);
      opt.tick();
      for (std::size_t j = 0; j < slots.size(); ++j) {
        const Tensor& g = grads[j].value();
        if (!g.all_finite()) {
          throw TrainingDivergedError("training diverged: non-finite gradient for " +
                                      model.params()[slots[j]].name);
        }
        opt.step(model.params()[slots[j]].value, g, slots[j]);
      }
    }

    const auto n = static_cast<double>(order.size());
    rec.ce_loss = ce_sum / n;
    rec.total_loss = total_sum / n;
    for (std::size_t k = 0; k < aux_losses.size(); ++k)
      if (rec.aux_counts[k]) rec.aux_losses[k] /= static_cast<double>(rec.aux_counts[k]);
    if (options.validation) rec.val_accuracy = accuracy(model, *options.validation);
    hist.epochs.push_back(std::move(rec));
  }
  return hist;
}

}  // namespace r2r::nn
