#include "r2r/cav.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "r2r/rng.hpp"

namespace r2r::cav {

namespace {

// Sample i's layer output: [C, HW] view as (channels, positions).
struct ChannelView {
  std::size_t channels = 0;
  std::size_t positions = 0;
};

ChannelView view_of(const Shape& per_sample) {
  if (per_sample.size() == 3) return {per_sample[0], per_sample[1] * per_sample[2]};
  if (per_sample.size() == 1) return {per_sample[0], 1};
  throw CavError("cav: unsupported layer output rank " + std::to_string(per_sample.size()));
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double accuracy(const LogisticModel& m, const Eigen::MatrixXd& x, std::span<const int> y,
                std::span<const std::size_t> rows) {
  std::size_t ok = 0;
  for (auto r : rows) {
    const double z = x.row(static_cast<Eigen::Index>(r)).dot(m.weights) + m.intercept;
    ok += (z > 0 ? 1 : 0) == y[r];
  }
  return rows.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(rows.size());
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::vector<double> spatial_means(const nn::Model& model, const data::Dataset& data,
                                  std::span<const std::size_t> indices, std::size_t layer,
                                  std::span<const double> direction) {
  std::vector<double> out;
  for (std::size_t start = 0; start < indices.size(); start += 64) {
    const auto chunk = indices.subspan(start, std::min<std::size_t>(64, indices.size() - start));
    nn::ActivationCache cache;
    model.forward(data.batch(chunk), &cache);
    const Tensor& a = cache.outputs[layer];
    for (std::size_t n = 0; n < chunk.size(); ++n) out.push_back(spatial_projection(batch_item(a, n), direction));
  }
  return out;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

LogisticModel fit_logistic(const Eigen::MatrixXd& x, std::span<const int> y, double c,
                           std::size_t max_iterations) {
  const Eigen::Index n = x.rows(), d = x.cols();
  if (n == 0 || static_cast<std::size_t>(n) != y.size()) throw CavError("logistic: label count");
  if (c <= 0) throw CavError("logistic: C must be positive");
  // Augmented design with an unpenalized intercept column.
  Eigen::MatrixXd xa(n, d + 1);
  xa.leftCols(d) = x;
  xa.col(d).setOnes();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d + 1);
  Eigen::VectorXd reg = Eigen::VectorXd::Constant(d + 1, 1.0);
  reg(d) = 0.0;

  LogisticModel m;
  for (m.iterations = 0; m.iterations < max_iterations; ++m.iterations) {
    const Eigen::VectorXd z = xa * beta;
    Eigen::VectorXd p(n), s(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p(i) = sigmoid(z(i));
      s(i) = std::max(p(i) * (1.0 - p(i)), 1e-12);
    }
    Eigen::VectorXd yv(n);
    for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<std::size_t>(i)];
    const Eigen::VectorXd grad = reg.cwiseProduct(beta) + c * xa.transpose() * (p - yv);
    if (grad.lpNorm<Eigen::Infinity>() < 1e-9) break;
    Eigen::MatrixXd h = c * xa.transpose() * s.asDiagonal() * xa;
    h.diagonal() += reg;
    h.diagonal().array() += 1e-10;
    beta -= h.ldlt().solve(grad);
  }
  m.weights = beta.head(d);
  m.intercept = beta(d);
  return m;
}

Eigen::MatrixXd pooled_features(const nn::Model& model, const data::Dataset& data,
                                std::span<const std::size_t> indices, std::size_t layer) {
  const ChannelView v = view_of(model.output_shape(layer));
  Eigen::MatrixXd out(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(v.channels));
  for (std::size_t start = 0; start < indices.size(); start += 64) {
    const auto chunk = indices.subspan(start, std::min<std::size_t>(64, indices.size() - start));
    nn::ActivationCache cache;
    model.forward(data.batch(chunk), &cache);
    const Tensor& a = cache.outputs[layer];
    for (std::size_t n = 0; n < chunk.size(); ++n)
      for (std::size_t c = 0; c < v.channels; ++c) {
        const float* p = a.data() + (n * v.channels + c) * v.positions;
        out(static_cast<Eigen::Index>(start + n), static_cast<Eigen::Index>(c)) = *std::max_element(p, p + v.positions);
      }
  }
  return out;
}

Cav fit_cav(const nn::Model& model, const data::Dataset& data,
            std::span<const std::size_t> artifact, std::span<const std::size_t> clean,
            const std::string& layer, const FitOptions& opt) {
  if (artifact.empty() || clean.empty()) throw CavError("fit_cav: artifact and clean sets must be non-empty");
  const std::size_t l = model.layer_index(layer);
  std::vector<std::size_t> rows(artifact.begin(), artifact.end());
  rows.insert(rows.end(), clean.begin(), clean.end());
  const Eigen::MatrixXd x = pooled_features(model, data, rows, l);
  std::vector<int> y(rows.size(), 0);
  std::fill_n(y.begin(), artifact.size(), 1);

  bool varies = false;
  for (Eigen::Index c = 0; c < x.cols() && !varies; ++c) varies = x.col(c).maxCoeff() - x.col(c).minCoeff() > 1e-12;
  if (!varies) throw CavError("fit_cav: features at layer " + layer + " have zero variance");

  const LogisticModel m = fit_logistic(x, y, opt.c, opt.max_iterations);
  const double norm = m.weights.norm();
  if (!(norm > 0)) throw CavError("fit_cav: classifier weights vanished at layer " + layer);

  Cav cav;
  cav.layer = layer;
  cav.regularization_c = opt.c;
  cav.n_artifact = artifact.size();
  cav.n_clean = clean.size();
  std::vector<std::size_t> all(rows.size());
  std::iota(all.begin(), all.end(), 0);
  cav.train_accuracy = accuracy(m, x, y, all);

  Eigen::VectorXd dir = m.weights / norm;
  Eigen::VectorXd proj = x * dir;
  const auto na = static_cast<Eigen::Index>(artifact.size()), nc = static_cast<Eigen::Index>(clean.size());
  const double sign = proj.head(na).mean() > proj.tail(nc).mean() ? 1.0 : -1.0;
  dir *= sign;
  proj *= sign;
  cav.direction.assign(dir.data(), dir.data() + dir.size());
  cav.bias = sign * m.intercept / norm;
  cav.pooled_mu_artifact = proj.head(na).mean();
  cav.pooled_mu_clean = proj.tail(nc).mean();

  cav.mu_artifact = mean(spatial_means(model, data, artifact, l, cav.direction));
  cav.mu_clean = mean(spatial_means(model, data, clean, l, cav.direction));

  // k-fold held-out accuracy with a seeded, stratified fold assignment.
  const std::size_t folds = std::max<std::size_t>(2, opt.folds);
  std::vector<std::size_t> fold(rows.size());
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (y[i] == cls) members.push_back(i);
    Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(cls)));
    shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = 0; k < members.size(); ++k) fold[members[k]] = k % folds;
  }
  std::size_t correct = 0, total = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t i = 0; i < rows.size(); ++i) (fold[i] == f ? test_rows : train_rows).push_back(i);
    if (test_rows.empty()) continue;
    std::vector<int> ty;
    for (auto r : train_rows) ty.push_back(y[r]);
    const auto fm = fit_logistic(take_rows(x, train_rows), ty, opt.c, opt.max_iterations);
    correct += static_cast<std::size_t>(std::lround(accuracy(fm, x, y, test_rows) * static_cast<double>(test_rows.size())));
    total += test_rows.size();
  }
  cav.cv_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return cav;
}

std::vector<LayerScore> sweep_layers(const nn::Model& model, const data::Dataset& data,
                                     std::span<const std::size_t> artifact,
                                     std::span<const std::size_t> clean, const FitOptions& options) {
  std::vector<LayerScore> out;
  for (auto l : model.conv_layers()) {
    const std::string& name = model.layer(l).name;
    out.push_back({name, fit_cav(model, data, artifact, clean, name, options).cv_accuracy});
  }
  return out;
}

double spatial_projection(const Tensor& activation, std::span<const double> direction) {
  Shape s = activation.shape();
  if (!s.empty() && s[0] == 1 && (s.size() == 4 || s.size() == 2)) s.erase(s.begin());
  const ChannelView v = view_of(s);
  if (v.channels != direction.size()) throw CavError("projection: channel count differs from CAV");
  double acc = 0.0;
  for (std::size_t c = 0; c < v.channels; ++c) {
    double sc = 0.0;
    for (std::size_t p = 0; p < v.positions; ++p) sc += activation[c * v.positions + p];
    acc += sc * direction[c];
  }
  return acc / static_cast<double>(v.positions);
}

nlohmann::json cav_to_json(const Cav& c) {
  return {{"version", 1},
          {"layer", c.layer},
          {"direction", c.direction},
          {"bias", c.bias},
          {"mu_clean", c.mu_clean},
          {"mu_artifact", c.mu_artifact},
          {"pooled_mu_clean", c.pooled_mu_clean},
          {"pooled_mu_artifact", c.pooled_mu_artifact},
          {"train_accuracy", c.train_accuracy},
          {"cv_accuracy", c.cv_accuracy},
          {"n_artifact", c.n_artifact},
          {"n_clean", c.n_clean},
          {"classifier", {{"kind", "logistic_regression"}, {"penalty", "l2"}, {"C", c.regularization_c}}},
          {"features", "spatial_max"},
          {"projection", "spatial_mean"}};
}

Cav cav_from_json(const nlohmann::json& j) {
  try {
    Cav c;
    c.layer = j.at("layer").get<std::string>();
    c.direction = j.at("direction").get<std::vector<double>>();
    c.bias = j.at("bias").get<double>();
    c.mu_clean = j.at("mu_clean").get<double>();
    c.mu_artifact = j.at("mu_artifact").get<double>();
    c.pooled_mu_clean = j.value("pooled_mu_clean", 0.0);
    c.pooled_mu_artifact = j.value("pooled_mu_artifact", 0.0);
    c.train_accuracy = j.value("train_accuracy", 0.0);
    c.cv_accuracy = j.value("cv_accuracy", 0.0);
    c.n_artifact = j.value("n_artifact", std::size_t{0});
    c.n_clean = j.value("n_clean", std::size_t{0});
    if (j.contains("classifier")) c.regularization_c = j["classifier"].value("C", 1.0);
    double n2 = 0;
    for (double v : c.direction) n2 += v * v;
    if (c.direction.empty() || std::fabs(std::sqrt(n2) - 1.0) > 1e-6) throw CavError("cav.json: direction is not unit norm");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CavError(std::string("cav.json: ") + e.what());
  }
}

void save_cav(const Cav& cav, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  const auto tmp = std::filesystem::path(file.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw CavError("cannot write " + file.string());
    out << cav_to_json(cav).dump(2) << '\n';
  }
  std::filesystem::rename(tmp, file);
}

Cav load_cav(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw CavError("cannot read " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CavError(file.string() + ": " + e.what());
  }
  return cav_from_json(j);
}

Tensor localize_artifact(const nn::Model& model, const Tensor& input, const Cav& cav,
                         const xai::RuleComposite& rules) {
  const std::size_t l = model.layer_index(cav.layer);
  const ChannelView v = view_of(model.output_shape(l));
  if (v.channels != cav.direction.size()) throw CavError("localize: CAV width differs from layer " + cav.layer);
  const Tensor x = input.rank() == 3 ? input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}) : input;
  nn::ActivationCache cache;
  model.forward(x, &cache);
  Tensor r = cache.outputs[l];
  for (std::size_t c = 0; c < v.channels; ++c)
    for (std::size_t p = 0; p < v.positions; ++p) r[c * v.positions + p] *= static_cast<float>(cav.direction[c]);
  return xai::lrp_backward(model, cache, l, r, rules).input_relevance;
}

const char* mask_source_name(MaskSource s) {
  switch (s) {
    case MaskSource::CavDerived: return "cav-derived";
    case MaskSource::GroundTruth: return "ground-truth";
    case MaskSource::Manual: return "manual";
  }
  return "?";
}

Tensor binarize_mask(const Tensor& heatmap, double q, std::size_t dilation) {
  if (heatmap.rank() != 2) throw CavError("binarize: [H, W] heatmap expected");
  if (!(q > 0.0 && q < 1.0)) throw CavError("binarize: quantile must lie in (0, 1)");
  const std::size_t h = heatmap.dim(0), w = heatmap.dim(1);
  Tensor out({h, w});
  std::vector<float> pos;
  for (float v : heatmap.vec())
    if (v > 0) pos.push_back(v);
  if (pos.empty()) return out;
  std::sort(pos.begin(), pos.end());
  // Linear-interpolated quantile.
  const double at = q * static_cast<double>(pos.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(at));
  const std::size_t hi = std::min(lo + 1, pos.size() - 1);
  const double thr = pos[lo] + (at - static_cast<double>(lo)) * (pos[hi] - pos[lo]);

  std::vector<int> comp(h * w, -1);
  int best = -1;
  std::size_t best_size = 0;
  double best_mass = 0.0;
  int next = 0;
  for (std::size_t s = 0; s < h * w; ++s) {
    if (comp[s] != -1 || !(heatmap[s] > 0 && heatmap[s] >= thr)) continue;
    std::vector<std::size_t> stack{s};
    comp[s] = next;
    std::size_t size = 0;
    double mass = 0.0;
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      stack.pop_back();
      ++size;
      mass += heatmap[u];
      const auto uy = static_cast<long>(u / w), ux = static_cast<long>(u % w);
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long ny = uy + dy, nx = ux + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
          const auto k = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
          if (comp[k] == -1 && heatmap[k] > 0 && heatmap[k] >= thr) {
            comp[k] = next;
            stack.push_back(k);
          }
        }
    }
    if (size > best_size || (size == best_size && mass > best_mass)) {
      best = next;
      best_size = size;
      best_mass = mass;
    }
    ++next;
  }
  const auto r = static_cast<long>(dilation);
  for (std::size_t s = 0; s < h * w; ++s) {
    if (comp[s] != best) continue;
    const auto y = static_cast<long>(s / w), x = static_cast<long>(s % w);
    for (long ny = std::max(0L, y - r); ny <= std::min<long>(static_cast<long>(h) - 1, y + r); ++ny)
      for (long nx = std::max(0L, x - r); nx <= std::min<long>(static_cast<long>(w) - 1, x + r); ++nx)
        out[static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx)] = 1.0f;
  }
  return out;
}

double iou(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("iou: shapes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const bool x = a[i] > 0.5f, y = b[i] > 0.5f;
    inter += x && y;
    uni += x || y;
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

Patch crop_artifact(const Tensor& image, const Tensor& mask) {
  if (image.rank() != 3 || mask.rank() != 2 || image.dim(1) != mask.dim(0) || image.dim(2) != mask.dim(1)) {
    throw ShapeError("crop: image [C,H,W] and mask [H,W] must agree");
  }
  const std::size_t h = mask.dim(0), w = mask.dim(1), ch = image.dim(0);
  std::size_t y0 = h, y1 = 0, x0 = w, x1 = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (mask[y * w + x] > 0.5f) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y0 == h) throw CavError("crop: empty mask");
  Patch p;
  p.y = y0;
  p.x = x0;
  const std::size_t ph = y1 - y0 + 1, pw = x1 - x0 + 1;
  p.image = Tensor({ch, ph, pw});
  p.mask = Tensor({ph, pw});
  for (std::size_t y = 0; y < ph; ++y)
    for (std::size_t x = 0; x < pw; ++x) {
      p.mask[y * pw + x] = mask[(y0 + y) * w + x0 + x] > 0.5f ? 1.0f : 0.0f;
      for (std::size_t c = 0; c < ch; ++c) p.image[(c * ph + y) * pw + x] = image[(c * h + y0 + y) * w + x0 + x];
    }
  return p;
}

Tensor paste_artifact(const Tensor& target, const Patch& patch, std::size_t y, std::size_t x) {
  if (target.rank() != 3 || patch.image.rank() != 3 || target.dim(0) != patch.image.dim(0)) {
    throw ShapeError("paste: channel mismatch");
  }
  const std::size_t ch = target.dim(0), h = target.dim(1), w = target.dim(2);
  const std::size_t ph = patch.mask.dim(0), pw = patch.mask.dim(1);
  if (y + ph > h || x + pw > w) throw CavError("paste: placement out of bounds");
  Tensor out = target;
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px) {
      if (patch.mask[py * pw + px] < 0.5f) continue;
      for (std::size_t c = 0; c < ch; ++c) out[(c * h + y + py) * w + x + px] = patch.image[(c * ph + py) * pw + px];
    }
  return out;
}

}  // namespace r2r::cav
