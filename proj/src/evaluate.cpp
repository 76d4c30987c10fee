#include "r2r/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "r2r/rng.hpp"

namespace r2r::eval {

data::Dataset poison_synthetic(const data::Dataset& test, const bench::ArtifactSpec& artifact,
                               std::uint64_t seed) {
  data::Dataset out = test;
  for (auto& s : out.samples) {
    Rng rng(bench::artifact_stream(seed, "poison:" + artifact.name, s.id));
    auto inj = bench::inject_text_artifact(s.image, artifact.glyph, rng);
    s.image = std::move(inj.image);
    s.truth_mask = std::move(inj.mask);
    s.artifact_flag = true;
    s.artifact = artifact.name;
  }
  return out;
}

data::Dataset poison_intrinsic(const data::Dataset& test, std::span<const cav::Patch> pool,
                               const std::string& artifact_name, std::uint64_t seed) {
  if (pool.empty()) throw EvalError("poison: empty artifact pool");
  data::Dataset out = test;
  for (auto& s : out.samples) {
    Rng rng(bench::artifact_stream(seed, "poison:" + artifact_name, s.id));
    const cav::Patch& p = pool[uniform_index(rng, pool.size())];
    const std::size_t h = s.image.dim(1), w = s.image.dim(2);
    const std::size_t ph = p.mask.dim(0), pw = p.mask.dim(1);
    if (ph > h || pw > w) throw EvalError("poison: patch larger than image " + s.id);
    const std::size_t y = uniform_index(rng, h - ph + 1), x = uniform_index(rng, w - pw + 1);
    s.image = cav::paste_artifact(s.image, p, y, x);
    Tensor mask({h, w});
    for (std::size_t py = 0; py < ph; ++py)
      for (std::size_t px = 0; px < pw; ++px)
        if (p.mask[py * pw + px] > 0.5f) mask[(y + py) * w + x + px] = 1.0f;
    s.truth_mask = std::move(mask);
    s.artifact_flag = true;
    s.artifact = artifact_name;
  }
  return out;
}

std::optional<double> relevance_fraction(const Tensor& relevance, const Tensor& mask, bool positive_only) {
  if (mask.rank() != 2) throw ShapeError("relevance fraction: [H, W] mask expected");
  const std::size_t hw = mask.numel();
  if (relevance.numel() % hw != 0) throw ShapeError("relevance fraction: map and mask sizes differ");
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < relevance.numel(); ++i) {
    const double r = positive_only ? std::max(0.0f, relevance[i]) : std::fabs(relevance[i]);
    total += r;
    if (mask[i % hw] > 0.5f) inside += r;
  }
  if (!(total > 0.0)) return std::nullopt;
  return inside / total;
}

FractionResult artifact_relevance_fraction(const nn::Model& model, const data::Dataset& data,
                                           const std::map<std::string, Tensor>* masks,
                                           bool positive_only, const nn::InferenceHook* hook,
                                           const xai::RuleComposite& rules) {
  FractionResult res;
  res.positive_only = positive_only;
  double acc = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data.samples[i];
    const Tensor* mask = nullptr;
    if (masks) {
      const auto it = masks->find(s.id);
      if (it != masks->end()) mask = &it->second;
    } else if (s.truth_mask) {
      mask = &*s.truth_mask;
    }
    if (!mask) continue;
    const Tensor x = data.input(i);
    const std::size_t pred = nn::argmax_rows(model.forward(x, nullptr, hook)).front();
    const auto map = xai::lrp_attribute(model, x, pred, rules, hook);
    const auto f = relevance_fraction(map.input_relevance, *mask, positive_only);
    if (!f) {
      ++res.excluded;
      continue;
    }
    res.ids.push_back(s.id);
    res.per_sample_pct.push_back(100.0 * *f);
    acc += 100.0 * *f;
  }
  if (!res.per_sample_pct.empty()) res.mean_pct = acc / static_cast<double>(res.per_sample_pct.size());
  return res;
}

Metrics classification_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> pred,
                               std::size_t num_classes) {
  if (truth.empty()) throw EvalError("metrics: empty dataset");
  if (truth.size() != pred.size()) throw EvalError("metrics: prediction count differs from label count");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), support(num_classes, 0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || pred[i] >= num_classes) throw EvalError("metrics: class index out of range");
    ++support[truth[i]];
    if (truth[i] == pred[i]) {
      ++tp[truth[i]];
      ++hits;
    } else {
      ++fp[pred[i]];
    }
  }
  Metrics m;
  m.samples = truth.size();
  m.accuracy_pct = 100.0 * static_cast<double>(hits) / static_cast<double>(truth.size());
  double f1_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    ClassMetrics cm;
    cm.support = support[c];
    const std::size_t predicted = tp[c] + fp[c];
    cm.precision = predicted ? static_cast<double>(tp[c]) / static_cast<double>(predicted) : 0.0;
    cm.recall = support[c] ? static_cast<double>(tp[c]) / static_cast<double>(support[c]) : 0.0;
    cm.f1 = cm.precision + cm.recall > 0 ? 2 * cm.precision * cm.recall / (cm.precision + cm.recall) : 0.0;
    m.per_class.push_back(cm);
    if (support[c]) {
      f1_sum += cm.f1;
      ++present;
    } else {
      m.absent_classes.push_back(c);
    }
  }
  m.macro_f1_pct = 100.0 * f1_sum / static_cast<double>(present);
  return m;
}

Metrics classification_metrics(const nn::Model& model, const data::Dataset& data, const nn::InferenceHook* hook) {
  if (data.empty()) throw EvalError("metrics: empty dataset");
  const auto pred = nn::predict_labels(model, data, hook);
  return classification_metrics(data.labels(data.all_indices()), pred, data.num_classes);
}

namespace {

nlohmann::json metrics_json(const Metrics& m) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& c : m.per_class)
    per.push_back({{"support", c.support}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}});
  return {{"samples", m.samples},
          {"accuracy_pct", m.accuracy_pct},
          {"macro_f1_pct", m.macro_f1_pct},
          {"per_class", per},
          {"absent_classes", m.absent_classes}};
}

Metrics metrics_from(const nlohmann::json& j) {
  Metrics m;
  m.samples = j.at("samples").get<std::size_t>();
  m.accuracy_pct = j.at("accuracy_pct").get<double>();
  m.macro_f1_pct = j.at("macro_f1_pct").get<double>();
  for (const auto& c : j.at("per_class"))
    m.per_class.push_back({c.at("support").get<std::size_t>(), c.at("precision").get<double>(),
                           c.at("recall").get<double>(), c.at("f1").get<double>()});
  m.absent_classes = j.at("absent_classes").get<std::vector<std::size_t>>();
  return m;
}

std::string fixed(double v, int digits = 1) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

std::string general(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

const std::vector<std::string> kMetricColumns{"artifact_relevance_pct", "f1_original_pct", "f1_poisoned_pct",
                                              "acc_original_pct", "acc_poisoned_pct"};

std::vector<double> metric_values(const EvaluationReport& r) {
  return {r.artifact_relevance_pct, r.original.macro_f1_pct, r.poisoned.macro_f1_pct, r.original.accuracy_pct,
          r.poisoned.accuracy_pct};
}

}  // namespace

nlohmann::json report_to_json(const EvaluationReport& r) {
  return {{"schema", kReportSchema},
          {"run_id", r.run_id},
          {"method", r.method},
          {"lambda", r.lambda},
          {"seed", r.seed},
          {"iteration", r.iteration},
          {"artifact", r.artifact},
          {"dataset", r.dataset},
          {"artifact_relevance_pct", r.artifact_relevance_pct},
          {"relevance_scope", "artifact samples, |R| for the predicted class"},
          {"relevance_samples", r.relevance_samples},
          {"relevance_excluded", r.relevance_excluded},
          {"f1_original_pct", r.original.macro_f1_pct},
          {"f1_poisoned_pct", r.poisoned.macro_f1_pct},
          {"acc_original_pct", r.original.accuracy_pct},
          {"acc_poisoned_pct", r.poisoned.accuracy_pct},
          {"original", metrics_json(r.original)},
          {"poisoned", metrics_json(r.poisoned)}};
}

EvaluationReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<int>() != kReportSchema) throw EvalError("report: unsupported schema version");
    EvaluationReport r;
    r.run_id = j.at("run_id").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.lambda = j.at("lambda").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.iteration = j.at("iteration").get<std::size_t>();
    r.artifact = j.at("artifact").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.artifact_relevance_pct = j.at("artifact_relevance_pct").get<double>();
    r.relevance_samples = j.at("relevance_samples").get<std::size_t>();
    r.relevance_excluded = j.at("relevance_excluded").get<std::size_t>();
    r.original = metrics_from(j.at("original"));
    r.poisoned = metrics_from(j.at("poisoned"));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw EvalError(std::string("report: ") + e.what());
  }
}

void write_report(const EvaluationReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "report.json");
    out << report_to_json(r).dump(2) << '\n';
  }
  const EvaluationReport one[] = {r};
  const Comparison c = compare_runs(one);
  std::ofstream(dir / "report.csv") << comparison_csv(c);
  std::ofstream(dir / "report.md") << comparison_markdown(c);
}

Comparison compare_runs(std::span<const EvaluationReport> reports) {
  if (reports.empty()) throw EvalError("compare: no reports");
  for (const auto& r : reports)
    if (r.dataset != reports.front().dataset) {
      throw EvalError("compare: reports describe different datasets ('" + reports.front().dataset + "' vs '" +
                      r.dataset + "')");
    }
  Comparison c;
  c.columns = {"run_id", "iteration", "method", "lambda", "artifact"};
  c.columns.insert(c.columns.end(), kMetricColumns.begin(), kMetricColumns.end());
  std::vector<double> best(kMetricColumns.size());
  for (std::size_t k = 0; k < kMetricColumns.size(); ++k) {
    best[k] = k == 0 ? 1e300 : -1e300;
    for (const auto& r : reports) {
      const double v = metric_values(r)[k];
      best[k] = k == 0 ? std::min(best[k], v) : std::max(best[k], v);
    }
  }
  for (const auto& r : reports) {
    std::vector<std::string> row{r.run_id, std::to_string(r.iteration), r.method, general(r.lambda),
                                 r.artifact};
    std::vector<bool> flags(row.size(), false);
    const auto vals = metric_values(r);
    for (std::size_t k = 0; k < vals.size(); ++k) {
      row.push_back(fixed(vals[k]));
      flags.push_back(fixed(vals[k]) == fixed(best[k]));
    }
    c.rows.push_back(std::move(row));
    c.best.push_back(std::move(flags));
  }
  return c;
}

std::string comparison_csv(const Comparison& c) {
  std::ostringstream out;
  for (std::size_t k = 0; k < c.columns.size(); ++k) out << (k ? "," : "") << c.columns[k];
  out << '\n';
  for (const auto& row : c.rows) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      const bool quote = row[k].find_first_of(",\"") != std::string::npos;
      std::string cell = row[k];
      if (quote) {
        std::string q = "\"";
        for (char ch : cell) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
        cell = q + "\"";
      }
      out << (k ? "," : "") << cell;
    }
    out << '\n';
  }
  return out.str();
}

std::string comparison_markdown(const Comparison& c) {
  std::ostringstream out;
  out << '|';
  for (const auto& col : c.columns) out << ' ' << col << " |";
  out << "\n|";
  for (std::size_t k = 0; k < c.columns.size(); ++k) out << (k < 5 ? " --- |" : " ---: |");
  out << '\n';
  for (std::size_t r = 0; r < c.rows.size(); ++r) {
    out << '|';
    for (std::size_t k = 0; k < c.rows[r].size(); ++k)
      out << ' ' << (c.best[r][k] && c.rows.size() > 1 ? "**" + c.rows[r][k] + "**" : c.rows[r][k]) << " |";
    out << '\n';
  }
  return out.str();
}

}  // namespace r2r::eval
