#include "r2r/bench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "r2r/image_io.hpp"

namespace r2r::bench {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kFontRows = 7;
constexpr std::size_t kFontCols = 5;

// 5x7 block letters, one string per row, '#' = stroke.
const std::map<char, std::array<const char*, kFontRows>>& font() {
  static const std::map<char, std::array<const char*, kFontRows>> f{
      {'A', {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
      {'B', {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."}},
      {'C', {".####", "#....", "#....", "#....", "#....", "#....", ".####"}},
      {'D', {"####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."}},
      {'E', {"#####", "#....", "#....", "####.", "#....", "#....", "#####"}},
      {'H', {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
      {'I', {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "#####"}},
      {'K', {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"}},
      {'L', {"#....", "#....", "#....", "#....", "#....", "#....", "#####"}},
      {'O', {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}},
      {'R', {"####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"}},
      {'S', {".####", "#....", "#....", ".###.", "....#", "....#", "####."}},
      {'T', {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."}},
      {'X', {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"}},
  };
  return f;
}

float quantize(float v) { return static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f; }

// Shape membership in local, unit-radius coordinates.
bool inside_shape(std::size_t cls, double u, double v) {
  switch (cls % 4) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::fabs(u) <= 0.8 && std::fabs(v) <= 0.8;
    case 2: {
      // Equilateral triangle with vertices on the unit circle.
      constexpr double s3 = 1.7320508075688772;
      return v >= -0.5 && v <= 1.0 - s3 * std::fabs(u);
    }
    default: return (std::fabs(u) <= 0.3 && std::fabs(v) <= 1.0) ||
                    (std::fabs(v) <= 0.3 && std::fabs(u) <= 1.0);
  }
}

Tensor render_shape(std::size_t cls, std::size_t side, const ShapeStyle& st, Rng& rng) {
  const double s = static_cast<double>(side);
  const double bg = uniform(rng, 0.3, 0.7);
  const double contrast = uniform(rng, st.contrast_min, st.contrast_max);
  const double fg = uniform01(rng) < 0.5 ? bg - contrast : bg + contrast;
  const double r = uniform(rng, st.size_min, st.size_max) * s;
  const double cx = uniform(rng, r, s - r);
  const double cy = uniform(rng, r, s - r);
  const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double c = std::cos(theta), sn = std::sin(theta);

  Tensor img({1, side, side});
  constexpr int kSub = 4;
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = x + (sx + 0.5) / kSub - cx;
          const double py = y + (sy + 0.5) / kSub - cy;
          // Image y grows downward; flip so shapes point "up".
          const double u = (c * px + sn * py) / r;
          const double v = (sn * px - c * py) / r;
          hits += inside_shape(cls, u, v);
        }
      const double cover = hits / double(kSub * kSub);
      const double val = bg + cover * (fg - bg) + st.noise_std * normal01(rng);
      img[y * side + x] = quantize(std::clamp(static_cast<float>(val), 0.1f, 0.9f));
    }
  return img;
}

std::string sample_id(const std::string& cls, std::size_t i) {
  std::ostringstream os;
  os << cls << '_';
  os.width(4);
  os.fill('0');
  os << i;
  return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& f : out)
    if (!f.empty() && f.back() == '\r') f.pop_back();
  return out;
}

}  // namespace

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names{"circle", "square", "triangle", "cross"};
  return names;
}

GlyphBitmap render_text(const std::string& text) {
  if (text.empty()) throw BenchConfigError("glyph text is empty");
  GlyphBitmap g;
  g.rows = kFontRows + 2;
  g.cols = text.size() * (kFontCols + 1) + 1;
  g.strokes.assign(g.rows * g.cols, 0);
  for (std::size_t k = 0; k < text.size(); ++k) {
    const auto it = font().find(text[k]);
    if (it == font().end()) {
      throw BenchConfigError(std::string("glyph letter '") + text[k] + "' is not in the font");
    }
    for (std::size_t r = 0; r < kFontRows; ++r)
      for (std::size_t c = 0; c < kFontCols; ++c)
        if (it->second[r][c] == '#') g.strokes[(r + 1) * g.cols + 1 + k * (kFontCols + 1) + c] = 1;
  }
  return g;
}

void validate(const BenchConfig& cfg) {
  if (cfg.num_classes < 2 || cfg.num_classes > shape_names().size()) {
    throw BenchConfigError("class count must be in [2, " + std::to_string(shape_names().size()) +
                           "]");
  }
  if (cfg.per_class == 0) throw BenchConfigError("samples per class must be positive");
  const auto& sp = cfg.split;
  if (sp.train < 0 || sp.val < 0 || sp.test < 0 ||
      std::fabs(sp.train + sp.val + sp.test - 1.0) > 1e-9) {
    throw BenchConfigError("split fractions must be non-negative and sum to 1");
  }
  if (cfg.style.contrast_min < 0 || cfg.style.contrast_max < cfg.style.contrast_min ||
      cfg.style.noise_std < 0 || cfg.style.size_min <= 0 || cfg.style.size_max > 0.5f ||
      cfg.style.size_max < cfg.style.size_min) {
    throw BenchConfigError("invalid shape style");
  }
  for (const auto& a : cfg.artifacts) {
    if (a.name.empty()) throw BenchConfigError("artifact name is empty");
    if (a.probability < 0.0 || a.probability > 1.0) {
      throw BenchConfigError("artifact '" + a.name + "': probability must be in [0, 1]");
    }
    if (a.target_class >= cfg.num_classes) {
      throw BenchConfigError("artifact '" + a.name + "': target class out of range");
    }
    const auto& g = a.glyph;
    if (g.scale_min <= 0 || g.scale_max < g.scale_min || g.max_rotation_deg < 0) {
      throw BenchConfigError("artifact '" + a.name + "': invalid glyph scale/rotation");
    }
    const GlyphBitmap bm = render_text(g.text);
    const double w = g.scale_max * cfg.side;
    const double h = w * bm.rows / bm.cols;
    if (g.scale_min * cfg.side < 3.0 || std::hypot(w, h) > cfg.side) {
      throw BenchConfigError("image side " + std::to_string(cfg.side) + " too small for glyph '" +
                             g.text + "'");
    }
  }
  for (std::size_t i = 0; i < cfg.artifacts.size(); ++i)
    for (std::size_t j = i + 1; j < cfg.artifacts.size(); ++j)
      if (cfg.artifacts[i].name == cfg.artifacts[j].name) {
        throw BenchConfigError("duplicate artifact name '" + cfg.artifacts[i].name + "'");
      }
}

std::uint64_t artifact_stream(std::uint64_t seed, const std::string& artifact,
                              const std::string& sample_id) {
  return derive_seed(seed, hash_string("artifact:" + artifact + ":" + sample_id));
}

Injection inject_text_artifact(const Tensor& image, const GlyphSpec& glyph, Rng& rng) {
  if (image.rank() != 3) throw ShapeError("inject_text_artifact: [C,H,W] image expected");
  const std::size_t ch = image.dim(0), H = image.dim(1), W = image.dim(2);
  const GlyphBitmap bm = render_text(glyph.text);
  const double side = static_cast<double>(std::min(H, W));
  const double w = uniform(rng, glyph.scale_min, glyph.scale_max) * side;
  const double h = w * bm.rows / bm.cols;
  const double theta =
      uniform(rng, -glyph.max_rotation_deg, glyph.max_rotation_deg) * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double ex = 0.5 * (w * std::fabs(c) + h * std::fabs(s));
  const double ey = 0.5 * (w * std::fabs(s) + h * std::fabs(c));
  if (2 * ex > W || 2 * ey > H) throw BenchConfigError("image too small for glyph");
  const double cx = uniform(rng, ex, W - ex);
  const double cy = uniform(rng, ey, H - ey);

  Injection out{image, Tensor({H, W})};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double px = x + 0.5 - cx, py = y + 0.5 - cy;
      const double u = c * px + s * py;
      const double v = -s * px + c * py;
      const double gx = (u + 0.5 * w) / w * bm.cols;
      const double gy = (v + 0.5 * h) / h * bm.rows;
      if (gx < 0 || gy < 0 || gx >= bm.cols || gy >= bm.rows) continue;
      const auto col = static_cast<std::size_t>(gx), row = static_cast<std::size_t>(gy);
      const float val = bm.strokes[row * bm.cols + col] ? glyph.letter_value : glyph.box_value;
      for (std::size_t k = 0; k < ch; ++k) out.image[(k * H + y) * W + x] = quantize(val);
      out.mask[y * W + x] = 1.0f;
    }
  return out;
}

void split_dataset(data::Dataset& data, const SplitFractions& f, std::uint64_t seed) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::fabs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw BenchConfigError("split fractions must be non-negative and sum to 1");
  }
  for (std::size_t cls = 0; cls < data.num_classes; ++cls) {
    auto idx = data.indices_of_class(cls);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return data.samples[a].id < data.samples[b].id; });
    Rng rng(derive_seed(seed, hash_string("split:" + std::to_string(cls))));
    shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(f.train * n));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(f.val * n)));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      data.samples[idx[k]].split = k < n_train ? "train" : (k < n_train + n_val ? "val" : "test");
    }
  }
}

data::Dataset generate_synthetic_dataset(const BenchConfig& cfg, GenerationSummary* summary) {
  validate(cfg);
  data::Dataset d;
  d.num_classes = cfg.num_classes;
  d.channels = 1;
  d.height = cfg.side;
  d.width = cfg.side;
  d.class_names.assign(shape_names().begin(), shape_names().begin() + cfg.num_classes);
  d.samples.reserve(cfg.num_classes * cfg.per_class);
  for (std::size_t cls = 0; cls < cfg.num_classes; ++cls)
    for (std::size_t i = 0; i < cfg.per_class; ++i) {
      data::Sample s;
      s.id = sample_id(d.class_names[cls], i);
      s.label = cls;
      Rng rng(derive_seed(cfg.seed, hash_string(s.id)));
      s.image = render_shape(cls, cfg.side, cfg.style, rng);
      s.artifact_flag = false;
      d.samples.push_back(std::move(s));
    }
  split_dataset(d, cfg.split, cfg.seed);

  std::vector<std::size_t> counts(cfg.artifacts.size(), 0);
  for (auto& s : d.samples) {
    if (s.split != "train") continue;
    for (std::size_t a = 0; a < cfg.artifacts.size(); ++a) {
      const ArtifactSpec& spec = cfg.artifacts[a];
      if (s.label != spec.target_class || *s.artifact_flag) continue;
      Rng coin(derive_seed(cfg.seed, hash_string("poison:" + spec.name + ":" + s.id)));
      if (uniform01(coin) >= spec.probability) continue;
      Rng rng(artifact_stream(cfg.seed, spec.name, s.id));
      Injection inj = inject_text_artifact(s.image, spec.glyph, rng);
      s.image = std::move(inj.image);
      s.truth_mask = std::move(inj.mask);
      s.artifact_flag = true;
      s.artifact = spec.name;
      ++counts[a];
    }
  }
  if (summary) summary->artifact_counts = counts;
  return d;
}

// ---- config echo -----------------------------------------------------------

nlohmann::json config_to_json(const BenchConfig& cfg) {
  nlohmann::json arts = nlohmann::json::array();
  for (const auto& a : cfg.artifacts) {
    arts.push_back({{"name", a.name},
                    {"target_class", a.target_class},
                    {"probability", a.probability},
                    {"glyph",
                     {{"text", a.glyph.text},
                      {"box_value", a.glyph.box_value},
                      {"letter_value", a.glyph.letter_value},
                      {"scale_min", a.glyph.scale_min},
                      {"scale_max", a.glyph.scale_max},
                      {"max_rotation_deg", a.glyph.max_rotation_deg}}}});
  }
  return {{"side", cfg.side},
          {"num_classes", cfg.num_classes},
          {"per_class", cfg.per_class},
          {"artifacts", arts},
          {"split", {cfg.split.train, cfg.split.val, cfg.split.test}},
          {"style",
           {{"contrast_min", cfg.style.contrast_min},
            {"contrast_max", cfg.style.contrast_max},
            {"noise_std", cfg.style.noise_std},
            {"size_min", cfg.style.size_min},
            {"size_max", cfg.style.size_max}}},
          {"seed", cfg.seed}};
}

BenchConfig config_from_json(const nlohmann::json& j) {
  BenchConfig c;
  try {
    c.side = j.value("side", c.side);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.per_class = j.value("per_class", c.per_class);
    c.seed = j.value("seed", c.seed);
    if (j.contains("split")) {
      const auto& s = j.at("split");
      c.split = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    }
    if (j.contains("style")) {
      const auto& s = j.at("style");
      c.style.contrast_min = s.value("contrast_min", c.style.contrast_min);
      c.style.contrast_max = s.value("contrast_max", c.style.contrast_max);
      c.style.noise_std = s.value("noise_std", c.style.noise_std);
      c.style.size_min = s.value("size_min", c.style.size_min);
      c.style.size_max = s.value("size_max", c.style.size_max);
    }
    if (j.contains("artifacts")) {
      c.artifacts.clear();
      for (const auto& a : j.at("artifacts")) {
        ArtifactSpec s;
        s.name = a.at("name").get<std::string>();
        s.target_class = a.value("target_class", s.target_class);
        s.probability = a.value("probability", s.probability);
        if (a.contains("glyph")) {
          const auto& g = a.at("glyph");
          s.glyph.text = g.value("text", s.glyph.text);
          s.glyph.box_value = g.value("box_value", s.glyph.box_value);
          s.glyph.letter_value = g.value("letter_value", s.glyph.letter_value);
          s.glyph.scale_min = g.value("scale_min", s.glyph.scale_min);
          s.glyph.scale_max = g.value("scale_max", s.glyph.scale_max);
          s.glyph.max_rotation_deg = g.value("max_rotation_deg", s.glyph.max_rotation_deg);
        }
        c.artifacts.push_back(s);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw BenchConfigError(std::string("bench config json: ") + e.what());
  }
  return c;
}

// ---- image folders ---------------------------------------------------------

void save_image_folder(const data::Dataset& data, const fs::path& dir, const nlohmann::json& meta) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream index(dir / "index.csv", std::ios::trunc);
  if (!index) throw io::ImageIoError("cannot write " + (dir / "index.csv").string());
  index << "id,path,label,artifact_flag,mask_path,split,artifact\n";
  for (const auto& s : data.samples) {
    if (s.id.find_first_of(",/\n") != std::string::npos) {
      throw std::invalid_argument("sample id '" + s.id + "' cannot be stored in index.csv");
    }
    const std::string img = "images/" + s.id + ".png";
    io::write_png(dir / img, io::to_raster(s.image));
    std::string mask;
    if (s.truth_mask) {
      mask = "masks/" + s.id + ".png";
      io::write_mask_png(dir / mask, *s.truth_mask);
    }
    const std::string flag = s.artifact_flag ? (*s.artifact_flag ? "1" : "0") : "";
    index << s.id << ',' << img << ',' << s.label << ',' << flag << ',' << mask << ',' << s.split
          << ',' << s.artifact << '\n';
  }
  nlohmann::json desc = {{"class_names", data.class_names},
                         {"num_classes", data.num_classes},
                         {"channels", data.channels},
                         {"height", data.height},
                         {"width", data.width},
                         {"normalization", {{"mean", data.norm.mean}, {"std", data.norm.std}}},
                         {"num_samples", data.size()},
                         {"meta", meta}};
  std::ofstream(dir / "dataset.json", std::ios::trunc) << desc.dump(2) << '\n';
}

data::Dataset load_image_folder(const fs::path& dir, const std::string& index_csv) {
  data::Dataset d;
  std::optional<std::size_t> declared_classes;
  if (fs::exists(dir / "dataset.json")) {
    std::ifstream in(dir / "dataset.json");
    const auto j = nlohmann::json::parse(in);
    d.class_names = j.value("class_names", std::vector<std::string>{});
    declared_classes = j.value("num_classes", d.class_names.size());
    if (j.contains("normalization")) {
      d.norm.mean = j["normalization"].value("mean", d.norm.mean);
      d.norm.std = j["normalization"].value("std", d.norm.std);
    }
  }

  std::ifstream in(dir / index_csv);
  if (!in) throw io::ImageIoError("cannot read " + (dir / index_csv).string());
  std::string line;
  std::getline(in, line);
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto c_id = col("id"), c_path = col("path"), c_label = col("label");
  if (!c_id || !c_path || !c_label) {
    throw std::invalid_argument(index_csv + ": id, path and label columns are required");
  }
  const auto c_flag = col("artifact_flag"), c_mask = col("mask_path"), c_split = col("split"),
             c_art = col("artifact");

  std::size_t line_no = 1;
  std::size_t max_label = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    auto field = [&](std::optional<std::size_t> c) -> std::string {
      return c && *c < f.size() ? f[*c] : std::string{};
    };
    data::Sample s;
    s.id = field(c_id);
    std::size_t pos = 0;
    const std::string label = field(c_label);
    long long lv = -1;
    try {
      lv = std::stoll(label, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (label.empty() || pos != label.size() || lv < 0 ||
        (declared_classes && static_cast<std::size_t>(lv) >= *declared_classes)) {
      throw std::invalid_argument(index_csv + ":" + std::to_string(line_no) + ": unknown label '" +
                                  label + "'");
    }
    s.label = static_cast<std::size_t>(lv);
    max_label = std::max(max_label, s.label);
    try {
      const io::Raster r = io::read_png(dir / field(c_path));
      s.image = io::from_raster(r);
    } catch (const io::ImageIoError& e) {
      throw io::ImageIoError(index_csv + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const std::string flag = field(c_flag);
    if (flag == "1" || flag == "true") s.artifact_flag = true;
    if (flag == "0" || flag == "false") s.artifact_flag = false;
    const std::string mask = field(c_mask);
    if (!mask.empty()) s.truth_mask = io::read_mask_png(dir / mask);
    s.split = field(c_split);
    s.artifact = field(c_art);

    if (d.samples.empty()) {
      d.channels = s.image.dim(0);
      d.height = s.image.dim(1);
      d.width = s.image.dim(2);
    } else if (s.image.shape() != Shape{d.channels, d.height, d.width}) {
      throw ShapeError(index_csv + ":" + std::to_string(line_no) + ": image size differs");
    }
    d.samples.push_back(std::move(s));
  }
  d.num_classes = declared_classes.value_or(d.samples.empty() ? 0 : max_label + 1);
  if (d.class_names.size() != d.num_classes) {
    d.class_names.clear();
    for (std::size_t c = 0; c < d.num_classes; ++c) d.class_names.push_back(std::to_string(c));
  }
  return d;
}

}  // namespace r2r::bench
