#include "imu_align/signal_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "imu_align/error.hpp"

namespace imu_align {

using nlohmann::json;

namespace {

constexpr std::string_view kCsvHeader = "t,ax,ay,az,gx,gy,gz";
constexpr std::array<std::string_view, 7> kCsvColumns = {"t", "ax", "ay", "az", "gx", "gy", "gz"};

std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string join_ids(const std::vector<std::string>& ids, std::size_t limit = 20) {
  std::string out;
  for (std::size_t i = 0; i < ids.size() && i < limit; ++i) {
    if (i) out += ", ";
    out += ids[i];
  }
  if (ids.size() > limit) out += ", ... (" + std::to_string(ids.size() - limit) + " more)";
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

json parse_json_line(const std::string& line, const std::filesystem::path& path, std::size_t lineno) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, where(path, lineno) + ": invalid JSON: " + e.what());
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  return out;
}

}  // namespace

std::string_view to_string(Modality m) { return m == Modality::video ? "video" : "text"; }

Modality parse_modality(std::string_view text) {
  if (text == "video") return Modality::video;
  if (text == "text") return Modality::text;
  throw Error(ErrorKind::parse, "unknown modality '" + std::string(text) + "'");
}

double normalize_in_place(std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > 0.0) {
    for (auto& x : v) x /= norm;
  }
  return norm;
}

std::size_t ParallelDataset::label_index(std::size_t i) const {
  if (!labels) throw Error(ErrorKind::value, "dataset has no labels");
  const auto& id = windows.at(i).window_id;
  const auto it = labels->find(id);
  if (it == labels->end()) throw Error(ErrorKind::coverage, "window " + id + " has no label");
  const auto pos = std::find(class_names.begin(), class_names.end(), it->second);
  return static_cast<std::size_t>(pos - class_names.begin());
}

Tensor ParallelDataset::anchor_matrix(Modality m, std::span<const std::size_t> indices) const {
  const auto& anchors = m == Modality::video ? video_anchors : text_anchors;
  if (!anchors) throw Error(ErrorKind::coverage, "dataset has no " + std::string(to_string(m)) + " anchors");
  std::vector<double> data;
  std::size_t dim = 0;
  for (auto idx : indices) {
    const auto& id = windows.at(idx).window_id;
    const auto it = anchors->find(id);
    if (it == anchors->end()) {
      throw Error(ErrorKind::coverage, "no " + std::string(to_string(m)) + " anchor for " + id);
    }
    dim = it->second.vector.size();
    data.insert(data.end(), it->second.vector.begin(), it->second.vector.end());
  }
  return Tensor::matrix(indices.size(), dim, std::move(data));
}

// ---- IMU streams ----------------------------------------------------------

ImuStream load_imu_stream(const std::filesystem::path& path, StreamFormat format) {
  if (format != StreamFormat::csv) throw Error(ErrorKind::value, "unsupported stream format");
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != kCsvHeader) {
    throw Error(ErrorKind::parse, where(path, 1) + ": expected header '" + std::string(kCsvHeader) + "'");
  }
  ImuStream stream;
  stream.source_id = path.stem().string();
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const std::string& line = lines[ln];
    if (line.empty()) continue;
    ImuSample s;
    std::array<double, 7> fields{};
    std::size_t field = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (true) {
      const char* comma = std::find(p, end, ',');
      if (field >= fields.size()) {
        throw Error(ErrorKind::parse, where(path, ln + 1) + ": expected 7 columns");
      }
      auto [ptr, ec] = std::from_chars(p, comma, fields[field]);
      if (ec != std::errc() || ptr != comma || p == comma) {
        throw Error(ErrorKind::parse, where(path, ln + 1) + ": column " + std::to_string(field + 1) +
                                          " is not a number: '" + std::string(p, comma) + "'");
      }
      if (!std::isfinite(fields[field])) {
        throw Error(ErrorKind::parse, where(path, ln + 1) + ": non-finite value in column '" +
                                          std::string(kCsvColumns[field]) + "'");
      }
      ++field;
      if (comma == end) break;
      p = comma + 1;
    }
    if (field != fields.size()) {
      throw Error(ErrorKind::parse, where(path, ln + 1) + ": expected 7 columns, got " + std::to_string(field));
    }
    s.t = fields[0];
    std::copy(fields.begin() + 1, fields.end(), s.values.begin());
    stream.samples.push_back(s);
  }
  for (std::size_t i = 1; i < stream.samples.size(); ++i) {
    if (!(stream.samples[i].t > stream.samples[i - 1].t)) {
      throw Error(ErrorKind::parse, path.string() + ": timestamps not strictly increasing at sample index " +
                                        std::to_string(i));
    }
  }
  if (stream.samples.size() >= 2) {
    stream.sample_rate_hz = static_cast<double>(stream.samples.size() - 1) / stream.duration_s();
  }
  return stream;
}

void write_imu_stream(const ImuStream& stream, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << kCsvHeader << '\n';
  for (const auto& s : stream.samples) {
    out << format_double(s.t);
    for (double v : s.values) out << ',' << format_double(v);
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::io, "failed writing " + path.string());
}

ImuStream resample(const ImuStream& stream, double target_hz) {
  if (!(target_hz > 0.0)) throw Error(ErrorKind::value, "resample: target rate must be positive");
  if (stream.samples.size() < 2) {
    throw Error(ErrorKind::value, "resample: stream " + stream.source_id + " has fewer than 2 samples");
  }
  const double t0 = stream.samples.front().t;
  const double span = stream.samples.back().t - t0;
  const auto n = static_cast<std::size_t>(std::floor(span * target_hz + 1e-9)) + 1;
  ImuStream out;
  out.source_id = stream.source_id;
  out.sample_rate_hz = target_hz;
  out.samples.reserve(n);
  std::size_t seg = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = t0 + static_cast<double>(k) / target_hz;
    while (seg + 2 < stream.samples.size() && stream.samples[seg + 1].t <= t) ++seg;
    const auto& a = stream.samples[seg];
    const auto& b = stream.samples[seg + 1];
    const double w = std::clamp((t - a.t) / (b.t - a.t), 0.0, 1.0);
    ImuSample s;
    s.t = t;
    for (std::size_t c = 0; c < kImuChannels; ++c) {
      s.values[c] = w == 0.0 ? a.values[c] : (w == 1.0 ? b.values[c] : a.values[c] + w * (b.values[c] - a.values[c]));
    }
    out.samples.push_back(s);
  }
  return out;
}

std::vector<ImuWindow> make_windows(const ImuStream& stream, double window_s, double stride_s) {
  if (!(window_s > 0.0) || !(stride_s > 0.0)) {
    throw Error(ErrorKind::value, "make_windows: window and stride must be positive");
  }
  if (!(stream.sample_rate_hz > 0.0)) {
    throw Error(ErrorKind::value, "make_windows: stream " + stream.source_id + " has no sample rate");
  }
  const auto len = static_cast<std::size_t>(std::llround(window_s * stream.sample_rate_hz));
  const auto step = static_cast<std::size_t>(std::llround(stride_s * stream.sample_rate_hz));
  if (len == 0 || step == 0) {
    throw Error(ErrorKind::value, "make_windows: window or stride shorter than one sample");
  }
  std::vector<ImuWindow> windows;
  const std::size_t n = stream.samples.size();
  for (std::size_t start = 0; start + len <= n; start += step) {
    ImuWindow w;
    w.window_id = stream.source_id + ":" + std::to_string(start);
    w.source_id = stream.source_id;
    w.start_s = stream.samples[start].t;
    w.duration_s = static_cast<double>(len) / stream.sample_rate_hz;
    w.signal = Tensor({kImuChannels, len});
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t c = 0; c < kImuChannels; ++c) w.signal.at(c, t) = stream.samples[start + t].values[c];
    }
    windows.push_back(std::move(w));
  }
  return windows;
}

// ---- anchors and labels ---------------------------------------------------

AnchorMap load_anchor_embeddings(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  AnchorMap out;
  std::size_t dim = 0;
  std::size_t dim_line = 0;
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    const json rec = parse_json_line(lines[ln], path, ln + 1);
    AnchorEmbedding a;
    try {
      a.window_id = rec.at("window_id").get<std::string>();
      a.modality = parse_modality(rec.at("modality").get<std::string>());
      a.vector = rec.at("vector").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::parse, where(path, ln + 1) + ": bad anchor record: " + e.what());
    }
    if (a.vector.empty()) throw Error(ErrorKind::parse, where(path, ln + 1) + ": empty vector");
    for (double v : a.vector) {
      if (!std::isfinite(v)) throw Error(ErrorKind::parse, where(path, ln + 1) + ": non-finite value");
    }
    if (dim == 0) {
      dim = a.vector.size();
      dim_line = ln + 1;
    } else if (a.vector.size() != dim) {
      throw Error(ErrorKind::parse, where(path, ln + 1) + ": vector dim " + std::to_string(a.vector.size()) +
                                        " differs from dim " + std::to_string(dim) + " at line " +
                                        std::to_string(dim_line));
    }
    if (normalize_in_place(a.vector) == 0.0) {
      throw Error(ErrorKind::parse, where(path, ln + 1) + ": zero vector cannot be normalized");
    }
    const std::string id = a.window_id;
    if (!out.emplace(id, std::move(a)).second) {
      throw Error(ErrorKind::parse, where(path, ln + 1) + ": duplicate window_id '" + id + "'");
    }
  }
  return out;
}

void write_anchor_embeddings(const std::vector<AnchorEmbedding>& anchors, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& a : anchors) {
    json rec = {{"window_id", a.window_id}, {"modality", to_string(a.modality)}, {"vector", a.vector}};
    out << rec.dump() << '\n';
  }
  if (!out) throw Error(ErrorKind::io, "failed writing " + path.string());
}

LabelSet load_labels(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  LabelSet set;
  bool have_header = false;
  std::vector<std::pair<std::size_t, std::string>> label_lines;
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    const json rec = parse_json_line(lines[ln], path, ln + 1);
    try {
      if (rec.contains("classes")) {
        if (have_header) throw Error(ErrorKind::parse, where(path, ln + 1) + ": second classes header");
        set.classes = rec.at("classes").get<std::vector<std::string>>();
        have_header = true;
        continue;
      }
      const auto id = rec.at("window_id").get<std::string>();
      const auto label = rec.at("label").get<std::string>();
      if (!set.labels.emplace(id, label).second) {
        throw Error(ErrorKind::parse, where(path, ln + 1) + ": duplicate label for '" + id + "'");
      }
      label_lines.emplace_back(ln + 1, label);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::parse, where(path, ln + 1) + ": bad label record: " + e.what());
    }
  }
  if (!have_header) throw Error(ErrorKind::parse, path.string() + ": missing {\"classes\": [...]} header");
  const std::set<std::string> known(set.classes.begin(), set.classes.end());
  if (known.size() != set.classes.size()) throw Error(ErrorKind::parse, path.string() + ": duplicate class names");
  for (const auto& [ln, label] : label_lines) {
    if (!known.count(label)) {
      throw Error(ErrorKind::parse, where(path, ln) + ": unknown class '" + label + "'");
    }
  }
  return set;
}

void write_labels(const LabelSet& labels, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << json{{"classes", labels.classes}}.dump() << '\n';
  for (const auto& [id, label] : labels.labels) out << json{{"window_id", id}, {"label", label}}.dump() << '\n';
  if (!out) throw Error(ErrorKind::io, "failed writing " + path.string());
}

// ---- dataset assembly -----------------------------------------------------

ParallelDataset assemble_dataset(std::vector<ImuWindow> windows, std::optional<AnchorMap> video,
                                 std::optional<AnchorMap> text, std::optional<LabelSet> labels,
                                 const AssembleOptions& options) {
  if (windows.empty()) throw Error(ErrorKind::value, "assemble_dataset: no windows");
  std::sort(windows.begin(), windows.end(),
            [](const ImuWindow& a, const ImuWindow& b) { return a.window_id < b.window_id; });
  for (std::size_t i = 1; i < windows.size(); ++i) {
    if (windows[i].window_id == windows[i - 1].window_id) {
      throw Error(ErrorKind::value, "assemble_dataset: duplicate window id " + windows[i].window_id);
    }
  }
  const std::size_t len = windows.front().length();
  for (const auto& w : windows) {
    if (w.length() != len) {
      throw Error(ErrorKind::shape, "assemble_dataset: window " + w.window_id + " has " + std::to_string(w.length()) +
                                        " samples, expected " + std::to_string(len));
    }
  }

  std::size_t dim = 0;
  auto check_anchors = [&dim](const AnchorMap& map, Modality expected) {
    for (const auto& [id, a] : map) {
      if (a.modality != expected) {
        throw Error(ErrorKind::value, "anchor '" + id + "' has modality " + std::string(to_string(a.modality)) +
                                          ", expected " + std::string(to_string(expected)));
      }
      if (dim == 0) dim = a.vector.size();
      if (a.vector.size() != dim) {
        throw Error(ErrorKind::shape, "anchor '" + id + "' has dim " + std::to_string(a.vector.size()) +
                                          ", expected " + std::to_string(dim));
      }
    }
  };
  if (video) check_anchors(*video, Modality::video);
  if (text) check_anchors(*text, Modality::text);

  ParallelDataset ds;
  std::vector<std::string> missing;
  for (auto& w : windows) {
    const bool ok = (!video || video->count(w.window_id)) && (!text || text->count(w.window_id)) &&
                    (!labels || labels->labels.count(w.window_id));
    if (ok) {
      ds.windows.push_back(std::move(w));
    } else {
      missing.push_back(w.window_id);
    }
  }
  const double coverage = static_cast<double>(ds.windows.size()) / static_cast<double>(windows.size());
  if (coverage < options.min_coverage || ds.windows.empty()) {
    throw Error(ErrorKind::coverage, "coverage " + std::to_string(coverage) + " below " +
                                         std::to_string(options.min_coverage) + "; missing " +
                                         std::to_string(missing.size()) + " id(s): " + join_ids(missing));
  }
  ds.dropped = missing.size();
  ds.video_anchors = std::move(video);
  ds.text_anchors = std::move(text);
  if (labels) {
    ds.class_names = labels->classes;
    ds.labels = std::move(labels->labels);
  }
  return ds;
}

ParallelDataset assemble_dataset(std::vector<ImuWindow> windows,
                                 const std::optional<std::filesystem::path>& video_anchor_path,
                                 const std::optional<std::filesystem::path>& text_anchor_path,
                                 const std::optional<std::filesystem::path>& labels_path,
                                 const AssembleOptions& options) {
  std::optional<AnchorMap> video, text;
  std::optional<LabelSet> labels;
  if (video_anchor_path) video = load_anchor_embeddings(*video_anchor_path);
  if (text_anchor_path) text = load_anchor_embeddings(*text_anchor_path);
  if (labels_path) labels = load_labels(*labels_path);
  return assemble_dataset(std::move(windows), std::move(video), std::move(text), std::move(labels), options);
}

// ---- synthetic corpus -----------------------------------------------------

namespace {

std::string class_name(std::size_t k) {
  static const std::array<std::string_view, 8> names = {"walking", "running", "biking",   "hiking",
                                                         "climbing", "rowing", "jumping", "swimming"};
  return k < names.size() ? std::string(names[k]) : "class_" + std::to_string(k);
}

std::vector<double> gaussian_vector(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  for (auto& x : v) x = normal(rng);
  return v;
}

std::string window_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth-%04zu", i);
  return buf;
}

}  // namespace

SynthCorpus synth_corpus(const SynthConfig& cfg) {
  if (cfg.n_classes == 0 || cfg.n_windows < cfg.n_classes) {
    throw Error(ErrorKind::value, "synth: need n_windows >= n_classes >= 1");
  }
  if (cfg.dim == 0 || cfg.samples == 0 || !(cfg.sample_rate_hz > 0.0) || !(cfg.noise >= 0.0)) {
    throw Error(ErrorKind::value, "synth: dim, samples, rate must be positive and noise non-negative");
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::vector<double>> video_centroids, text_centroids;
  for (std::size_t k = 0; k < cfg.n_classes; ++k) {
    auto v = gaussian_vector(rng, cfg.dim);
    normalize_in_place(v);
    auto offset = gaussian_vector(rng, cfg.dim);
    normalize_in_place(offset);
    std::vector<double> t(cfg.dim);
    for (std::size_t d = 0; d < cfg.dim; ++d) t[d] = v[d] + 0.6 * offset[d];
    normalize_in_place(t);
    video_centroids.push_back(std::move(v));
    text_centroids.push_back(std::move(t));
  }

  SynthCorpus corpus;
  LabelSet labels;
  for (std::size_t k = 0; k < cfg.n_classes; ++k) {
    labels.classes.push_back(class_name(k));
    corpus.class_anchors.push_back({class_name(k), Modality::text, text_centroids[k]});
  }

  std::vector<ImuWindow> windows;
  AnchorMap video, text;
  for (std::size_t i = 0; i < cfg.n_windows; ++i) {
    const std::size_t k = i % cfg.n_classes;
    ImuWindow w;
    w.source_id = window_name(i);
    w.window_id = w.source_id + ":0";
    w.start_s = 0.0;
    w.duration_s = static_cast<double>(cfg.samples) / cfg.sample_rate_hz;
    w.signal = Tensor({kImuChannels, cfg.samples});
    for (std::size_t c = 0; c < kImuChannels; ++c) {
      const double freq = 1.0 + 2.5 * static_cast<double>(k) + 0.3 * static_cast<double>(c);
      const double amp = (1.0 + 0.5 * static_cast<double>((k + c) % 3)) * (0.8 + 0.4 * unit(rng));
      const double phase = 2.0 * std::numbers::pi * unit(rng);
      const double offset = c == 2 ? 9.81 : 0.0;
      for (std::size_t t = 0; t < cfg.samples; ++t) {
        const double ts = static_cast<double>(t) / cfg.sample_rate_hz;
        w.signal.at(c, t) = offset + amp * std::sin(2.0 * std::numbers::pi * freq * ts + phase) + 0.05 * normal(rng);
      }
    }
    std::vector<double> va(cfg.dim), ta(cfg.dim);
    for (std::size_t d = 0; d < cfg.dim; ++d) va[d] = video_centroids[k][d] + cfg.noise * normal(rng);
    for (std::size_t d = 0; d < cfg.dim; ++d) ta[d] = text_centroids[k][d] + cfg.noise * normal(rng);
    normalize_in_place(va);
    normalize_in_place(ta);
    AnchorEmbedding vid{w.window_id, Modality::video, std::move(va)};
    AnchorEmbedding txt{w.window_id, Modality::text, std::move(ta)};
    corpus.video_anchor_list.push_back(vid);
    corpus.text_anchor_list.push_back(txt);
    video.emplace(w.window_id, std::move(vid));
    text.emplace(w.window_id, std::move(txt));
    labels.labels.emplace(w.window_id, class_name(k));
    windows.push_back(std::move(w));
  }
  corpus.dataset = assemble_dataset(std::move(windows), std::move(video), std::move(text), std::move(labels));
  return corpus;
}

ParallelDataset synth_dataset(std::uint64_t seed, std::size_t n_windows, std::size_t n_classes, std::size_t dim,
                              std::size_t samples, double noise) {
  SynthConfig cfg;
  cfg.seed = seed;
  cfg.n_windows = n_windows;
  cfg.n_classes = n_classes;
  cfg.dim = dim;
  cfg.samples = samples;
  cfg.noise = noise;
  return synth_corpus(cfg).dataset;
}

}  // namespace imu_align
