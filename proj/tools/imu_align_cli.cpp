// imu-align: ingestion, training, evaluation and retrieval over aligned IMU windows.
// JSON results go to stdout, diagnostics to stderr. Exit codes: 0 ok, 2 invalid input, 3 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include "imu_align/error.hpp"
#include "imu_align/evaluate.hpp"
#include "imu_align/file_lock.hpp"
#include "imu_align/hashing.hpp"
#include "imu_align/signal_io.hpp"
#include "imu_align/train.hpp"
#include "imu_align/window_cache.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace imu_align;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Written once per run directory: what ran, with which resolved settings, over which input bytes.
class RunManifest {
 public:
  RunManifest(std::string command, json config) : command_(std::move(command)), config_(std::move(config)) {
    started_ = utc_now();
  }

  void input(const std::string& role, const fs::path& path) {
    inputs_[role] = json{{"path", path.string()}, {"fnv1a64", to_hex(hash_file(path))}};
  }

  void write(const fs::path& run_dir) const {
    const json j{{"command", command_}, {"config", config_},      {"inputs", inputs_},
                 {"tool_version", kToolVersion}, {"started_at", started_}, {"finished_at", utc_now()}};
    std::ofstream out(run_dir / "manifest.json", std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write manifest in " + run_dir.string());
    out << j.dump(2) << '\n';
  }

 private:
  std::string command_;
  json config_;
  json inputs_ = json::object();
  std::string started_;
};

void emit(const json& j) { std::cout << j.dump() << std::endl; }

void note(const std::string& msg) { std::cerr << "imu-align: " << msg << '\n'; }

json head_to_json(const ClassifierHead& head) {
  json w = json::array();
  for (std::size_t k = 0; k < head.weight.dim(0); ++k) {
    const auto d = head.weight.dim(1);
    w.push_back(std::vector<double>(head.weight.data().begin() + static_cast<std::ptrdiff_t>(k * d),
                                    head.weight.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * d)));
  }
  return json{{"class_names", head.class_names}, {"weight", w}, {"bias", head.bias.values()}};
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << j.dump() << '\n';
}

// ---- ingest ---------------------------------------------------------------

struct IngestArgs {
  std::vector<std::string> imu;
  WindowParams params;
  std::string out;
};

int cmd_ingest(const IngestArgs& a) {
  std::vector<fs::path> inputs(a.imu.begin(), a.imu.end());
  const auto cache = build_window_cache(inputs, a.params);
  write_window_cache(cache, a.out);
  const std::size_t t = cache.windows.empty() ? 0 : cache.windows.front().length();
  emit(json{{"cache", a.out},
            {"key", to_hex(cache.key)},
            {"n_windows", cache.windows.size()},
            {"T", t},
            {"duration_s", cache.windows.empty() ? 0.0 : cache.windows.front().duration_s},
            {"rate_hz", a.params.rate_hz},
            {"sources", a.imu}});
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string cache, video_anchors, text_anchors, run_dir, resume;
  std::string mode = "iv";
  TrainConfig config;
  EncoderConfig encoder;
  std::optional<std::size_t> embed_dim;
  double min_coverage = 1.0;
};

int cmd_train(TrainArgs a) {
  a.config.mode = parse_train_mode(a.mode);
  if (a.config.mode != TrainMode::it && a.video_anchors.empty()) {
    throw Error(ErrorKind::value, "mode " + a.mode + " requires --video-anchors");
  }
  if (a.config.mode != TrainMode::iv && a.text_anchors.empty()) {
    throw Error(ErrorKind::value, "mode " + a.mode + " requires --text-anchors");
  }
  a.encoder.n_conv_layers = a.encoder.conv_channels.size();
  a.config.validate();

  auto cache = read_window_cache(a.cache);
  std::optional<fs::path> video, text;
  if (!a.video_anchors.empty() && a.config.mode != TrainMode::it) video = a.video_anchors;
  if (!a.text_anchors.empty() && a.config.mode != TrainMode::iv) text = a.text_anchors;
  auto dataset = assemble_dataset(std::move(cache.windows), video, text, std::nullopt, {a.min_coverage});
  if (dataset.dropped > 0) note("dropped " + std::to_string(dataset.dropped) + " windows without anchors");

  // The embedding must live in the anchors' space; default to their dimension.
  const auto& any = dataset.video_anchors ? *dataset.video_anchors : *dataset.text_anchors;
  const std::size_t anchor_dim = any.empty() ? 0 : any.begin()->second.vector.size();
  a.encoder.embed_dim = a.embed_dim.value_or(anchor_dim);
  if (a.encoder.embed_dim != anchor_dim) {
    throw Error(ErrorKind::shape, "--embed-dim " + std::to_string(a.encoder.embed_dim) + " does not match anchor dim " +
                                      std::to_string(anchor_dim));
  }
  a.encoder.validate();

  RunOptions options;
  options.run_dir = a.run_dir;
  if (!a.resume.empty()) options.resume = load_checkpoint(a.resume);
  options.on_epoch = [](const EpochSummary& s) {
    note("epoch " + std::to_string(s.epoch) + " lr " + std::to_string(s.lr) + " loss " +
         std::to_string(s.loss.l_total.value_or(0.0)));
  };

  RunManifest manifest("train", json{{"train", to_json(a.config)},
                                     {"encoder", to_json(a.encoder)},
                                     {"min_coverage", a.min_coverage},
                                     {"resume", a.resume}});
  manifest.input("cache", a.cache);
  if (video) manifest.input("video_anchors", *video);
  if (text) manifest.input("text_anchors", *text);
  if (!a.resume.empty()) manifest.input("resume", a.resume);

  const auto result = run_training(dataset, a.encoder, a.config, options);
  manifest.write(a.run_dir);

  json out = result.history.empty() ? json{{"epoch", result.final.epochs}} : to_json(result.history.back());
  out["step"] = result.final.step;
  out["n_windows"] = dataset.size();
  out["checkpoint"] = result.checkpoint_path.string();
  emit(out);
  return 0;
}

// ---- eval-retrieval -------------------------------------------------------

struct RetrievalArgs {
  std::string ckpt, cache, anchors, direction;
};

int cmd_eval_retrieval(const RetrievalArgs& a) {
  const auto direction = parse_retrieval_direction(a.direction);
  const auto ck = load_checkpoint(a.ckpt);
  const auto cache = read_window_cache(a.cache);
  const auto anchors = load_anchor_embeddings(a.anchors);
  std::vector<std::string> ids;
  for (const auto& w : cache.windows) ids.push_back(w.window_id);
  const Tensor emb = encode_batch(cache.windows, ck.params, ck.encoder);
  emit(to_json(eval_retrieval(emb, ids, anchors, direction)));
  return 0;
}

// ---- eval-classify --------------------------------------------------------

struct ClassifyArgs {
  std::string ckpt, cache, labels, protocol, class_anchors, run_dir;
  ProbeConfig probe;
};

int cmd_eval_classify(const ClassifyArgs& a) {
  if (a.protocol != "zeroshot" && a.protocol != "probe" && a.protocol != "finetune") {
    throw Error(ErrorKind::value, "unknown protocol '" + a.protocol + "' (expected zeroshot, probe or finetune)");
  }
  if (a.protocol == "zeroshot" && a.class_anchors.empty()) {
    throw Error(ErrorKind::value, "zeroshot classification requires --class-anchors");
  }
  const auto ck = load_checkpoint(a.ckpt);
  auto cache = read_window_cache(a.cache);
  const auto dataset = assemble_dataset(std::move(cache.windows), std::nullopt, std::nullopt, load_labels(a.labels));
  const auto golds = gold_labels(dataset);

  if (a.protocol == "zeroshot") {
    const auto anchors = load_class_anchors(a.class_anchors, dataset.class_names);
    const Tensor emb = encode_batch(dataset.windows, ck.params, ck.encoder);
    std::vector<std::size_t> preds(dataset.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
      preds[i] = zeroshot_classify(std::span<const double>(emb.data()).subspan(i * emb.dim(1), emb.dim(1)), anchors);
    }
    auto j = to_json(classification_metrics(preds, golds, dataset.class_names));
    j["protocol"] = a.protocol;
    emit(j);
    return 0;
  }

  const fs::path run_dir = a.run_dir.empty() ? fs::path(a.ckpt).parent_path() / a.protocol : fs::path(a.run_dir);
  fs::create_directories(run_dir);
  FileLock lock(run_dir / "run");
  RunManifest manifest("eval-classify", json{{"protocol", a.protocol},
                                             {"epochs", a.probe.epochs},
                                             {"batch_size", a.probe.batch_size},
                                             {"head_lr", a.probe.head_lr},
                                             {"encoder_lr", a.probe.encoder_lr},
                                             {"adagrad_eps", a.probe.adagrad_eps},
                                             {"seed", a.probe.seed}});
  manifest.input("checkpoint", a.ckpt);
  manifest.input("cache", a.cache);
  manifest.input("labels", a.labels);

  ClassificationMetrics metrics;
  json out;
  if (a.protocol == "probe") {
    const auto head = train_probe(dataset, ck.params, ck.encoder, a.probe);
    const auto preds = predict(head, encode_batch(dataset.windows, ck.params, ck.encoder));
    metrics = classification_metrics(preds, golds, dataset.class_names);
    write_json_file(run_dir / "head.json", head_to_json(head));
    out = to_json(metrics);
  } else {
    auto result = fine_tune(dataset, ck.params, init_head(dataset.class_names, ck.encoder.embed_dim, a.probe.seed),
                            ck.encoder, a.probe);
    const auto preds = predict(result.head, encode_batch(dataset.windows, result.params, ck.encoder));
    metrics = classification_metrics(preds, golds, dataset.class_names);
    Checkpoint tuned;
    tuned.encoder = ck.encoder;
    tuned.train = ck.train;
    tuned.params = std::move(result.params);
    tuned.step = ck.step;
    tuned.epochs = ck.epochs;
    const auto ckpt_path = run_dir / "ckpt-finetune.bin";
    save_checkpoint(tuned, ckpt_path);
    write_json_file(run_dir / "head.json", head_to_json(result.head));
    out = to_json(metrics);
    out["checkpoint"] = ckpt_path.string();
  }
  manifest.write(run_dir);
  out["protocol"] = a.protocol;
  out["run_dir"] = run_dir.string();
  emit(out);
  return 0;
}

// ---- retrieve -------------------------------------------------------------

struct RetrieveArgs {
  std::string ckpt, pool, query_anchor, query_id;
  std::size_t top_k = 10;
};

// A literal JSON object, or a JSONL file whose first record (or the one named by query_id) is used.
AnchorEmbedding read_query(const std::string& arg, const std::string& query_id) {
  if (!arg.empty() && arg.front() == '{') {
    const fs::path tmp = fs::temp_directory_path() / ("imu-align-query-" + std::to_string(::getpid()) + ".jsonl");
    {
      std::ofstream out(tmp);
      out << arg << '\n';
    }
    AnchorMap m;
    try {
      m = load_anchor_embeddings(tmp);
    } catch (...) {
      fs::remove(tmp);
      throw;
    }
    fs::remove(tmp);
    return m.begin()->second;
  }
  const auto m = load_anchor_embeddings(arg);
  if (m.empty()) throw Error(ErrorKind::value, "query file " + arg + " has no records");
  if (query_id.empty()) {
    // first record in file order, not map order
    std::ifstream in(arg);
    std::string line;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      return m.at(json::parse(line).at("window_id").get<std::string>());
    }
  }
  const auto it = m.find(query_id);
  if (it == m.end()) throw Error(ErrorKind::coverage, "query id " + query_id + " not in " + arg);
  return it->second;
}

int cmd_retrieve(const RetrieveArgs& a) {
  if (a.top_k == 0) throw Error(ErrorKind::value, "--top-k must be >= 1");
  const auto ck = load_checkpoint(a.ckpt);
  const auto cache = read_window_cache(a.pool);
  const auto query = read_query(a.query_anchor, a.query_id);
  if (query.vector.size() != ck.encoder.embed_dim) {
    throw Error(ErrorKind::shape, "query dim " + std::to_string(query.vector.size()) + " does not match embedding dim " +
                                      std::to_string(ck.encoder.embed_dim));
  }
  EmbeddingPool pool;
  for (const auto& w : cache.windows) pool.ids.push_back(w.window_id);
  if (pool.ids.empty()) throw Error(ErrorKind::value, "pool cache has no windows");
  pool.vectors = encode_batch(cache.windows, ck.params, ck.encoder);
  const auto ranked = rank_pool(query.window_id, query.vector, pool, pool.ids.front());

  json results = json::array();
  const std::size_t k = std::min(a.top_k, pool.size());
  for (std::size_t r = 0; r < k; ++r) {
    const auto& id = ranked.ranked_pool_ids[r];
    const auto idx = static_cast<std::size_t>(std::find(pool.ids.begin(), pool.ids.end(), id) - pool.ids.begin());
    double score = 0.0;
    for (std::size_t d = 0; d < query.vector.size(); ++d) score += query.vector[d] * pool.vectors.at(idx, d);
    results.push_back(json{{"window_id", id}, {"score", round6(score)}});
  }
  emit(json{{"query_id", query.window_id}, {"modality", to_string(query.modality)}, {"results", results}});
  return 0;
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  SynthConfig config;
  std::string out_dir;
};

int cmd_synth(const SynthArgs& a) {
  if (a.config.n_windows < 1 || a.config.n_classes < 1 || a.config.dim < 1 || a.config.samples < 2 ||
      !(a.config.noise >= 0.0)) {
    throw Error(ErrorKind::value, "synth: n, classes, dim must be >= 1, samples >= 2 and noise >= 0");
  }
  const auto corpus = synth_corpus(a.config);
  const fs::path out(a.out_dir);
  fs::create_directories(out / "imu");

  std::vector<std::string> csvs;
  for (const auto& w : corpus.dataset.windows) {
    ImuStream s;
    s.source_id = w.source_id;
    s.sample_rate_hz = a.config.sample_rate_hz;
    for (std::size_t t = 0; t < w.length(); ++t) {
      ImuSample sample;
      sample.t = static_cast<double>(t) / a.config.sample_rate_hz;
      for (std::size_t c = 0; c < kImuChannels; ++c) sample.values[c] = w.signal.at(c, t);
      s.samples.push_back(sample);
    }
    const auto path = out / "imu" / (w.source_id + ".csv");
    write_imu_stream(s, path);
    csvs.push_back(path.string());
  }
  write_anchor_embeddings(corpus.video_anchor_list, out / "video_anchors.jsonl");
  write_anchor_embeddings(corpus.text_anchor_list, out / "text_anchors.jsonl");
  write_anchor_embeddings(corpus.class_anchors, out / "class_anchors.jsonl");
  LabelSet labels{corpus.dataset.class_names, *corpus.dataset.labels};
  write_labels(labels, out / "labels.jsonl");

  emit(json{{"out_dir", out.string()},
            {"n_windows", corpus.dataset.size()},
            {"classes", corpus.dataset.class_names},
            {"dim", a.config.dim},
            {"samples", a.config.samples},
            {"rate_hz", a.config.sample_rate_hz},
            {"window_s", static_cast<double>(a.config.samples) / a.config.sample_rate_hz},
            {"imu", csvs},
            {"video_anchors", (out / "video_anchors.jsonl").string()},
            {"text_anchors", (out / "text_anchors.jsonl").string()},
            {"class_anchors", (out / "class_anchors.jsonl").string()},
            {"labels", (out / "labels.jsonl").string()}});
  return 0;
}

void add_encoder_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--conv-channels", a.encoder.conv_channels, "Output channels per conv layer")
      ->capture_default_str();
  cmd->add_option("--conv-kernels", a.encoder.conv_kernels, "Kernel size per conv layer")->capture_default_str();
  cmd->add_option("--conv-strides", a.encoder.conv_strides, "Stride per conv layer")->capture_default_str();
  cmd->add_option("--pool-kernel", a.encoder.pool_kernel, "Max-pool kernel (and stride)")->capture_default_str();
  cmd->add_option("--gru-hidden", a.encoder.gru_hidden, "GRU hidden size")->capture_default_str();
  cmd->add_option("--embed-dim", a.embed_dim, "Embedding dimension (defaults to the anchor dimension)");
  cmd->add_option("--groupnorm-eps", a.encoder.groupnorm_eps, "GroupNorm epsilon")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Align IMU windows with frozen video/text anchor embeddings"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Window IMU CSV files into a cache");
  c_ingest->add_option("--imu", ingest.imu, "IMU CSV file(s)")->required();
  c_ingest->add_option("--window-s", ingest.params.window_s, "Window length in seconds")->capture_default_str();
  c_ingest->add_option("--stride-s", ingest.params.stride_s, "Window stride in seconds")->capture_default_str();
  c_ingest->add_option("--rate-hz", ingest.params.rate_hz, "Resampling rate")->capture_default_str();
  c_ingest->add_option("--out", ingest.out, "Output cache file")->required();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Contrastively train the IMU encoder against anchors");
  c_train->add_option("--cache", train.cache, "Window cache from ingest")->required();
  c_train->add_option("--video-anchors", train.video_anchors, "Video anchor JSONL");
  c_train->add_option("--text-anchors", train.text_anchors, "Text anchor JSONL");
  c_train->add_option("--mode", train.mode, "iv, it or ivt")->capture_default_str();
  c_train->add_option("--epochs", train.config.epochs, "Total epochs")->capture_default_str();
  c_train->add_option("--seed", train.config.seed, "Seed for init and batching")->capture_default_str();
  c_train->add_option("--batch-size", train.config.batch_size, "Batch size")->capture_default_str();
  c_train->add_option("--lr", train.config.learning_rate, "Adagrad learning rate")->capture_default_str();
  c_train->add_option("--eps", train.config.adagrad_eps, "Adagrad epsilon")->capture_default_str();
  c_train->add_option("--decay", train.config.decay, "Per-epoch learning-rate decay")->capture_default_str();
  c_train->add_option("--temperature", train.config.temperature, "Softmax temperature")->capture_default_str();
  c_train->add_option("--min-coverage", train.min_coverage, "Fraction of windows that must have anchors")
      ->capture_default_str();
  c_train->add_option("--resume", train.resume, "Checkpoint to continue from");
  c_train->add_option("--run-dir", train.run_dir, "Run directory")->required();
  add_encoder_flags(c_train, train);

  RetrievalArgs retrieval;
  auto* c_eval_r = app.add_subcommand("eval-retrieval", "Recall@k and MRR over the full window pool");
  c_eval_r->add_option("--ckpt", retrieval.ckpt, "Checkpoint")->required();
  c_eval_r->add_option("--cache", retrieval.cache, "Window cache")->required();
  c_eval_r->add_option("--anchors", retrieval.anchors, "Anchor JSONL for the non-IMU side")->required();
  c_eval_r->add_option("--direction", retrieval.direction, "text2imu, imu2video, video2imu or imu2text")->required();

  ClassifyArgs classify;
  auto* c_eval_c = app.add_subcommand("eval-classify", "Zeroshot, probe or fine-tune classification");
  c_eval_c->add_option("--ckpt", classify.ckpt, "Checkpoint")->required();
  c_eval_c->add_option("--cache", classify.cache, "Window cache")->required();
  c_eval_c->add_option("--labels", classify.labels, "Labels JSONL")->required();
  c_eval_c->add_option("--protocol", classify.protocol, "zeroshot, probe or finetune")->required();
  c_eval_c->add_option("--class-anchors", classify.class_anchors, "Anchor JSONL keyed by class name");
  c_eval_c->add_option("--run-dir", classify.run_dir, "Output directory (default: <ckpt dir>/<protocol>)");
  c_eval_c->add_option("--epochs", classify.probe.epochs, "Training epochs")->capture_default_str();
  c_eval_c->add_option("--batch-size", classify.probe.batch_size, "Batch size")->capture_default_str();
  c_eval_c->add_option("--head-lr", classify.probe.head_lr, "Head learning rate")->capture_default_str();
  c_eval_c->add_option("--encoder-lr", classify.probe.encoder_lr, "Encoder learning rate (finetune)")
      ->capture_default_str();
  c_eval_c->add_option("--seed", classify.probe.seed, "Head init and batching seed")->capture_default_str();

  RetrieveArgs retrieve;
  auto* c_retrieve = app.add_subcommand("retrieve", "Rank pool windows against an anchor query");
  c_retrieve->add_option("--ckpt", retrieve.ckpt, "Checkpoint")->required();
  c_retrieve->add_option("--pool", retrieve.pool, "Window cache to search")->required();
  c_retrieve->add_option("--query-anchor", retrieve.query_anchor, "JSON anchor record or JSONL file")->required();
  c_retrieve->add_option("--query-id", retrieve.query_id, "Record to use from a JSONL query file");
  c_retrieve->add_option("--top-k", retrieve.top_k, "Results to return")->capture_default_str();

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic aligned corpus");
  c_synth->add_option("--seed", synth.config.seed, "Seed")->capture_default_str();
  c_synth->add_option("--n", synth.config.n_windows, "Number of windows")->capture_default_str();
  c_synth->add_option("--classes", synth.config.n_classes, "Number of classes")->capture_default_str();
  c_synth->add_option("--dim", synth.config.dim, "Anchor dimension")->capture_default_str();
  c_synth->add_option("--noise", synth.config.noise, "Anchor noise scale")->capture_default_str();
  c_synth->add_option("--samples", synth.config.samples, "Samples per window")->capture_default_str();
  c_synth->add_option("--out-dir", synth.out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*c_ingest) return cmd_ingest(ingest);
    if (*c_train) return cmd_train(train);
    if (*c_eval_r) return cmd_eval_retrieval(retrieval);
    if (*c_eval_c) return cmd_eval_classify(classify);
    if (*c_retrieve) return cmd_retrieve(retrieve);
    if (*c_synth) return cmd_synth(synth);
  } catch (const Error& e) {
    std::cerr << json{{"error", to_string(e.kind())}, {"message", e.what()}}.dump() << '\n';
    return e.kind() == ErrorKind::numeric ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "io"}, {"message", e.what()}}.dump() << '\n';
    return 2;
  }
  return 2;
}
