#include "imu_align/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "imu_align/error.hpp"
#include "imu_align/ops.hpp"
#include "imu_align/parallel.hpp"
#include "imu_align/train.hpp"

namespace imu_align {

using nlohmann::json;

double round6(double v) { return std::round(v * 1e6) / 1e6; }

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

std::span<const double> row(const Tensor& m, std::size_t i) {
  return std::span<const double>(m.data()).subspan(i * m.dim(1), m.dim(1));
}

void require_nonempty(std::span<const RetrievalResult> results, const char* what) {
  if (results.empty()) throw Error(ErrorKind::value, std::string(what) + ": no retrieval results");
}

std::size_t argmax_first(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k) {
    if (scores[k] > scores[best]) best = k;
  }
  return best;
}

std::vector<std::size_t> checked_labels(const ParallelDataset& dataset) {
  auto golds = gold_labels(dataset);
  if (dataset.class_names.size() < 2 ||
      std::all_of(golds.begin(), golds.end(), [&](std::size_t g) { return g == golds.front(); })) {
    throw Error(ErrorKind::value, "classifier training needs at least two distinct classes in the labels");
  }
  return golds;
}

// One Adagrad step of softmax cross-entropy on a batch of (already recorded) embedding rows.
Var head_loss(Tape& tape, Var embeddings, Var weight, Var bias, std::span<const std::size_t> targets) {
  return ops::softmax_cross_entropy(tape, ops::linear(tape, embeddings, weight, bias), targets);
}

std::size_t effective_batch(const ProbeConfig& config, std::size_t n) {
  if (config.batch_size == 0) throw Error(ErrorKind::value, "probe batch size must be positive");
  return std::min(config.batch_size, n);
}

}  // namespace

// ---- retrieval ------------------------------------------------------------

RetrievalResult rank_pool(std::string query_id, std::span<const double> query, const EmbeddingPool& pool,
                          const std::string& gold_id) {
  if (pool.vectors.rank() != 2 || pool.vectors.dim(0) != pool.ids.size()) {
    throw Error(ErrorKind::shape, "rank_pool: pool has " + std::to_string(pool.ids.size()) + " ids but vectors " +
                                      shape_to_string(pool.vectors.shape()));
  }
  if (pool.vectors.dim(1) != query.size()) {
    throw Error(ErrorKind::shape, "rank_pool: query dim " + std::to_string(query.size()) + " vs pool dim " +
                                      std::to_string(pool.vectors.dim(1)));
  }
  if (std::find(pool.ids.begin(), pool.ids.end(), gold_id) == pool.ids.end()) {
    throw Error(ErrorKind::coverage, "rank_pool: gold id " + gold_id + " not in pool");
  }
  std::vector<double> scores(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) scores[i] = dot(query, row(pool.vectors, i));
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return pool.ids[a] < pool.ids[b];
  });
  RetrievalResult out;
  out.query_id = std::move(query_id);
  out.ranked_pool_ids.reserve(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    out.ranked_pool_ids.push_back(pool.ids[order[r]]);
    if (pool.ids[order[r]] == gold_id && out.gold_rank == 0) out.gold_rank = r + 1;
  }
  return out;
}

double recall_at_k(std::span<const RetrievalResult> results, std::size_t k) {
  if (k == 0) throw Error(ErrorKind::value, "recall_at_k: k must be >= 1");
  require_nonempty(results, "recall_at_k");
  const auto hits = std::count_if(results.begin(), results.end(), [k](const auto& r) { return r.gold_rank <= k; });
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double mrr(std::span<const RetrievalResult> results) {
  require_nonempty(results, "mrr");
  double acc = 0.0;
  for (const auto& r : results) acc += 1.0 / static_cast<double>(r.gold_rank);
  return acc / static_cast<double>(results.size());
}

std::string_view to_string(RetrievalDirection d) {
  switch (d) {
    case RetrievalDirection::text2imu: return "text2imu";
    case RetrievalDirection::imu2video: return "imu2video";
    case RetrievalDirection::video2imu: return "video2imu";
    case RetrievalDirection::imu2text: return "imu2text";
  }
  return "unknown";
}

RetrievalDirection parse_retrieval_direction(std::string_view text) {
  for (auto d : {RetrievalDirection::text2imu, RetrievalDirection::imu2video, RetrievalDirection::video2imu,
                 RetrievalDirection::imu2text}) {
    if (text == to_string(d)) return d;
  }
  throw Error(ErrorKind::value, "unknown retrieval direction '" + std::string(text) +
                                    "' (expected text2imu, imu2video, video2imu or imu2text)");
}

Modality anchor_modality(RetrievalDirection d) {
  return d == RetrievalDirection::text2imu || d == RetrievalDirection::imu2text ? Modality::text : Modality::video;
}

json to_json(const RetrievalMetrics& m) {
  return json{{"task", "retrieval"},
              {"direction", to_string(m.direction)},
              {"R@1", round6(m.r1)},
              {"R@10", round6(m.r10)},
              {"R@50", round6(m.r50)},
              {"MRR", round6(m.mrr)},
              {"pool_size", m.pool_size},
              {"n_queries", m.n_queries},
              {"flags", m.flags}};
}

RetrievalMetrics eval_retrieval(const Tensor& imu, const std::vector<std::string>& imu_ids, const AnchorMap& anchors,
                                RetrievalDirection direction) {
  if (imu.rank() != 2 || imu.dim(0) != imu_ids.size()) {
    throw Error(ErrorKind::shape, "eval_retrieval: " + std::to_string(imu_ids.size()) + " ids for embeddings " +
                                      shape_to_string(imu.shape()));
  }
  if (imu_ids.empty()) throw Error(ErrorKind::value, "eval_retrieval: empty evaluation set");
  const Modality want = anchor_modality(direction);
  std::vector<std::string> missing;
  std::vector<double> anchor_data;
  for (const auto& id : imu_ids) {
    const auto it = anchors.find(id);
    if (it == anchors.end()) {
      missing.push_back(id);
      continue;
    }
    if (it->second.modality != want) {
      throw Error(ErrorKind::value, "eval_retrieval: direction " + std::string(to_string(direction)) + " needs " +
                                        std::string(to_string(want)) + " anchors, got " +
                                        std::string(to_string(it->second.modality)));
    }
    if (it->second.vector.size() != imu.dim(1)) {
      throw Error(ErrorKind::shape, "eval_retrieval: anchor dim " + std::to_string(it->second.vector.size()) +
                                        " vs embedding dim " + std::to_string(imu.dim(1)));
    }
    anchor_data.insert(anchor_data.end(), it->second.vector.begin(), it->second.vector.end());
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    throw Error(ErrorKind::coverage, "eval_retrieval: " + std::to_string(missing.size()) +
                                         " windows have no anchor: " + list);
  }
  const Tensor anchor_matrix = Tensor::matrix(imu_ids.size(), imu.dim(1), std::move(anchor_data));
  const bool imu_queries = direction == RetrievalDirection::imu2video || direction == RetrievalDirection::imu2text;
  const Tensor& queries = imu_queries ? imu : anchor_matrix;
  const EmbeddingPool pool{imu_ids, imu_queries ? anchor_matrix : imu};

  std::vector<RetrievalResult> results(imu_ids.size());
  parallel_for(imu_ids.size(),
               [&](std::size_t i) { results[i] = rank_pool(imu_ids[i], row(queries, i), pool, imu_ids[i]); });

  RetrievalMetrics m;
  m.direction = direction;
  m.r1 = recall_at_k(results, 1);
  m.r10 = recall_at_k(results, 10);
  m.r50 = recall_at_k(results, 50);
  m.mrr = mrr(results);
  m.pool_size = pool.size();
  m.n_queries = results.size();
  if (pool.size() < 50) m.flags.emplace_back("pool_lt_50");
  return m;
}

// ---- classification -------------------------------------------------------

ClassAnchors make_class_anchors(const AnchorMap& by_class, const std::vector<std::string>& class_names) {
  if (class_names.empty()) throw Error(ErrorKind::value, "class anchors: empty class list");
  ClassAnchors out;
  out.classes = class_names;
  std::vector<double> data;
  std::size_t dim = 0;
  std::vector<std::string> missing;
  for (const auto& name : class_names) {
    const auto it = by_class.find(name);
    if (it == by_class.end()) {
      missing.push_back(name);
      continue;
    }
    if (dim != 0 && it->second.vector.size() != dim) {
      throw Error(ErrorKind::shape, "class anchors: dimension mismatch at class " + name);
    }
    dim = it->second.vector.size();
    data.insert(data.end(), it->second.vector.begin(), it->second.vector.end());
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& n : missing) list += (list.empty() ? "" : ", ") + n;
    throw Error(ErrorKind::coverage, "class anchors missing for: " + list);
  }
  out.vectors = Tensor::matrix(class_names.size(), dim, std::move(data));
  return out;
}

ClassAnchors load_class_anchors(const std::filesystem::path& path, const std::vector<std::string>& class_names) {
  return make_class_anchors(load_anchor_embeddings(path), class_names);
}

std::size_t zeroshot_classify(std::span<const double> embedding, const ClassAnchors& anchors) {
  if (anchors.classes.empty()) throw Error(ErrorKind::value, "zeroshot_classify: empty class list");
  if (anchors.vectors.dim(1) != embedding.size()) {
    throw Error(ErrorKind::shape, "zeroshot_classify: embedding dim " + std::to_string(embedding.size()) +
                                      " vs anchor dim " + std::to_string(anchors.vectors.dim(1)));
  }
  std::vector<double> scores(anchors.classes.size());
  for (std::size_t k = 0; k < scores.size(); ++k) scores[k] = dot(embedding, row(anchors.vectors, k));
  return argmax_first(scores);
}

ClassifierHead init_head(const std::vector<std::string>& class_names, std::size_t dim, std::uint64_t seed) {
  if (class_names.empty() || dim == 0) throw Error(ErrorKind::value, "init_head: need classes and a positive dim");
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  ClassifierHead head{Tensor({class_names.size(), dim}), Tensor({class_names.size()}, 0.0), class_names};
  for (auto& v : head.weight.data()) v = dist(rng);
  return head;
}

std::vector<std::size_t> predict(const ClassifierHead& head, const Tensor& embeddings) {
  if (embeddings.rank() != 2 || embeddings.dim(1) != head.weight.dim(1)) {
    throw Error(ErrorKind::shape, "predict: embeddings " + shape_to_string(embeddings.shape()) + " vs head " +
                                      shape_to_string(head.weight.shape()));
  }
  const std::size_t k = head.weight.dim(0);
  std::vector<std::size_t> out(embeddings.dim(0));
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t c = 0; c < k; ++c) logits[c] = dot(row(embeddings, i), row(head.weight, c)) + head.bias[c];
    out[i] = argmax_first(logits);
  }
  return out;
}

std::vector<std::size_t> gold_labels(const ParallelDataset& dataset) {
  std::vector<std::size_t> out(dataset.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dataset.label_index(i);
  return out;
}

ClassifierHead train_probe(const ParallelDataset& dataset, const EncoderParams& params, const EncoderConfig& encoder,
                           const ProbeConfig& config) {
  const auto golds = checked_labels(dataset);
  const Tensor embeddings = encode_batch(dataset.windows, params, encoder);
  ClassifierHead head = init_head(dataset.class_names, encoder.embed_dim, config.seed);
  std::vector<Tensor*> trainable{&head.weight, &head.bias};
  auto state = AdagradState::zeros_like(std::vector<const Tensor*>{&head.weight, &head.bias});
  const std::size_t b = effective_batch(config, dataset.size());

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& batch : make_batches(dataset.size(), b, config.seed, epoch)) {
      head.weight.zero_grad();
      head.bias.zero_grad();
      std::vector<double> rows;
      std::vector<std::size_t> targets;
      for (auto idx : batch) {
        const auto r = row(embeddings, idx);
        rows.insert(rows.end(), r.begin(), r.end());
        targets.push_back(golds[idx]);
      }
      Tape tape;
      const Var x = tape.constant(Tensor::matrix(batch.size(), encoder.embed_dim, std::move(rows)));
      const Var loss = head_loss(tape, x, tape.parameter(head.weight), tape.parameter(head.bias), targets);
      tape.backward(loss);
      adagrad_step(trainable, state, config.head_lr, config.adagrad_eps);
    }
  }
  head.weight.clear_grad();
  head.bias.clear_grad();
  return head;
}

FineTuneResult fine_tune(const ParallelDataset& dataset, EncoderParams params, ClassifierHead head,
                         const EncoderConfig& encoder, const ProbeConfig& config) {
  const auto golds = checked_labels(dataset);
  if (head.weight.dim(0) != dataset.class_names.size() || head.weight.dim(1) != encoder.embed_dim) {
    throw Error(ErrorKind::shape, "fine_tune: head " + shape_to_string(head.weight.shape()) + " does not fit " +
                                      std::to_string(dataset.class_names.size()) + " classes x " +
                                      std::to_string(encoder.embed_dim));
  }
  auto enc_tensors = params.tensors();
  auto enc_state = AdagradState::zeros_like(std::vector<const Tensor*>(enc_tensors.begin(), enc_tensors.end()));
  std::vector<Tensor*> head_tensors{&head.weight, &head.bias};
  auto head_state = AdagradState::zeros_like(std::vector<const Tensor*>{&head.weight, &head.bias});
  const std::size_t b = effective_batch(config, dataset.size());

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& batch : make_batches(dataset.size(), b, config.seed, epoch)) {
      params.zero_grad();
      head.weight.zero_grad();
      head.bias.zero_grad();
      Tape tape;
      const auto vars = bind_params(tape, params, true);
      std::vector<Var> rows;
      std::vector<std::size_t> targets;
      for (auto idx : batch) {
        rows.push_back(encode_on_tape(tape, vars, encoder, dataset.windows[idx].signal));
        targets.push_back(golds[idx]);
      }
      const Var x = ops::stack_rows(tape, rows);
      const Var loss = head_loss(tape, x, tape.parameter(head.weight), tape.parameter(head.bias), targets);
      if (!std::isfinite(tape.value(loss)[0])) {
        throw Error(ErrorKind::numeric, "fine_tune: non-finite loss at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      adagrad_step(enc_tensors, enc_state, config.encoder_lr, config.adagrad_eps);
      adagrad_step(head_tensors, head_state, config.head_lr, config.adagrad_eps);
    }
  }
  for (auto* t : enc_tensors) t->clear_grad();
  head.weight.clear_grad();
  head.bias.clear_grad();
  return {std::move(params), std::move(head)};
}

json to_json(const ClassificationMetrics& m) {
  json per_class = json::object();
  for (std::size_t k = 0; k < m.class_names.size(); ++k) per_class[m.class_names[k]] = round6(m.per_class_f1[k]);
  return json{{"accuracy", round6(m.accuracy)}, {"macro_f1", round6(m.macro_f1)}, {"per_class_f1", per_class},
              {"n", m.n}};
}

ClassificationMetrics classification_metrics(std::span<const std::size_t> predictions,
                                             std::span<const std::size_t> golds,
                                             const std::vector<std::string>& class_names) {
  if (predictions.size() != golds.size()) {
    throw Error(ErrorKind::shape, "classification_metrics: " + std::to_string(predictions.size()) +
                                      " predictions vs " + std::to_string(golds.size()) + " labels");
  }
  if (golds.empty()) throw Error(ErrorKind::value, "classification_metrics: no examples");
  const std::size_t k = class_names.size();
  std::vector<std::size_t> tp(k), fp(k), fn(k);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (predictions[i] >= k || golds[i] >= k) {
      throw Error(ErrorKind::value, "classification_metrics: class index out of range at example " +
                                        std::to_string(i));
    }
    if (predictions[i] == golds[i]) {
      ++correct;
      ++tp[golds[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[golds[i]];
    }
  }
  ClassificationMetrics m;
  m.class_names = class_names;
  m.n = golds.size();
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.n);
  m.per_class_f1.resize(k);
  double sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    m.per_class_f1[c] = denom > 0.0 ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
    sum += m.per_class_f1[c];
  }
  m.macro_f1 = k > 0 ? sum / static_cast<double>(k) : 0.0;
  return m;
}

}  // namespace imu_align
