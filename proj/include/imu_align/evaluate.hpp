#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "imu_align/encoder.hpp"
#include "imu_align/signal_io.hpp"
#include "imu_align/tensor.hpp"

namespace imu_align {

// ---- retrieval ------------------------------------------------------------

struct RetrievalResult {
  std::string query_id;
  std::vector<std::string> ranked_pool_ids;
  std::size_t gold_rank = 0;  // 1-based
};

/// N x D unit vectors with one id per row.
struct EmbeddingPool {
  std::vector<std::string> ids;
  Tensor vectors;

  std::size_t size() const noexcept { return ids.size(); }
};

/// Sorts the pool by inner product with `query`, descending; ties by ascending id.
RetrievalResult rank_pool(std::string query_id, std::span<const double> query, const EmbeddingPool& pool,
                          const std::string& gold_id);

double recall_at_k(std::span<const RetrievalResult> results, std::size_t k);
double mrr(std::span<const RetrievalResult> results);

enum class RetrievalDirection { text2imu, imu2video, video2imu, imu2text };
std::string_view to_string(RetrievalDirection d);
RetrievalDirection parse_retrieval_direction(std::string_view text);
/// The anchor modality on the non-IMU side of the direction.
Modality anchor_modality(RetrievalDirection d);

struct RetrievalMetrics {
  RetrievalDirection direction = RetrievalDirection::imu2video;
  double r1 = 0.0, r10 = 0.0, r50 = 0.0, mrr = 0.0;
  std::size_t pool_size = 0;
  std::size_t n_queries = 0;
  std::vector<std::string> flags;  // "pool_lt_50" when R@50 is exhaustive
};

nlohmann::json to_json(const RetrievalMetrics& m);

/// `imu` rows pair with `imu_ids`; each id must have an anchor with the same window_id.
/// One side supplies the queries, the other the full pool.
RetrievalMetrics eval_retrieval(const Tensor& imu, const std::vector<std::string>& imu_ids, const AnchorMap& anchors,
                                RetrievalDirection direction);

// ---- classification -------------------------------------------------------

/// One unit vector per class, rows in declared class order.
struct ClassAnchors {
  std::vector<std::string> classes;
  Tensor vectors;  // K x D
};

/// Reads anchor JSONL whose window_id fields are class names and orders the rows by `class_names`.
ClassAnchors load_class_anchors(const std::filesystem::path& path, const std::vector<std::string>& class_names);
ClassAnchors make_class_anchors(const AnchorMap& by_class, const std::vector<std::string>& class_names);

/// Nearest class anchor by inner product; ties go to the earlier class.
std::size_t zeroshot_classify(std::span<const double> embedding, const ClassAnchors& anchors);

struct ClassifierHead {
  Tensor weight;  // K x D
  Tensor bias;    // K
  std::vector<std::string> class_names;
};

ClassifierHead init_head(const std::vector<std::string>& class_names, std::size_t dim, std::uint64_t seed);
/// argmax of W x + b per row of `embeddings`; ties go to the earlier class.
std::vector<std::size_t> predict(const ClassifierHead& head, const Tensor& embeddings);

struct ProbeConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;  // clamped to the dataset size
  double head_lr = 0.1;
  double encoder_lr = 0.01;  // fine-tuning only
  double adagrad_eps = 1e-8;
  std::uint64_t seed = 0;
};

/// Linear head on frozen embeddings, softmax cross-entropy + Adagrad.
ClassifierHead train_probe(const ParallelDataset& dataset, const EncoderParams& params, const EncoderConfig& encoder,
                           const ProbeConfig& config);

struct FineTuneResult {
  EncoderParams params;
  ClassifierHead head;
};

/// Encoder and head trained jointly from `params` and `head`.
FineTuneResult fine_tune(const ParallelDataset& dataset, EncoderParams params, ClassifierHead head,
                         const EncoderConfig& encoder, const ProbeConfig& config);

struct ClassificationMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  std::vector<std::string> class_names;
  std::size_t n = 0;
};

nlohmann::json to_json(const ClassificationMetrics& m);

/// Predictions and golds are indices into class_names. A class absent from both has F1 0.
ClassificationMetrics classification_metrics(std::span<const std::size_t> predictions,
                                             std::span<const std::size_t> golds,
                                             const std::vector<std::string>& class_names);

/// Gold label indices of every window in a labeled dataset.
std::vector<std::size_t> gold_labels(const ParallelDataset& dataset);

/// Rounds to 6 decimal places for JSON output.
double round6(double v);

}  // namespace imu_align
