#pragma once

// Interpretability procedures over trained models: attention maps, attention
// profiles within groups, embedding geometry, ablations and PCA of
// task-conditioned item representations.

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "labelseq/evaluation.hpp"
#include "labelseq/model.hpp"

namespace labelseq {

// ---------------------------------------------------------------------------
// Attention maps

// Display order of a teacher-forced stream: input items are permuted into
// target order, everything else keeps its position. order[display] = stream.
std::vector<std::size_t> output_order_permutation(const EncodedEpisode& enc,
                                                  std::size_t stream_length);

// M'[a][b] = M[perm[a]][perm[b]] for a row-major n x n matrix.
std::vector<double> permute_square(std::span<const double> m,
                                   std::span<const std::size_t> perm);

struct HeadMap {
  int layer = 0;
  int head = 0;
  std::vector<double> weights;  // row-major [n, n]
};

struct AttentionMaps {
  std::size_t n = 0;
  std::vector<Token> tokens;        // in display order
  std::vector<std::size_t> order;   // display index -> stream index
  std::vector<std::size_t> group_starts;  // display indices opening a group
  bool post_ablation = false;
  std::vector<HeadMap> heads;
};

AttentionMaps attention_maps(const Model& model, const EncodedEpisode& enc,
                             bool reorder_to_output,
                             const AblationSpec& ablation = AblationSpec::none());

nlohmann::json attention_maps_json(const AttentionMaps& maps, TaskId task);
std::string token_string(const Token& t);

// One layer's attention for one teacher-forced episode, row-major [n, n]
// over the model stream.
struct EpisodeAttention {
  const EncodedEpisode* episode = nullptr;
  std::size_t n = 0;
  std::vector<double> weights;
};

// head < 0 averages the layer's heads.
std::vector<EpisodeAttention> collect_attention(const Model& model,
                                                std::span<const EncodedEpisode> episodes,
                                                int layer, int head = -1,
                                                std::size_t batch_size = 64);

// Queries are output-side item positions; keys are input items sharing the
// query item's first-level feature value. Both are indexed by their rank
// within that group in output order.
struct WithinGroupAttention {
  std::size_t size = 0;             // largest within-group index + 1
  std::vector<double> mean;         // [size, size], NaN where count is 0
  std::vector<std::size_t> count;   // [size, size]
  // Mean over queries of (mass on same-group input items) / (mass on all
  // input items).
  double same_group_fraction = 0.0;
};

WithinGroupAttention within_group_attention(std::span<const EpisodeAttention> attn);

// Attention from output-side item queries to the input EOS, by the query
// item's first-level group and within-group index. Bins with no queries are
// absent.
struct EosProfile {
  std::map<int, std::map<int, double>> mean;        // group -> index -> mean
  std::map<int, std::map<int, std::size_t>> count;  // same keys
};

EosProfile eos_attention_profile(std::span<const EpisodeAttention> attn);

// ---------------------------------------------------------------------------
// Embedding geometry

// Dot products of the 15 item-embedding vectors, ordered s1..s5, c1..c5,
// t1..t5.
std::vector<double> embedding_similarity(const ParameterSet& params);

struct GaussianGrid {
  double sigma_min = 0.1;
  double sigma_max = 10.0;
  double sigma_step = 0.01;
};

struct GaussianFit {
  double sigma = 0.0;
  double amplitude = 0.0;
  double loss = 0.0;
  bool infinite_sigma = false;  // all-zero similarity block
};

// Fits a * exp(-(i-j)^2 / (2 sigma^2)) to a 5 x 5 similarity block; the loss
// is the mean squared error over the 15 unordered pairs with i <= j.
GaussianFit fit_gaussian_kernel(std::span<const double> sim25,
                                const GaussianGrid& grid = {});
// Similarities from five vectors, then the kernel fit.
GaussianFit gaussian_order_fit(std::span<const std::vector<double>> vectors,
                               const GaussianGrid& grid = {});
// One fit per feature (shape, color, texture) of the item embedding.
std::vector<GaussianFit> feature_gaussian_fits(const ParameterSet& params,
                                               const GaussianGrid& grid = {});

// Cosine similarity of the six task embeddings, [6, 6].
std::vector<double> task_embedding_similarity(const ParameterSet& params);

// ---------------------------------------------------------------------------
// Ablations

// Each single-head drop, then taskL0, nextL1 and taskL0+nextL1 for two-layer
// models.
std::vector<AblationSpec> canonical_ablation_specs(const ModelConfig& config);

struct AblationRow {
  std::string spec;
  TaskId task = TaskId::kCopy;
  DecodeMode mode = DecodeMode::kTeacherForcing;
  SliceStats stats;
};

std::vector<AblationRow> ablation_sweep(const Model& model,
                                        std::span<const EvalEpisode> episodes,
                                        std::span<const AblationSpec> specs,
                                        const EvalOptions& options = {});
std::string ablation_csv(std::span<const AblationRow> rows);

// ---------------------------------------------------------------------------
// Task-conditioned representations

struct RepresentationSummary {
  TaskId task = TaskId::kCopy;
  int layer = 0;
  std::size_t dim = 0;
  std::vector<double> means;        // [25, dim], pair = shape * 5 + color
  std::vector<std::size_t> counts;  // [25]
};

// Mean output of `layer` (after its last layer norm) at input-side item
// positions, per shape x color pair. Every episode must carry the same task.
RepresentationSummary task_conditioned_reps(const Model& model,
                                            std::span<const EncodedEpisode> episodes,
                                            int layer, std::size_t batch_size = 64);

// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
// Eigenvalues descending; vectors[k] is the unit eigenvector of values[k].
struct SymmetricEigen {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
};
SymmetricEigen jacobi_eigen(std::span<const double> matrix, std::size_t n,
                            double tol = 1e-14, int max_sweeps = 100);

struct PCAResult {
  std::vector<double> mean;                     // [dim]
  std::vector<std::vector<double>> components;  // orthonormal, [k][dim]
  std::vector<double> explained_variance;       // [k], non-increasing
  std::vector<double> explained_ratio;          // [k]
  std::vector<std::vector<double>> projections; // [rows][k]
};

// rows: [n_rows][dim]. The first nonzero coordinate of each component is
// positive.
PCAResult pca(const std::vector<std::vector<double>>& rows,
              std::size_t n_components = 2);
// PCA over the observed pairs of a summary; returns the pair indices used.
PCAResult pca(const RepresentationSummary& summary, std::size_t n_components,
              std::vector<int>* pairs = nullptr);

// ---------------------------------------------------------------------------
// Serialisation

std::string matrix_csv(std::span<const double> m, std::size_t n,
                       std::span<const std::string> labels);
std::string gaussian_fits_csv(std::span<const std::pair<std::int64_t, std::vector<GaussianFit>>> fits);
struct PCAEntry {
  RepresentationSummary summary;
  PCAResult result;
  std::vector<int> pairs;  // summary pair index of each projection row
};
std::string pca_csv(std::span<const PCAEntry> entries);
std::string pca_variance_csv(std::span<const PCAEntry> entries);
nlohmann::json within_group_json(const WithinGroupAttention& w, int layer, int head);
nlohmann::json eos_profile_json(const EosProfile& p, int layer, int head);

}  // namespace labelseq
