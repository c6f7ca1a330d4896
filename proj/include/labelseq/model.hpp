#pragma once

// Decoder-only causal transformer over item/control token streams.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "labelseq/tasks.hpp"
#include "labelseq/tensor.hpp"

namespace labelseq {

enum class OrderEncoding { kLabel, kSinusoidal, kLearnable };
std::string_view encoding_name(OrderEncoding e);
std::optional<OrderEncoding> parse_encoding(std::string_view name);

// Readout classes of the control head: the six tasks, EOS, and "an item
// comes next".
inline constexpr int kControlClasses = kControlVocab + 1;
inline constexpr int kItemFollowsClass = kControlVocab;

struct ModelConfig {
  std::vector<int> heads_per_layer{1, 1};
  int d_model = 128;
  int d_mlp = 64;
  OrderEncoding encoding = OrderEncoding::kLabel;
  // Size of the label vocabulary; also the number of label readout classes.
  // In positional modes the readout predicts input positions instead.
  int n_labels = 50;
  // Rows of the learned position table (learnable mode only).
  int position_table = 50;
  TaskMode task_mode = TaskMode::kSingle;

  std::size_t n_layers() const { return heads_per_layer.size(); }
  void validate() const;  // throws ConfigError
  std::size_t parameter_count() const;
  std::string arch_string() const;  // "[1,4]"

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Named trainable tensors in a fixed registration order.
class ParameterSet {
 public:
  void add(std::string name, Tensor t);
  Tensor& get(std::string_view name);
  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return tensors_.size(); }
  std::size_t total_elements() const;
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  void zero_grad();
  // Deep copy with fresh storage.
  ParameterSet clone() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

// Which key positions a query may keep attending to after softmax.
enum class KeepPolicy {
  kAll,
  kTaskTokens,        // task control tokens
  kNextOutput,        // source of the ground-truth next output token
  kTaskOrNextOutput,  // union of the two
};
std::string_view keep_policy_name(KeepPolicy p);

struct AblationSpec {
  std::string name = "none";
  std::vector<std::pair<int, int>> dropped_heads;  // (layer, head)
  std::map<int, KeepPolicy> preserve;              // layer -> keep-set policy

  static AblationSpec none();
  static AblationSpec drop_head(int layer, int head);
  static AblationSpec preserve_tokens(std::map<int, KeepPolicy> rules,
                                      std::string name);
  bool is_none() const { return dropped_heads.empty() && preserve.empty(); }
  void validate(const ModelConfig& config) const;  // throws ConfigError
};

// One packed sequence for a forward pass.
struct StreamInput {
  std::span<const Token> tokens;
  // Per stream position: index of the key holding the ground-truth next
  // output token's source, or -1. Needed only by next-output keep policies.
  std::span<const int> next_source;
};

// Per-position next-output source indices for a teacher-forced stream.
std::vector<int> next_source_positions(const EncodedEpisode& enc,
                                       std::size_t stream_length);

struct LayerTrace {
  std::size_t n_heads = 0;
  // [segment * n_heads + head] -> row-major [len, len]
  std::vector<std::vector<double>> pre;   // after softmax
  std::vector<std::vector<double>> post;  // after ablation mask
};

struct AttentionTrace {
  std::vector<Segment> segments;
  std::vector<LayerTrace> layers;

  // Weight from query q to key k of one sequence.
  double weight(std::size_t layer, std::size_t segment, std::size_t head,
                std::size_t q, std::size_t k, bool post = false) const;
};

struct ForwardOptions {
  bool trace = false;
  bool keep_layer_outputs = false;
  // Packed row indices to read out; all rows when empty.
  std::vector<std::size_t> readout_rows;
};

struct ForwardOutput {
  std::vector<Segment> segments;
  std::vector<std::size_t> readout_rows;  // packed row per readout row
  Tensor item_logits;     // [rows, 15]: three 5-way groups
  Tensor label_logits;    // [rows, n_labels]
  Tensor control_logits;  // [rows, 8]
  AttentionTrace trace;
  std::vector<Tensor> layer_outputs;  // [N, d_model] after each layer
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t init_seed);
  Model(ModelConfig config, ParameterSet params);

  const ModelConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // Stream embeddings, [N, d_model] for the packed batch.
  Tensor embed(Tape& tape, std::span<const StreamInput> batch) const;
  ForwardOutput forward(Tape& tape, std::span<const StreamInput> batch,
                        const AblationSpec& ablation = AblationSpec::none(),
                        const ForwardOptions& options = {}) const;

  // Order id used for embedding and label readout of a token.
  int order_id(const Token& t) const;

 private:
  std::vector<std::vector<double>> build_masks(
      std::size_t layer, std::span<const StreamInput> batch,
      const AblationSpec& ablation) const;

  ModelConfig config_;
  ParameterSet params_;
};

std::vector<double> sinusoidal_encoding(int position, int d_model);

// Checkpoint: <stem>.json manifest + <stem>.bin little-endian float64 blob.
struct CheckpointInfo {
  ModelConfig config;
  std::int64_t step = 0;
  nlohmann::json metrics = nlohmann::json::object();
};
void save_checkpoint(const std::filesystem::path& stem, const Model& model,
                     std::int64_t step, const nlohmann::json& metrics);
Model load_checkpoint(const std::filesystem::path& stem,
                      CheckpointInfo* info = nullptr);

}  // namespace labelseq
