#pragma once

// Teacher-forced training loop, loss assembly and checkpoint selection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "labelseq/dataset.hpp"
#include "labelseq/model.hpp"
#include "labelseq/optimizer.hpp"

namespace labelseq {

struct TrainConfig {
  std::size_t batch_size = 128;
  std::int64_t steps = 32000;
  double learning_rate = 1e-4;
  std::int64_t eval_every = 500;
  std::uint64_t seed = 0;
  double tf_rate = 1.0;
  // Size of each fixed evaluation subsample drawn during training.
  std::size_t eval_sample = 1000;
  // Tasks to train on; one task in single-task mode.
  std::vector<TaskId> tasks{TaskId::kSortShape};

  void validate(TaskMode mode) const;  // throws ConfigError
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Uniform task draws for multi-task batches.
std::vector<TaskId> sample_tasks(std::span<const TaskId> tasks, std::size_t n,
                                 Rng& rng);

// A batch of teacher-forced streams. Streams are kept at their own length
// for the forward pass; the padded view (padded_length, loss_mask) records
// where a right-padded layout would hold real readouts.
struct Batch {
  TaskMode mode = TaskMode::kSingle;
  std::vector<EncodedEpisode> episodes;
  std::vector<std::vector<Token>> streams;
  std::vector<std::vector<int>> next_sources;
  std::size_t padded_length = 0;
  // [sequence][padded position]: 1 where the position's readout is scored.
  std::vector<std::vector<std::uint8_t>> loss_mask;

  // Packed readout rows and their targets (-1 = not scored).
  std::vector<std::size_t> rows;
  std::vector<std::size_t> row_sequence;
  std::vector<int> feature_targets;  // [rows, 3], value within the group
  std::vector<int> label_targets;
  std::vector<int> control_targets;

  std::size_t size() const { return streams.size(); }
  std::size_t n_output_tokens() const { return rows.size(); }
  std::vector<StreamInput> inputs() const;
};

// tasks[i] is applied to records[i].
Batch build_batch(std::span<const SequenceRecord* const> records,
                  std::span<const TaskId> tasks, TaskMode mode,
                  OrderEncoding encoding);

struct LossParts {
  Tensor total;  // mean over output tokens
  double features = 0.0;
  double label = 0.0;
  double control = 0.0;
  // Summed loss of each sequence's output tokens.
  std::vector<double> per_sequence;
};

LossParts batch_loss(Tape& tape, const Model& model, const Batch& batch);

// Forward, backward and one Adam update. Throws on a non-finite loss.
double training_step(Model& model, AdamState& adam, const Batch& batch);

struct LogEntry {
  std::int64_t step = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

struct CheckpointRef {
  std::int64_t step = 0;
  std::filesystem::path stem;
  double score = 0.0;
};

struct RunLog {
  std::vector<LogEntry> entries;
  std::vector<CheckpointRef> checkpoints;
  std::optional<CheckpointRef> best;

  std::string csv() const;  // step,split,metric,value
};

struct TrainResult {
  RunLog log;
  Model final_model;
};

using ProgressFn = std::function<void(const std::string&)>;

// Trains from `data`; checkpoints go to <out_dir>/checkpoints/, the log to
// <out_dir>/runlog.csv and the best pointer to <out_dir>/best.json. An empty
// out_dir disables all file output.
TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  const Dataset& data, const std::filesystem::path& out_dir,
                  const ProgressFn& progress = {});

// Resolves "best", "last", a step number, or a checkpoint stem within a run.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& run_dir,
                                         const std::string& which);

}  // namespace labelseq
