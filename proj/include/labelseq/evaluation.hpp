#pragma once

// Teacher-forced and greedy-rollout evaluation with token- and sequence-level
// metrics.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "labelseq/dataset.hpp"
#include "labelseq/model.hpp"

namespace labelseq {

enum class DecodeMode { kTeacherForcing, kRollout };
std::string_view decode_mode_name(DecodeMode m);  // "tf" / "rollout"

// Logits for a set of packed rows, row-major.
struct Readouts {
  std::size_t rows = 0;
  std::size_t n_labels = 0;
  std::vector<double> item;     // [rows, 15]
  std::vector<double> label;    // [rows, n_labels]
  std::vector<double> control;  // [rows, 8]
};

// Produces readouts at `rows` (packed indices) for a batch of streams.
using ReadoutFn = std::function<Readouts(std::span<const StreamInput>,
                                         const std::vector<std::size_t>& rows)>;

// A readout function plus how it encodes order (which token field the label
// readout predicts).
struct Predictor {
  ReadoutFn readout;
  OrderEncoding encoding = OrderEncoding::kLabel;
};

// The model must outlive the predictor.
Predictor model_predictor(const Model& model,
                          const AblationSpec& ablation = AblationSpec::none());

// A single decoded output token.
struct Prediction {
  std::array<int, kFeatures> features{};
  int order = 0;    // label, or input position in positional modes
  int control = 0;  // 0..7 (kItemFollowsClass means "item")
};
Prediction argmax_prediction(const Readouts& r, std::size_t row);

enum class TargetKind : std::uint8_t { kItem, kControl, kExtra };

struct TokenOutcome {
  std::int64_t sequence = 0;
  TaskId task = TaskId::kCopy;
  int length = 0;        // number of items in the sequence
  int output_index = 0;  // index in the output stream (control tokens included)
  int item_index = -1;   // index among output items, -1 otherwise
  TargetKind kind = TargetKind::kItem;
  int features_correct = 0;  // 0..3, items only
  bool label_correct = false;
  bool control_correct = false;
  bool eos_target = false;

  bool fully_correct() const {
    return kind == TargetKind::kItem && features_correct == kFeatures &&
           label_correct;
  }
};

struct SequenceRates {
  std::vector<double> thresholds;
  std::vector<double> rates;  // fraction of sequences meeting each threshold
  std::size_t n_sequences = 0;
};

// Per sequence, the fraction of fully correct item tokens (extra rollout
// tokens count as errors) compared against each threshold.
SequenceRates sequence_thresholds(std::span<const TokenOutcome> outcomes,
                                  std::vector<double> thresholds = {1.0, 0.95,
                                                                    0.90});

struct SliceStats {
  double item_accuracy = 0.0;
  double label_accuracy = 0.0;
  double eos_accuracy = 0.0;
  double control_accuracy = 0.0;
  std::size_t n_items = 0;
  std::size_t n_eos = 0;
  std::size_t n_control = 0;
  std::optional<SequenceRates> sequences;  // absent for position slices
};

SliceStats summarize(std::span<const TokenOutcome> outcomes,
                     bool with_sequences = true);

struct MetricReport {
  DecodeMode mode = DecodeMode::kTeacherForcing;
  std::vector<TokenOutcome> outcomes;
  SliceStats overall;
  std::map<int, SliceStats> by_length;
  std::map<int, SliceStats> by_position;  // item index in the output
  std::map<TaskId, SliceStats> by_task;
};

MetricReport build_report(DecodeMode mode, std::vector<TokenOutcome> outcomes);

struct EvalEpisode {
  std::int64_t id = 0;
  EncodedEpisode encoded;
};

std::vector<EvalEpisode> make_eval_episodes(
    std::span<const SequenceRecord> records, std::span<const TaskId> tasks,
    TaskMode mode);
// Assigns tasks[i % tasks.size()] to records[i].
std::vector<EvalEpisode> make_eval_episodes(
    std::span<const SequenceRecord* const> records,
    std::span<const TaskId> tasks, TaskMode mode);

struct EvalOptions {
  std::size_t batch_size = 64;
  std::size_t rollout_extra = 5;  // decode cap = target length + extra
};

MetricReport eval_teacher_forcing(const Predictor& predictor,
                                  std::span<const EvalEpisode> episodes,
                                  const EvalOptions& options = {});
MetricReport eval_rollout(const Predictor& predictor,
                          std::span<const EvalEpisode> episodes,
                          const EvalOptions& options = {});

// Raw decoded token sequences (outputs only) from greedy rollout.
std::vector<std::vector<Token>> rollout_tokens(const Predictor& predictor,
                                               std::span<const EvalEpisode> episodes,
                                               const EvalOptions& options = {});

// ---------------------------------------------------------------------------
// Protocols

struct EvalSets {
  TaskMode task_mode = TaskMode::kSingle;
  std::vector<TaskId> tasks;
  SampleSpec train_lengths;
  SampleSpec generalization_lengths;
  std::uint64_t seed = 0;
  const std::unordered_set<std::uint64_t>* exclude = nullptr;
};

struct ProtocolSpec {
  std::string id;
  std::size_t train_per_task = 0;
  std::size_t generalization_per_task = 0;
  bool teacher_forcing = true;
  bool rollout = false;
};

// "fig2", "fig5A", "fig5B", "fig6"; counts multiplied by scale.
ProtocolSpec protocol_spec(const std::string& id, double scale = 1.0);

struct ProtocolResult {
  std::string set;  // "train" or "generalization"
  MetricReport report;
};

struct ProtocolBundle {
  ProtocolSpec spec;
  std::vector<ProtocolResult> results;
};

ProtocolBundle run_protocol(const ProtocolSpec& spec, const Predictor& predictor,
                            const EvalSets& sets, const EvalOptions& options = {});

// Long CSV: protocol,task,mode,slice_type,slice_value,metric,value,n
std::string report_csv_header();
std::string report_csv_rows(const std::string& protocol,
                            const std::string& set, const MetricReport& report);
std::string bundle_csv(const ProtocolBundle& bundle);
// Raw outcomes as JSON lines.
std::string outcomes_jsonl(std::span<const TokenOutcome> outcomes);

}  // namespace labelseq
