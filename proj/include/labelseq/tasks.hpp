#pragma once

// Items, the six rearrangement tasks and their reference orderings, and the
// token streams a model consumes.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace labelseq {

inline constexpr int kFeatureValues = 5;
inline constexpr int kFeatures = 3;
inline constexpr int kItemDims = kFeatures * kFeatureValues;  // 15
inline constexpr int kPoolSize = 125;
inline constexpr int kNumTasks = 6;
inline constexpr int kControlVocab = kNumTasks + 1;  // tasks + EOS
inline constexpr int kEosControl = kNumTasks;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EncodingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Feature indices follow the predefined sort order (0 sorts first).
struct Item {
  int shape = 0;
  int color = 0;
  int texture = 0;

  int feature(int f) const { return f == 0 ? shape : f == 1 ? color : texture; }
  int pool_index() const { return (shape * 5 + color) * 5 + texture; }
  bool valid() const;
  friend bool operator==(const Item&, const Item&) = default;
};

struct LabeledItem {
  Item item;
  int label = 0;
  friend bool operator==(const LabeledItem&, const LabeledItem&) = default;
};

enum class TaskId : std::uint8_t {
  kCopy = 0,
  kReverse = 1,
  kGroupShape = 2,
  kGroupColor = 3,
  kSortShape = 4,
  kSortColor = 5,
};

inline constexpr std::array<TaskId, kNumTasks> kAllTasks = {
    TaskId::kCopy,       TaskId::kReverse,   TaskId::kGroupShape,
    TaskId::kGroupColor, TaskId::kSortShape, TaskId::kSortColor};

std::string_view task_name(TaskId task);  // "C", "R", "G[s]", ...
std::optional<TaskId> parse_task(std::string_view name);
inline int task_index(TaskId t) { return static_cast<int>(t); }

// Feature that defines the top-level groups of a task's output, if any.
std::optional<int> first_level_feature(TaskId task);

std::vector<Item> build_item_pool();

// Output order as indices into the input: result[j] is the input position of
// the j-th output item. All orderings are stable.
std::vector<std::size_t> task_permutation(TaskId task,
                                          std::span<const LabeledItem> input);
std::vector<LabeledItem> apply_task(TaskId task,
                                    std::span<const LabeledItem> input);

struct Episode {
  TaskId task = TaskId::kCopy;
  std::vector<LabeledItem> input;
  std::vector<LabeledItem> target;
  std::vector<std::size_t> source;  // target[j] == input[source[j]]
};

Episode make_episode(TaskId task, std::vector<LabeledItem> input);

// ---------------------------------------------------------------------------
// Token streams

enum class TaskMode { kSingle, kMulti };

enum class TokenKind : std::uint8_t { kItem, kControl };

struct Token {
  TokenKind kind = TokenKind::kItem;
  Item item;
  int label = -1;     // item label, -1 for control tokens
  int position = -1;  // input index of the item, -1 for control tokens
  int control = -1;   // 0..5 task, 6 EOS; -1 for items

  static Token item_token(const LabeledItem& li, int position);
  static Token control_token(int control);
  bool is_item() const { return kind == TokenKind::kItem; }
};

std::array<double, kItemDims> item_multihot(const Item& item);
std::array<double, kControlVocab> control_onehot(int control);

// input:  [task] items [EOS]          target: [task] items [EOS]
// The task token is present only in multi-task mode.
struct EncodedEpisode {
  TaskMode mode = TaskMode::kSingle;
  TaskId task = TaskId::kCopy;
  std::vector<Token> input;
  std::vector<Token> target;
  // For each target token, the input stream index of the token it reproduces.
  std::vector<int> target_source;

  // Tokens fed to the model under teacher forcing: input followed by every
  // target token except the last.
  std::vector<Token> model_stream() const;
  // Stream index whose readout predicts target[0] (the input EOS).
  std::size_t first_query() const { return input.size() - 1; }
  std::size_t n_items() const;
};

EncodedEpisode encode_tokens(const Episode& episode, TaskMode mode);

}  // namespace labelseq
