#include "labelseq/tasks.hpp"

#include <algorithm>
#include <numeric>

namespace labelseq {

bool Item::valid() const {
  auto ok = [](int v) { return v >= 0 && v < kFeatureValues; };
  return ok(shape) && ok(color) && ok(texture);
}

std::string_view task_name(TaskId task) {
  switch (task) {
    case TaskId::kCopy: return "C";
    case TaskId::kReverse: return "R";
    case TaskId::kGroupShape: return "G[s]";
    case TaskId::kGroupColor: return "G[c]";
    case TaskId::kSortShape: return "S[s]";
    case TaskId::kSortColor: return "S[c]";
  }
  return "?";
}

std::optional<TaskId> parse_task(std::string_view name) {
  for (TaskId t : kAllTasks) {
    if (task_name(t) == name) return t;
  }
  if (name == "Gs") return TaskId::kGroupShape;
  if (name == "Gc") return TaskId::kGroupColor;
  if (name == "Ss") return TaskId::kSortShape;
  if (name == "Sc") return TaskId::kSortColor;
  return std::nullopt;
}

std::optional<int> first_level_feature(TaskId task) {
  switch (task) {
    case TaskId::kGroupShape:
    case TaskId::kSortShape: return 0;
    case TaskId::kGroupColor:
    case TaskId::kSortColor: return 1;
    default: return std::nullopt;
  }
}

std::vector<Item> build_item_pool() {
  std::vector<Item> pool;
  pool.reserve(kPoolSize);
  for (int s = 0; s < kFeatureValues; ++s)
    for (int c = 0; c < kFeatureValues; ++c)
      for (int t = 0; t < kFeatureValues; ++t) pool.push_back({s, c, t});
  return pool;
}

std::vector<std::size_t> task_permutation(TaskId task,
                                          std::span<const LabeledItem> input) {
  std::vector<std::size_t> order(input.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto by = [&](auto key) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return key(input[a].item) < key(input[b].item);
                     });
  };
  switch (task) {
    case TaskId::kCopy: break;
    case TaskId::kReverse: std::reverse(order.begin(), order.end()); break;
    case TaskId::kGroupShape: by([](const Item& i) { return i.shape; }); break;
    case TaskId::kGroupColor: by([](const Item& i) { return i.color; }); break;
    case TaskId::kSortShape:
      by([](const Item& i) {
        return std::array{i.shape, i.color, i.texture};
      });
      break;
    case TaskId::kSortColor:
      by([](const Item& i) {
        return std::array{i.color, i.shape, i.texture};
      });
      break;
  }
  return order;
}

std::vector<LabeledItem> apply_task(TaskId task,
                                    std::span<const LabeledItem> input) {
  std::vector<LabeledItem> out;
  out.reserve(input.size());
  for (std::size_t i : task_permutation(task, input)) out.push_back(input[i]);
  return out;
}

Episode make_episode(TaskId task, std::vector<LabeledItem> input) {
  Episode ep;
  ep.task = task;
  ep.source = task_permutation(task, input);
  ep.target.reserve(input.size());
  for (std::size_t i : ep.source) ep.target.push_back(input[i]);
  ep.input = std::move(input);
  return ep;
}

// ---------------------------------------------------------------------------

Token Token::item_token(const LabeledItem& li, int position) {
  Token t;
  t.kind = TokenKind::kItem;
  t.item = li.item;
  t.label = li.label;
  t.position = position;
  return t;
}

Token Token::control_token(int control) {
  Token t;
  t.kind = TokenKind::kControl;
  t.control = control;
  return t;
}

std::array<double, kItemDims> item_multihot(const Item& item) {
  if (!item.valid()) {
    throw EncodingError("item feature index out of range: (" +
                        std::to_string(item.shape) + "," +
                        std::to_string(item.color) + "," +
                        std::to_string(item.texture) + ")");
  }
  std::array<double, kItemDims> v{};
  v[item.shape] = 1.0;
  v[kFeatureValues + item.color] = 1.0;
  v[2 * kFeatureValues + item.texture] = 1.0;
  return v;
}

std::array<double, kControlVocab> control_onehot(int control) {
  if (control < 0 || control >= kControlVocab) {
    throw EncodingError("control index out of range: " + std::to_string(control));
  }
  std::array<double, kControlVocab> v{};
  v[control] = 1.0;
  return v;
}

std::vector<Token> EncodedEpisode::model_stream() const {
  std::vector<Token> s = input;
  s.insert(s.end(), target.begin(), target.end() - 1);
  return s;
}

std::size_t EncodedEpisode::n_items() const {
  return static_cast<std::size_t>(
      std::count_if(target.begin(), target.end(),
                    [](const Token& t) { return t.is_item(); }));
}

EncodedEpisode encode_tokens(const Episode& episode, TaskMode mode) {
  if (episode.input.empty()) throw EncodingError("empty episode");
  if (episode.target.size() != episode.input.size() ||
      episode.source.size() != episode.input.size()) {
    throw EncodingError("episode target is not a permutation of its input");
  }
  EncodedEpisode enc;
  enc.mode = mode;
  enc.task = episode.task;
  const bool multi = mode == TaskMode::kMulti;
  const int offset = multi ? 1 : 0;
  const int task_ctrl = task_index(episode.task);

  if (multi) enc.input.push_back(Token::control_token(task_ctrl));
  for (std::size_t i = 0; i < episode.input.size(); ++i) {
    if (!episode.input[i].item.valid()) {
      (void)item_multihot(episode.input[i].item);  // throws
    }
    enc.input.push_back(
        Token::item_token(episode.input[i], static_cast<int>(i)));
  }
  enc.input.push_back(Token::control_token(kEosControl));
  const int eos_pos = static_cast<int>(enc.input.size()) - 1;

  if (multi) {
    enc.target.push_back(Token::control_token(task_ctrl));
    enc.target_source.push_back(0);
  }
  for (std::size_t j = 0; j < episode.target.size(); ++j) {
    const auto src = static_cast<int>(episode.source[j]);
    enc.target.push_back(Token::item_token(episode.target[j], src));
    enc.target_source.push_back(src + offset);
  }
  enc.target.push_back(Token::control_token(kEosControl));
  enc.target_source.push_back(eos_pos);
  return enc;
}

}  // namespace labelseq
