#include "labelseq/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "labelseq/rng.hpp"

namespace labelseq {

using json = nlohmann::json;

std::string_view encoding_name(OrderEncoding e) {
  switch (e) {
    case OrderEncoding::kLabel: return "label";
    case OrderEncoding::kSinusoidal: return "sin";
    case OrderEncoding::kLearnable: return "learned";
  }
  return "?";
}

std::optional<OrderEncoding> parse_encoding(std::string_view name) {
  if (name == "label") return OrderEncoding::kLabel;
  if (name == "sin" || name == "sinusoidal") return OrderEncoding::kSinusoidal;
  if (name == "learned" || name == "learnable") return OrderEncoding::kLearnable;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (heads_per_layer.empty()) throw ConfigError("model: no layers");
  if (d_model < 2 || d_mlp < 1) throw ConfigError("model: bad widths");
  for (int h : heads_per_layer) {
    if (h < 1 || d_model % h != 0) {
      throw ConfigError("model: d_model " + std::to_string(d_model) +
                        " not divisible by " + std::to_string(h) + " heads");
    }
  }
  if (n_labels < 1) throw ConfigError("model: n_labels must be positive");
  if (encoding == OrderEncoding::kLearnable && position_table < 1) {
    throw ConfigError("model: empty position table");
  }
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t d = d_model, m = d_mlp, L = n_labels;
  std::size_t n = kItemDims * d + kControlVocab * d;
  if (encoding == OrderEncoding::kLabel) n += L * d;
  if (encoding == OrderEncoding::kLearnable) n += position_table * d;
  const std::size_t per_layer = 4 * (d * d + d) + (d * m + m) + (m * d + d) + 4 * d;
  n += n_layers() * per_layer;
  n += (d + 1) * (kItemDims + L + kControlClasses);
  return n;
}

std::string ModelConfig::arch_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < heads_per_layer.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(heads_per_layer[i]);
  }
  return s + "]";
}

json ModelConfig::to_json() const {
  return json{{"heads_per_layer", heads_per_layer},
              {"d_model", d_model},
              {"d_mlp", d_mlp},
              {"encoding", encoding_name(encoding)},
              {"n_labels", n_labels},
              {"position_table", position_table},
              {"task_mode", task_mode == TaskMode::kMulti ? "multi" : "single"}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.heads_per_layer = j.value("heads_per_layer", c.heads_per_layer);
  c.d_model = j.value("d_model", c.d_model);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  const auto enc = parse_encoding(j.value("encoding", std::string("label")));
  if (!enc) throw ConfigError("model: unknown encoding");
  c.encoding = *enc;
  c.n_labels = j.value("n_labels", c.n_labels);
  c.position_table = j.value("position_table", c.position_table);
  c.task_mode = j.value("task_mode", std::string("single")) == "multi"
                    ? TaskMode::kMulti
                    : TaskMode::kSingle;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// ParameterSet

void ParameterSet::add(std::string name, Tensor t) {
  if (contains(name)) throw ConfigError("duplicate parameter " + name);
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(t));
}

Tensor& ParameterSet::get(std::string_view name) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return tensors_[i];
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

const Tensor& ParameterSet::get(std::string_view name) const {
  return const_cast<ParameterSet*>(this)->get(name);
}

bool ParameterSet::contains(std::string_view name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto d = tensors_[i].data();
    out.add(names_[i], Tensor::from(tensors_[i].shape(),
                                    std::vector<double>(d.begin(), d.end()),
                                    tensors_[i].requires_grad()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

std::string_view keep_policy_name(KeepPolicy p) {
  switch (p) {
    case KeepPolicy::kAll: return "all";
    case KeepPolicy::kTaskTokens: return "task";
    case KeepPolicy::kNextOutput: return "next";
    case KeepPolicy::kTaskOrNextOutput: return "task+next";
  }
  return "?";
}

AblationSpec AblationSpec::none() { return {}; }

AblationSpec AblationSpec::drop_head(int layer, int head) {
  AblationSpec s;
  s.name = "dropL" + std::to_string(layer) + "H" + std::to_string(head);
  s.dropped_heads.emplace_back(layer, head);
  return s;
}

AblationSpec AblationSpec::preserve_tokens(std::map<int, KeepPolicy> rules,
                                           std::string name) {
  AblationSpec s;
  s.name = std::move(name);
  s.preserve = std::move(rules);
  return s;
}

void AblationSpec::validate(const ModelConfig& config) const {
  const int layers = static_cast<int>(config.n_layers());
  for (auto [l, h] : dropped_heads) {
    if (l < 0 || l >= layers || h < 0 || h >= config.heads_per_layer[l]) {
      throw ConfigError("ablation " + name + ": no head " + std::to_string(h) +
                        " in layer " + std::to_string(l));
    }
  }
  for (const auto& [l, p] : preserve) {
    if (l < 0 || l >= layers) {
      throw ConfigError("ablation " + name + ": no layer " + std::to_string(l));
    }
  }
}

std::vector<int> next_source_positions(const EncodedEpisode& enc,
                                       std::size_t stream_length) {
  std::vector<int> out(stream_length, -1);
  for (std::size_t j = 0; j < enc.target.size(); ++j) {
    const std::size_t q = enc.first_query() + j;
    if (q < stream_length) out[q] = enc.target_source[j];
  }
  return out;
}

double AttentionTrace::weight(std::size_t layer, std::size_t segment,
                              std::size_t head, std::size_t q, std::size_t k,
                              bool post) const {
  const auto& lt = layers.at(layer);
  const auto& m = (post ? lt.post : lt.pre).at(segment * lt.n_heads + head);
  return m.at(q * segments.at(segment).length + k);
}

// ---------------------------------------------------------------------------
// Model

std::vector<double> sinusoidal_encoding(int position, int d_model) {
  std::vector<double> v(static_cast<std::size_t>(d_model));
  for (int i = 0; i < d_model; i += 2) {
    const double freq =
        std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
    v[i] = std::sin(position * freq);
    if (i + 1 < d_model) v[i + 1] = std::cos(position * freq);
  }
  return v;
}

namespace {

Tensor uniform_init(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t init_seed)
    : config_(std::move(config)) {
  config_.validate();
  Rng rng(init_seed, /*stream=*/7);
  const std::size_t d = config_.d_model, m = config_.d_mlp;
  params_.add("embed.item", uniform_init(rng, kItemDims, d));
  params_.add("embed.control", uniform_init(rng, kControlVocab, d));
  if (config_.encoding == OrderEncoding::kLabel) {
    params_.add("embed.label", uniform_init(rng, config_.n_labels, d));
  } else if (config_.encoding == OrderEncoding::kLearnable) {
    params_.add("embed.position", uniform_init(rng, config_.position_table, d));
  }
  auto zeros = [](std::size_t n) { return Tensor::zeros({n}, true); };
  auto ones = [](std::size_t n) { return Tensor::full({n}, 1.0, true); };
  for (std::size_t l = 0; l < config_.n_layers(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* w : {"q", "k", "v", "o"}) {
      params_.add(p + "attn.w" + w, uniform_init(rng, d, d));
      params_.add(p + "attn.b" + w, zeros(d));
    }
    params_.add(p + "ln1.gain", ones(d));
    params_.add(p + "ln1.bias", zeros(d));
    params_.add(p + "mlp.w1", uniform_init(rng, d, m));
    params_.add(p + "mlp.b1", zeros(m));
    params_.add(p + "mlp.w2", uniform_init(rng, m, d));
    params_.add(p + "mlp.b2", zeros(d));
    params_.add(p + "ln2.gain", ones(d));
    params_.add(p + "ln2.bias", zeros(d));
  }
  params_.add("head.item.w", uniform_init(rng, d, kItemDims));
  params_.add("head.item.b", zeros(kItemDims));
  params_.add("head.label.w", uniform_init(rng, d, config_.n_labels));
  params_.add("head.label.b", zeros(config_.n_labels));
  params_.add("head.control.w", uniform_init(rng, d, kControlClasses));
  params_.add("head.control.b", zeros(kControlClasses));
}

Model::Model(ModelConfig config, ParameterSet params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  if (params_.total_elements() != config_.parameter_count()) {
    throw ConfigError("model: parameter set holds " +
                      std::to_string(params_.total_elements()) +
                      " values, config expects " +
                      std::to_string(config_.parameter_count()));
  }
}

int Model::order_id(const Token& t) const {
  if (!t.is_item()) return -1;
  return config_.encoding == OrderEncoding::kLabel ? t.label : t.position;
}

Tensor Model::embed(Tape& tape, std::span<const StreamInput> batch) const {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.tokens.size();
  const std::size_t d = config_.d_model;

  std::vector<double> multihot(n * kItemDims, 0.0);
  std::vector<int> control(n, -1), order(n, -1);
  std::size_t r = 0;
  for (const auto& s : batch) {
    for (const Token& t : s.tokens) {
      if (t.is_item()) {
        const auto mh = item_multihot(t.item);
        std::copy(mh.begin(), mh.end(), multihot.begin() + r * kItemDims);
        order[r] = order_id(t);
        if (order[r] < 0) throw EncodingError("item token without order id");
      } else {
        if (t.control < 0 || t.control >= kControlVocab) {
          throw EncodingError("control token index " + std::to_string(t.control));
        }
        control[r] = t.control;
      }
      ++r;
    }
  }

  Tensor x = tape.matmul(Tensor::from({n, std::size_t{kItemDims}}, std::move(multihot)),
                         params_.get("embed.item"));
  x = tape.add(x, tape.gather_rows(params_.get("embed.control"), control));
  switch (config_.encoding) {
    case OrderEncoding::kLabel:
      for (int o : order) {
        if (o >= config_.n_labels) {
          throw EncodingError("label " + std::to_string(o) +
                              " outside label vocabulary of " +
                              std::to_string(config_.n_labels));
        }
      }
      x = tape.add(x, tape.gather_rows(params_.get("embed.label"), order));
      break;
    case OrderEncoding::kLearnable:
      for (int o : order) {
        if (o >= config_.position_table) {
          throw EncodingError("position " + std::to_string(o) +
                              " outside learned table of " +
                              std::to_string(config_.position_table));
        }
      }
      x = tape.add(x, tape.gather_rows(params_.get("embed.position"), order));
      break;
    case OrderEncoding::kSinusoidal: {
      std::vector<double> pe(n * d, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (order[i] < 0) continue;
        const auto v = sinusoidal_encoding(order[i], config_.d_model);
        std::copy(v.begin(), v.end(), pe.begin() + i * d);
      }
      x = tape.add(x, Tensor::from({n, d}, std::move(pe)));
      break;
    }
  }
  return x;
}

std::vector<std::vector<double>> Model::build_masks(
    std::size_t layer, std::span<const StreamInput> batch,
    const AblationSpec& ablation) const {
  const std::size_t heads = config_.heads_per_layer[layer];
  std::vector<bool> dropped(heads, false);
  bool any = false;
  for (auto [l, h] : ablation.dropped_heads) {
    if (static_cast<std::size_t>(l) == layer) {
      dropped[h] = true;
      any = true;
    }
  }
  const auto rule = ablation.preserve.find(static_cast<int>(layer));
  const bool has_rule = rule != ablation.preserve.end();
  if (!any && !has_rule) return {};

  std::vector<std::vector<double>> masks(batch.size() * heads);
  for (std::size_t si = 0; si < batch.size(); ++si) {
    const auto& s = batch[si];
    const std::size_t len = s.tokens.size();
    std::vector<double> keep;
    if (has_rule) {
      const KeepPolicy p = rule->second;
      keep.assign(len * len, 0.0);
      for (std::size_t q = 0; q < len; ++q) {
        for (std::size_t k = 0; k <= q; ++k) {
          bool on = p == KeepPolicy::kAll;
          const Token& tk = s.tokens[k];
          const bool is_task = !tk.is_item() && tk.control < kNumTasks;
          const bool is_next = q < s.next_source.size() &&
                               s.next_source[q] == static_cast<int>(k);
          if (p == KeepPolicy::kTaskTokens) on = is_task;
          if (p == KeepPolicy::kNextOutput) on = is_next;
          if (p == KeepPolicy::kTaskOrNextOutput) on = is_task || is_next;
          keep[q * len + k] = on ? 1.0 : 0.0;
        }
      }
    }
    for (std::size_t h = 0; h < heads; ++h) {
      auto& m = masks[si * heads + h];
      if (dropped[h]) {
        m.assign(len * len, 0.0);
      } else if (has_rule) {
        m = keep;
      }
    }
  }
  return masks;
}

ForwardOutput Model::forward(Tape& tape, std::span<const StreamInput> batch,
                             const AblationSpec& ablation,
                             const ForwardOptions& options) const {
  ablation.validate(config_);
  ForwardOutput out;
  std::size_t offset = 0;
  for (const auto& s : batch) {
    if (s.tokens.empty()) throw EncodingError("empty stream");
    out.segments.push_back({offset, s.tokens.size()});
    offset += s.tokens.size();
  }
  out.trace.segments = out.segments;

  Tensor x = embed(tape, batch);
  for (std::size_t l = 0; l < config_.n_layers(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto P = [&](const char* n) -> const Tensor& { return params_.get(p + n); };
    const Tensor q = tape.linear(x, P("attn.wq"), P("attn.bq"));
    const Tensor k = tape.linear(x, P("attn.wk"), P("attn.bk"));
    const Tensor v = tape.linear(x, P("attn.wv"), P("attn.bv"));
    AttentionHooks hooks;
    hooks.masks = build_masks(l, batch, ablation);
    LayerTrace lt;
    lt.n_heads = config_.heads_per_layer[l];
    if (options.trace) {
      hooks.weights_pre = &lt.pre;
      hooks.weights_post = &lt.post;
    }
    const Tensor a = tape.causal_attention(q, k, v, out.segments,
                                           config_.heads_per_layer[l], hooks);
    if (options.trace) out.trace.layers.push_back(std::move(lt));
    const Tensor o = tape.linear(a, P("attn.wo"), P("attn.bo"));
    x = tape.layer_norm(tape.add(x, o), P("ln1.gain"), P("ln1.bias"));
    const Tensor h = tape.relu(tape.linear(x, P("mlp.w1"), P("mlp.b1")));
    const Tensor m = tape.linear(h, P("mlp.w2"), P("mlp.b2"));
    x = tape.layer_norm(tape.add(x, m), P("ln2.gain"), P("ln2.bias"));
    if (options.keep_layer_outputs) out.layer_outputs.push_back(x);
  }

  Tensor xr = x;
  if (options.readout_rows.empty()) {
    out.readout_rows.resize(offset);
    for (std::size_t i = 0; i < offset; ++i) out.readout_rows[i] = i;
  } else {
    out.readout_rows = options.readout_rows;
    std::vector<int> idx(out.readout_rows.begin(), out.readout_rows.end());
    xr = tape.gather_rows(x, idx);
  }
  out.item_logits = tape.linear(xr, params_.get("head.item.w"),
                                params_.get("head.item.b"));
  out.label_logits = tape.linear(xr, params_.get("head.label.w"),
                                 params_.get("head.label.b"));
  out.control_logits = tape.linear(xr, params_.get("head.control.w"),
                                   params_.get("head.control.b"));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& stem, const Model& model,
                     std::int64_t step, const json& metrics) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes a little-endian host");
  auto bin_path = stem;
  bin_path += ".bin";
  auto json_path = stem;
  json_path += ".json";
  json table = json::array();
  std::size_t offset = 0;
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + bin_path.string());
  const auto& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& t = ps.tensors()[i];
    table.push_back({{"name", ps.names()[i]},
                     {"shape", t.shape()},
                     {"offset", offset},
                     {"count", t.numel()}});
    bin.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
    offset += t.numel();
  }
  if (!bin) throw std::runtime_error("write failed: " + bin_path.string());
  json manifest = {{"format", "labelseq-checkpoint-v1"},
                   {"dtype", "float64-le"},
                   {"config", model.config().to_json()},
                   {"step", step},
                   {"metrics", metrics},
                   {"data_file", bin_path.filename().string()},
                   {"parameters", table}};
  std::ofstream jf(json_path);
  if (!jf) throw std::runtime_error("cannot write " + json_path.string());
  jf << manifest.dump(2) << '\n';
}

Model load_checkpoint(const std::filesystem::path& stem, CheckpointInfo* info) {
  auto json_path = stem;
  if (json_path.extension() != ".json") json_path += ".json";
  std::ifstream jf(json_path);
  if (!jf) throw std::runtime_error("cannot read " + json_path.string());
  const json manifest = json::parse(jf);
  const auto bin_path =
      json_path.parent_path() / manifest.at("data_file").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + bin_path.string());

  const ModelConfig config = ModelConfig::from_json(manifest.at("config"));
  ParameterSet params;
  for (const auto& entry : manifest.at("parameters")) {
    const auto shape = entry.at("shape").get<Shape>();
    std::vector<double> values(entry.at("count").get<std::size_t>());
    bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::size_t>() *
                                          sizeof(double)));
    bin.read(reinterpret_cast<char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!bin) throw std::runtime_error("truncated checkpoint " + bin_path.string());
    params.add(entry.at("name").get<std::string>(),
               Tensor::from(shape, std::move(values), true));
  }
  if (info) {
    info->config = config;
    info->step = manifest.at("step").get<std::int64_t>();
    info->metrics = manifest.value("metrics", json::object());
  }
  return Model(config, std::move(params));
}

}  // namespace labelseq
