#include "labelseq/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "labelseq/evaluation.hpp"

namespace labelseq {

using nlohmann::json;

void TrainConfig::validate(TaskMode mode) const {
  if (tf_rate != 1.0) throw ConfigError("tf_rate must be 1.0 (full teacher forcing)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (eval_every <= 0) throw ConfigError("eval_every must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (tasks.empty()) throw ConfigError("no training tasks");
  if (mode == TaskMode::kSingle && tasks.size() != 1) {
    throw ConfigError("single-task mode takes exactly one task");
  }
}

json TrainConfig::to_json() const {
  json j;
  j["batch_size"] = batch_size;
  j["steps"] = steps;
  j["learning_rate"] = learning_rate;
  j["eval_every"] = eval_every;
  j["seed"] = seed;
  j["tf_rate"] = tf_rate;
  j["eval_sample"] = eval_sample;
  j["tasks"] = json::array();
  for (TaskId t : tasks) j["tasks"].push_back(task_name(t));
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
  c.tf_rate = j.value("tf_rate", c.tf_rate);
  c.eval_sample = j.value("eval_sample", c.eval_sample);
  if (j.contains("tasks")) {
    c.tasks.clear();
    for (const auto& t : j.at("tasks")) {
      const auto id = parse_task(t.get<std::string>());
      if (!id) throw ConfigError("unknown task '" + t.get<std::string>() + "'");
      c.tasks.push_back(*id);
    }
  }
  return c;
}

std::vector<TaskId> sample_tasks(std::span<const TaskId> tasks, std::size_t n,
                                 Rng& rng) {
  if (tasks.empty()) throw ConfigError("sample_tasks: no tasks");
  std::vector<TaskId> out(n);
  for (auto& t : out) t = tasks[rng.below(tasks.size())];
  return out;
}

// ---------------------------------------------------------------------------
// Batches

std::vector<StreamInput> Batch::inputs() const {
  std::vector<StreamInput> out;
  out.reserve(streams.size());
  for (std::size_t i = 0; i < streams.size(); ++i) {
    out.push_back({streams[i], next_sources[i]});
  }
  return out;
}

Batch build_batch(std::span<const SequenceRecord* const> records,
                  std::span<const TaskId> tasks, TaskMode mode,
                  OrderEncoding encoding) {
  if (records.empty()) throw std::invalid_argument("build_batch: empty batch");
  if (tasks.size() != records.size()) {
    throw std::invalid_argument("build_batch: one task per record required");
  }
  Batch b;
  b.mode = mode;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    EncodedEpisode enc = encode_tokens(make_episode(tasks[i], records[i]->items), mode);
    std::vector<Token> stream = enc.model_stream();
    b.next_sources.push_back(next_source_positions(enc, stream.size()));
    b.padded_length = std::max(b.padded_length, stream.size());
    for (std::size_t j = 0; j < enc.target.size(); ++j) {
      const Token& t = enc.target[j];
      b.rows.push_back(offset + enc.first_query() + j);
      b.row_sequence.push_back(i);
      if (t.is_item()) {
        for (int f = 0; f < kFeatures; ++f) b.feature_targets.push_back(t.item.feature(f));
        b.label_targets.push_back(encoding == OrderEncoding::kLabel ? t.label
                                                                    : t.position);
        b.control_targets.push_back(kItemFollowsClass);
      } else {
        for (int f = 0; f < kFeatures; ++f) b.feature_targets.push_back(-1);
        b.label_targets.push_back(-1);
        b.control_targets.push_back(t.control);
      }
    }
    offset += stream.size();
    b.streams.push_back(std::move(stream));
    b.episodes.push_back(std::move(enc));
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    std::vector<std::uint8_t> mask(b.padded_length, 0);
    const auto& enc = b.episodes[i];
    for (std::size_t j = 0; j < enc.target.size(); ++j) mask[enc.first_query() + j] = 1;
    b.loss_mask.push_back(std::move(mask));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Loss

namespace {

double row_ce(const double* logits, int n, int target) {
  const double mx = *std::max_element(logits, logits + n);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(logits[i] - mx);
  return std::log(s) + mx - logits[target];
}

}  // namespace

LossParts batch_loss(Tape& tape, const Model& model, const Batch& batch) {
  if (batch.rows.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const int n_labels = model.config().n_labels;
  for (int t : batch.label_targets) {
    if (t >= n_labels) {
      throw EncodingError("order target " + std::to_string(t) +
                          " outside readout of " + std::to_string(n_labels));
    }
  }
  const auto inputs = batch.inputs();
  ForwardOptions opts;
  opts.readout_rows = batch.rows;
  const ForwardOutput out = model.forward(tape, inputs, AblationSpec::none(), opts);

  const std::size_t R = batch.rows.size();
  std::array<std::vector<int>, kFeatures> feat;
  for (int f = 0; f < kFeatures; ++f) {
    feat[f].resize(R);
    for (std::size_t r = 0; r < R; ++r) feat[f][r] = batch.feature_targets[r * kFeatures + f];
  }
  Tensor f_loss = tape.cross_entropy_sum(out.item_logits, feat[0], 0, kFeatureValues);
  for (int f = 1; f < kFeatures; ++f) {
    f_loss = tape.add(f_loss, tape.cross_entropy_sum(out.item_logits, feat[f],
                                                     f * kFeatureValues,
                                                     (f + 1) * kFeatureValues));
  }
  const Tensor l_loss = tape.cross_entropy_sum(out.label_logits, batch.label_targets);
  const Tensor c_loss = tape.cross_entropy_sum(out.control_logits, batch.control_targets);

  LossParts parts;
  parts.features = f_loss.item();
  parts.label = l_loss.item();
  parts.control = c_loss.item();
  parts.total = tape.scale(tape.add(tape.add(f_loss, l_loss), c_loss),
                           1.0 / static_cast<double>(R));

  parts.per_sequence.assign(batch.size(), 0.0);
  const auto& item = out.item_logits.data();
  const auto& label = out.label_logits.data();
  const auto& ctrl = out.control_logits.data();
  for (std::size_t r = 0; r < R; ++r) {
    double l = row_ce(&ctrl[r * kControlClasses], kControlClasses,
                      batch.control_targets[r]);
    if (batch.label_targets[r] >= 0) {
      l += row_ce(&label[r * n_labels], n_labels, batch.label_targets[r]);
      for (int f = 0; f < kFeatures; ++f) {
        l += row_ce(&item[r * kItemDims + f * kFeatureValues], kFeatureValues,
                    feat[f][r]);
      }
    }
    parts.per_sequence[batch.row_sequence[r]] += l;
  }
  return parts;
}

double training_step(Model& model, AdamState& adam, const Batch& batch) {
  Tape tape;
  model.params().zero_grad();
  const LossParts parts = batch_loss(tape, model, batch);
  const double loss = parts.total.item();
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << "non-finite loss at optimizer step " << adam.step() + 1
       << " (features " << parts.features << ", label " << parts.label
       << ", control " << parts.control << ")";
    throw std::runtime_error(os.str());
  }
  tape.backward(parts.total);
  adam.apply(model.params().tensors());
  return loss;
}

// ---------------------------------------------------------------------------
// Training loop

std::string RunLog::csv() const {
  std::ostringstream os;
  os << "step,split,metric,value\n";
  for (const auto& e : entries) {
    os << e.step << ',' << e.split << ',' << e.metric << ','
       << std::setprecision(17) << e.value << '\n';
  }
  return os.str();
}

namespace {

std::vector<const SequenceRecord*> fixed_subsample(
    std::vector<const SequenceRecord*> pool, std::size_t n, Rng rng) {
  for (std::size_t i = pool.size(); i > 1; --i) {
    std::swap(pool[i - 1], pool[rng.below(i)]);
  }
  if (pool.size() > n) pool.resize(n);
  return pool;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string() + " for writing");
  f << text;
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

std::string step_stem(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06lld", static_cast<long long>(step));
  return buf;
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  const Dataset& data, const std::filesystem::path& out_dir,
                  const ProgressFn& progress) {
  model_config.validate();
  config.validate(model_config.task_mode);
  const auto train_pool = data.split(Split::kTrain);
  if (train_pool.empty()) throw ConfigError("dataset has no training sequences");

  Model model(model_config, config.seed);
  AdamState adam(AdamConfig{.learning_rate = config.learning_rate},
                 model.params().tensors());

  const bool write = !out_dir.empty();
  if (write) std::filesystem::create_directories(out_dir / "checkpoints");

  const auto eval_train = fixed_subsample(train_pool, config.eval_sample, Rng(config.seed, 4));
  const auto eval_gen = fixed_subsample(data.split(Split::kGeneralization),
                                        config.eval_sample, Rng(config.seed, 5));
  const auto ep_train = make_eval_episodes(eval_train, config.tasks, model_config.task_mode);
  const auto ep_gen = make_eval_episodes(eval_gen, config.tasks, model_config.task_mode);

  Rng order_rng(config.seed, 3);
  Rng task_rng(config.seed, 6);
  std::vector<std::size_t> order(train_pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  TrainResult result{RunLog{}, model};
  RunLog& log = result.log;
  double loss_sum = 0.0;
  std::int64_t loss_n = 0;

  for (std::int64_t step = 1; step <= config.steps; ++step) {
    std::vector<const SequenceRecord*> recs;
    recs.reserve(config.batch_size);
    while (recs.size() < config.batch_size) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[order_rng.below(i)]);
        }
        cursor = 0;
      }
      recs.push_back(train_pool[order[cursor++]]);
    }
    std::vector<TaskId> tasks =
        model_config.task_mode == TaskMode::kMulti
            ? sample_tasks(config.tasks, recs.size(), task_rng)
            : std::vector<TaskId>(recs.size(), config.tasks.front());
    const Batch batch = build_batch(recs, tasks, model_config.task_mode,
                                    model_config.encoding);
    loss_sum += training_step(model, adam, batch);
    ++loss_n;

    if (step % config.eval_every != 0 && step != config.steps) continue;

    const double mean_loss = loss_sum / static_cast<double>(loss_n);
    loss_sum = 0.0;
    loss_n = 0;
    log.entries.push_back({step, "train", "loss", mean_loss});
    const Predictor pred = model_predictor(model);
    json metrics;
    metrics["train_loss"] = mean_loss;
    double score = 0.0;
    for (const auto& [split, eps] :
         {std::pair{"train", &ep_train}, std::pair{"generalization", &ep_gen}}) {
      if (eps->empty()) continue;
      const MetricReport rep = eval_teacher_forcing(pred, *eps);
      const SliceStats& s = rep.overall;
      log.entries.push_back({step, split, "item_accuracy", s.item_accuracy});
      log.entries.push_back({step, split, "label_accuracy", s.label_accuracy});
      log.entries.push_back({step, split, "eos_accuracy", s.eos_accuracy});
      log.entries.push_back({step, split, "control_accuracy", s.control_accuracy});
      metrics[std::string(split)] = {{"item_accuracy", s.item_accuracy},
                                     {"label_accuracy", s.label_accuracy}};
      // Generalization is listed last, so it decides the score when present.
      score = 0.5 * (s.item_accuracy + s.label_accuracy);
    }
    CheckpointRef ref{step, {}, score};
    if (write) {
      ref.stem = out_dir / "checkpoints" / step_stem(step);
      save_checkpoint(ref.stem, model, step, metrics);
    }
    log.checkpoints.push_back(ref);
    if (!log.best || score > log.best->score) log.best = ref;
    if (write) {
      json best;
      best["step"] = log.best->step;
      best["checkpoint"] = std::filesystem::relative(log.best->stem, out_dir).generic_string();
      best["score"] = log.best->score;
      write_file(out_dir / "best.json", best.dump(2) + "\n");
      write_file(out_dir / "runlog.csv", log.csv());
    }
    if (progress) {
      std::ostringstream os;
      os << "step " << step << " loss " << std::setprecision(4) << mean_loss
         << " score " << score;
      progress(os.str());
    }
  }
  result.final_model = Model(model_config, model.params().clone());
  return result;
}

std::filesystem::path resolve_checkpoint(const std::filesystem::path& run_dir,
                                         const std::string& which) {
  namespace fs = std::filesystem;
  if (which == "best") {
    std::ifstream f(run_dir / "best.json");
    if (!f) throw std::runtime_error("no best.json in " + run_dir.string());
    const json j = json::parse(f);
    return run_dir / j.at("checkpoint").get<std::string>();
  }
  if (which == "last") {
    std::optional<fs::path> last;
    const fs::path dir = run_dir / "checkpoints";
    if (fs::exists(dir)) {
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".json") continue;
        fs::path stem = e.path();
        stem.replace_extension();
        if (!last || stem.filename() > last->filename()) last = stem;
      }
    }
    if (!last) throw std::runtime_error("no checkpoints in " + dir.string());
    return *last;
  }
  if (!which.empty() && std::all_of(which.begin(), which.end(),
                                    [](char c) { return c >= '0' && c <= '9'; })) {
    return run_dir / "checkpoints" / step_stem(std::stoll(which));
  }
  fs::path p(which);
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  return p;
}

}  // namespace labelseq
