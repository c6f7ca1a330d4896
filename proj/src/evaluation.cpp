#include "labelseq/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <tuple>

#include <json.hpp>

namespace labelseq {

std::string_view decode_mode_name(DecodeMode m) {
  return m == DecodeMode::kTeacherForcing ? "tf" : "rollout";
}

Predictor model_predictor(const Model& model, const AblationSpec& ablation) {
  ablation.validate(model.config());
  Predictor p;
  p.encoding = model.config().encoding;
  p.readout = [&model, ablation](std::span<const StreamInput> batch,
                                 const std::vector<std::size_t>& rows) {
    Tape tape(Tape::Mode::kInference);
    ForwardOptions opts;
    opts.readout_rows = rows;
    const ForwardOutput out = model.forward(tape, batch, ablation, opts);
    Readouts r;
    r.rows = rows.size();
    r.n_labels = static_cast<std::size_t>(model.config().n_labels);
    r.item.assign(out.item_logits.data().begin(), out.item_logits.data().end());
    r.label.assign(out.label_logits.data().begin(), out.label_logits.data().end());
    r.control.assign(out.control_logits.data().begin(),
                     out.control_logits.data().end());
    return r;
  };
  return p;
}

namespace {

int argmax(const double* v, std::size_t n) {
  return static_cast<int>(std::max_element(v, v + n) - v);
}

int target_control_class(const Token& t) {
  return t.is_item() ? kItemFollowsClass : t.control;
}

int target_order(const Token& t, OrderEncoding enc) {
  return enc == OrderEncoding::kLabel ? t.label : t.position;
}

// Scores one aligned output position. `emitted` is false when the decoder
// produced no item there (rollout only).
TokenOutcome score(const EvalEpisode& ep, std::size_t j, const Token& target,
                   const Prediction* pred, bool gate_on_control,
                   OrderEncoding enc, int item_index) {
  TokenOutcome o;
  o.sequence = ep.id;
  o.task = ep.encoded.task;
  o.length = static_cast<int>(ep.encoded.n_items());
  o.output_index = static_cast<int>(j);
  o.item_index = item_index;
  o.eos_target = !target.is_item() && target.control == kEosControl;
  if (target.is_item()) {
    o.kind = TargetKind::kItem;
    if (pred) {
      const bool emitted_item =
          !gate_on_control || pred->control == kItemFollowsClass;
      if (emitted_item) {
        for (int f = 0; f < kFeatures; ++f) {
          o.features_correct += pred->features[f] == target.item.feature(f);
        }
        o.label_correct = pred->order == target_order(target, enc);
      }
    }
  } else {
    o.kind = TargetKind::kControl;
  }
  o.control_correct = pred && pred->control == target_control_class(target);
  return o;
}

struct ChunkInputs {
  std::vector<std::vector<Token>> streams;
  std::vector<std::vector<int>> next_sources;
  std::vector<StreamInput> inputs;

  void finalize() {
    inputs.clear();
    for (std::size_t i = 0; i < streams.size(); ++i) {
      inputs.push_back({streams[i], next_sources[i]});
    }
  }
};

}  // namespace

Prediction argmax_prediction(const Readouts& r, std::size_t row) {
  Prediction p;
  for (int f = 0; f < kFeatures; ++f) {
    p.features[f] = argmax(r.item.data() + row * kItemDims + f * kFeatureValues,
                           kFeatureValues);
  }
  p.order = argmax(r.label.data() + row * r.n_labels, r.n_labels);
  p.control = argmax(r.control.data() + row * kControlClasses, kControlClasses);
  return p;
}

// ---------------------------------------------------------------------------
// Metrics

SequenceRates sequence_thresholds(std::span<const TokenOutcome> outcomes,
                                  std::vector<double> thresholds) {
  if (outcomes.empty()) {
    throw std::invalid_argument("sequence_thresholds: no outcomes");
  }
  // sequence id -> (fully correct, counted)
  std::map<std::pair<std::int64_t, int>, std::pair<std::size_t, std::size_t>> per;
  for (const auto& o : outcomes) {
    if (o.kind == TargetKind::kControl) continue;
    auto& e = per[{o.sequence, task_index(o.task)}];
    e.first += o.fully_correct();
    e.second += 1;
  }
  SequenceRates out;
  out.thresholds = thresholds;
  out.rates.assign(thresholds.size(), 0.0);
  out.n_sequences = per.size();
  if (per.empty()) {
    throw std::invalid_argument("sequence_thresholds: no item outcomes");
  }
  for (const auto& [key, e] : per) {
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const double need = thresholds[t] * static_cast<double>(e.second);
      if (static_cast<double>(e.first) >= need - 1e-9) out.rates[t] += 1.0;
    }
  }
  for (double& r : out.rates) r /= static_cast<double>(per.size());
  return out;
}

SliceStats summarize(std::span<const TokenOutcome> outcomes,
                     bool with_sequences) {
  SliceStats s;
  double feat = 0.0, label = 0.0, eos = 0.0, ctrl = 0.0;
  for (const auto& o : outcomes) {
    if (o.kind == TargetKind::kExtra) continue;
    ++s.n_control;
    ctrl += o.control_correct;
    if (o.kind == TargetKind::kItem) {
      ++s.n_items;
      feat += o.features_correct / static_cast<double>(kFeatures);
      label += o.label_correct;
    }
    if (o.eos_target) {
      ++s.n_eos;
      eos += o.control_correct;
    }
  }
  if (s.n_items) {
    s.item_accuracy = feat / static_cast<double>(s.n_items);
    s.label_accuracy = label / static_cast<double>(s.n_items);
  }
  if (s.n_eos) s.eos_accuracy = eos / static_cast<double>(s.n_eos);
  if (s.n_control) s.control_accuracy = ctrl / static_cast<double>(s.n_control);
  if (with_sequences && s.n_items) s.sequences = sequence_thresholds(outcomes);
  return s;
}

MetricReport build_report(DecodeMode mode, std::vector<TokenOutcome> outcomes) {
  MetricReport r;
  r.mode = mode;
  std::stable_sort(outcomes.begin(), outcomes.end(),
                   [](const TokenOutcome& a, const TokenOutcome& b) {
                     return std::tie(a.sequence, a.output_index) <
                            std::tie(b.sequence, b.output_index);
                   });
  r.outcomes = std::move(outcomes);
  r.overall = summarize(r.outcomes);
  std::map<int, std::vector<TokenOutcome>> by_len, by_pos;
  std::map<TaskId, std::vector<TokenOutcome>> by_task;
  for (const auto& o : r.outcomes) {
    by_len[o.length].push_back(o);
    by_task[o.task].push_back(o);
    if (o.kind == TargetKind::kItem) by_pos[o.item_index].push_back(o);
  }
  for (const auto& [k, v] : by_len) r.by_length[k] = summarize(v);
  for (const auto& [k, v] : by_task) r.by_task[k] = summarize(v);
  for (const auto& [k, v] : by_pos) r.by_position[k] = summarize(v, false);
  return r;
}

std::vector<EvalEpisode> make_eval_episodes(
    std::span<const SequenceRecord* const> records,
    std::span<const TaskId> tasks, TaskMode mode) {
  if (tasks.empty()) throw ConfigError("make_eval_episodes: no tasks");
  std::vector<EvalEpisode> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const TaskId task = tasks[i % tasks.size()];
    EvalEpisode ep;
    ep.id = records[i]->id;
    ep.encoded = encode_tokens(make_episode(task, records[i]->items), mode);
    out.push_back(std::move(ep));
  }
  return out;
}

std::vector<EvalEpisode> make_eval_episodes(
    std::span<const SequenceRecord> records, std::span<const TaskId> tasks,
    TaskMode mode) {
  std::vector<const SequenceRecord*> ptrs;
  ptrs.reserve(records.size());
  for (const auto& r : records) ptrs.push_back(&r);
  return make_eval_episodes(ptrs, tasks, mode);
}

// ---------------------------------------------------------------------------
// Decoding

MetricReport eval_teacher_forcing(const Predictor& predictor,
                                  std::span<const EvalEpisode> episodes,
                                  const EvalOptions& options) {
  std::vector<TokenOutcome> outcomes;
  const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t begin = 0; begin < episodes.size(); begin += bs) {
    const std::size_t end = std::min(episodes.size(), begin + bs);
    ChunkInputs chunk;
    std::vector<std::size_t> rows;
    std::size_t offset = 0;
    for (std::size_t e = begin; e < end; ++e) {
      const auto& enc = episodes[e].encoded;
      chunk.streams.push_back(enc.model_stream());
      const std::size_t len = chunk.streams.back().size();
      chunk.next_sources.push_back(next_source_positions(enc, len));
      for (std::size_t j = 0; j < enc.target.size(); ++j) {
        rows.push_back(offset + enc.first_query() + j);
      }
      offset += len;
    }
    chunk.finalize();
    const Readouts r = predictor.readout(chunk.inputs, rows);
    std::size_t row = 0;
    for (std::size_t e = begin; e < end; ++e) {
      const auto& ep = episodes[e];
      int item_index = 0;
      for (std::size_t j = 0; j < ep.encoded.target.size(); ++j, ++row) {
        const Prediction p = argmax_prediction(r, row);
        const Token& t = ep.encoded.target[j];
        outcomes.push_back(score(ep, j, t, &p, /*gate_on_control=*/false,
                                 predictor.encoding,
                                 t.is_item() ? item_index++ : -1));
      }
    }
  }
  return build_report(DecodeMode::kTeacherForcing, std::move(outcomes));
}

namespace {

struct RolloutState {
  std::vector<Token> prefix;
  std::vector<Token> emitted;
  std::vector<Prediction> predictions;
  bool done = false;
};

std::vector<RolloutState> run_rollout(const Predictor& predictor,
                                      std::span<const EvalEpisode> episodes,
                                      const EvalOptions& options) {
  std::vector<RolloutState> states(episodes.size());
  const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t begin = 0; begin < episodes.size(); begin += bs) {
    const std::size_t end = std::min(episodes.size(), begin + bs);
    for (std::size_t e = begin; e < end; ++e) states[e].prefix = episodes[e].encoded.input;
    while (true) {
      ChunkInputs chunk;
      std::vector<std::size_t> active, rows;
      std::size_t offset = 0;
      for (std::size_t e = begin; e < end; ++e) {
        if (states[e].done) continue;
        active.push_back(e);
        chunk.streams.push_back(states[e].prefix);
        chunk.next_sources.push_back(next_source_positions(
            episodes[e].encoded, states[e].prefix.size()));
        offset += states[e].prefix.size();
        rows.push_back(offset - 1);
      }
      if (active.empty()) break;
      chunk.finalize();
      const Readouts r = predictor.readout(chunk.inputs, rows);
      for (std::size_t i = 0; i < active.size(); ++i) {
        auto& st = states[active[i]];
        const Prediction p = argmax_prediction(r, i);
        Token tok;
        if (p.control == kItemFollowsClass) {
          LabeledItem li{Item{p.features[0], p.features[1], p.features[2]},
                         p.order};
          tok = Token::item_token(li, p.order);
        } else {
          tok = Token::control_token(p.control);
        }
        st.emitted.push_back(tok);
        st.predictions.push_back(p);
        const std::size_t cap =
            episodes[active[i]].encoded.target.size() + options.rollout_extra;
        if ((!tok.is_item() && tok.control == kEosControl) ||
            st.emitted.size() >= cap) {
          st.done = true;
        } else {
          st.prefix.push_back(tok);
        }
      }
    }
  }
  return states;
}

}  // namespace

std::vector<std::vector<Token>> rollout_tokens(const Predictor& predictor,
                                               std::span<const EvalEpisode> episodes,
                                               const EvalOptions& options) {
  auto states = run_rollout(predictor, episodes, options);
  std::vector<std::vector<Token>> out;
  out.reserve(states.size());
  for (auto& s : states) out.push_back(std::move(s.emitted));
  return out;
}

MetricReport eval_rollout(const Predictor& predictor,
                          std::span<const EvalEpisode> episodes,
                          const EvalOptions& options) {
  const auto states = run_rollout(predictor, episodes, options);
  std::vector<TokenOutcome> outcomes;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    const auto& st = states[e];
    const auto& target = ep.encoded.target;
    int item_index = 0;
    for (std::size_t j = 0; j < target.size(); ++j) {
      const Prediction* p = j < st.predictions.size() ? &st.predictions[j] : nullptr;
      outcomes.push_back(score(ep, j, target[j], p, /*gate_on_control=*/true,
                               predictor.encoding,
                               target[j].is_item() ? item_index++ : -1));
    }
    for (std::size_t j = target.size(); j < st.predictions.size(); ++j) {
      TokenOutcome o;
      o.sequence = ep.id;
      o.task = ep.encoded.task;
      o.length = static_cast<int>(ep.encoded.n_items());
      o.output_index = static_cast<int>(j);
      o.kind = TargetKind::kExtra;
      outcomes.push_back(o);
    }
  }
  return build_report(DecodeMode::kRollout, std::move(outcomes));
}

// ---------------------------------------------------------------------------
// Protocols

ProtocolSpec protocol_spec(const std::string& id, double scale) {
  if (!(scale > 0.0)) throw ConfigError("protocol scale must be positive");
  auto scaled = [scale](std::size_t n) {
    return n == 0 ? std::size_t{0}
                  : std::max<std::size_t>(
                        1, static_cast<std::size_t>(std::llround(n * scale)));
  };
  ProtocolSpec s;
  s.id = id;
  if (id == "fig2") {
    s.train_per_task = 5000;
    s.generalization_per_task = 5000;
    s.rollout = true;
  } else if (id == "fig5A") {
    s.generalization_per_task = 12500;
  } else if (id == "fig5B") {
    s.generalization_per_task = 200;
    s.teacher_forcing = false;
    s.rollout = true;
  } else if (id == "fig6") {
    s.train_per_task = 1000;
    s.generalization_per_task = 1000;
    s.rollout = true;
  } else {
    throw ConfigError("unknown protocol '" + id + "'");
  }
  s.train_per_task = scaled(s.train_per_task);
  s.generalization_per_task = scaled(s.generalization_per_task);
  return s;
}

ProtocolBundle run_protocol(const ProtocolSpec& spec, const Predictor& predictor,
                            const EvalSets& sets, const EvalOptions& options) {
  if (sets.tasks.empty()) throw ConfigError("run_protocol: no tasks");
  ProtocolBundle bundle;
  bundle.spec = spec;
  const std::size_t n_tasks = sets.tasks.size();
  auto run_set = [&](const std::string& name, const SampleSpec& lengths,
                     std::size_t per_task, std::uint64_t stream) {
    if (per_task == 0) return;
    const auto records = sample_eval_sequences(lengths, per_task * n_tasks,
                                               sets.seed * 1000003ULL + stream,
                                               sets.exclude);
    // Consecutive blocks of per_task records share a task.
    std::vector<EvalEpisode> episodes;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const TaskId task = sets.tasks[i / per_task];
      EvalEpisode ep;
      ep.id = records[i].id;
      ep.encoded = encode_tokens(make_episode(task, records[i].items), sets.task_mode);
      episodes.push_back(std::move(ep));
    }
    if (spec.teacher_forcing) {
      bundle.results.push_back({name, eval_teacher_forcing(predictor, episodes, options)});
    }
    if (spec.rollout) {
      bundle.results.push_back({name, eval_rollout(predictor, episodes, options)});
    }
  };
  run_set("train", sets.train_lengths, spec.train_per_task, 1);
  run_set("generalization", sets.generalization_lengths,
          spec.generalization_per_task, 2);
  return bundle;
}

// ---------------------------------------------------------------------------
// Serialisation

std::string report_csv_header() {
  return "protocol,task,mode,slice_type,slice_value,metric,value,n\n";
}

namespace {

void emit_slice(std::ostringstream& os, const std::string& protocol,
                const std::string& task, const std::string& mode,
                const std::string& slice_type, const std::string& slice_value,
                const SliceStats& s) {
  auto row = [&](const char* metric, double value, std::size_t n) {
    os << protocol << ',' << task << ',' << mode << ',' << slice_type << ','
       << slice_value << ',' << metric << ',' << std::setprecision(17) << value
       << ',' << n << '\n';
  };
  if (s.n_items) {
    row("item_accuracy", s.item_accuracy, s.n_items);
    row("label_accuracy", s.label_accuracy, s.n_items);
  }
  if (s.n_eos) row("eos_accuracy", s.eos_accuracy, s.n_eos);
  if (s.n_control) row("control_accuracy", s.control_accuracy, s.n_control);
  if (s.sequences) {
    const auto& q = *s.sequences;
    for (std::size_t t = 0; t < q.thresholds.size(); ++t) {
      std::ostringstream name;
      name << "seq_ge_" << std::lround(q.thresholds[t] * 100);
      os << protocol << ',' << task << ',' << mode << ',' << slice_type << ','
         << slice_value << ',' << name.str() << ',' << std::setprecision(17)
         << q.rates[t] << ',' << q.n_sequences << '\n';
    }
  }
}

}  // namespace

std::string report_csv_rows(const std::string& protocol, const std::string& set,
                            const MetricReport& report) {
  std::ostringstream os;
  const std::string mode(decode_mode_name(report.mode));
  emit_slice(os, protocol, "all", mode, "set", set, report.overall);
  for (const auto& [task, s] : report.by_task) {
    emit_slice(os, protocol, std::string(task_name(task)), mode, "set", set, s);
  }
  // Per-length and per-position slices are split by task so that multi-task
  // curves can be drawn per task; "all" aggregates them.
  std::map<TaskId, std::vector<TokenOutcome>> per_task;
  for (const auto& o : report.outcomes) per_task[o.task].push_back(o);
  auto emit_breakdowns = [&](const std::string& task_label,
                             const std::map<int, SliceStats>& by_len,
                             const std::map<int, SliceStats>& by_pos) {
    for (const auto& [len, s] : by_len) {
      emit_slice(os, protocol, task_label, mode, "length", std::to_string(len), s);
    }
    for (const auto& [pos, s] : by_pos) {
      emit_slice(os, protocol, task_label, mode, "position:" + set,
                 std::to_string(pos), s);
    }
  };
  emit_breakdowns("all", report.by_length, report.by_position);
  if (per_task.size() > 1) {
    for (auto& [task, outs] : per_task) {
      const MetricReport sub = build_report(report.mode, std::move(outs));
      emit_breakdowns(std::string(task_name(task)), sub.by_length, sub.by_position);
    }
  }
  return os.str();
}

std::string bundle_csv(const ProtocolBundle& bundle) {
  std::string out = report_csv_header();
  for (const auto& r : bundle.results) {
    out += report_csv_rows(bundle.spec.id, r.set, r.report);
  }
  return out;
}

std::string outcomes_jsonl(std::span<const TokenOutcome> outcomes) {
  std::string out;
  for (const auto& o : outcomes) {
    nlohmann::ordered_json j;
    j["sequence"] = o.sequence;
    j["task"] = task_name(o.task);
    j["length"] = o.length;
    j["output_index"] = o.output_index;
    j["item_index"] = o.item_index;
    j["kind"] = o.kind == TargetKind::kItem      ? "item"
                : o.kind == TargetKind::kControl ? "control"
                                                 : "extra";
    j["features_correct"] = o.features_correct;
    j["label_correct"] = o.label_correct;
    j["control_correct"] = o.control_correct;
    j["eos_target"] = o.eos_target;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace labelseq
