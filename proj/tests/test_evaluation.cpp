#include <cmath>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "labelseq/evaluation.hpp"

using namespace labelseq;

namespace {

// Readout that peaks at `hot` for every row of a group.
void set_group(std::vector<double>& v, std::size_t row, std::size_t width, std::size_t off,
               std::size_t n, int hot) {
  for (std::size_t i = 0; i < n; ++i) v[row * width + off + i] = (static_cast<int>(i) == hot) ? 5.0 : 0.0;
}

// Knows the task and reads the answer off the input items in the stream.
Predictor oracle(TaskId task, int n_labels = 50) {
  Predictor p;
  p.encoding = OrderEncoding::kLabel;
  p.readout = [task, n_labels](std::span<const StreamInput> batch,
                               const std::vector<std::size_t>& rows) {
    Readouts r;
    r.rows = rows.size();
    r.n_labels = n_labels;
    r.item.assign(r.rows * 15, 0.0);
    r.label.assign(r.rows * n_labels, 0.0);
    r.control.assign(r.rows * 8, 0.0);
    std::vector<std::size_t> starts;
    std::size_t off = 0;
    for (const auto& s : batch) {
      starts.push_back(off);
      off += s.tokens.size();
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t seg = std::upper_bound(starts.begin(), starts.end(), rows[i]) - starts.begin() - 1;
      const auto toks = batch[seg].tokens;
      std::vector<LabeledItem> input;
      for (const Token& t : toks) {
        if (!t.is_item()) break;
        input.push_back({t.item, t.label});
      }
      const auto target = apply_task(task, input);
      const std::size_t j = rows[i] - starts[seg] - input.size();
      if (j < target.size()) {
        for (int f = 0; f < kFeatures; ++f) set_group(r.item, i, 15, f * 5, 5, target[j].item.feature(f));
        set_group(r.label, i, n_labels, 0, n_labels, target[j].label);
        set_group(r.control, i, 8, 0, 8, kItemFollowsClass);
      } else {
        set_group(r.control, i, 8, 0, 8, kEosControl);
      }
    }
    return r;
  };
  return p;
}

Predictor random_predictor(std::uint64_t seed, bool never_eos = false) {
  Predictor p;
  auto rng = std::make_shared<Rng>(seed);
  p.readout = [rng, never_eos](std::span<const StreamInput>, const std::vector<std::size_t>& rows) {
    Readouts r;
    r.rows = rows.size();
    r.n_labels = 50;
    for (std::size_t i = 0; i < r.rows * 15; ++i) r.item.push_back(rng->uniform());
    for (std::size_t i = 0; i < r.rows * 50; ++i) r.label.push_back(rng->uniform());
    for (std::size_t i = 0; i < r.rows * 8; ++i) r.control.push_back(rng->uniform());
    if (never_eos) {
      for (std::size_t i = 0; i < r.rows; ++i) r.control[i * 8 + kItemFollowsClass] = 10.0;
    }
    return r;
  };
  return p;
}

std::vector<EvalEpisode> episodes(TaskId task, std::size_t n, std::uint64_t seed,
                                  int min_len = 5, int max_len = 25) {
  const auto recs = sample_eval_sequences(SampleSpec{min_len, max_len, 50}, n, seed);
  const std::vector<TaskId> tasks(n, task);
  return make_eval_episodes(std::span<const SequenceRecord>(recs), tasks, TaskMode::kSingle);
}

TokenOutcome item_outcome(std::int64_t seq, bool right) {
  TokenOutcome o;
  o.sequence = seq;
  o.kind = TargetKind::kItem;
  o.features_correct = right ? 3 : 2;
  o.label_correct = true;
  o.control_correct = true;
  return o;
}

}  // namespace

TEST(Evaluation, OracleScoresPerfectInBothModes) {
  const auto eps = episodes(TaskId::kSortShape, 60, 1);
  const Predictor p = oracle(TaskId::kSortShape);
  for (const MetricReport& rep : {eval_teacher_forcing(p, eps), eval_rollout(p, eps)}) {
    EXPECT_EQ(rep.overall.item_accuracy, 1.0);
    EXPECT_EQ(rep.overall.label_accuracy, 1.0);
    EXPECT_EQ(rep.overall.eos_accuracy, 1.0);
    EXPECT_EQ(rep.overall.control_accuracy, 1.0);
    ASSERT_TRUE(rep.overall.sequences);
    EXPECT_EQ(rep.overall.sequences->rates[0], 1.0);
    EXPECT_EQ(rep.overall.n_eos, 60u);
  }
}

TEST(Evaluation, RolloutReproducesTargets) {
  const auto eps = episodes(TaskId::kGroupColor, 10, 2);
  const auto out = rollout_tokens(oracle(TaskId::kGroupColor), eps);
  ASSERT_EQ(out.size(), eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const auto& tgt = eps[i].encoded.target;
    ASSERT_EQ(out[i].size(), tgt.size());
    for (std::size_t j = 0; j + 1 < tgt.size(); ++j) {
      EXPECT_EQ(out[i][j].item, tgt[j].item);
      EXPECT_EQ(out[i][j].label, tgt[j].label);
    }
    EXPECT_EQ(out[i].back().control, kEosControl);
  }
}

TEST(Evaluation, RandomLogitsGiveChance) {
  const auto eps = episodes(TaskId::kCopy, 400, 3);
  const auto rep = eval_teacher_forcing(random_predictor(9), eps);
  EXPECT_NEAR(rep.overall.item_accuracy, 0.2, 0.01);
  EXPECT_NEAR(rep.overall.label_accuracy, 0.02, 0.005);
  EXPECT_NEAR(rep.overall.control_accuracy, 0.125, 0.01);
}

TEST(Evaluation, PositionCurveSpansLongestOutput) {
  const auto eps = episodes(TaskId::kReverse, 200, 4, 26, 50);
  const auto rep = eval_teacher_forcing(oracle(TaskId::kReverse), eps);
  int longest = 0;
  for (const auto& e : eps) longest = std::max<int>(longest, e.encoded.n_items());
  ASSERT_EQ(rep.by_position.size(), static_cast<std::size_t>(longest));
  EXPECT_EQ(rep.by_position.begin()->first, 0);
  EXPECT_EQ(rep.by_position.rbegin()->first, longest - 1);
  EXPECT_FALSE(rep.by_position.begin()->second.sequences);
  for (const auto& [len, s] : rep.by_length) EXPECT_GE(len, 26);
}

TEST(Evaluation, NeverEmittingEosStopsAtCap) {
  const auto eps = episodes(TaskId::kCopy, 20, 5);
  EvalOptions opt;
  opt.rollout_extra = 3;
  const auto toks = rollout_tokens(random_predictor(1, true), eps, opt);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    EXPECT_EQ(toks[i].size(), eps[i].encoded.target.size() + 3);
  }
  const auto rep = eval_rollout(random_predictor(1, true), eps, opt);
  EXPECT_EQ(rep.overall.eos_accuracy, 0.0);
  std::size_t extras = 0;
  for (const auto& o : rep.outcomes) extras += o.kind == TargetKind::kExtra;
  EXPECT_EQ(extras, 20u * 3u);
  EXPECT_EQ(rep.overall.sequences->rates[0], 0.0);
}

TEST(Evaluation, SequenceThresholdsNineteenOfTwenty) {
  std::vector<TokenOutcome> v;
  for (int i = 0; i < 20; ++i) v.push_back(item_outcome(0, i != 7));
  for (int i = 0; i < 10; ++i) v.push_back(item_outcome(1, true));
  const auto r = sequence_thresholds(v);
  EXPECT_EQ(r.n_sequences, 2u);
  EXPECT_DOUBLE_EQ(r.rates[0], 0.5);  // 100%
  EXPECT_DOUBLE_EQ(r.rates[1], 1.0);  // 95%: 19/20 qualifies
  EXPECT_DOUBLE_EQ(r.rates[2], 1.0);
  v.push_back(item_outcome(1, false));  // 10/11 < 95%
  const auto r2 = sequence_thresholds(v);
  EXPECT_DOUBLE_EQ(r2.rates[1], 0.5);
  EXPECT_DOUBLE_EQ(r2.rates[2], 1.0);
  EXPECT_THROW(sequence_thresholds({}), std::invalid_argument);
}

TEST(Evaluation, ThresholdRatesAreMonotone) {
  const auto eps = episodes(TaskId::kSortColor, 100, 6, 5, 8);
  Rng rng(6);
  auto rep = eval_teacher_forcing(oracle(TaskId::kSortColor), eps);
  for (auto& o : rep.outcomes) {
    if (o.kind == TargetKind::kItem && rng.uniform() < 0.05) o.label_correct = false;
  }
  const auto r = sequence_thresholds(rep.outcomes, {1.0, 0.95, 0.9, 0.8, 0.5});
  for (std::size_t i = 1; i < r.rates.size(); ++i) EXPECT_LE(r.rates[i - 1], r.rates[i]);
  EXPECT_LT(r.rates[0], 1.0);
}

TEST(Protocols, Counts) {
  const auto a = protocol_spec("fig5A", 0.1);
  EXPECT_EQ(a.generalization_per_task, 1250u);
  EXPECT_EQ(a.train_per_task, 0u);
  const auto b = protocol_spec("fig2");
  EXPECT_EQ(b.train_per_task, 5000u);
  EXPECT_EQ(b.generalization_per_task, 5000u);
  EXPECT_TRUE(b.rollout);
  const auto c = protocol_spec("fig6");
  EXPECT_EQ(c.train_per_task, 1000u);
  EXPECT_EQ(c.generalization_per_task, 1000u);
  EXPECT_EQ(protocol_spec("fig2", 1e-6).train_per_task, 1u);
  EXPECT_THROW(protocol_spec("fig9"), ConfigError);
  EXPECT_THROW(protocol_spec("fig2", 0.0), ConfigError);
}

TEST(Protocols, RunsPerTaskCounts) {
  EvalSets sets;
  sets.task_mode = TaskMode::kSingle;
  sets.tasks = {TaskId::kSortShape};
  sets.train_lengths = {5, 25, 50};
  sets.generalization_lengths = {26, 50, 50};
  const auto bundle = run_protocol(protocol_spec("fig2", 0.004), oracle(TaskId::kSortShape), sets);
  ASSERT_EQ(bundle.results.size(), 4u);  // two sets x two modes
  for (const auto& r : bundle.results) {
    EXPECT_EQ(r.report.overall.sequences->n_sequences, 20u);
    for (const auto& [len, s] : r.report.by_length) {
      if (r.set == "train") EXPECT_LE(len, 25);
      else EXPECT_GE(len, 26);
    }
  }
  const std::string csv = bundle_csv(bundle);
  EXPECT_EQ(report_csv_header(), "protocol,task,mode,slice_type,slice_value,metric,value,n\n");
  EXPECT_EQ(csv.substr(0, report_csv_header().size()), report_csv_header());
}

TEST(Evaluation, BatchingDoesNotChangeOutcomes) {
  ModelConfig c;
  c.heads_per_layer = {1, 1};
  c.d_model = 16;
  c.d_mlp = 16;
  const Model m(c, 3);
  const auto eps = episodes(TaskId::kSortShape, 30, 7, 5, 12);
  const Predictor p = model_predictor(m);
  for (bool roll : {false, true}) {
    EvalOptions one{1, 5}, many{64, 5};
    const auto a = roll ? eval_rollout(p, eps, one) : eval_teacher_forcing(p, eps, one);
    const auto b = roll ? eval_rollout(p, eps, many) : eval_teacher_forcing(p, eps, many);
    EXPECT_EQ(outcomes_jsonl(a.outcomes), outcomes_jsonl(b.outcomes));
  }
}

TEST(Evaluation, JsonlOutcomesRecomputeSummary) {
  const auto eps = episodes(TaskId::kGroupShape, 80, 8);
  const auto rep = eval_rollout(random_predictor(4), eps);
  std::istringstream in(outcomes_jsonl(rep.outcomes));
  std::string line;
  double feat = 0, label = 0;
  std::size_t items = 0, lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    ++lines;
    if (j.at("kind") != "item") continue;
    ++items;
    feat += j.at("features_correct").get<int>() / 3.0;
    label += j.at("label_correct").get<bool>();
  }
  EXPECT_EQ(lines, rep.outcomes.size());
  EXPECT_EQ(items, rep.overall.n_items);
  EXPECT_NEAR(feat / items, rep.overall.item_accuracy, 1e-12);
  EXPECT_NEAR(label / items, rep.overall.label_accuracy, 1e-12);
}
