#include "labelseq/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace labelseq {

using nlohmann::json;

namespace {

std::size_t item_offset(const EncodedEpisode& enc) {
  return enc.mode == TaskMode::kMulti ? 1 : 0;
}

int group_feature(const EncodedEpisode& enc) {
  const auto f = first_level_feature(enc.task);
  if (!f) {
    throw ConfigError("task " + std::string(task_name(enc.task)) +
                      " has no first-level groups");
  }
  return *f;
}

std::vector<StreamInput> stream_inputs(const std::vector<std::vector<Token>>& streams,
                                       const std::vector<std::vector<int>>& next) {
  std::vector<StreamInput> out;
  for (std::size_t i = 0; i < streams.size(); ++i) out.push_back({streams[i], next[i]});
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Attention maps

std::vector<std::size_t> output_order_permutation(const EncodedEpisode& enc,
                                                  std::size_t stream_length) {
  std::vector<std::size_t> perm(stream_length);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const std::size_t off = item_offset(enc);
  const std::size_t k = enc.n_items();
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t display = off + j;
    if (display < stream_length) perm[display] = enc.target_source[off + j];
  }
  return perm;
}

std::vector<double> permute_square(std::span<const double> m,
                                   std::span<const std::size_t> perm) {
  const std::size_t n = perm.size();
  if (m.size() != n * n) throw DimensionError("permute_square: size mismatch");
  std::vector<double> out(n * n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) out[a * n + b] = m[perm[a] * n + perm[b]];
  }
  return out;
}

std::string token_string(const Token& t) {
  if (!t.is_item()) {
    return t.control == kEosControl
               ? "EOS"
               : "T:" + std::string(task_name(static_cast<TaskId>(t.control)));
  }
  std::ostringstream os;
  os << 's' << t.item.shape + 1 << 'c' << t.item.color + 1 << 't'
     << t.item.texture + 1 << ':' << t.label;
  return os.str();
}

AttentionMaps attention_maps(const Model& model, const EncodedEpisode& enc,
                             bool reorder_to_output, const AblationSpec& ablation) {
  const std::vector<Token> stream = enc.model_stream();
  const std::vector<int> next = next_source_positions(enc, stream.size());
  const StreamInput in{stream, next};
  Tape tape(Tape::Mode::kInference);
  ForwardOptions opts;
  opts.trace = true;
  opts.readout_rows = {0};
  const ForwardOutput out = model.forward(tape, std::span(&in, 1), ablation, opts);

  AttentionMaps maps;
  maps.n = stream.size();
  maps.post_ablation = !ablation.is_none();
  if (reorder_to_output) {
    maps.order = output_order_permutation(enc, maps.n);
  } else {
    maps.order.resize(maps.n);
    std::iota(maps.order.begin(), maps.order.end(), std::size_t{0});
  }
  for (std::size_t i : maps.order) maps.tokens.push_back(stream[i]);

  const auto f = first_level_feature(enc.task);
  for (std::size_t i = 0; i < maps.n; ++i) {
    const Token& t = maps.tokens[i];
    if (!t.is_item()) continue;
    const bool run_start = i == 0 || !maps.tokens[i - 1].is_item();
    if (run_start || (f && maps.tokens[i - 1].item.feature(*f) != t.item.feature(*f))) {
      maps.group_starts.push_back(i);
    }
  }

  for (std::size_t l = 0; l < out.trace.layers.size(); ++l) {
    const auto& lt = out.trace.layers[l];
    for (std::size_t h = 0; h < lt.n_heads; ++h) {
      const auto& w = maps.post_ablation ? lt.post[h] : lt.pre[h];
      HeadMap hm;
      hm.layer = static_cast<int>(l);
      hm.head = static_cast<int>(h);
      hm.weights = reorder_to_output ? permute_square(w, maps.order) : w;
      maps.heads.push_back(std::move(hm));
    }
  }
  return maps;
}

json attention_maps_json(const AttentionMaps& maps, TaskId task) {
  json j;
  j["task"] = task_name(task);
  j["shape"] = {maps.n, maps.n};
  j["post_ablation"] = maps.post_ablation;
  j["order"] = maps.order;
  j["group_starts"] = maps.group_starts;
  j["tokens"] = json::array();
  for (const auto& t : maps.tokens) j["tokens"].push_back(token_string(t));
  j["heads"] = json::array();
  for (const auto& hm : maps.heads) {
    json m = json::array();
    for (std::size_t r = 0; r < maps.n; ++r) {
      m.push_back(std::vector<double>(hm.weights.begin() + r * maps.n,
                                      hm.weights.begin() + (r + 1) * maps.n));
    }
    j["heads"].push_back({{"layer", hm.layer}, {"head", hm.head}, {"weights", m}});
  }
  return j;
}

std::vector<EpisodeAttention> collect_attention(const Model& model,
                                                std::span<const EncodedEpisode> episodes,
                                                int layer, int head,
                                                std::size_t batch_size) {
  const auto& cfg = model.config();
  if (layer < 0 || static_cast<std::size_t>(layer) >= cfg.n_layers()) {
    throw ConfigError("no layer " + std::to_string(layer));
  }
  const int n_heads = cfg.heads_per_layer[layer];
  if (head >= n_heads) throw ConfigError("no head " + std::to_string(head));
  std::vector<EpisodeAttention> out;
  batch_size = std::max<std::size_t>(1, batch_size);
  for (std::size_t begin = 0; begin < episodes.size(); begin += batch_size) {
    const std::size_t end = std::min(episodes.size(), begin + batch_size);
    std::vector<std::vector<Token>> streams;
    std::vector<std::vector<int>> next;
    for (std::size_t e = begin; e < end; ++e) {
      streams.push_back(episodes[e].model_stream());
      next.push_back(next_source_positions(episodes[e], streams.back().size()));
    }
    const auto inputs = stream_inputs(streams, next);
    Tape tape(Tape::Mode::kInference);
    ForwardOptions opts;
    opts.trace = true;
    opts.readout_rows = {0};
    const ForwardOutput fo = model.forward(tape, inputs, AblationSpec::none(), opts);
    const auto& lt = fo.trace.layers[layer];
    for (std::size_t s = 0; s < streams.size(); ++s) {
      EpisodeAttention ea;
      ea.episode = &episodes[begin + s];
      ea.n = streams[s].size();
      if (head >= 0) {
        ea.weights = lt.pre[s * n_heads + head];
      } else {
        ea.weights.assign(ea.n * ea.n, 0.0);
        for (int h = 0; h < n_heads; ++h) {
          const auto& w = lt.pre[s * n_heads + h];
          for (std::size_t i = 0; i < w.size(); ++i) ea.weights[i] += w[i] / n_heads;
        }
      }
      out.push_back(std::move(ea));
    }
  }
  return out;
}

namespace {

// Rank of each input item within its first-level group, in output order.
struct GroupRanks {
  int feature = 0;
  std::vector<int> rank;   // by input stream index, -1 for non-items
  std::vector<int> group;  // by input stream index
};

GroupRanks group_ranks(const EncodedEpisode& enc) {
  GroupRanks g;
  g.feature = group_feature(enc);
  g.rank.assign(enc.input.size(), -1);
  g.group.assign(enc.input.size(), -1);
  const std::size_t off = item_offset(enc);
  std::array<int, kFeatureValues> counter{};
  for (std::size_t j = 0; j < enc.n_items(); ++j) {
    const int src = enc.target_source[off + j];
    const int v = enc.input[src].item.feature(g.feature);
    g.group[src] = v;
    g.rank[src] = counter[v]++;
  }
  return g;
}

}  // namespace

WithinGroupAttention within_group_attention(std::span<const EpisodeAttention> attn) {
  std::map<std::pair<int, int>, std::pair<double, std::size_t>> acc;
  int max_rank = -1;
  double frac_sum = 0.0;
  std::size_t frac_n = 0;
  for (const auto& ea : attn) {
    const EncodedEpisode& enc = *ea.episode;
    const GroupRanks g = group_ranks(enc);
    const std::size_t off = item_offset(enc);
    const std::size_t k = enc.n_items();
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t q = enc.first_query() + 1 + off + j;
      if (q >= ea.n) break;
      const int src = enc.target_source[off + j];
      const int qg = g.group[src];
      const int qr = g.rank[src];
      max_rank = std::max(max_rank, qr);
      double same = 0.0, all = 0.0;
      for (std::size_t key = off; key < off + k; ++key) {
        const double w = ea.weights[q * ea.n + key];
        all += w;
        if (g.group[key] != qg) continue;
        same += w;
        auto& cell = acc[{qr, g.rank[key]}];
        cell.first += w;
        cell.second += 1;
        max_rank = std::max(max_rank, g.rank[key]);
      }
      if (all > 0.0) {
        frac_sum += same / all;
        ++frac_n;
      }
    }
  }
  WithinGroupAttention out;
  out.size = static_cast<std::size_t>(max_rank + 1);
  out.mean.assign(out.size * out.size, std::numeric_limits<double>::quiet_NaN());
  out.count.assign(out.size * out.size, 0);
  for (const auto& [key, v] : acc) {
    const std::size_t idx = key.first * out.size + key.second;
    out.mean[idx] = v.first / static_cast<double>(v.second);
    out.count[idx] = v.second;
  }
  out.same_group_fraction = frac_n ? frac_sum / static_cast<double>(frac_n) : 0.0;
  return out;
}

EosProfile eos_attention_profile(std::span<const EpisodeAttention> attn) {
  std::map<int, std::map<int, double>> sum;
  EosProfile p;
  for (const auto& ea : attn) {
    const EncodedEpisode& enc = *ea.episode;
    const GroupRanks g = group_ranks(enc);
    const std::size_t off = item_offset(enc);
    const std::size_t eos = enc.first_query();
    for (std::size_t j = 0; j < enc.n_items(); ++j) {
      const std::size_t q = eos + 1 + off + j;
      if (q >= ea.n) break;
      const int src = enc.target_source[off + j];
      sum[g.group[src]][g.rank[src]] += ea.weights[q * ea.n + eos];
      p.count[g.group[src]][g.rank[src]] += 1;
    }
  }
  for (const auto& [grp, bins] : sum) {
    for (const auto& [r, s] : bins) {
      p.mean[grp][r] = s / static_cast<double>(p.count[grp][r]);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Embedding geometry

std::vector<double> embedding_similarity(const ParameterSet& params) {
  const Tensor& e = params.get("embed.item");
  const std::size_t n = e.rows(), d = e.cols();
  const auto& v = e.data();
  std::vector<double> g(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += v[i * d + c] * v[j * d + c];
      g[i * n + j] = s;
      g[j * n + i] = s;
    }
  }
  return g;
}

GaussianFit fit_gaussian_kernel(std::span<const double> sim25,
                                const GaussianGrid& grid) {
  constexpr int kN = kFeatureValues;
  if (sim25.size() != kN * kN) throw DimensionError("gaussian fit needs a 5x5 block");
  if (!(grid.sigma_step > 0.0) || grid.sigma_max < grid.sigma_min ||
      !(grid.sigma_min > 0.0)) {
    throw ConfigError("invalid sigma grid");
  }
  GaussianFit best;
  if (std::all_of(sim25.begin(), sim25.end(), [](double x) { return x == 0.0; })) {
    best.sigma = std::numeric_limits<double>::infinity();
    best.infinite_sigma = true;
    return best;
  }
  std::vector<std::pair<double, double>> pairs;  // (delta^2, similarity)
  for (int i = 0; i < kN; ++i) {
    for (int j = i; j < kN; ++j) pairs.emplace_back((i - j) * (i - j), sim25[i * kN + j]);
  }
  const auto steps = static_cast<long>(
      std::floor((grid.sigma_max - grid.sigma_min) / grid.sigma_step + 1e-9));
  best.loss = std::numeric_limits<double>::infinity();
  for (long s = 0; s <= steps; ++s) {
    const double sigma = grid.sigma_min + static_cast<double>(s) * grid.sigma_step;
    double sk = 0.0, kk = 0.0;
    for (const auto& [d2, sim] : pairs) {
      const double k = std::exp(-d2 / (2.0 * sigma * sigma));
      sk += sim * k;
      kk += k * k;
    }
    const double a = sk / kk;
    double loss = 0.0;
    for (const auto& [d2, sim] : pairs) {
      const double r = sim - a * std::exp(-d2 / (2.0 * sigma * sigma));
      loss += r * r;
    }
    loss /= static_cast<double>(pairs.size());
    if (loss < best.loss) {
      best.loss = loss;
      best.sigma = sigma;
      best.amplitude = a;
    }
  }
  return best;
}

GaussianFit gaussian_order_fit(std::span<const std::vector<double>> vectors,
                               const GaussianGrid& grid) {
  if (vectors.size() != kFeatureValues) {
    throw DimensionError("gaussian_order_fit needs five vectors");
  }
  std::vector<double> sim(kFeatureValues * kFeatureValues);
  for (int i = 0; i < kFeatureValues; ++i) {
    for (int j = 0; j < kFeatureValues; ++j) {
      if (vectors[i].size() != vectors[j].size()) {
        throw DimensionError("gaussian_order_fit: vector sizes differ");
      }
      sim[i * kFeatureValues + j] = std::inner_product(
          vectors[i].begin(), vectors[i].end(), vectors[j].begin(), 0.0);
    }
  }
  return fit_gaussian_kernel(sim, grid);
}

std::vector<GaussianFit> feature_gaussian_fits(const ParameterSet& params,
                                               const GaussianGrid& grid) {
  const auto g = embedding_similarity(params);
  std::vector<GaussianFit> out;
  for (int f = 0; f < kFeatures; ++f) {
    std::vector<double> block(kFeatureValues * kFeatureValues);
    for (int i = 0; i < kFeatureValues; ++i) {
      for (int j = 0; j < kFeatureValues; ++j) {
        block[i * kFeatureValues + j] =
            g[(f * kFeatureValues + i) * kItemDims + f * kFeatureValues + j];
      }
    }
    out.push_back(fit_gaussian_kernel(block, grid));
  }
  return out;
}

std::vector<double> task_embedding_similarity(const ParameterSet& params) {
  const Tensor& e = params.get("embed.control");
  const std::size_t d = e.cols();
  const auto& v = e.data();
  std::vector<double> norm(kNumTasks);
  for (int i = 0; i < kNumTasks; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += v[i * d + c] * v[i * d + c];
    norm[i] = std::sqrt(s);
  }
  std::vector<double> out(kNumTasks * kNumTasks, 0.0);
  for (int i = 0; i < kNumTasks; ++i) {
    for (int j = i; j < kNumTasks; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += v[i * d + c] * v[j * d + c];
      const double den = norm[i] * norm[j];
      const double cs = den > 0.0 ? s / den : 0.0;
      out[i * kNumTasks + j] = cs;
      out[j * kNumTasks + i] = cs;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

std::vector<AblationSpec> canonical_ablation_specs(const ModelConfig& config) {
  std::vector<AblationSpec> specs{AblationSpec::none()};
  for (std::size_t l = 0; l < config.n_layers(); ++l) {
    for (int h = 0; h < config.heads_per_layer[l]; ++h) {
      specs.push_back(AblationSpec::drop_head(static_cast<int>(l), h));
    }
  }
  if (config.n_layers() == 2) {
    specs.push_back(AblationSpec::preserve_tokens({{0, KeepPolicy::kTaskTokens}}, "taskL0"));
    specs.push_back(AblationSpec::preserve_tokens({{1, KeepPolicy::kNextOutput}}, "nextL1"));
    specs.push_back(AblationSpec::preserve_tokens(
        {{0, KeepPolicy::kTaskTokens}, {1, KeepPolicy::kNextOutput}}, "taskL0+nextL1"));
  }
  return specs;
}

std::vector<AblationRow> ablation_sweep(const Model& model,
                                        std::span<const EvalEpisode> episodes,
                                        std::span<const AblationSpec> specs,
                                        const EvalOptions& options) {
  std::vector<AblationRow> rows;
  for (const auto& spec : specs) {
    const Predictor pred = model_predictor(model, spec);
    for (const MetricReport& rep : {eval_teacher_forcing(pred, episodes, options),
                                    eval_rollout(pred, episodes, options)}) {
      for (const auto& [task, stats] : rep.by_task) {
        rows.push_back({spec.name, task, rep.mode, stats});
      }
    }
  }
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "spec,task,mode,item_accuracy,label_accuracy,eos_accuracy,"
        "control_accuracy,seq_full,n_items\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    const double seq = r.stats.sequences ? r.stats.sequences->rates.at(0) : 0.0;
    os << r.spec << ',' << task_name(r.task) << ',' << decode_mode_name(r.mode) << ','
       << r.stats.item_accuracy << ',' << r.stats.label_accuracy << ','
       << r.stats.eos_accuracy << ',' << r.stats.control_accuracy << ',' << seq << ','
       << r.stats.n_items << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Task-conditioned representations

RepresentationSummary task_conditioned_reps(const Model& model,
                                            std::span<const EncodedEpisode> episodes,
                                            int layer, std::size_t batch_size) {
  const auto& cfg = model.config();
  if (layer < 0 || static_cast<std::size_t>(layer) >= cfg.n_layers()) {
    throw ConfigError("no layer " + std::to_string(layer));
  }
  if (episodes.empty()) throw ConfigError("task_conditioned_reps: no episodes");
  RepresentationSummary r;
  r.task = episodes.front().task;
  r.layer = layer;
  r.dim = static_cast<std::size_t>(cfg.d_model);
  r.means.assign(25 * r.dim, 0.0);
  r.counts.assign(25, 0);
  batch_size = std::max<std::size_t>(1, batch_size);
  for (std::size_t begin = 0; begin < episodes.size(); begin += batch_size) {
    const std::size_t end = std::min(episodes.size(), begin + batch_size);
    std::vector<std::vector<Token>> streams;
    std::vector<std::vector<int>> next;
    for (std::size_t e = begin; e < end; ++e) {
      if (episodes[e].task != r.task) {
        throw ConfigError("task_conditioned_reps: episodes mix tasks");
      }
      streams.push_back(episodes[e].model_stream());
      next.push_back(next_source_positions(episodes[e], streams.back().size()));
    }
    const auto inputs = stream_inputs(streams, next);
    Tape tape(Tape::Mode::kInference);
    ForwardOptions opts;
    opts.keep_layer_outputs = true;
    opts.readout_rows = {0};
    const ForwardOutput fo = model.forward(tape, inputs, AblationSpec::none(), opts);
    const auto& x = fo.layer_outputs[layer].data();
    for (std::size_t s = 0; s < streams.size(); ++s) {
      const EncodedEpisode& enc = episodes[begin + s];
      const std::size_t base = fo.segments[s].offset;
      const std::size_t off = item_offset(enc);
      for (std::size_t i = off; i < off + enc.n_items(); ++i) {
        const Item& it = enc.input[i].item;
        const int pair = it.shape * kFeatureValues + it.color;
        const double* row = &x[(base + i) * r.dim];
        for (std::size_t c = 0; c < r.dim; ++c) r.means[pair * r.dim + c] += row[c];
        r.counts[pair] += 1;
      }
    }
  }
  for (int p = 0; p < 25; ++p) {
    if (r.counts[p] == 0) continue;
    for (std::size_t c = 0; c < r.dim; ++c) {
      r.means[p * r.dim + c] /= static_cast<double>(r.counts[p]);
    }
  }
  return r;
}

SymmetricEigen jacobi_eigen(std::span<const double> matrix, std::size_t n,
                            double tol, int max_sweeps) {
  if (matrix.size() != n * n) throw DimensionError("jacobi_eigen: size mismatch");
  std::vector<double> a(matrix.begin(), matrix.end());
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  double total = 0.0;
  for (double x : a) total += x * x;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    }
    if (off <= tol * tol * total || off == 0.0) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        a[p * n + q] = 0.0;
        a[q * n + p] = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    return a[i * n + i] > a[j * n + j];
  });
  SymmetricEigen out;
  for (std::size_t i : idx) {
    out.values.push_back(a[i * n + i]);
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v[k * n + i];
    out.vectors.push_back(std::move(col));
  }
  return out;
}

PCAResult pca(const std::vector<std::vector<double>>& rows, std::size_t n_components) {
  if (rows.size() < n_components || rows.empty()) {
    throw ConfigError("pca: fewer rows than components");
  }
  const std::size_t n = rows.size(), d = rows.front().size();
  if (n_components > d) throw ConfigError("pca: more components than dimensions");
  PCAResult r;
  r.mean.assign(d, 0.0);
  for (const auto& row : rows) {
    if (row.size() != d) throw DimensionError("pca: ragged rows");
    for (std::size_t c = 0; c < d; ++c) r.mean[c] += row[c];
  }
  for (double& m : r.mean) m /= static_cast<double>(n);
  std::vector<std::vector<double>> xc(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) xc[i][c] = rows[i][c] - r.mean[c];
  }
  std::vector<double> cov(d * d, 0.0);
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += xc[i][a] * xc[i][b];
      cov[a * d + b] = s / denom;
      cov[b * d + a] = s / denom;
    }
  }
  const SymmetricEigen eig = jacobi_eigen(cov, d);
  double total = 0.0;
  for (double l : eig.values) total += std::max(l, 0.0);
  for (std::size_t k = 0; k < n_components; ++k) {
    std::vector<double> comp = eig.vectors[k];
    double scale = 0.0;
    for (double x : comp) scale = std::max(scale, std::abs(x));
    for (double x : comp) {
      if (std::abs(x) > 1e-12 * scale) {
        if (x < 0.0) {
          for (double& y : comp) y = -y;
        }
        break;
      }
    }
    const double var = std::max(eig.values[k], 0.0);
    r.components.push_back(std::move(comp));
    r.explained_variance.push_back(var);
    r.explained_ratio.push_back(total > 0.0 ? var / total : 0.0);
  }
  for (const auto& row : xc) {
    std::vector<double> p(n_components, 0.0);
    for (std::size_t k = 0; k < n_components; ++k) {
      for (std::size_t c = 0; c < d; ++c) p[k] += row[c] * r.components[k][c];
    }
    r.projections.push_back(std::move(p));
  }
  return r;
}

PCAResult pca(const RepresentationSummary& summary, std::size_t n_components,
              std::vector<int>* pairs) {
  std::vector<std::vector<double>> rows;
  std::vector<int> used;
  for (int p = 0; p < 25; ++p) {
    if (summary.counts[p] == 0) continue;
    rows.emplace_back(summary.means.begin() + p * summary.dim,
                      summary.means.begin() + (p + 1) * summary.dim);
    used.push_back(p);
  }
  if (pairs) *pairs = used;
  return pca(rows, n_components);
}

// ---------------------------------------------------------------------------
// Serialisation

std::string matrix_csv(std::span<const double> m, std::size_t n,
                       std::span<const std::string> labels) {
  if (m.size() != n * n || labels.size() != n) {
    throw DimensionError("matrix_csv: size mismatch");
  }
  std::ostringstream os;
  os << "row,col,row_label,col_label,value\n" << std::setprecision(17);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      os << i << ',' << j << ',' << labels[i] << ',' << labels[j] << ','
         << m[i * n + j] << '\n';
    }
  }
  return os.str();
}

std::string gaussian_fits_csv(
    std::span<const std::pair<std::int64_t, std::vector<GaussianFit>>> fits) {
  static const char* kNames[] = {"shape", "color", "texture"};
  std::ostringstream os;
  os << "step,feature,sigma,amplitude,loss,infinite_sigma\n" << std::setprecision(17);
  for (const auto& [step, per_feature] : fits) {
    for (std::size_t f = 0; f < per_feature.size(); ++f) {
      const auto& g = per_feature[f];
      os << step << ',' << kNames[f % 3] << ',';
      if (g.infinite_sigma) {
        os << "inf";
      } else {
        os << g.sigma;
      }
      os << ',' << g.amplitude << ',' << g.loss << ',' << (g.infinite_sigma ? 1 : 0)
         << '\n';
    }
  }
  return os.str();
}

std::string pca_csv(std::span<const PCAEntry> entries) {
  std::ostringstream os;
  std::size_t k_max = 0;
  for (const auto& e : entries) k_max = std::max(k_max, e.result.components.size());
  os << "task,layer,pair,shape,color,count";
  for (std::size_t k = 0; k < k_max; ++k) os << ",pc" << k + 1;
  os << '\n' << std::setprecision(17);
  for (const auto& e : entries) {
    for (std::size_t i = 0; i < e.pairs.size(); ++i) {
      const int p = e.pairs[i];
      os << task_name(e.summary.task) << ',' << e.summary.layer << ',' << p << ','
         << p / kFeatureValues + 1 << ',' << p % kFeatureValues + 1 << ','
         << e.summary.counts[p];
      for (std::size_t k = 0; k < k_max; ++k) {
        os << ',';
        if (k < e.result.projections[i].size()) os << e.result.projections[i][k];
      }
      os << '\n';
    }
  }
  return os.str();
}

std::string pca_variance_csv(std::span<const PCAEntry> entries) {
  std::ostringstream os;
  os << "task,layer,component,explained_variance,explained_ratio\n"
     << std::setprecision(17);
  for (const auto& e : entries) {
    for (std::size_t k = 0; k < e.result.explained_variance.size(); ++k) {
      os << task_name(e.summary.task) << ',' << e.summary.layer << ',' << k + 1 << ','
         << e.result.explained_variance[k] << ',' << e.result.explained_ratio[k] << '\n';
    }
  }
  return os.str();
}

json within_group_json(const WithinGroupAttention& w, int layer, int head) {
  json j;
  j["layer"] = layer;
  j["head"] = head;
  j["shape"] = {w.size, w.size};
  j["same_group_fraction"] = w.same_group_fraction;
  json mean = json::array(), count = json::array();
  for (std::size_t r = 0; r < w.size; ++r) {
    json mr = json::array(), cr = json::array();
    for (std::size_t c = 0; c < w.size; ++c) {
      const std::size_t i = r * w.size + c;
      if (w.count[i]) {
        mr.push_back(w.mean[i]);
      } else {
        mr.push_back(nullptr);
      }
      cr.push_back(w.count[i]);
    }
    mean.push_back(mr);
    count.push_back(cr);
  }
  j["mean"] = mean;
  j["count"] = count;
  return j;
}

json eos_profile_json(const EosProfile& p, int layer, int head) {
  json j;
  j["layer"] = layer;
  j["head"] = head;
  j["groups"] = json::array();
  for (const auto& [g, bins] : p.mean) {
    json grp;
    grp["group"] = g + 1;
    grp["index"] = json::array();
    grp["mean"] = json::array();
    grp["count"] = json::array();
    for (const auto& [r, m] : bins) {
      grp["index"].push_back(r);
      grp["mean"].push_back(m);
      grp["count"].push_back(p.count.at(g).at(r));
    }
    j["groups"].push_back(grp);
  }
  return j;
}

}  // namespace labelseq
