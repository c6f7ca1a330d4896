#include "labelseq/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "labelseq/analysis.hpp"
#include "labelseq/dataset.hpp"
#include "labelseq/evaluation.hpp"
#include "labelseq/training.hpp"

namespace labelseq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string() + " for writing");
  f << text;
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  return json::parse(f);
}

fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("LABELSEQ_OUT"); env && *env) return env;
  return "runs";
}

std::vector<int> parse_arch(std::string s) {
  s.erase(std::remove_if(s.begin(), s.end(),
                         [](char c) { return c == '[' || c == ']' || c == ' '; }),
          s.end());
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty() || !std::all_of(part.begin(), part.end(), ::isdigit)) {
      throw UsageError("invalid --arch '" + s + "' (expected e.g. 1,4)");
    }
    out.push_back(std::stoi(part));
  }
  if (out.empty()) throw UsageError("invalid --arch '" + s + "'");
  return out;
}

std::vector<TaskId> parse_tasks(const std::string& s) {
  if (s == "all" || s == "multi") return {kAllTasks.begin(), kAllTasks.end()};
  std::vector<TaskId> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto t = parse_task(part);
    if (!t) throw UsageError("unknown task '" + part + "'");
    out.push_back(*t);
  }
  if (out.empty()) throw UsageError("empty --task");
  return out;
}

std::string task_slug(TaskId t) {
  std::string s(task_name(t));
  s.erase(std::remove_if(s.begin(), s.end(), [](char c) { return c == '[' || c == ']'; }),
          s.end());
  return s;
}

json dataset_spec_json(const DatasetSpec& s) {
  return {{"seed", s.seed},           {"n_sequences", s.n_sequences},
          {"min_len", s.min_len},     {"max_len", s.max_len},
          {"label_range", s.label_range}, {"train_max_len", s.train_max_len}};
}

DatasetSpec dataset_spec_from_json(const json& j) {
  DatasetSpec s;
  s.seed = j.value("seed", s.seed);
  s.n_sequences = j.value("n_sequences", s.n_sequences);
  s.min_len = j.value("min_len", s.min_len);
  s.max_len = j.value("max_len", s.max_len);
  s.label_range = j.value("label_range", s.label_range);
  s.train_max_len = j.value("train_max_len", s.train_max_len);
  return s;
}

// Run manifest kept at <root>/<run>/run.json.
struct RunContext {
  fs::path root;
  std::string run_id;
  fs::path dir() const { return root / run_id; }
  fs::path manifest() const { return dir() / "run.json"; }
};

void register_artifacts(const RunContext& ctx, const std::vector<fs::path>& paths) {
  json m = read_json(ctx.manifest());
  std::set<std::string> all;
  for (const auto& a : m.value("artifacts", json::array())) all.insert(a.get<std::string>());
  for (const auto& p : paths) {
    all.insert(fs::relative(p, ctx.root).generic_string());
  }
  m["artifacts"] = std::vector<std::string>(all.begin(), all.end());
  write_text(ctx.manifest(), m.dump(2) + "\n");
}

struct LoadedRun {
  json manifest;
  ModelConfig model_config;
  TrainConfig train_config;
  Dataset data;
};

LoadedRun load_run(const RunContext& ctx) {
  if (!fs::exists(ctx.manifest())) {
    throw UsageError("no run '" + ctx.run_id + "' under " + ctx.root.string());
  }
  LoadedRun r;
  r.manifest = read_json(ctx.manifest());
  r.model_config = ModelConfig::from_json(r.manifest.at("config").at("model"));
  r.train_config = TrainConfig::from_json(r.manifest.at("config").at("train"));
  r.data = read_dataset(ctx.root / r.manifest.at("dataset").at("path").get<std::string>());
  return r;
}

SampleSpec train_lengths(const DatasetSpec& s) {
  return {s.min_len, s.train_max_len, s.label_range};
}

SampleSpec generalization_lengths(const DatasetSpec& s) {
  if (s.train_max_len >= s.max_len) {
    throw ConfigError("dataset has no generalization lengths");
  }
  return {s.train_max_len + 1, s.max_len, s.label_range};
}

std::vector<EncodedEpisode> analysis_episodes(const LoadedRun& run, TaskId task,
                                              std::size_t n, std::uint64_t seed,
                                              const std::unordered_set<std::uint64_t>& exclude) {
  const auto recs = sample_eval_sequences(generalization_lengths(run.data.spec), n,
                                          seed * 1000003ULL + 11 + task_index(task),
                                          &exclude);
  std::vector<EncodedEpisode> out;
  for (const auto& r : recs) {
    out.push_back(encode_tokens(make_episode(task, r.items), run.model_config.task_mode));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenDataArgs {
  std::uint64_t seed = 0;
  std::size_t n = 100000;
  std::string out = "data.jsonl";
  int label_range = 50;
  int min_len = 5;
  int max_len = 50;
  int train_max_len = 25;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  DatasetSpec spec{a.seed, a.n, a.min_len, a.max_len, a.label_range, a.train_max_len};
  const Dataset data = generate_dataset(spec);
  const fs::path p(a.out);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const std::string sha = write_dataset(data, p);
  out << "wrote " << data.records.size() << " sequences (" << data.count(Split::kTrain)
      << " train, " << data.count(Split::kGeneralization) << " generalization) to "
      << p.string() << "\nsha256 " << sha << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string task, arch, encoding, data, run, out;
  std::optional<std::int64_t> steps, eval_every;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<int> d_model;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  json cfg = json::object();
  fs::path cfg_dir = ".";
  if (!a.config.empty()) {
    cfg = read_json(a.config);
    cfg_dir = fs::path(a.config).parent_path();
  }
  ModelConfig mc = ModelConfig::from_json(cfg.value("model", json::object()));
  TrainConfig tc = TrainConfig::from_json(cfg.value("train", json::object()));
  const json data_cfg = cfg.value("data", json::object());
  DatasetSpec ds = dataset_spec_from_json(data_cfg);
  bool n_labels_given = cfg.value("model", json::object()).contains("n_labels");

  if (!a.task.empty()) {
    tc.tasks = parse_tasks(a.task);
    mc.task_mode = tc.tasks.size() > 1 ? TaskMode::kMulti : mc.task_mode;
  }
  if (!a.arch.empty()) mc.heads_per_layer = parse_arch(a.arch);
  if (!a.encoding.empty()) {
    const auto e = parse_encoding(a.encoding);
    if (!e) throw UsageError("unknown encoding '" + a.encoding + "'");
    mc.encoding = *e;
  }
  if (a.steps) tc.steps = *a.steps;
  if (a.eval_every) tc.eval_every = *a.eval_every;
  if (a.seed) tc.seed = *a.seed;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.d_model) mc.d_model = *a.d_model;
  if (tc.tasks.size() > 1) mc.task_mode = TaskMode::kMulti;

  const RunContext ctx{output_root(a.out),
                       !a.run.empty() ? a.run : cfg.value("run_id", std::string())};
  RunContext run = ctx;
  if (run.run_id.empty()) {
    std::string tasks = tc.tasks.size() == kNumTasks ? "multi" : "";
    if (tasks.empty()) {
      for (TaskId t : tc.tasks) tasks += (tasks.empty() ? "" : "+") + task_slug(t);
    }
    std::string arch;
    for (int h : mc.heads_per_layer) arch += (arch.empty() ? "" : "-") + std::to_string(h);
    run.run_id = tasks + "_" + arch + "_" + std::string(encoding_name(mc.encoding)) +
                 "_d" + std::to_string(mc.d_model) + "_seed" + std::to_string(tc.seed);
  }
  fs::create_directories(run.dir());

  // Dataset: an existing file, or generated into the run directory.
  Dataset data;
  fs::path data_path;
  std::string data_flag = a.data;
  if (data_flag.empty() && data_cfg.contains("path")) {
    data_flag = (cfg_dir / data_cfg.at("path").get<std::string>()).string();
  }
  if (!data_flag.empty()) {
    data_path = data_flag;
    data = read_dataset(data_path);
  } else {
    data = generate_dataset(ds);
    data_path = run.dir() / "data.jsonl";
    write_dataset(data, data_path);
  }
  const std::string sha = sha256_hex([&] {
    std::ifstream f(data_path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }());

  if (!n_labels_given) {
    mc.n_labels = mc.encoding == OrderEncoding::kLabel ? data.spec.label_range
                                                       : data.spec.max_len;
    mc.position_table = std::max(mc.position_table, data.spec.max_len);
  }
  mc.validate();
  tc.validate(mc.task_mode);

  json manifest;
  manifest["run_id"] = run.run_id;
  manifest["config"] = {{"data", dataset_spec_json(data.spec)},
                        {"model", mc.to_json()},
                        {"train", tc.to_json()}};
  fs::path rel_data = fs::relative(fs::absolute(data_path), fs::absolute(run.root));
  manifest["dataset"] = {{"path", rel_data.generic_string()}, {"sha256", sha}};
  manifest["seeds"] = {{"data", data.spec.seed}, {"train", tc.seed}};
  manifest["parameter_count"] = mc.parameter_count();
  manifest["artifacts"] = json::array();
  write_text(run.manifest(), manifest.dump(2) + "\n");

  ProgressFn progress;
  if (!a.quiet) progress = [&err](const std::string& s) { err << s << std::endl; };
  const TrainResult res = train(mc, tc, data, run.dir(), progress);

  std::vector<fs::path> artifacts{run.dir() / "runlog.csv", run.dir() / "best.json"};
  for (const auto& c : res.log.checkpoints) {
    artifacts.push_back(fs::path(c.stem.string() + ".json"));
    artifacts.push_back(fs::path(c.stem.string() + ".bin"));
  }
  if (data_flag.empty()) {
    artifacts.push_back(data_path);
    artifacts.push_back(manifest_path_for(data_path));
  }
  std::erase_if(artifacts, [](const fs::path& p) { return !fs::exists(p); });
  register_artifacts(run, artifacts);
  out << "run " << run.run_id << " -> " << run.dir().string() << "\n";
  if (res.log.best) {
    out << "best step " << res.log.best->step << " score " << res.log.best->score << "\n";
  }
  return 0;
}

struct EvalArgs {
  std::string run, out, ckpt = "best", protocol = "fig2";
  double scale = 1.0;
  std::uint64_t seed = 0;
  std::size_t batch = 64;
  bool outcomes = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const RunContext ctx{output_root(a.out), a.run};
  const LoadedRun run = load_run(ctx);
  const ProtocolSpec spec = protocol_spec(a.protocol, a.scale);
  const fs::path stem = resolve_checkpoint(ctx.dir(), a.ckpt);
  const Model model = load_checkpoint(stem);
  const auto exclude = content_index(run.data);

  EvalSets sets;
  sets.task_mode = run.model_config.task_mode;
  sets.tasks = run.train_config.tasks;
  sets.train_lengths = train_lengths(run.data.spec);
  sets.generalization_lengths = generalization_lengths(run.data.spec);
  sets.seed = a.seed;
  sets.exclude = &exclude;
  EvalOptions opts;
  opts.batch_size = a.batch;
  const ProtocolBundle bundle = run_protocol(spec, model_predictor(model), sets, opts);

  std::ostringstream scale;
  scale << a.scale;
  const std::string tag = a.protocol + "_" + stem.filename().string() + "_scale" +
                          scale.str() + "_seed" + std::to_string(a.seed);
  const fs::path csv = ctx.dir() / "eval" / (tag + ".csv");
  write_text(csv, bundle_csv(bundle));
  std::vector<fs::path> artifacts{csv};
  if (a.outcomes) {
    std::string lines;
    for (const auto& r : bundle.results) {
      lines += outcomes_jsonl(r.report.outcomes);
    }
    const fs::path jl = ctx.dir() / "eval" / (tag + "_outcomes.jsonl");
    write_text(jl, lines);
    artifacts.push_back(jl);
  }
  register_artifacts(ctx, artifacts);
  for (const auto& r : bundle.results) {
    out << r.set << ' ' << decode_mode_name(r.report.mode) << " item_accuracy "
        << r.report.overall.item_accuracy << " label_accuracy "
        << r.report.overall.label_accuracy << "\n";
  }
  out << "wrote " << csv.string() << "\n";
  return 0;
}

struct AnalyzeArgs {
  std::string run, out, ckpt = "best", analysis = "all";
  std::size_t n = 200;
  std::size_t maps = 3;
  std::uint64_t seed = 0;
};

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  static const std::set<std::string> kKinds{"attn", "gauss", "ablate", "pca", "all"};
  if (!kKinds.count(a.analysis)) throw UsageError("unknown analysis '" + a.analysis + "'");
  const RunContext ctx{output_root(a.out), a.run};
  const LoadedRun run = load_run(ctx);
  const fs::path stem = resolve_checkpoint(ctx.dir(), a.ckpt);
  const Model model = load_checkpoint(stem);
  const std::string ck = stem.filename().string();
  const fs::path dir = ctx.root / "analysis" / ctx.run_id;
  const auto exclude = content_index(run.data);
  const auto& tasks = run.train_config.tasks;
  const bool all = a.analysis == "all";
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    written.push_back(dir / name);
  };

  if (all || a.analysis == "attn") {
    for (TaskId t : tasks) {
      const auto eps = analysis_episodes(run, t, a.n, a.seed, exclude);
      for (std::size_t i = 0; i < std::min(a.maps, eps.size()); ++i) {
        const auto maps = attention_maps(model, eps[i], /*reorder_to_output=*/true);
        emit("attn_" + task_slug(t) + "_" + std::to_string(i) + "_" + ck + ".json",
             attention_maps_json(maps, t).dump() + "\n");
      }
      if (!first_level_feature(t)) continue;
      for (std::size_t l = 0; l < model.config().n_layers(); ++l) {
        const auto attn = collect_attention(model, eps, static_cast<int>(l));
        const std::string sl = task_slug(t) + "_L" + std::to_string(l) + "_" + ck;
        emit("within_group_" + sl + ".json",
             within_group_json(within_group_attention(attn), static_cast<int>(l), -1).dump(2) + "\n");
        emit("eos_profile_" + sl + ".json",
             eos_profile_json(eos_attention_profile(attn), static_cast<int>(l), -1).dump(2) + "\n");
      }
    }
  }
  if (all || a.analysis == "gauss") {
    std::vector<std::string> labels;
    for (const char* f : {"s", "c", "t"}) {
      for (int v = 1; v <= kFeatureValues; ++v) labels.push_back(f + std::to_string(v));
    }
    emit("embedding_similarity_" + ck + ".csv",
         matrix_csv(embedding_similarity(model.params()), kItemDims, labels));
    std::vector<std::pair<std::int64_t, std::vector<GaussianFit>>> fits;
    std::vector<fs::path> stems;
    if (fs::exists(ctx.dir() / "checkpoints")) {
      for (const auto& e : fs::directory_iterator(ctx.dir() / "checkpoints")) {
        if (e.path().extension() == ".json") stems.push_back(fs::path(e.path()).replace_extension());
      }
    }
    std::sort(stems.begin(), stems.end());
    for (const auto& s : stems) {
      CheckpointInfo info;
      const Model m = load_checkpoint(s, &info);
      fits.emplace_back(info.step, feature_gaussian_fits(m.params()));
    }
    emit("gauss_fits_all.csv", gaussian_fits_csv(fits));
    std::vector<std::string> tlabels;
    for (TaskId t : kAllTasks) tlabels.emplace_back(task_name(t));
    emit("task_similarity_" + ck + ".csv",
         matrix_csv(task_embedding_similarity(model.params()), kNumTasks, tlabels));
  }
  if (all || a.analysis == "ablate") {
    std::vector<EvalEpisode> eps;
    for (TaskId t : tasks) {
      for (auto& e : analysis_episodes(run, t, a.n, a.seed + 1, exclude)) {
        eps.push_back({static_cast<std::int64_t>(eps.size()), std::move(e)});
      }
    }
    const auto specs = canonical_ablation_specs(model.config());
    emit("ablation_" + ck + ".csv", ablation_csv(ablation_sweep(model, eps, specs)));
  }
  if (all || a.analysis == "pca") {
    std::vector<PCAEntry> entries;
    for (TaskId t : tasks) {
      const auto eps = analysis_episodes(run, t, a.n, a.seed + 2, exclude);
      for (std::size_t l = 0; l < model.config().n_layers(); ++l) {
        PCAEntry e;
        e.summary = task_conditioned_reps(model, eps, static_cast<int>(l));
        e.result = pca(e.summary, 2, &e.pairs);
        entries.push_back(std::move(e));
      }
    }
    emit("pca_" + ck + ".csv", pca_csv(entries));
    emit("pca_variance_" + ck + ".csv", pca_variance_csv(entries));
  }
  register_artifacts(ctx, written);
  for (const auto& p : written) out << "wrote " << p.string() << "\n";
  return 0;
}

struct ReportArgs {
  std::string run, out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const RunContext ctx{output_root(a.out), a.run};
  const LoadedRun run = load_run(ctx);
  json rep;
  rep["run_id"] = ctx.run_id;
  rep["arch"] = run.model_config.arch_string();
  rep["encoding"] = encoding_name(run.model_config.encoding);
  rep["parameter_count"] = run.model_config.parameter_count();
  if (fs::exists(ctx.dir() / "best.json")) rep["best"] = read_json(ctx.dir() / "best.json");

  // Overall rows of every evaluation CSV in the run.
  std::ostringstream csv;
  csv << "source,protocol,task,mode,set,metric,value,n\n";
  std::vector<fs::path> files;
  if (fs::exists(ctx.dir() / "eval")) {
    for (const auto& e : fs::directory_iterator(ctx.dir() / "eval")) {
      if (e.path().extension() == ".csv") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> c;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) c.push_back(cell);
      if (c.size() != 8 || c[3] != "set") continue;
      csv << f.stem().string() << ',' << c[0] << ',' << c[1] << ',' << c[2] << ','
          << c[4] << ',' << c[5] << ',' << c[6] << ',' << c[7] << '\n';
    }
  }
  write_text(ctx.dir() / "report.csv", csv.str());
  write_text(ctx.dir() / "report.json", rep.dump(2) + "\n");
  register_artifacts(ctx, {ctx.dir() / "report.csv", ctx.dir() / "report.json"});
  out << "wrote " << (ctx.dir() / "report.json").string() << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Label-encoded sequence rearrangement experiments"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a dataset");
  g->add_option("--seed", gen.seed);
  g->add_option("--n", gen.n);
  g->add_option("--out", gen.out);
  g->add_option("--label-range", gen.label_range);
  g->add_option("--min-len", gen.min_len);
  g->add_option("--max-len", gen.max_len);
  g->add_option("--train-max-len", gen.train_max_len);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config)->check(CLI::ExistingFile);
  t->add_option("--task", tr.task, "task name, comma list, or 'all'");
  t->add_option("--arch", tr.arch, "heads per layer, e.g. 1,4");
  t->add_option("--encoding", tr.encoding, "label | sin | learned");
  t->add_option("--steps", tr.steps);
  t->add_option("--eval-every", tr.eval_every);
  t->add_option("--seed", tr.seed);
  t->add_option("--lr", tr.lr);
  t->add_option("--d-model", tr.d_model);
  t->add_option("--data", tr.data, "existing dataset .jsonl");
  t->add_option("--run", tr.run, "run id");
  t->add_option("--out", tr.out, "output root");
  t->add_flag("--quiet", tr.quiet);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint under a protocol");
  e->add_option("--run", ev.run)->required();
  e->add_option("--ckpt", ev.ckpt, "best | last | step | path");
  e->add_option("--protocol", ev.protocol, "fig2 | fig5A | fig5B | fig6");
  e->add_option("--scale", ev.scale);
  e->add_option("--seed", ev.seed);
  e->add_option("--batch", ev.batch);
  e->add_option("--out", ev.out, "output root");
  e->add_flag("--outcomes", ev.outcomes, "also dump per-token outcomes");

  AnalyzeArgs an;
  auto* z = app.add_subcommand("analyze", "Run interpretability analyses");
  z->add_option("--run", an.run)->required();
  z->add_option("--ckpt", an.ckpt);
  z->add_option("--analysis", an.analysis, "attn | gauss | ablate | pca | all");
  z->add_option("--n", an.n, "episodes per task");
  z->add_option("--maps", an.maps, "attention maps per task");
  z->add_option("--seed", an.seed);
  z->add_option("--out", an.out, "output root");

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Summarise a run's evaluations");
  r->add_option("--run", rp.run)->required();
  r->add_option("--out", rp.out, "output root");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    if (pe.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "usage error: " << pe.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (t->parsed()) return cmd_train(tr, out, err);
    if (e->parsed()) return cmd_eval(ev, out);
    if (z->parsed()) return cmd_analyze(an, out);
    if (r->parsed()) return cmd_report(rp, out);
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << "\n";
    return 1;
  } catch (const ConfigError& ex) {
    err << "configuration error: " << ex.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace labelseq
