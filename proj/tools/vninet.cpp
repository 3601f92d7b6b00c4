#include <CLI11.hpp>
#include <json.hpp>

#include "vni/eval.hpp"
#include "vni/training.hpp"

#include <fstream>
#include <iostream>

using namespace vni;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::string precision = "f64";
};

KvConfig assemble_config(const GlobalOpts& g) {
  KvConfig kv;
  if (!g.config_path.empty()) kv = KvConfig::load(g.config_path);
  for (const auto& ov : g.overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("--set expects KEY=VALUE, got '" + ov + "'");
    }
    kv.set(ov.substr(0, eq), ov.substr(eq + 1));
  }
  return kv;
}

struct LoadedModel {
  ModelConfig config;
  ModelParams<double> params;
};

LoadedModel load_model(const std::string& ckpt, bool random_params, const GlobalOpts& g) {
  LoadedModel m;
  if (!ckpt.empty()) {
    Checkpoint loaded = load_checkpoint(ckpt);
    m.config = loaded.config;
    m.params = std::move(loaded.params);
    // config file / --set still override runtime-only keys (e.g. n_points)
    KvConfig kv = m.config.to_kv();
    kv.merge(assemble_config(g));
    m.config = ModelConfig::from_kv(kv);
  } else if (random_params) {
    m.config = ModelConfig::from_kv(assemble_config(g));
    m.params = init_params<double>(m.config, g.seed);
  } else {
    throw ValidationError("either --ckpt or --random-params is required");
  }
  return m;
}

int run_gen(const GlobalOpts& g, const std::string& out_dir) {
  KvConfig kv = assemble_config(g);
  GenConfig cfg = GenConfig::from_kv(kv);
  if (!kv.has("seed")) cfg.seed = g.seed;
  const GenResult res = gen_synthetic(cfg, out_dir);
  std::cout << "generated " << cfg.scenes << " scenes x " << cfg.frames_per_scene << " frames\n"
            << "  all:   " << res.all_index << "\n"
            << "  train: " << res.train_index << "\n"
            << "  ref:   " << res.ref_index << "\n"
            << "  query: " << res.query_index << "\n";
  return 0;
}

int run_train(const GlobalOpts& g, const std::string& index_path, const std::string& out_ckpt,
              const std::string& log_path) {
  const KvConfig kv = assemble_config(g);
  const ModelConfig model_cfg = ModelConfig::from_kv(kv);
  TrainConfig train_cfg = TrainConfig::from_kv(kv);
  if (!kv.has("train_seed")) train_cfg.seed = g.seed;

  const DatasetIndex index = load_index(index_path);
  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!log_path.empty()) {
    log_file.open(log_path, std::ios::app);
    if (!log_file) throw ValidationError("cannot open training log: " + log_path);
    log = &log_file;
  }
  const TrainResult res = train_loop(index, model_cfg, train_cfg, log, out_ckpt);
  for (std::size_t e = 0; e < res.epochs.size(); ++e) {
    std::cout << "epoch " << e << ": mean_loss=" << res.epochs[e].mean_loss
              << " active=" << res.epochs[e].active_fraction << "\n";
  }
  std::cout << "checkpoint written to " << out_ckpt << "\n";
  return 0;
}

int run_extract(const GlobalOpts& g, const std::string& index_path, const std::string& ckpt,
                bool random_params, bool raw_control, const std::string& out_db) {
  const DatasetIndex index = load_index(index_path);
  ExtractResult res;
  if (raw_control) {
    const KvConfig kv = assemble_config(g);
    const ModelConfig cfg = ModelConfig::from_kv(kv);
    res = extract_all_raw_control(index, cfg.desc_dim);
  } else {
    const LoadedModel m = load_model(ckpt, random_params, g);
    res = extract_all(index, m.params, m.config);
  }
  save_db(res.db, out_db);
  std::cout << "wrote " << res.db.entries.size() << " descriptors (dim " << res.db.dim() << ") to "
            << out_db << "\n";
  for (const auto& f : res.failures) {
    std::cerr << "failed frame id " << f.id << " (" << f.path << "): " << f.reason << "\n";
  }
  return res.failures.empty() ? 0 : 1;
}

int run_index(const std::string& index_path, int anchor) {
  const DatasetIndex index = load_index(index_path);
  std::cout << index.records.size() << " records, thresholds pos/neg/eval = "
            << index.thresholds.positive << "/" << index.thresholds.negative << "/"
            << index.thresholds.eval << " m\n";
  if (index.records.empty()) std::cerr << "warning: index is empty\n";
  if (anchor >= 0) {
    const auto [pos, neg] = positives_negatives(index, anchor);
    std::cout << "anchor " << anchor << ": " << pos.size() << " positives, " << neg.size()
              << " negatives\n";
  }
  return 0;
}

int run_eval(const std::string& query_db, const std::string& ref_db, double radius, bool as_json) {
  const DescriptorDB queries = load_db(query_db);
  const DescriptorDB refs = load_db(ref_db);
  const RecallReport rep = recall(queries, refs, radius);
  if (as_json) {
    nlohmann::json j{{"ar_at_1", rep.ar_at_1},
                     {"ar_at_1pct", rep.ar_at_1pct},
                     {"queries_evaluated", rep.queries_evaluated},
                     {"queries_excluded", rep.queries_excluded},
                     {"reference_count", rep.reference_count},
                     {"top_pct_k", rep.top_pct_k}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "AR@1  = " << rep.ar_at_1 << "\nAR@1% = " << rep.ar_at_1pct << "\n"
              << rep.queries_evaluated << " queries evaluated, " << rep.queries_excluded
              << " excluded, " << rep.reference_count << " references (top-1% = top-"
              << rep.top_pct_k << ")\n";
  }
  return 0;
}

int run_stress(const GlobalOpts& g, const std::string& query_index, const std::string& ref_index,
               const std::string& ckpt, bool random_params, const std::string& mode_name,
               int trials, const std::string& out_path) {
  const LoadedModel m = load_model(ckpt, random_params, g);
  const RotationMode mode = mode_name == "z_axis" ? RotationMode::kZAxis : RotationMode::kSo3;
  const DatasetIndex queries = load_index(query_index);
  const DatasetIndex refs = load_index(ref_index.empty() ? query_index : ref_index);
  const StressReport rep = rotation_stress(queries, refs, m.params, m.config, mode, trials, g.seed);

  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw ValidationError("cannot open stress report: " + out_path);
    write_stress_jsonl(rep, out);
  } else {
    write_stress_jsonl(rep, std::cout);
  }
  std::cout << "max relative deviation over " << rep.trials << " " << mode_name
            << " trials: " << rep.max_residual << "\n"
            << "recall deltas: AR@1 " << rep.ar1_delta << ", AR@1% " << rep.ar1pct_delta
            << (rep.rankings_identical ? " (rankings identical)" : " (rankings changed)") << "\n";
  return 0;
}

int run_check(const GlobalOpts& g, const std::string& target, int trials) {
  const Precision prec = g.precision == "f32" ? Precision::kF32 : Precision::kF64;
  std::vector<std::string> targets;
  if (target == "all") {
    targets = conformance_targets();
  } else {
    targets.push_back(target);
  }
  bool all_pass = true;
  for (const auto& t : targets) {
    const ConformanceReport rep = check_equivariance(t, trials, prec, g.seed);
    std::cout << (rep.pass ? "PASS" : "FAIL") << " " << rep.target << ": max residual "
              << rep.max_residual << " (tolerance " << rep.tolerance << ", " << rep.trials
              << " trials, " << g.precision << ")\n";
    all_pass = all_pass && rep.pass;
  }
  return all_pass ? 0 : 1;
}

int run_dump(const GlobalOpts& g, const std::string& frame, const std::string& ckpt,
             bool random_params, const std::string& stage_name, const std::string& out_path) {
  const LoadedModel m = load_model(ckpt, random_params, g);
  DumpStage stage;
  if (stage_name == "equi") {
    stage = DumpStage::kEqui;
  } else if (stage_name == "ri") {
    stage = DumpStage::kRi;
  } else {
    stage = DumpStage::kDescriptor;
  }
  dump_features(load_frame(frame), m.params, m.config, stage, out_path);
  std::cout << "wrote " << stage_name << " features to " << out_path << "\n";
  return 0;
}

int run_params(const GlobalOpts& g) {
  const ModelConfig cfg = ModelConfig::from_kv(assemble_config(g));
  const ModelParams<double> params = init_params<double>(cfg, g.seed);
  long long total = 0;
  for (const auto& entry : param_breakdown(params)) {
    std::cout << entry.name << ": " << entry.count << "\n";
    total += entry.count;
  }
  const double reference = 2.2e6;
  std::cout << "total trainable parameters: " << total << "\n"
            << "reference count 2.2e6, deviation "
            << 100.0 * (static_cast<double>(total) - reference) / reference << "%\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rotation-invariant LiDAR place-recognition descriptor engine"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "flat key=value config file");
  app.add_option("--set", g.overrides, "config override KEY=VALUE (repeatable, wins over --config)");
  app.add_option("--seed", g.seed, "seed for anything randomized");
  app.add_option("--precision", g.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "triplet training on an index");
  std::string train_index, train_ckpt, train_log;
  train->add_option("--index", train_index, "training index csv")->required();
  train->add_option("--out", train_ckpt, "output checkpoint")->required();
  train->add_option("--log", train_log, "append training log lines here");

  auto* extract = app.add_subcommand("extract", "descriptor extraction to a database");
  std::string ex_index, ex_ckpt, ex_out;
  bool ex_random = false, ex_raw = false;
  extract->add_option("--index", ex_index, "frame index csv")->required();
  extract->add_option("--ckpt", ex_ckpt, "model checkpoint");
  extract->add_flag("--random-params", ex_random, "use randomly initialized parameters");
  extract->add_flag("--raw-control", ex_raw, "flattened raw coordinates (non-invariant control)");
  extract->add_option("--out", ex_out, "output .vndb path")->required();

  auto* indexcmd = app.add_subcommand("index", "validate and summarize an index");
  std::string idx_path;
  int idx_anchor = -1;
  indexcmd->add_option("--index", idx_path, "index csv")->required();
  indexcmd->add_option("--anchor", idx_anchor, "report positive/negative sets for this id");

  auto* evalcmd = app.add_subcommand("eval", "recall of a query db against a reference db");
  std::string eval_q, eval_r;
  double eval_radius = 25.0;
  bool eval_json = false;
  evalcmd->add_option("--query-db", eval_q, "query .vndb")->required();
  evalcmd->add_option("--ref-db", eval_r, "reference .vndb")->required();
  evalcmd->add_option("--radius", eval_radius, "ground-truth radius in meters");
  evalcmd->add_flag("--json", eval_json, "print the report as JSON");

  auto* stress = app.add_subcommand("stress", "rotation stress test");
  std::string st_query, st_ref, st_ckpt, st_mode = "so3", st_out;
  bool st_random = false;
  int st_trials = 10;
  stress->add_option("--query-index", st_query, "query index csv")->required();
  stress->add_option("--ref-index", st_ref, "reference index csv (defaults to query index)");
  stress->add_option("--ckpt", st_ckpt, "model checkpoint");
  stress->add_flag("--random-params", st_random, "use randomly initialized parameters");
  stress->add_option("--mode", st_mode, "z_axis or so3")->check(CLI::IsMember({"z_axis", "so3"}));
  stress->add_option("--trials", st_trials, "number of rotation trials");
  stress->add_option("--out", st_out, "JSON-lines report path (stdout otherwise)");

  auto* check = app.add_subcommand("check", "equivariance/invariance conformance");
  std::string ck_target;
  int ck_trials = 100;
  check->add_option("--target", ck_target, "layer name, 'model', or 'all'")->required();
  check->add_option("--trials", ck_trials, "trials per target");

  auto* dump = app.add_subcommand("dump", "per-point feature CSV dump");
  std::string dp_frame, dp_ckpt, dp_stage = "descriptor", dp_out;
  bool dp_random = false;
  dump->add_option("--frame", dp_frame, "frame .bin file")->required();
  dump->add_option("--ckpt", dp_ckpt, "model checkpoint");
  dump->add_flag("--random-params", dp_random, "use randomly initialized parameters");
  dump->add_option("--stage", dp_stage, "equi, ri, or descriptor")
      ->check(CLI::IsMember({"equi", "ri", "descriptor"}));
  dump->add_option("--out", dp_out, "output csv path")->required();

  auto* paramscmd = app.add_subcommand("params", "trainable parameter report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen(g, gen_out);
    if (train->parsed()) return run_train(g, train_index, train_ckpt, train_log);
    if (extract->parsed()) return run_extract(g, ex_index, ex_ckpt, ex_random, ex_raw, ex_out);
    if (indexcmd->parsed()) return run_index(idx_path, idx_anchor);
    if (evalcmd->parsed()) return run_eval(eval_q, eval_r, eval_radius, eval_json);
    if (stress->parsed())
      return run_stress(g, st_query, st_ref, st_ckpt, st_random, st_mode, st_trials, st_out);
    if (check->parsed()) return run_check(g, ck_target, ck_trials);
    if (dump->parsed()) return run_dump(g, dp_frame, dp_ckpt, dp_random, dp_stage, dp_out);
    if (paramscmd->parsed()) return run_params(g);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
