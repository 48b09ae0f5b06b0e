#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "odeflow/flownet.hpp"
#include "odeflow/io.hpp"
#include "odeflow/metrics.hpp"
#include "odeflow/ode.hpp"
#include "odeflow/rng.hpp"
#include "odeflow/synth.hpp"
#include "odeflow/train.hpp"

namespace fs = std::filesystem;
using namespace odeflow;

namespace {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat key=value configuration with a fixed schema; unknown keys are a hard
// error so typos never pass silently.
class KvConfig {
 public:
  static KvConfig defaults() {
    KvConfig c;
    c.values_ = {
        {"seed", "1"},
        {"model.n", "8"},
        {"model.feat_dim", "32"},
        {"model.d_inp", "32"},
        {"model.d_hid", "32"},
        {"model.mixing_depth", "2"},
        {"model.rhs_kind", "transformer"},
        {"model.lookup_radius", "2"},
        {"model.decoder_zero_init", "true"},
        {"model.match_temperature", "1.0"},
        {"solver.method", "midpoint"},
        {"solver.step_size", "0.25"},
        {"solver.rtol", "1e-3"},
        {"solver.atol", "1e-3"},
        {"solver.max_steps", "1000"},
        {"gen.height", "96"},
        {"gen.width", "96"},
        {"gen.family", "mix"},
        {"gen.max_disp", "6.0"},
        {"gen.octaves", "4"},
        {"train.iterations", "2000"},
        {"train.batch", "4"},
        {"train.lr", "2e-4"},
        {"train.weight_decay", "1e-4"},
        {"train.gamma", "0.9"},
        {"train.num_predictions", "1"},
        {"train.grad_mode", "direct"},
        {"train.refiner", "ode"},
        {"train.log_every", "100"},
        {"train.val_samples", "16"},
        {"eval.samples", "32"},
        {"eval.refiner", "ode"},
    };
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    it->second = value;
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
      }
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void apply_overrides(const std::vector<std::string>& sets) {
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + s);
      set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }
  int geti(const std::string& key) const { return std::stoi(get(key)); }
  double getd(const std::string& key) const { return std::stod(get(key)); }
  uint64_t getu(const std::string& key) const { return std::stoull(get(key)); }
  bool getb(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key " + key + " expects a boolean, got: " + v);
  }

  void echo(const fs::path& out_dir) const {
    std::ofstream os(out_dir / "config.txt");
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
  }

 private:
  static std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
  }
  std::map<std::string, std::string> values_;
};

ModelConfig model_config_from(const KvConfig& c) {
  ModelConfig m;
  m.n = c.geti("model.n");
  m.feat_dim = c.geti("model.feat_dim");
  m.d_inp = c.geti("model.d_inp");
  m.d_hid = c.geti("model.d_hid");
  m.mixing_depth = c.geti("model.mixing_depth");
  m.rhs_kind = parse_rhs_kind(c.get("model.rhs_kind"));
  m.lookup_radius = c.geti("model.lookup_radius");
  m.decoder_zero_init = c.getb("model.decoder_zero_init");
  m.match_temperature = c.getd("model.match_temperature");
  m.init_seed = c.getu("seed");
  m.solver = SolverConfig{parse_method(c.get("solver.method")), c.getd("solver.step_size"),
                          c.getd("solver.rtol"), c.getd("solver.atol"), c.geti("solver.max_steps")};
  m.validate();
  return m;
}

GenConfig gen_config_from(const KvConfig& c) {
  GenConfig g;
  g.seed = c.getu("seed");
  g.height = c.geti("gen.height");
  g.width = c.geti("gen.width");
  g.family = parse_family(c.get("gen.family"));
  g.max_disp = c.getd("gen.max_disp");
  g.octaves = c.geti("gen.octaves");
  g.validate();
  return g;
}

TrainConfig train_config_from(const KvConfig& c) {
  TrainConfig t;
  t.iterations = c.geti("train.iterations");
  t.batch = c.geti("train.batch");
  t.lr = c.getd("train.lr");
  t.weight_decay = c.getd("train.weight_decay");
  t.gamma = c.getd("train.gamma");
  t.num_predictions = c.geti("train.num_predictions");
  t.grad_route = parse_grad_route(c.get("train.grad_mode"));
  t.refiner = parse_refiner(c.get("train.refiner"));
  t.seed = c.getu("seed");
  t.log_every = c.geti("train.log_every");
  t.val_samples = c.geti("train.val_samples");
  t.validate();
  return t;
}

fs::path prepare_out(const std::string& out, const KvConfig& cfg) {
  fs::path dir(out);
  fs::create_directories(dir);
  cfg.echo(dir);
  return dir;
}

std::string config_echo_string(const KvConfig&) { return "see config.txt"; }

int cmd_train(const KvConfig& cfg, const std::string& out) {
  const fs::path dir = prepare_out(out, cfg);
  ModelConfig mc = model_config_from(cfg);
  GenConfig gc = gen_config_from(cfg);
  TrainConfig tc = train_config_from(cfg);

  FlowNet model(mc);
  std::ofstream metrics(dir / "metrics.jsonl");
  auto on_log = [&](const TrainLogEntry& e) {
    nlohmann::json j{{"iter", e.iter},
                     {"loss", e.loss},
                     {"val_epe", e.val_epe},
                     {"lr", e.lr},
                     {"solver_steps_mean", e.solver_steps_mean}};
    metrics << j.dump() << "\n";
    metrics.flush();
    std::cout << "iter " << e.iter << "  loss " << e.loss << "  val_epe " << e.val_epe << "  lr "
              << e.lr << std::endl;
  };

  TrainResult res = train(model, gc, tc, on_log);
  model.save((dir / "checkpoint.bin").string());

  const auto val_seeds = validation_seeds(tc.seed, std::max(tc.val_samples, cfg.geti("eval.samples")));
  EvalReport report = evaluate_model(model, gc, val_seeds, tc.refiner, tc.num_predictions,
                                     config_echo_string(cfg));
  std::ofstream(dir / "eval_report.json") << report.to_json() << "\n";
  std::cout << "trained " << tc.iterations << " iterations in " << res.wall_seconds
            << " s; final val EPE " << report.epe << " px (rejected steps " << res.rejected_steps
            << ")" << std::endl;
  return 0;
}

std::vector<SamplePair> load_manifest(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw ConfigError("cannot read manifest: " + manifest_path);
  nlohmann::json j;
  is >> j;
  std::vector<SamplePair> samples;
  const fs::path base = fs::path(manifest_path).parent_path();
  for (const auto& entry : j) {
    SamplePair s;
    s.i1 = read_ppm((base / entry.at("image1").get<std::string>()).string());
    s.i2 = read_ppm((base / entry.at("image2").get<std::string>()).string());
    s.flow_gt = read_flo((base / entry.at("flow").get<std::string>()).string());
    s.valid = Tensor::full({s.i1.dim(0), s.i1.dim(1), 1}, 1.0);
    samples.push_back(std::move(s));
  }
  return samples;
}

int cmd_eval(const KvConfig& cfg, const std::string& out, const std::string& checkpoint,
             const std::string& manifest, const std::string& refiner_flag) {
  const fs::path dir = prepare_out(out, cfg);
  FlowNet model = FlowNet::load(checkpoint);
  model.set_solver(SolverConfig{parse_method(cfg.get("solver.method")),
                                cfg.getd("solver.step_size"), cfg.getd("solver.rtol"),
                                cfg.getd("solver.atol"), cfg.geti("solver.max_steps")});
  const Refiner refiner = parse_refiner(refiner_flag.empty() ? cfg.get("eval.refiner") : refiner_flag);

  EvalReport report;
  if (!manifest.empty()) {
    NoGradGuard ng;
    std::vector<SampleRecord> records;
    int idx = 0;
    for (const SamplePair& s : load_manifest(manifest)) {
      ForwardOptions opts;
      opts.refiner = refiner;
      opts.gru_iterations = cfg.geti("train.num_predictions");
      ForwardResult fwd = model.forward(s.i1, s.i2, opts);
      SampleRecord rec;
      rec.seed = static_cast<uint64_t>(idx++);
      rec.epe = epe(fwd.predictions.back()->value, s.flow_gt, s.valid);
      rec.fl_all = fl_all(fwd.predictions.back()->value, s.flow_gt, s.valid);
      rec.solver_steps = fwd.solver_steps;
      records.push_back(rec);
    }
    report = summarize(std::move(records), config_echo_string(cfg));
  } else {
    GenConfig gc = gen_config_from(cfg);
    const auto seeds = validation_seeds(cfg.getu("seed"), cfg.geti("eval.samples"));
    report = evaluate_model(model, gc, seeds, refiner, cfg.geti("train.num_predictions"),
                            config_echo_string(cfg));
  }
  std::ofstream(dir / "eval_report.json") << report.to_json() << "\n";
  std::cout << "refiner " << refiner_name(refiner) << "  epe " << report.epe << "  fl_all "
            << report.fl_all << std::endl;
  return 0;
}

int cmd_infer(const KvConfig& cfg, const std::string& out, const std::string& checkpoint,
              const std::string& image1, const std::string& image2) {
  const fs::path dir = prepare_out(out, cfg);
  FlowNet model = FlowNet::load(checkpoint);
  const Tensor i1 = read_ppm(image1);
  const Tensor i2 = read_ppm(image2);
  NoGradGuard ng;
  ForwardOptions opts;  // ODE refiner
  ForwardResult fwd = model.forward(i1, i2, opts);
  const Tensor& flow = fwd.predictions.back()->value;
  write_flo(flow, (dir / "flow.flo").string());
  write_ppm(flow_to_color(flow), (dir / "flow.ppm").string());
  std::cout << "wrote " << (dir / "flow.flo").string() << " and " << (dir / "flow.ppm").string()
            << std::endl;
  return 0;
}

int cmd_solve(const KvConfig& cfg, const std::string& out, const std::string& problem_id,
              int eval_points) {
  const fs::path dir = prepare_out(out, cfg);
  const AnalyticProblem& ap = analytic_problem(problem_id);
  SolverConfig sc{parse_method(cfg.get("solver.method")), cfg.getd("solver.step_size"),
                  cfg.getd("solver.rtol"), cfg.getd("solver.atol"), cfg.geti("solver.max_steps")};

  std::vector<double> evals;
  for (int i = 1; i < eval_points; ++i) {
    evals.push_back(ap.problem.t0 + (ap.problem.t1 - ap.problem.t0) * i / eval_points);
  }
  Trajectory traj = odeint(ap.problem, sc, evals);

  Tensor ref = ap.solution(ap.problem.t1);
  Tensor diff = traj.states.back();
  diff.add_scaled(ref, -1.0);
  const double err = diff.max_abs();

  nlohmann::json j;
  j["problem"] = ap.id;
  j["method"] = method_name(sc.method);
  j["steps_taken"] = traj.steps_taken;
  j["final_error"] = err;
  j["times"] = traj.times;
  std::vector<double> norms;
  for (const Tensor& st : traj.states) norms.push_back(st.norm2());
  j["state_norms"] = norms;
  const std::string doc = j.dump(2);
  std::ofstream(dir / "trajectory.json") << doc << "\n";
  std::cout << doc << std::endl;
  return 0;
}

int cmd_ablate_t(const KvConfig& cfg, const std::string& out, const std::string& checkpoint,
                 const std::string& times_csv) {
  const fs::path dir = prepare_out(out, cfg);
  FlowNet model = FlowNet::load(checkpoint);
  model.set_solver(SolverConfig{parse_method(cfg.get("solver.method")),
                                cfg.getd("solver.step_size"), cfg.getd("solver.rtol"),
                                cfg.getd("solver.atol"), cfg.geti("solver.max_steps")});
  std::vector<double> times;
  std::stringstream ss(times_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) times.push_back(std::stod(tok));
  }
  if (times.empty()) throw ConfigError("ablate-t: no times given");
  if (!std::is_sorted(times.begin(), times.end())) {
    throw ConfigError("ablate-t: times must be sorted ascending");
  }

  GenConfig gc = gen_config_from(cfg);
  const auto seeds = validation_seeds(cfg.getu("seed"), cfg.geti("eval.samples"));
  std::vector<double> epe_sum(times.size(), 0.0);
  bool wrote_strip = false;
  for (uint64_t s : seeds) {
    GenConfig g = gc;
    g.seed = s;
    SamplePair sample = gen_pair(g);
    const auto flows = model.decode_at_times(sample.i1, sample.i2, times);
    for (size_t i = 0; i < times.size(); ++i) {
      epe_sum[i] += epe(flows[i], sample.flow_gt, sample.valid);
    }
    if (!wrote_strip) {
      for (size_t i = 0; i < times.size(); ++i) {
        std::ostringstream name;
        name << "flow_t" << times[i] << ".ppm";
        write_ppm(flow_to_color(flows[i]), (dir / name.str()).string());
      }
      write_ppm(flow_to_color(sample.flow_gt), (dir / "flow_gt.ppm").string());
      wrote_strip = true;
    }
  }

  nlohmann::json rows = nlohmann::json::array();
  std::cout << "   t      mean EPE (px)\n";
  for (size_t i = 0; i < times.size(); ++i) {
    const double e = epe_sum[i] / static_cast<double>(seeds.size());
    rows.push_back({{"t", times[i]}, {"epe", e}});
    std::cout << std::setw(6) << times[i] << "   " << e << "\n";
  }
  std::ofstream(dir / "ablate_t.json") << rows.dump(2) << "\n";
  return 0;
}

int cmd_gen(const KvConfig& cfg, const std::string& out, int samples) {
  const fs::path dir = prepare_out(out, cfg);
  GenConfig gc = gen_config_from(cfg);
  nlohmann::json manifest = nlohmann::json::array();
  for (int i = 0; i < samples; ++i) {
    GenConfig g = gc;
    g.seed = Rng::derive(gc.seed, static_cast<uint64_t>(i));
    SamplePair s = gen_pair(g);
    char base[32];
    std::snprintf(base, sizeof(base), "sample_%04d", i);
    const std::string i1 = std::string(base) + "_1.ppm";
    const std::string i2 = std::string(base) + "_2.ppm";
    const std::string fl = std::string(base) + ".flo";
    write_ppm(s.i1, (dir / i1).string());
    write_ppm(s.i2, (dir / i2).string());
    write_flo(s.flow_gt, (dir / fl).string());
    manifest.push_back({{"image1", i1}, {"image2", i2}, {"flow", fl}, {"seed", g.seed}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
  std::cout << "wrote " << samples << " samples to " << dir.string() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural-ODE optical flow refinement toolkit"};
  app.require_subcommand(1);

  std::string config_file, out_dir = "out", checkpoint, manifest, refiner_flag;
  std::string image1, image2, problem_id = "exp-growth", times_csv = "0,0.5,1,5";
  std::vector<std::string> overrides;
  int iterations_flag = -1, samples_flag = 16, eval_points = 10;
  uint64_t seed_flag = 0;
  bool seed_given = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key=value config file");
    cmd->add_option("--set", overrides, "config override key=value (repeatable)");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option_function<uint64_t>(
        "--seed", [&](uint64_t v) { seed_flag = v; seed_given = true; }, "master seed");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a desk-scale model");
  add_common(train_cmd);
  train_cmd->add_option("--iterations", iterations_flag, "override train.iterations");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--manifest", manifest, "dataset manifest JSON");
  eval_cmd->add_option("--refiner", refiner_flag, "none | gru | ode");

  CLI::App* infer_cmd = app.add_subcommand("infer", "predict flow for an image pair");
  add_common(infer_cmd);
  infer_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  infer_cmd->add_option("image1", image1, "first frame (.ppm)")->required();
  infer_cmd->add_option("image2", image2, "second frame (.ppm)")->required();

  CLI::App* solve_cmd = app.add_subcommand("solve", "integrate a built-in analytic problem");
  add_common(solve_cmd);
  solve_cmd->add_option("--problem", problem_id, "exp-growth | cos-growth | rotation");
  solve_cmd->add_option("--eval-points", eval_points, "trajectory sample count");

  CLI::App* ablate_cmd = app.add_subcommand("ablate-t", "decode the latent at several times");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  ablate_cmd->add_option("--times", times_csv, "comma-separated decode times");

  CLI::App* gen_cmd = app.add_subcommand("gen", "write a synthetic dataset + manifest");
  add_common(gen_cmd);
  gen_cmd->add_option("--samples", samples_flag, "number of sample pairs");

  CLI11_PARSE(app, argc, argv);

  try {
    KvConfig cfg = KvConfig::defaults();
    if (!config_file.empty()) cfg.load_file(config_file);
    cfg.apply_overrides(overrides);
    if (seed_given) cfg.set("seed", std::to_string(seed_flag));
    if (iterations_flag >= 0) cfg.set("train.iterations", std::to_string(iterations_flag));

    if (train_cmd->parsed()) return cmd_train(cfg, out_dir);
    if (eval_cmd->parsed()) return cmd_eval(cfg, out_dir, checkpoint, manifest, refiner_flag);
    if (infer_cmd->parsed()) return cmd_infer(cfg, out_dir, checkpoint, image1, image2);
    if (solve_cmd->parsed()) return cmd_solve(cfg, out_dir, problem_id, eval_points);
    if (ablate_cmd->parsed()) return cmd_ablate_t(cfg, out_dir, checkpoint, times_csv);
    if (gen_cmd->parsed()) return cmd_gen(cfg, out_dir, samples_flag);
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
