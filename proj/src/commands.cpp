#include "ibdr/commands.hpp"

#include "ibdr/checkpoint.hpp"
#include "ibdr/errors.hpp"
#include "ibdr/gradcheck.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace ibdr {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IngestionError("cannot write '" + path.string() + "'");
}

std::string metrics_csv(const std::vector<MetricsReport>& rows) {
  std::string text = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) text += metrics_row(r) + "\n";
  return text;
}

/// The datasets a spec names must fit the checkpointed network.
void check_fits(const Dataset& ds, const ArchSpec& arch, const std::string& what) {
  if (ds.input_dim() != arch.input_dim) {
    throw ConfigError(what + ": data has " + std::to_string(ds.input_dim()) + " features, model expects " +
                      std::to_string(arch.input_dim));
  }
  for (int y : ds.labels) {
    if (y >= arch.num_classes) {
      throw ConfigError(what + ": label " + std::to_string(y) + " outside the model's " +
                        std::to_string(arch.num_classes) + " classes");
    }
  }
}

// Maps the error families shared by every command onto exit codes.
template <typename Fn>
int guarded(std::ostream& err, Fn&& body) {
  try {
    return body();
  } catch (const NumericDivergenceError& e) {
    err << "numeric divergence at step " << e.step() << ": " << e.what() << "\n";
    return exit_code::kDivergence;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return exit_code::kCheckpoint;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_code::kConfig;
  } catch (const IngestionError& e) {
    err << "data error: " << e.what() << "\n";
    return exit_code::kConfig;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    return exit_code::kConfig;
  } catch (const ContractError& e) {
    err << "invalid input: " << e.what() << "\n";
    return exit_code::kConfig;
  }
}

EvalConfig eval_config(const RunConfig& cfg) {
  EvalConfig ec;
  ec.ece_bins = cfg.eval.ece_bins;
  ec.eval_sample = cfg.eval.eval_sample;
  ec.divergence = cfg.train.divergence();
  return ec;
}

std::string ood_csv(const OODSweep& sweep) {
  std::string text = "threshold,frac_in,frac_ood\n";
  for (std::size_t i = 0; i < sweep.in.thresholds.size(); ++i) {
    text += fmt(sweep.in.thresholds[i]) + "," + fmt(sweep.in.frac_flagged[i]) + "," + fmt(sweep.ood.frac_flagged[i]) +
            "\n";
  }
  return text;
}

std::string config_hash(RunConfig cfg) {
  cfg.output_dir.clear();  // where a run is written does not change what it computes
  return fnv1a_hex(resolved_json(cfg));
}

}  // namespace

ParticleSet initial_particles(const RunConfig& cfg, const Dataset& train) {
  const ArchSpec arch = cfg.arch_for(train.input_dim(), train.num_classes);
  std::optional<Eigen::VectorXd> backbone;
  if (arch.kind == ArchKind::kLora) {
    backbone = init_dense(arch, cfg.train.seed, cfg.model.init_scale);
    if (cfg.model.backbone_epochs > 0) {
      ArchSpec dense = arch;
      dense.kind = ArchKind::kMlp;
      dense.rank = 0;
      ParticleSet single;
      single.arch = dense;
      single.means = {*backbone};
      IBDRConfig sgd = cfg.train;
      sgd.optimizer = OptimizerKind::kDeepEns;
      sgd.k = 1;
      TrainState st = make_train_state(std::move(single), sgd);
      for (std::size_t e = 0; e < cfg.model.backbone_epochs; ++e) train_epoch(st, train, sgd, e);
      backbone = st.particles.means[0];
    }
  }
  return init_particles(arch, cfg.train.k, cfg.train.seed, cfg.model.init_scale, cfg.train.sigma, backbone);
}

void run_training(const RunConfig& cfg, const Dataset& train, const Dataset& test, RunResult& out) {
  out.history.clear();
  out.state = make_train_state(initial_particles(cfg, train), cfg.train);
  const std::size_t per_epoch = (train.size() + cfg.train.batch_size - 1) / cfg.train.batch_size;
  out.state.total_steps = cfg.train.epochs * per_epoch;
  const EvalConfig ec = eval_config(cfg);
  auto record = [&] {
    for (const Dataset* ds : {&train, &test}) {
      MetricsReport r = evaluate(out.state.particles, *ds, ec, cfg.train.seed);
      r.step = out.state.step;
      r.lambda = out.state.dual.lambda;
      out.history.push_back(r);
    }
  };
  record();
  for (std::size_t e = 0; e < cfg.train.epochs; ++e) {
    train_epoch(out.state, train, cfg.train, e);
    if ((e + 1) % cfg.eval.every_epochs == 0 || e + 1 == cfg.train.epochs) record();
  }
}

std::string metrics_row(const MetricsReport& r) {
  return std::to_string(r.step) + "," + r.split + "," + fmt(r.train_loss) + "," + fmt(r.accuracy) + "," + fmt(r.ece) +
         "," + fmt(r.nll) + "," + fmt(r.mean_volume) + "," + fmt(r.lambda);
}

int cmd_train(const fs::path& config_path, const fs::path& out_dir, std::optional<std::uint64_t> seed,
              std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_run_config(config_path);
    if (seed) cfg.train.seed = *seed;
    if (!out_dir.empty()) cfg.output_dir = out_dir.string();
    if (cfg.output_dir.empty()) throw ConfigError("output.dir: no output directory (pass --out)");
    const fs::path dir = cfg.output_dir;

    const TrainTest data = load_train_test(cfg.data);
    const ArchSpec arch = cfg.arch_for(data.train.input_dim(), data.train.num_classes);
    cfg.model.input_dim = arch.input_dim;
    cfg.model.num_classes = arch.num_classes;
    std::optional<DataSpec> ood_spec;
    if (!cfg.eval.ood_data.empty()) ood_spec = parse_data_spec(cfg.eval.ood_data);
    const auto grid = parse_threshold_grid(cfg.eval.thresholds);
    write_file(dir / "resolved_config.json", resolved_json(cfg));

    RunResult res;
    try {
      run_training(cfg, data.train, data.test, res);
    } catch (const NumericDivergenceError&) {
      write_file(dir / "metrics.csv", metrics_csv(res.history));
      throw;
    }
    write_file(dir / "metrics.csv", metrics_csv(res.history));

    Checkpoint ckpt;
    ckpt.particles = res.state.particles;
    ckpt.lambda = res.state.dual.lambda;
    ckpt.step = res.state.step;
    ckpt.seed = cfg.train.seed;
    ckpt.config_hash = config_hash(cfg);
    save_checkpoint(ckpt, dir / "checkpoint");

    if (ood_spec) {
      const Dataset ood = load_data(*ood_spec);
      check_fits(ood, arch, "eval.ood_data");
      write_file(dir / "ood.csv", ood_csv(ood_sweep(res.state.particles, data.test, ood, grid)));
    }
    return exit_code::kOk;
  });
}

int cmd_eval(const fs::path& checkpoint_dir, const std::string& data_spec, const fs::path& out_path,
             std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ckpt = load_checkpoint(checkpoint_dir);
    const Dataset ds = load_data(parse_data_spec(data_spec));
    check_fits(ds, ckpt.particles.arch, "--data");
    MetricsReport r = evaluate(ckpt.particles, ds, EvalConfig{}, ckpt.seed);
    nlohmann::ordered_json j;
    j["split"] = r.split;
    j["step"] = ckpt.step;
    j["accuracy"] = r.accuracy;
    j["ece"] = r.ece;
    j["nll"] = r.nll;
    j["volume"] = r.mean_volume;
    j["lambda"] = ckpt.lambda;
    j["loss"] = r.train_loss;
    write_file(out_path, j.dump(2) + "\n");
    return exit_code::kOk;
  });
}

int cmd_ood_scan(const fs::path& checkpoint_dir, const std::string& in_spec, const std::string& ood_spec,
                 const std::string& thresholds, const fs::path& out_csv, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ckpt = load_checkpoint(checkpoint_dir);
    const auto grid = parse_threshold_grid(thresholds);
    const Dataset in = load_data(parse_data_spec(in_spec));
    const Dataset ood = load_data(parse_data_spec(ood_spec));
    check_fits(in, ckpt.particles.arch, "--in-data");
    check_fits(ood, ckpt.particles.arch, "--ood-data");
    write_file(out_csv, ood_csv(ood_sweep(ckpt.particles, in, ood, grid)));
    return exit_code::kOk;
  });
}

int cmd_sweep(const fs::path& config_path, const std::string& param, const std::optional<std::string>& values,
              const fs::path& out_csv, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig base = load_run_config(config_path);
    if (param != "alpha" && param != "rho" && param != "K") {
      throw ConfigError("--param: unknown parameter '" + param + "' (expected alpha, rho or K)");
    }
    std::vector<std::string> tokens;
    if (values) {
      std::istringstream list(*values);
      std::string t;
      while (std::getline(list, t, ',')) {
        if (!t.empty()) tokens.push_back(t);
      }
      if (tokens.empty()) throw ConfigError("--values: no values given");
    } else if (param == "alpha") {
      tokens = {"0", "0.02"};
    } else if (param == "rho") {
      tokens = {"0.01", "0.03", "0.05", "0.1"};
    } else {
      tokens = {"1", "2", "4"};
    }
    std::vector<double> parsed;
    for (const auto& t : tokens) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(t, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != t.size()) throw ConfigError("--values: '" + t + "' is not a number");
      if (param == "K" && (v < 1.0 || std::floor(v) != v)) throw ConfigError("--values: K must be a positive integer");
      parsed.push_back(v);
    }

    const TrainTest data = load_train_test(base.data);
    std::string text = "param,value,status,step,acc,ece,nll,volume,lambda,loss,message\n";
    int status = exit_code::kOk;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      RunConfig cfg = base;
      if (param == "alpha") cfg.train.alpha = parsed[i];
      if (param == "rho") cfg.train.rho = parsed[i];
      if (param == "K") cfg.train.k = static_cast<std::size_t>(parsed[i]);
      RunResult res;
      std::string message;
      int code = exit_code::kOk;
      try {
        cfg.validate();
        run_training(cfg, data.train, data.test, res);
      } catch (const NumericDivergenceError& e) {
        code = exit_code::kDivergence;
        message = "numeric divergence at step " + std::to_string(e.step());
      } catch (const Error& e) {
        code = exit_code::kConfig;
        message = e.what();
      }
      for (char& c : message) {
        if (c == ',' || c == '\n') c = ';';
      }
      if (code == exit_code::kOk) {
        const MetricsReport& r = res.history.back();  // final test row
        text += param + "," + tokens[i] + ",ok," + std::to_string(r.step) + "," + fmt(r.accuracy) + "," + fmt(r.ece) +
                "," + fmt(r.nll) + "," + fmt(r.mean_volume) + "," + fmt(r.lambda) + "," + fmt(r.train_loss) + ",\n";
      } else {
        text += param + "," + tokens[i] + ",error,,,,,,,," + message + "\n";
        err << "sweep " << param << "=" << tokens[i] << ": " << message << "\n";
        if (status == exit_code::kOk) status = code;
      }
    }
    write_file(out_csv, text);
    return status;
  });
}

int cmd_grad_check(std::uint64_t seed, double tolerance, std::ostream& out) {
  if (!(tolerance >= 0.0)) {
    out << "config error: --tol must be a nonnegative number\n";
    return exit_code::kConfig;
  }
  std::vector<std::string> failing;
  for (const auto& r : run_grad_checks(seed)) {
    const bool ok = r.max_rel_error <= tolerance;
    char line[160];
    std::snprintf(line, sizeof line, "%-30s %4zu inputs  max_rel_error %.3e  %s\n", r.name.c_str(), r.inputs,
                  r.max_rel_error, ok ? "PASS" : "FAIL");
    out << line;
    if (!ok) failing.push_back(r.name);
  }
  if (failing.empty()) {
    out << "all gradient checks within " << tolerance << "\n";
    return exit_code::kOk;
  }
  out << failing.size() << " check(s) above tolerance " << tolerance << ":";
  for (const auto& n : failing) out << " " << n;
  out << "\n";
  return exit_code::kGradCheck;
}

}  // namespace ibdr
