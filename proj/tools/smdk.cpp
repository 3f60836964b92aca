// smdk: train/eval/sweep/compare/select/distill driver for the sparse-MoE
// dropout training lab. All commands are non-interactive; files carry the
// machine-readable results, stdout a short summary.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "smdk/config.hpp"
#include "smdk/eval.hpp"
#include "smdk/training.hpp"

namespace fs = std::filesystem;
using namespace smdk;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitParity = 4;

struct ParityViolation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<int> parse_ks(const std::string& s) {
  std::vector<int> ks;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) ks.push_back(std::stoi(tok));
  if (ks.empty()) throw ConfigError("--ks: empty list");
  return ks;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
}

int cmd_train(const std::string& config_path) {
  RunConfig rc = run_config_from_file(config_path);
  if (const char* env = std::getenv("SMDK_SEED")) {
    rc.train.seed = std::strtoull(env, nullptr, 10);
    rc.train.config_echo = rc.echo();
  }
  if (rc.train.data_path.empty())
    throw ConfigError("config: data_path is required");
  std::vector<uint8_t> corpus;
  try {
    corpus = read_corpus(rc.train.data_path);
  } catch (const std::exception&) {
    throw ConfigError("config: data_path not readable: " + rc.train.data_path);
  }

  fs::create_directories(rc.output_dir);
  std::string prefix = rc.hash();
  fs::path dir(rc.output_dir);
  write_file(dir / (prefix + "_config.echo"), rc.train.config_echo);

  TrainResult result = train(rc.train, corpus);

  std::string csv = log_csv_header() + "\n";
  for (const auto& row : result.log) csv += log_row_csv(row) + "\n";
  write_file(dir / (prefix + "_log.csv"), csv);
  result.checkpoint.save((dir / (prefix + "_final.ckpt")).string());

  const LogRow& last = result.log.empty() ? LogRow{} : result.log.back();
  std::cout << "run " << prefix << " method="
            << method_to_string(rc.train.model.method) << " seed="
            << rc.train.seed << " steps=" << rc.train.steps
            << " final_train_loss_nats=" << last.train_loss_nats
            << " final_val_bpc@N=" << last.val_bpc_at_n << "\n";
  std::cout << "artifacts: " << (dir / (prefix + "_log.csv")).string() << ", "
            << (dir / (prefix + "_final.ckpt")).string() << "\n";
  return kExitOk;
}

int cmd_sweep(const std::string& ckpt_path, const std::string& ks_spec,
              const std::string& data_path, const std::string& out_dir,
              int max_windows, bool plot) {
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  std::vector<uint8_t> data = read_corpus(data_path);
  EvalReport rep = slimmable_sweep(ckpt, data, parse_ks(ks_spec), max_windows);
  fs::create_directories(out_dir);
  fs::path dir(out_dir);
  fs::path csv = dir / (rep.checkpoint_id + "_sweep.csv");
  write_file(csv, rep.to_csv());
  std::cout << rep.to_csv();
  if (plot) {
    fs::path svg = dir / (rep.checkpoint_id + "_sweep.svg");
    write_sweep_svg(rep, svg.string());
    std::cout << "plot: " << svg.string() << "\n";
  }
  std::cout << "csv: " << csv.string() << "\n";
  return kExitOk;
}

struct RunInfo {
  std::string prefix;
  std::string method;
  uint64_t seed = 0;
  int64_t trainable_params = 0;
  int64_t router_params = 0;
  double final_train_loss = 0;
  double final_val_bpc_k = -1;
  double final_val_bpc_n = -1;
};

RunInfo load_run(const fs::path& echo_path) {
  RunInfo info;
  std::string name = echo_path.filename().string();
  info.prefix = name.substr(0, name.size() - std::string("_config.echo").size());
  fs::path dir = echo_path.parent_path();

  std::ifstream ef(echo_path);
  std::stringstream ss;
  ss << ef.rdbuf();
  auto kv = parse_config_text(ss.str());
  info.method = kv.at("model.method");
  info.seed = std::strtoull(kv.at("run.seed").c_str(), nullptr, 10);

  Checkpoint ckpt = Checkpoint::load((dir / (info.prefix + "_final.ckpt")).string());
  Model m = ckpt.to_model();
  info.trainable_params = m.trainable_param_count();
  info.router_params = m.router_param_count();

  std::ifstream lf(dir / (info.prefix + "_log.csv"));
  if (!lf) throw ConfigError("missing log for run " + info.prefix);
  std::string line, last_with_val;
  std::getline(lf, line);  // header
  std::string last;
  while (std::getline(lf, line)) {
    if (line.empty()) continue;
    last = line;
    size_t c = std::count(line.begin(), line.end(), ',');
    if (c == 5 && line.back() != ',') last_with_val = line;
  }
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::stringstream s(l);
    std::string cell;
    while (std::getline(s, cell, ',')) cells.push_back(cell);
    cells.resize(6);
    return cells;
  };
  if (!last.empty()) info.final_train_loss = std::stod(split(last)[3]);
  if (!last_with_val.empty()) {
    auto cells = split(last_with_val);
    if (!cells[4].empty()) info.final_val_bpc_k = std::stod(cells[4]);
    if (!cells[5].empty()) info.final_val_bpc_n = std::stod(cells[5]);
  }
  return info;
}

int cmd_compare(const std::vector<std::string>& run_args,
                const std::string& out_path) {
  std::vector<RunInfo> runs;
  for (const auto& arg : run_args) {
    fs::path p(arg);
    if (fs::is_directory(p)) {
      std::vector<fs::path> echoes;
      for (const auto& e : fs::directory_iterator(p))
        if (e.path().filename().string().ends_with("_config.echo"))
          echoes.push_back(e.path());
      std::sort(echoes.begin(), echoes.end());
      for (const auto& e : echoes) runs.push_back(load_run(e));
    } else if (p.filename().string().ends_with("_config.echo")) {
      runs.push_back(load_run(p));
    } else {
      throw ConfigError("compare: expected run directory or _config.echo: " + arg);
    }
  }
  if (runs.size() < 2) throw ConfigError("compare: need at least 2 runs");

  for (size_t i = 1; i < runs.size(); ++i) {
    if (runs[i].trainable_params != runs[0].trainable_params)
      throw ParityViolation(
          "parameter parity violation: run " + runs[i].prefix + " has " +
          std::to_string(runs[i].trainable_params) + " trainable params, run " +
          runs[0].prefix + " has " + std::to_string(runs[0].trainable_params));
  }

  std::ostringstream csv;
  csv << "method,seed,run,trainable_params,router_params,final_train_loss_nats,"
         "val_bpc@k,val_bpc@N\n";
  for (const auto& r : runs) {
    csv << r.method << "," << r.seed << "," << r.prefix << ","
        << r.trainable_params << "," << r.router_params << ","
        << r.final_train_loss << "," << r.final_val_bpc_k << ","
        << r.final_val_bpc_n << "\n";
  }
  write_file(out_path, csv.str());
  std::cout << csv.str() << "table: " << out_path << "\n";
  return kExitOk;
}

int cmd_select(const std::string& ckpt_path, int m, const std::string& data_path,
               const std::string& out_path, int k, int max_windows) {
  Checkpoint ckpt = Checkpoint::load(ckpt_path);
  std::vector<uint8_t> data = read_corpus(data_path);
  if (k <= 0) k = ckpt.model_cfg.n_experts;  // most informative tallies
  VoteTally tally = vote_experts(ckpt, data, k, max_windows);
  Checkpoint sub = select_subnetwork(ckpt, tally, m);
  sub.save(out_path);
  std::cout << "selected " << m << " of " << ckpt.model_cfg.n_experts
            << " experts per layer; wrote " << out_path << "\n";
  for (size_t l = 0; l < tally.counts.size(); ++l) {
    std::cout << "layer " << l << " votes:";
    for (int64_t c : tally.counts[l]) std::cout << " " << c;
    std::cout << "\n";
  }
  return kExitOk;
}

int cmd_distill(const std::string& teacher_path, const std::string& data_path,
                const std::string& out_path, const std::string& student_path,
                double alpha, double temp, int steps, int batch, double lr0,
                uint64_t seed) {
  Checkpoint teacher = Checkpoint::load(teacher_path);
  std::vector<uint8_t> data = read_corpus(data_path);
  DistillConfig dc;
  dc.alpha = alpha;
  dc.temperature = temp;
  dc.steps = steps;
  dc.batch = batch;
  dc.lr0 = lr0;
  dc.seed = seed;

  DistillResult res;
  if (!student_path.empty()) {
    Checkpoint student = Checkpoint::load(student_path);
    res = distill(teacher, student.model_cfg, data, dc, &student);
  } else {
    ModelConfig scfg = teacher.model_cfg;
    scfg.n_experts = 1;
    scfg.d_ff = teacher.model_cfg.d_ff / teacher.model_cfg.n_experts;
    res = distill(teacher, scfg, data, dc, nullptr);
  }
  res.checkpoint.save(out_path);
  std::cout << "distilled student -> " << out_path << "\n";
  if (!res.ce_loss_log.empty())
    std::cout << "final ce_loss_nats=" << res.ce_loss_log.back()
              << " kl_loss_nats=" << res.kl_loss_log.back() << "\n";
  return kExitOk;
}

int cmd_corpus(size_t bytes, uint64_t seed, const std::string& out_path) {
  auto data = make_corpus(bytes, seed);
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + out_path);
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size()));
  std::cout << "wrote " << data.size() << " bytes to " << out_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse-MoE dropout training lab"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("config", config_path, "run config path")->required();

  std::string ckpt_path, ks_spec = "1,2,4,8", data_path, out_dir = ".";
  int max_windows = 0;
  bool no_plot = false;
  auto* sweep_cmd = app.add_subcommand("sweep", "slimmable k-sweep of a checkpoint");
  sweep_cmd->add_option("checkpoint", ckpt_path)->required();
  sweep_cmd->add_option("--ks", ks_spec, "comma-separated k values");
  sweep_cmd->add_option("--data", data_path, "evaluation corpus")->required();
  sweep_cmd->add_option("--out", out_dir, "output directory");
  sweep_cmd->add_option("--max-windows", max_windows, "cap on eval windows");
  sweep_cmd->add_flag("--no-plot", no_plot, "skip the SVG plot");

  std::vector<std::string> run_args;
  std::string compare_out = "comparison.csv";
  auto* compare_cmd = app.add_subcommand("compare", "merge completed runs into one table");
  compare_cmd->add_option("runs", run_args, "run dirs or _config.echo files")->required();
  compare_cmd->add_option("--out", compare_out, "output CSV");

  std::string sel_ckpt, sel_data, sel_out = "subnetwork.ckpt";
  int sel_m = 1, sel_k = 0;
  int sel_max_windows = 0;
  auto* select_cmd = app.add_subcommand("select", "keep the most-voted experts");
  select_cmd->add_option("checkpoint", sel_ckpt)->required();
  select_cmd->add_option("--m", sel_m, "experts to keep per layer")->required();
  select_cmd->add_option("--data", sel_data, "voting corpus")->required();
  select_cmd->add_option("--out", sel_out, "output checkpoint");
  select_cmd->add_option("--k", sel_k, "k used for voting (default N)");
  select_cmd->add_option("--max-windows", sel_max_windows);

  std::string t_path, d_data, d_out = "student.ckpt", d_student;
  double d_alpha = 0.5, d_temp = 2.0, d_lr0 = 2.5e-4;
  int d_steps = 800, d_batch = 4;
  uint64_t d_seed = 0;
  auto* distill_cmd = app.add_subcommand("distill", "distill a teacher into a smaller student");
  distill_cmd->add_option("--teacher", t_path)->required();
  distill_cmd->add_option("--data", d_data)->required();
  distill_cmd->add_option("--out", d_out);
  distill_cmd->add_option("--student", d_student, "warm-start checkpoint");
  distill_cmd->add_option("--alpha", d_alpha);
  distill_cmd->add_option("--temp", d_temp);
  distill_cmd->add_option("--steps", d_steps);
  distill_cmd->add_option("--batch", d_batch);
  distill_cmd->add_option("--lr0", d_lr0);
  distill_cmd->add_option("--seed", d_seed);

  size_t c_bytes = 131072;
  uint64_t c_seed = 0;
  std::string c_out = "corpus.bin";
  auto* corpus_cmd = app.add_subcommand("corpus", "generate a synthetic byte corpus");
  corpus_cmd->add_option("--bytes", c_bytes);
  corpus_cmd->add_option("--seed", c_seed);
  corpus_cmd->add_option("--out", c_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(config_path);
    if (*sweep_cmd)
      return cmd_sweep(ckpt_path, ks_spec, data_path, out_dir, max_windows, !no_plot);
    if (*compare_cmd) return cmd_compare(run_args, compare_out);
    if (*select_cmd)
      return cmd_select(sel_ckpt, sel_m, sel_data, sel_out, sel_k, sel_max_windows);
    if (*distill_cmd)
      return cmd_distill(t_path, d_data, d_out, d_student, d_alpha, d_temp,
                         d_steps, d_batch, d_lr0, d_seed);
    if (*corpus_cmd) return cmd_corpus(c_bytes, c_seed, c_out);
  } catch (const ParityViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitParity;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
