#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedring/config.hpp"
#include "fedring/evaluate.hpp"
#include "fedring/experiment.hpp"
#include "fedring/preprocess.hpp"
#include "fedring/server.hpp"
#include "fedring/transport.hpp"
#include "fedring/volume.hpp"

using namespace fedring;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_server(const std::string& config_path, const std::string& out_dir, double linger_s) {
  const auto launch = config::server_from_json(config::read_json_file(config_path));
  const wire::WeightSet init = launch.initial_checkpoint.empty()
                                   ? ml::SegModel::initialized(launch.model, launch.init_seed).weights()
                                   : wire::load_checkpoint(launch.initial_checkpoint);
  // Reject a checkpoint that does not fit the configured model before any client connects.
  (void)ml::SegModel(launch.model, init);

  server::ValidationHook hook;
  if (!launch.validation_data_dir.empty())
    hook = eval::dice_validation_hook(launch.validation_data_dir, launch.model, launch.inference_window);
  if (!out_dir.empty()) fs::create_directories(out_dir);

  server::Server srv(launch.server, init, server::secure_tokens(), hook, out_dir);
  transport::TcpServer tcp(srv, launch.server.listen_port, launch.server.tls_cert_path, launch.server.tls_key_path);
  tcp.start();
  std::fprintf(stderr, "listening on port %u (%s), %u rounds\n", unsigned(tcp.port()),
               launch.server.tls_enabled() ? "tls" : "plain", launch.server.total_rounds);

  std::size_t reported = 0;
  while (srv.phase() != server::Phase::Done) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    const auto hist = srv.history();
    for (; reported < hist.size(); ++reported) {
      const auto& r = hist[reported];
      std::fprintf(stderr, "round %u: %zu submissions, %.0f ms\n", r.round_index, r.n_submissions, r.wall_ms);
    }
  }
  // Clients learn that training is over from their next pull.
  std::this_thread::sleep_for(std::chrono::duration<double>(linger_s));
  tcp.stop();
  std::fprintf(stderr, "training finished after %u rounds\n", srv.round_index());
  return 0;
}

int run_client(const std::string& config_path) {
  const auto cfg = config::client_from_json(config::read_json_file(config_path));
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
  const auto res = client::run_client(cfg);
  std::fprintf(stderr, "%s: %zu pulls, %zu pushes, %zu epochs\n", cfg.credential.client_id.c_str(), res.pulls,
               res.pushes, res.epochs);
  return 0;
}

int run_preprocess(const std::string& in, const std::string& out, double spacing, double hu_min, double hu_max) {
  if (!(hu_min < hu_max)) throw std::invalid_argument("--hu-min must be below --hu-max");
  const auto paths = data::list_volumes(in);
  if (paths.empty()) throw std::runtime_error("no .vol files in " + in);
  fs::create_directories(out);
  for (const auto& p : paths) {
    const auto v = data::clip_and_rescale(data::resample_isotropic(data::load_volume(p), spacing), hu_min, hu_max);
    const auto dst = (fs::path(out) / fs::path(p).filename()).string();
    data::save_volume(dst, v);
    std::fprintf(stderr, "%s -> %s (%zu x %zu x %zu)\n", p.c_str(), dst.c_str(), v.dims[0], v.dims[1], v.dims[2]);
  }
  return 0;
}

sim::ExperimentPlan load_plan(const std::string& path) {
  return path.empty() ? sim::default_plan(1) : config::plan_from_json(config::read_json_file(path));
}

int run_simulate(const std::string& plan_path, const std::string& out_dir) {
  const auto plan = load_plan(plan_path);
  fs::create_directories(out_dir);
  std::ofstream(out_dir + "/plan.json") << config::to_json(plan).dump(2) << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = sim::run_experiment(plan, out_dir);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << res.table.to_csv();
  std::fprintf(stderr, "%zu rounds in %.1f s, results in %s\n", res.rounds.size(), secs, out_dir.c_str());
  return 0;
}

int run_phantoms(const std::string& plan_path, const std::string& out_dir) {
  const auto plan = load_plan(plan_path);
  for (const auto& [name, spec] : {std::pair{"c1", plan.c1}, std::pair{"c2", plan.c2}}) {
    const auto dir = fs::path(out_dir) / name;
    fs::create_directories(dir);
    const auto vols = sim::generate_phantoms(spec);
    for (std::size_t i = 0; i < vols.size(); ++i) {
      char file[32];
      std::snprintf(file, sizeof file, "%03zu.vol", i);
      data::save_volume((dir / file).string(), vols[i]);
    }
    std::fprintf(stderr, "%zu raw volumes in %s\n", vols.size(), dir.c_str());
  }
  return 0;
}

int run_evaluate(const std::string& model_path, const std::string& data_dir, const std::string& plan_path) {
  const auto plan = load_plan(plan_path);
  const ml::SegModel model(plan.model, wire::load_checkpoint(model_path));
  std::vector<data::Volume> vols;
  for (const auto& p : data::list_volumes(data_dir)) vols.push_back(data::load_volume(p));
  if (vols.empty()) throw std::runtime_error("no .vol files in " + data_dir);
  for (const auto& v : vols)
    if (!v.has_labels()) throw std::runtime_error("evaluation volumes need labels");

  json dice = json::object();
  double sum = 0.0;
  const auto classes = eval::present_classes(vols);
  for (const auto c : classes) {
    const double d = eval::mean_dice(model, vols, {c}, plan.inference_window);
    dice[std::to_string(c)] = d;
    sum += d;
  }
  json out{{"model", model_path}, {"volumes", vols.size()}, {"dice", dice}};
  out["mean_foreground_dice"] = classes.empty() ? 0.0 : sum / double(classes.size());
  std::cout << out.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-site federated segmentation: server, client, preprocessing and simulation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, in_dir, plan_path, model_path, data_dir;
  double linger_s = 5.0, spacing = 1.0, hu_min = data::kHuMin, hu_max = data::kHuMax;

  auto* srv = app.add_subcommand("server", "Run the aggregation server");
  srv->add_option("--config", config_path, "Server JSON config")->required()->check(CLI::ExistingFile);
  srv->add_option("--out-dir", out_dir, "Directory for global.flw, best.flw and rounds.log");
  srv->add_option("--linger", linger_s, "Seconds to keep serving after the last round")->capture_default_str();

  auto* cli = app.add_subcommand("client", "Run a training client");
  cli->add_option("--config", config_path, "Client JSON config")->required()->check(CLI::ExistingFile);

  auto* pre = app.add_subcommand("preprocess", "Resample and normalize a directory of .vol files");
  pre->add_option("--in", in_dir, "Input directory")->required()->check(CLI::ExistingDirectory);
  pre->add_option("--out", out_dir, "Output directory")->required();
  pre->add_option("--spacing", spacing, "Target isotropic spacing in mm")->capture_default_str();
  pre->add_option("--hu-min", hu_min, "Lower HU clip")->capture_default_str();
  pre->add_option("--hu-max", hu_max, "Upper HU clip")->capture_default_str();

  auto* simc = app.add_subcommand("simulate", "Run baselines and two-client FL on synthetic data");
  simc->add_option("--plan", plan_path, "Experiment plan JSON (defaults when omitted)")->check(CLI::ExistingFile);
  simc->add_option("--out-dir", out_dir, "Output directory")->required();

  auto* ph = app.add_subcommand("phantoms", "Write the plan's raw synthetic datasets to <out-dir>/c1 and <out-dir>/c2");
  ph->add_option("--plan", plan_path, "Experiment plan JSON (defaults when omitted)")->check(CLI::ExistingFile);
  ph->add_option("--out-dir", out_dir, "Output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "Dice of a checkpoint on a directory of labelled .vol files");
  ev->add_option("--model", model_path, "Checkpoint (.flw)")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "Directory of preprocessed .vol files")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--plan", plan_path, "Plan JSON giving the model config and inference window")
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*srv) return run_server(config_path, out_dir, linger_s);
    if (*cli) return run_client(config_path);
    if (*pre) return run_preprocess(in_dir, out_dir, spacing, hu_min, hu_max);
    if (*simc) return run_simulate(plan_path, out_dir);
    if (*ph) return run_phantoms(plan_path, out_dir);
    if (*ev) return run_evaluate(model_path, data_dir, plan_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fedring: %s\n", e.what());
    return 1;
  }
  return 2;
}
