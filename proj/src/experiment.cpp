#include "fedring/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "fedring/evaluate.hpp"
#include "fedring/preprocess.hpp"
#include "fedring/server.hpp"

namespace fedring::sim {

void ExperimentPlan::validate() const {
  model.validate();
  if (model.patch != std::array<std::size_t, 3>{patch_spec.size[2], patch_spec.size[1], patch_spec.size[0]})
    throw std::invalid_argument("model patch must match patch_spec (D, H, W)");
  const double s = split[0] + split[1] + split[2];
  if (std::abs(s - 1.0) > 1e-9 || split[0] <= 0 || split[1] < 0 || split[2] <= 0)
    throw std::invalid_argument("split must be positive train/test fractions summing to 1");
  if (batch_size == 0 || patches_per_volume == 0) throw std::invalid_argument("batch size and patches per volume must be positive");
  if (!(lr_max > 0) || lr_min < 0 || lr_min > lr_max) throw std::invalid_argument("need 0 <= lr_min <= lr_max, lr_max > 0");
  if (!(hu_min < hu_max)) throw std::invalid_argument("hu_min must be below hu_max");
  if (!(target_spacing_mm > 0)) throw std::invalid_argument("target spacing must be positive");
}

ExperimentPlan default_plan(std::uint64_t seed) {
  ExperimentPlan p;
  p.seed = seed;
  p.c1 = client1_preset(seed * 2 + 1);
  p.c2 = client2_preset(seed * 2 + 2);
  p.model.base_filters = 4;
  p.model.n_levels = 3;
  p.model.latent_dim = 32;
  p.model.patch = {16, 16, 16};
  return p;
}

const MetricsRow& MetricsTable::row(const std::string& model) const {
  for (const auto& r : rows_)
    if (r.model == model) return r;
  throw std::out_of_range("no metrics row " + model);
}

double MetricsTable::pancreas_average(const MetricsRow& r) const {
  const double n1 = double(n1_), n2 = double(n2_);
  if (n1 + n2 == 0) return 0.5 * (r.c1_pancreas + r.c2_pancreas);
  return (n1 * r.c1_pancreas + n2 * r.c2_pancreas) / (n1 + n2);
}

double MetricsTable::average(const MetricsRow& r) const { return 0.5 * (pancreas_average(r) + r.c2_tumor); }

std::array<double, 5> MetricsTable::column_means() const {
  std::array<double, 5> m{};
  if (rows_.empty()) return m;
  for (const auto& r : rows_) {
    m[0] += r.c1_pancreas;
    m[1] += r.c2_pancreas;
    m[2] += r.c2_tumor;
    m[3] += pancreas_average(r);
    m[4] += average(r);
  }
  for (auto& x : m) x /= double(rows_.size());
  return m;
}

std::string MetricsTable::to_csv() const {
  std::string out = "model,c1_pancreas,c2_pancreas,c2_tumor,pancreas_average,average\n";
  char buf[256];
  const auto line = [&](const std::string& name, const std::array<double, 5>& v) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", name.c_str(), v[0], v[1], v[2], v[3], v[4]);
    out += buf;
  };
  for (const auto& r : rows_) line(r.model, {r.c1_pancreas, r.c2_pancreas, r.c2_tumor, pancreas_average(r), average(r)});
  line("Average", column_means());
  return out;
}

std::vector<data::Volume> prepare_dataset(const PhantomSpec& spec, const ExperimentPlan& plan) {
  auto vols = generate_phantoms(spec);
  for (auto& v : vols) {
    v = data::resample_isotropic(v, plan.target_spacing_mm);
    v = data::clip_and_rescale(v, plan.hu_min, plan.hu_max);
  }
  return vols;
}

namespace {

struct Split {
  std::vector<data::Volume> train, val, test;
};

// Phantoms are drawn i.i.d., so a contiguous split is already random.
Split split_dataset(std::vector<data::Volume> vols, const std::array<double, 3>& frac) {
  const std::size_t n = vols.size();
  std::size_t n_test = std::max<std::size_t>(1, std::llround(frac[2] * double(n)));
  std::size_t n_val = std::llround(frac[1] * double(n));
  if (n_test + n_val + 1 > n) throw std::invalid_argument("dataset too small for the requested split");
  Split s;
  const std::size_t n_train = n - n_val - n_test;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? s.train : i < n_train + n_val ? s.val : s.test;
    dst.push_back(std::move(vols[i]));
  }
  return s;
}

client::ClientConfig client_config(const ExperimentPlan& plan, const std::string& id, std::uint64_t seed,
                                   const std::string& out_dir) {
  client::ClientConfig c;
  c.credential = {id, wire::Bytes(32, static_cast<std::uint8_t>(seed & 0xff))};
  c.epochs_per_round = plan.epochs_per_round;
  c.batch_size = plan.batch_size;
  c.patches_per_volume = plan.patches_per_volume;
  c.patch_spec = plan.patch_spec;
  c.inference_window = plan.inference_window;
  c.loss_weights = plan.loss_weights;
  c.seed = seed;
  c.model = plan.model;
  c.lr_max = plan.lr_max;
  c.lr_min = plan.lr_min;
  c.out_dir = out_dir;
  c.max_retries = 1;
  c.poll_interval = std::chrono::milliseconds(0);
  return c;
}

// Standalone training over the same number of epochs and the same schedule as an FL client.
wire::WeightSet train_baseline(const ExperimentPlan& plan, const wire::WeightSet& init, const Split& data,
                               const client::ClientConfig& cfg, const std::string& name) {
  ml::SegModel model(plan.model, init);
  ml::OptimizerState opt;
  opt.lr_max = plan.lr_max;
  opt.lr_min = plan.lr_min;
  const std::size_t epochs = std::size_t(plan.rounds) * plan.epochs_per_round;
  opt.total_steps = std::max<std::uint64_t>(1, epochs * client::steps_per_epoch(cfg, data.train.size()));
  ml::Rng rng(cfg.seed);
  std::vector<client::EpochStats> stats;
  try {
    stats = client::train_local_epochs(model, data.train, epochs, opt, cfg, rng);
  } catch (const std::exception& e) {
    throw std::runtime_error(name + ": " + e.what());
  }
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream log(cfg.out_dir + "/metrics.jsonl");
    for (std::size_t e = 0; e < stats.size(); ++e) {
      const auto& s = stats[e];
      log << nlohmann::json{{"epoch", e},          {"loss_total", s.total}, {"loss_dice", s.dice},
                            {"loss_ce", s.ce},     {"loss_kl", s.kl},       {"loss_recon", s.recon},
                            {"lr", s.lr}}
                 .dump()
          << '\n';
    }
  }
  return model.weights();
}

MetricsRow evaluate_row(const std::string& name, const ExperimentPlan& plan, const wire::WeightSet& w,
                        const Split& c1, const Split& c2) {
  const ml::SegModel model(plan.model, w);
  MetricsRow row{name};
  row.c1_pancreas = eval::mean_dice(model, c1.test, {1}, plan.inference_window);
  row.c2_pancreas = eval::mean_dice(model, c2.test, {1}, plan.inference_window);
  row.c2_tumor = eval::mean_dice(model, c2.test, {2}, plan.inference_window);
  return row;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentPlan& plan, const std::string& out_dir) {
  plan.validate();
  const auto sub = [&](const std::string& leaf) { return out_dir.empty() ? std::string{} : out_dir + "/" + leaf; };
  if (!out_dir.empty()) {
    // Clients and server append to their logs; start each run from clean subdirectories.
    for (const char* d : {"c1_baseline", "c2_baseline", "fl_client1", "fl_client2", "checkpoints", "rounds.log",
                          "global.flw", "best.flw"})
      std::filesystem::remove_all(out_dir + "/" + d);
    std::filesystem::create_directories(out_dir);
  }

  const Split c1 = split_dataset(prepare_dataset(plan.c1, plan), plan.split);
  const Split c2 = split_dataset(prepare_dataset(plan.c2, plan), plan.split);
  const wire::WeightSet init = ml::SegModel::initialized(plan.model, plan.seed).weights();

  const auto cfg1 = client_config(plan, "client1", plan.seed * 4 + 1, sub("fl_client1"));
  const auto cfg2 = client_config(plan, "client2", plan.seed * 4 + 2, sub("fl_client2"));

  auto base1_cfg = cfg1, base2_cfg = cfg2;
  base1_cfg.out_dir = sub("c1_baseline");
  base2_cfg.out_dir = sub("c2_baseline");
  const wire::WeightSet base1 = train_baseline(plan, init, c1, base1_cfg, "C1_baseline");
  const wire::WeightSet base2 = train_baseline(plan, init, c2, base2_cfg, "C2_baseline");

  ExperimentResult res;
  wire::WeightSet fl1 = init, fl2 = init, global = init;
  std::optional<wire::WeightSet> global_best;
  if (plan.rounds > 0) {
    server::ServerConfig scfg;
    scfg.total_rounds = plan.rounds;
    scfg.min_clients = scfg.max_clients = 2;
    scfg.accepted_credentials = {cfg1.credential, cfg2.credential};
    scfg.aggregation = plan.aggregation;

    server::ValidationHook hook;
    if (plan.server_validation) {
      // Pooled validation splits; only used when asked for, the server otherwise sees no data.
      std::vector<data::Volume> pooled = c1.val;
      pooled.insert(pooled.end(), c2.val.begin(), c2.val.end());
      const auto classes = eval::present_classes(pooled);
      hook = [&plan, pooled = std::move(pooled), classes](const wire::WeightSet& w, std::uint32_t) {
        return eval::mean_dice(ml::SegModel(plan.model, w), pooled, classes, plan.inference_window);
      };
    }
    std::mt19937_64 token_rng(plan.seed ^ 0x5eed);
    server::TokenSource tokens = [&token_rng] {
      wire::Bytes t(32);
      for (auto& b : t) b = static_cast<std::uint8_t>(token_rng());
      return t;
    };
    server::Server srv(scfg, init, tokens, hook, out_dir);

    auto trace1 = std::make_shared<transport::Trace>(), trace2 = std::make_shared<transport::Trace>();
    transport::InMemoryChannel ch1(srv, trace1), ch2(srv, trace2);
    client::ClientTrainer t1(cfg1, {c1.train, c1.val}, ch1), t2(cfg2, {c2.train, c2.val}, ch2);
    try {
      while (!t1.finished() || !t2.finished()) {
        if (!t1.finished()) t1.step();
        if (!t2.finished()) t2.step();
      }
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("federated run: ") + e.what());
    }
    fl1 = t1.local_best();
    fl2 = t2.local_best();
    global = srv.global();
    res.rounds = srv.history();
    res.client_traces = {trace1->entries(), trace2->entries()};
    if (plan.server_validation && srv.best_round() && !out_dir.empty())
      global_best = wire::load_checkpoint(out_dir + "/best.flw");
  }

  res.table = MetricsTable(c1.test.size(), c2.test.size());
  res.table.add(evaluate_row("C1_baseline", plan, base1, c1, c2));
  res.table.add(evaluate_row("C2_baseline", plan, base2, c1, c2));
  res.table.add(evaluate_row("C1_FL_local", plan, fl1, c1, c2));
  res.table.add(evaluate_row("C2_FL_local", plan, fl2, c1, c2));
  res.table.add(evaluate_row("FL_global", plan, global, c1, c2));
  if (global_best) res.table.add(evaluate_row("FL_global_best", plan, *global_best, c1, c2));
  res.fl_global = global;

  if (!out_dir.empty()) {
    std::ofstream(out_dir + "/table1.csv") << res.table.to_csv();
    std::filesystem::create_directories(out_dir + "/checkpoints");
    wire::save_checkpoint(out_dir + "/checkpoints/c1_baseline.flw", base1);
    wire::save_checkpoint(out_dir + "/checkpoints/c2_baseline.flw", base2);
    wire::save_checkpoint(out_dir + "/checkpoints/c1_fl_local.flw", fl1);
    wire::save_checkpoint(out_dir + "/checkpoints/c2_fl_local.flw", fl2);
    wire::save_checkpoint(out_dir + "/checkpoints/fl_global.flw", global);
  }
  return res;
}

}  // namespace fedring::sim
