#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <memory>

#include "fedring/client.hpp"
#include "fedring/server.hpp"
#include "fedring/transport.hpp"
#include "fedring/volume.hpp"

using namespace fedring;
using client::ClientConfig;
using client::ClientTrainer;
using client::LocalData;
using wire::MsgType;

namespace {

ml::ModelConfig tiny_model() {
  ml::ModelConfig m;
  m.base_filters = 2;
  m.n_levels = 2;
  m.latent_dim = 4;
  m.patch = {8, 8, 8};
  return m;
}

// 12^3 volume in [-1, 1] with a bright labelled cube at a seed-dependent spot.
data::Volume cube_volume(std::size_t seed) {
  data::Volume v;
  v.dims = {12, 12, 12};
  v.spacing = {1, 1, 1};
  v.intensities.assign(v.size(), -0.4);
  v.labels.assign(v.size(), 0);
  const std::size_t o = 2 + seed % 4;
  for (std::size_t z = o; z < o + 5; ++z)
    for (std::size_t y = o; y < o + 5; ++y)
      for (std::size_t x = o; x < o + 5; ++x) {
        v.intensities[v.index(x, y, z)] = 0.6;
        v.labels[v.index(x, y, z)] = 1;
      }
  return v;
}

LocalData local_data(std::size_t n_train = 4) {
  LocalData d;
  for (std::size_t i = 0; i < n_train; ++i) d.train.push_back(cube_volume(i));
  d.val.push_back(cube_volume(7));
  return d;
}

wire::Credential cred(const std::string& id) { return {id, wire::to_bytes(id + "-secret-0123456789")}; }

ClientConfig client_config(const std::string& id, std::size_t epochs) {
  ClientConfig c;
  c.credential = cred(id);
  c.epochs_per_round = epochs;
  c.batch_size = 2;
  c.patches_per_volume = 1;
  c.patch_spec = {{8, 8, 8}, 0.5};
  c.inference_window = {{12, 12, 12}, 0.5};
  c.model = tiny_model();
  c.lr_max = 3e-3;
  c.lr_min = 3e-4;
  c.seed = 5;
  c.max_retries = 1;
  c.poll_interval = std::chrono::milliseconds(0);
  return c;
}

server::ServerConfig server_config(std::size_t n_clients, std::uint32_t rounds) {
  server::ServerConfig s;
  s.min_clients = s.max_clients = n_clients;
  s.aggregation.min_clients = static_cast<std::uint32_t>(n_clients);
  s.total_rounds = rounds;
  s.accepted_credentials = {cred("a"), cred("b")};
  return s;
}

server::TokenSource counter_tokens() {
  auto n = std::make_shared<std::uint8_t>(0);
  return [n] { return wire::Bytes(32, ++*n); };
}

void run_to_end(ClientTrainer& t) {
  for (int guard = 0; guard < 1000 && !t.finished(); ++guard) t.step();
  REQUIRE(t.finished());
}

std::vector<wire::Envelope> outbound(const transport::Trace& trace) {
  std::vector<wire::Envelope> out;
  for (const auto& e : trace.entries())
    if (e.outbound) out.push_back(wire::decode_envelope(e.frame));
  return out;
}

std::vector<wire::WeightSet> pushed_weights(const transport::Trace& trace) {
  std::vector<wire::WeightSet> out;
  for (const auto& env : outbound(trace))
    if (env.msg_type == MsgType::ModelPush) out.push_back(wire::deserialize_weights(env.payload));
  return out;
}

bool same_values(const wire::WeightSet& a, const wire::WeightSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.entries()[i].data != b.entries()[i].data) return false;
  return true;
}

}  // namespace

TEST_CASE("one client, one round: one pull, one push, then finished") {
  const auto init = ml::SegModel::initialized(tiny_model(), 3).weights();
  server::Server srv(server_config(1, 1), init, counter_tokens());
  auto trace = std::make_shared<transport::Trace>();
  transport::InMemoryChannel ch(srv, trace);
  ClientTrainer t(client_config("a", 1), local_data(), ch);
  run_to_end(t);

  CHECK(t.pulls() == 1);
  CHECK(t.pushes() == 1);
  CHECK(srv.phase() == server::Phase::Done);
  CHECK(same_values(t.last_pulled(), init));

  std::size_t logins = 0, pushes = 0;
  for (const auto& env : outbound(*trace)) {
    logins += env.msg_type == MsgType::LoginRequest;
    pushes += env.msg_type == MsgType::ModelPush;
  }
  CHECK(logins == 1);
  CHECK(pushes == 1);
}

TEST_CASE("ten epochs per round over three rounds is thirty epochs") {
  server::Server srv(server_config(1, 3), ml::SegModel::initialized(tiny_model(), 3).weights(), counter_tokens());
  transport::InMemoryChannel ch(srv);
  ClientTrainer t(client_config("a", 10), local_data(2), ch);
  run_to_end(t);
  CHECK(t.epochs_run() == 30);
  CHECK(t.epoch_history().size() == 30);
  CHECK(t.pulls() == 3);
  CHECK(t.pushes() == 3);
}

TEST_CASE("local_best keeps the weights of the best validation round") {
  server::Server srv(server_config(1, 3), ml::SegModel::initialized(tiny_model(), 3).weights(), counter_tokens());
  auto trace = std::make_shared<transport::Trace>();
  transport::InMemoryChannel ch(srv, trace);
  auto scores = std::make_shared<std::vector<double>>(std::vector<double>{0.4, 0.6, 0.5});
  auto calls = std::make_shared<std::size_t>(0);
  ClientTrainer t(client_config("a", 1), local_data(), ch, [scores, calls](const ml::SegModel&) { return (*scores)[(*calls)++]; });
  run_to_end(t);

  const auto pushes = pushed_weights(*trace);
  REQUIRE(pushes.size() == 3);
  REQUIRE(t.best_round().has_value());
  CHECK(*t.best_round() == 1);
  CHECK(*t.best_score() == doctest::Approx(0.6));
  CHECK(same_values(t.local_best(), pushes[1]));
  CHECK_FALSE(same_values(t.local_best(), pushes[2]));
}

TEST_CASE("local_best is written to the output directory") {
  const auto dir = std::filesystem::temp_directory_path() / "fedring_client_best";
  std::filesystem::remove_all(dir);
  server::Server srv(server_config(1, 2), ml::SegModel::initialized(tiny_model(), 3).weights(), counter_tokens());
  transport::InMemoryChannel ch(srv);
  auto cfg = client_config("a", 1);
  cfg.out_dir = dir.string();
  ClientTrainer t(cfg, local_data(), ch);
  run_to_end(t);
  REQUIRE(std::filesystem::exists(dir / "local_best.flw"));
  CHECK(same_values(wire::load_checkpoint((dir / "local_best.flw").string()), t.local_best()));

  std::ifstream log(dir / "metrics.jsonl");
  std::size_t epoch_lines = 0;
  for (std::string line; std::getline(log, line);) epoch_lines += line.find("\"loss_total\"") != std::string::npos;
  CHECK(epoch_lines == 2);
}

TEST_CASE("only login and model frames leave a client, and no volume bytes") {
  const auto init = ml::SegModel::initialized(tiny_model(), 3).weights();
  server::Server srv(server_config(2, 2), init, counter_tokens());
  auto ta = std::make_shared<transport::Trace>(), tb = std::make_shared<transport::Trace>();
  transport::InMemoryChannel ca(srv, ta), cb(srv, tb);
  const auto data = local_data();
  ClientTrainer a(client_config("a", 1), data, ca), b(client_config("b", 1), data, cb);
  for (int guard = 0; guard < 1000 && !(a.finished() && b.finished()); ++guard) {
    a.step();
    b.step();
  }
  REQUIRE(a.finished());
  REQUIRE(b.finished());

  for (const auto* trace : {ta.get(), tb.get()}) {
    for (const auto& env : outbound(*trace)) {
      const bool allowed = env.msg_type == MsgType::LoginRequest || env.msg_type == MsgType::ModelPush ||
                           env.msg_type == MsgType::ModelPull;
      CHECK(allowed);
      if (env.msg_type == MsgType::ModelPull) CHECK(env.payload.empty());
      CHECK_THROWS(data::decode_volume(env.payload));
    }
    for (const auto& w : pushed_weights(*trace)) CHECK(w.sample_count() == data.train.size());
  }
}

TEST_CASE("pulled weights equal the server global bit-exactly") {
  server::Server srv(server_config(1, 2), ml::SegModel::initialized(tiny_model(), 3).weights(), counter_tokens());
  auto trace = std::make_shared<transport::Trace>();
  transport::InMemoryChannel ch(srv, trace);
  ClientTrainer t(client_config("a", 1), local_data(), ch);
  run_to_end(t);
  // With one client the second global is the first push, so the second pull must return it unchanged.
  const auto pushes = pushed_weights(*trace);
  REQUIRE(pushes.size() == 2);
  CHECK(same_values(t.last_pulled(), pushes[0]));
}

TEST_CASE("zero epochs leave the model unchanged") {
  ml::SegModel m = ml::SegModel::initialized(tiny_model(), 9);
  const auto before = m.weights();
  ml::OptimizerState opt;
  ml::Rng rng(1);
  const auto stats = client::train_local_epochs(m, local_data().train, 0, opt, client_config("a", 1), rng);
  CHECK(stats.empty());
  CHECK(m.weights() == before);
  CHECK(opt.step == 0);
}

TEST_CASE("local training is deterministic for a seed") {
  const auto run = [] {
    ml::SegModel m = ml::SegModel::initialized(tiny_model(), 9);
    ml::OptimizerState opt;
    opt.total_steps = 20;
    ml::Rng rng(4);
    const auto stats = client::train_local_epochs(m, local_data().train, 5, opt, client_config("a", 1), rng);
    std::vector<double> losses;
    for (const auto& s : stats) losses.push_back(s.total);
    return std::make_pair(losses, m.weights());
  };
  const auto [l1, w1] = run();
  const auto [l2, w2] = run();
  CHECK(l1 == l2);
  CHECK(w1 == w2);
}

TEST_CASE("overfitting one volume drops the epoch loss tenfold") {
  auto cfg = client_config("a", 1);
  cfg.model.base_filters = 4;
  cfg.model.latent_dim = 8;
  cfg.patches_per_volume = 4;
  ml::SegModel m = ml::SegModel::initialized(cfg.model, 2);
  ml::OptimizerState opt;
  opt.lr_max = 1e-2;
  opt.lr_min = 1e-3;
  opt.total_steps = 200 * client::steps_per_epoch(cfg, 1);
  ml::Rng rng(8);
  const auto stats = client::train_local_epochs(m, {cube_volume(1)}, 200, opt, cfg, rng);
  REQUIRE(stats.size() == 200);
  CHECK(stats.back().total < 0.1 * stats.front().total);
}

TEST_CASE("split_local_data is seeded, disjoint and keeps a training volume") {
  std::vector<data::Volume> vols;
  for (std::size_t i = 0; i < 10; ++i) vols.push_back(cube_volume(i));
  const auto a = client::split_local_data(vols, 0.2, 3);
  const auto b = client::split_local_data(vols, 0.2, 3);
  CHECK(a.train.size() == 8);
  CHECK(a.val.size() == 2);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  const auto one = client::split_local_data({cube_volume(0)}, 0.5, 3);
  CHECK(one.train.size() == 1);
}

TEST_CASE("client config validation") {
  auto c = client_config("a", 1);
  CHECK_NOTHROW(c.validate());
  c.epochs_per_round = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
