#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fedring/config.hpp"

using namespace fedring;
using nlohmann::json;

TEST_CASE("server config: keys map onto ServerConfig and launch extras") {
  const auto j = json::parse(R"({
    "listen_port": 9001, "max_clients": 3, "min_clients": 2, "total_rounds": 4,
    "tls_cert_path": "c.pem", "tls_key_path": "k.pem",
    "accepted_credentials": [{"client_id": "a", "secret_hex": "000102030405060708090a0b0c0d0e0f"}],
    "aggregation": {"mode": "uniform_mean", "min_clients": 2},
    "model": {"base_filters": 2, "n_levels": 2, "latent_dim": 4, "patch": [8, 8, 8]},
    "init_seed": 11, "validation_data_dir": "val"})");
  const auto s = config::server_from_json(j);
  CHECK(s.server.listen_port == 9001);
  CHECK(s.server.max_clients == 3);
  CHECK(s.server.total_rounds == 4);
  CHECK(s.server.tls_enabled());
  REQUIRE(s.server.accepted_credentials.size() == 1);
  CHECK(s.server.accepted_credentials[0].client_id == "a");
  CHECK(s.server.accepted_credentials[0].secret == wire::Bytes{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  CHECK(s.server.aggregation.mode == agg::Mode::UniformMean);
  CHECK(s.model.patch == std::array<std::size_t, 3>{8, 8, 8});
  CHECK(s.init_seed == 11);
  CHECK(s.validation_data_dir == "val");
}

TEST_CASE("unknown keys are rejected with their path") {
  CHECK_THROWS_WITH_AS(config::server_from_json(json::parse(R"({"total_round": 3})")), "server.total_round: unknown key",
                       config::ConfigError);
  CHECK_THROWS_WITH_AS(config::client_from_json(json::parse(R"({"model": {"filters": 3}})")),
                       "client.model.filters: unknown key", config::ConfigError);
  CHECK_THROWS_AS(config::plan_from_json(json::parse(R"({"c1": {"organ": {"hu": 3}}})")), config::ConfigError);
}

TEST_CASE("wrong types and invalid values are config errors") {
  CHECK_THROWS_AS(config::server_from_json(json::parse(R"({"total_rounds": "3"})")), config::ConfigError);
  CHECK_THROWS_AS(config::server_from_json(json::parse(R"({"total_rounds": -1})")), config::ConfigError);
  CHECK_THROWS_AS(config::server_from_json(json::parse(R"({"listen_port": 70000})")), config::ConfigError);
  CHECK_THROWS_AS(config::server_from_json(json::parse(R"({"total_rounds": 0})")), config::ConfigError);
  CHECK_THROWS_AS(config::server_from_json(json::parse(R"({"min_clients": 3, "max_clients": 2})")),
                  config::ConfigError);
  CHECK_THROWS_AS(config::client_from_json(json::parse(R"({"epochs_per_round": 0})")), config::ConfigError);
  CHECK_THROWS_AS(config::client_from_json(json::parse(R"({"credential": {"client_id": "a", "secret_hex": "zz"}})")),
                  config::ConfigError);
  CHECK_THROWS_AS(config::plan_from_json(json::parse(R"({"split": [0.5, 0.5]})")), config::ConfigError);
}

TEST_CASE("client server_addr takes host:port or an object") {
  auto c = config::client_from_json(json::parse(R"({"server_addr": "example.org:8443"})"));
  CHECK(c.server.host == "example.org");
  CHECK(c.server.port == 8443);
  CHECK_FALSE(c.server.tls);

  c = config::client_from_json(
      json::parse(R"({"server_addr": {"host": "h", "port": 1, "tls": true, "ca_cert_path": "ca.pem"}})"));
  CHECK(c.server.host == "h");
  CHECK(c.server.tls);
  CHECK(c.server.ca_cert_path == "ca.pem");

  CHECK_THROWS_AS(config::client_from_json(json::parse(R"({"server_addr": "nohost"})")), config::ConfigError);
  CHECK_THROWS_AS(config::client_from_json(json::parse(R"({"server_addr": "h:0"})")), config::ConfigError);
  CHECK_THROWS_AS(config::client_from_json(json::parse(R"({"server_addr": "h:12x"})")), config::ConfigError);
}

TEST_CASE("client config fields and defaults") {
  const auto c = config::client_from_json(json::parse(R"({
    "epochs_per_round": 3, "batch_size": 4, "seed": 9, "local_validation_split": 0.25,
    "loss_weights": {"w_kl": 0.1}, "poll_interval_ms": 50, "data_dir": "d"})"));
  CHECK(c.epochs_per_round == 3);
  CHECK(c.batch_size == 4);
  CHECK(c.seed == 9);
  CHECK(c.local_validation_split == 0.25);
  CHECK(c.loss_weights.w_kl == 0.1);
  CHECK(c.loss_weights.w_recon == ml::LossWeights{}.w_recon);
  CHECK(c.poll_interval == std::chrono::milliseconds(50));
  CHECK(c.data_dir == "d");
  CHECK(c.lr_max == client::ClientConfig{}.lr_max);
}

TEST_CASE("an empty plan is the default plan for seed 1") {
  const auto p = config::plan_from_json(json::object());
  CHECK(config::to_json(p) == config::to_json(sim::default_plan(1)));
  const auto q = config::plan_from_json(json::parse(R"({"seed": 2})"));
  CHECK(config::to_json(q) == config::to_json(sim::default_plan(2)));
}

TEST_CASE("plan overrides merge into the seeded defaults") {
  const auto p = config::plan_from_json(json::parse(R"({"seed": 2, "rounds": 0, "c2": {"n_volumes": 5, "tumor": null}})"));
  const auto d = sim::default_plan(2);
  CHECK(p.rounds == 0);
  CHECK(p.c2.n_volumes == 5);
  CHECK_FALSE(p.c2.tumor.has_value());
  CHECK(p.c2.spacing_mm == d.c2.spacing_mm);
  CHECK(p.c1.seed == d.c1.seed);
}

TEST_CASE("plan JSON round-trips") {
  auto p = sim::default_plan(3);
  p.rounds = 4;
  p.aggregation.mode = agg::Mode::UniformMean;
  p.c1.organ.radii[1] = {7.0, 9.5};
  const auto j = config::to_json(p);
  CHECK(config::to_json(config::plan_from_json(j)) == j);
  CHECK(j.at("aggregation").at("mode") == "uniform_mean");
}
