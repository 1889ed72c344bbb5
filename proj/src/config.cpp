#include "fedring/config.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <limits>
#include <set>
#include <type_traits>

#include <openssl/crypto.h>

namespace fedring::config {

using nlohmann::json;

namespace {

// One field list per struct, shared by the reader and the writer.
template <class V> void fields(V& v, sim::OrganSpec& o);
template <class V> void fields(V& v, sim::TumorSpec& t);
template <class V> void fields(V& v, sim::PhantomSpec& s);
template <class V> void fields(V& v, data::PatchSpec& p);
template <class V> void fields(V& v, ml::ModelConfig& m);
template <class V> void fields(V& v, ml::LossWeights& w);
template <class V> void fields(V& v, agg::AggregationPolicy& a);
template <class V> void fields(V& v, sim::ExperimentPlan& p);
template <class V> void fields(V& v, ServerLaunch& s);
template <class V> void fields(V& v, client::ClientConfig& c);

struct Reader;
struct Writer;

template <class T>
concept Record = requires(Reader& r, T& t) { fields(r, t); };

[[noreturn]] void fail(const std::string& path, const std::string& what) { throw ConfigError(path + ": " + what); }

template <class T> void read_value(const json& j, T& out, const std::string& path);
template <class T, std::size_t N> void read_value(const json& j, std::array<T, N>& out, const std::string& path);
template <class T> void read_value(const json& j, std::optional<T>& out, const std::string& path);
void read_value(const json& j, sim::Range& out, const std::string& path);
void read_value(const json& j, agg::Mode& out, const std::string& path);
void read_value(const json& j, wire::Credential& out, const std::string& path);
void read_value(const json& j, std::vector<wire::Credential>& out, const std::string& path);
void read_value(const json& j, transport::Endpoint& out, const std::string& path);

template <class T> json write_value(const T& v);
template <class T> json write_value(const std::optional<T>& v);
json write_value(const sim::Range& r);
json write_value(const agg::Mode& m);
template <std::size_t N> json write_value(const std::array<sim::Range, N>& a);

struct Reader {
  const json& j;
  std::string path;
  std::set<std::string> known;

  template <class T> void operator()(const char* key, T& out) {
    known.insert(key);
    if (auto it = j.find(key); it != j.end()) read_value(*it, out, path + "." + key);
  }
  void finish() const {
    for (const auto& [k, _] : j.items())
      if (!known.contains(k)) fail(path + "." + k, "unknown key");
  }
};

struct Writer {
  json j = json::object();
  template <class T> void operator()(const char* key, const T& v) { j[key] = write_value(v); }
};

template <class T> void read_record(const json& j, T& out, const std::string& path) {
  if (!j.is_object()) fail(path, "expected an object");
  Reader r{j, path, {}};
  fields(r, out);
  r.finish();
}

template <class T> void read_value(const json& j, T& out, const std::string& path) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) fail(path, "expected true or false");
    out = j.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) fail(path, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_unsigned()) {
        const auto u = j.get<std::uint64_t>();
        if (u > std::numeric_limits<T>::max()) fail(path, "out of range");
        out = static_cast<T>(u);
      } else {
        fail(path, "must not be negative");
      }
    } else {
      out = j.get<T>();
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) fail(path, "expected a number");
    out = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) fail(path, "expected a string");
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::chrono::milliseconds>) {
    std::int64_t ms = 0;
    read_value(j, ms, path);
    if (ms < 0) fail(path, "must not be negative");
    out = std::chrono::milliseconds(ms);
  } else if constexpr (Record<T>) {
    read_record(j, out, path);
  } else {
    static_assert(sizeof(T) == 0, "no JSON reader for this type");
  }
}

template <class T, std::size_t N> void read_value(const json& j, std::array<T, N>& out, const std::string& path) {
  if (!j.is_array() || j.size() != N) fail(path, "expected an array of " + std::to_string(N));
  for (std::size_t i = 0; i < N; ++i) read_value(j[i], out[i], path + "[" + std::to_string(i) + "]");
}

template <class T> void read_value(const json& j, std::optional<T>& out, const std::string& path) {
  if (j.is_null()) {
    out.reset();
    return;
  }
  if (!out) out.emplace();
  read_value(j, *out, path);
}

void read_value(const json& j, sim::Range& out, const std::string& path) {
  std::array<double, 2> lh{};
  read_value(j, lh, path);
  out = {lh[0], lh[1]};
}

void read_value(const json& j, agg::Mode& out, const std::string& path) {
  std::string s;
  read_value(j, s, path);
  if (s == "sample_weighted") out = agg::Mode::SampleWeighted;
  else if (s == "uniform_mean") out = agg::Mode::UniformMean;
  else fail(path, "expected sample_weighted or uniform_mean");
}

wire::Bytes from_hex(const std::string& hex, const std::string& path) {
  long len = 0;
  unsigned char* buf = OPENSSL_hexstr2buf(hex.c_str(), &len);
  if (!buf) fail(path, "not a hex string");
  wire::Bytes out(buf, buf + len);
  OPENSSL_free(buf);
  return out;
}

void read_value(const json& j, wire::Credential& out, const std::string& path) {
  if (!j.is_object()) fail(path, "expected an object");
  for (const auto& [k, _] : j.items())
    if (k != "client_id" && k != "secret_hex") fail(path + "." + k, "unknown key");
  if (!j.contains("client_id") || !j.contains("secret_hex")) fail(path, "needs client_id and secret_hex");
  read_value(j["client_id"], out.client_id, path + ".client_id");
  std::string hex;
  read_value(j["secret_hex"], hex, path + ".secret_hex");
  out.secret = from_hex(hex, path + ".secret_hex");
}

void read_value(const json& j, std::vector<wire::Credential>& out, const std::string& path) {
  if (!j.is_array()) fail(path, "expected an array");
  out.assign(j.size(), {});
  for (std::size_t i = 0; i < j.size(); ++i) read_value(j[i], out[i], path + "[" + std::to_string(i) + "]");
}

// "host:port" or {"host", "port", "tls", "ca_cert_path"}.
void read_value(const json& j, transport::Endpoint& out, const std::string& path) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    const auto colon = s.rfind(':');
    if (colon == std::string::npos || colon == 0) fail(path, "expected host:port");
    unsigned port = 0;
    const auto* end = s.data() + s.size();
    const auto [p, ec] = std::from_chars(s.data() + colon + 1, end, port);
    if (ec != std::errc{} || p != end || port == 0 || port > 65535) fail(path, "bad port");
    out.host = s.substr(0, colon);
    out.port = static_cast<std::uint16_t>(port);
    return;
  }
  if (!j.is_object()) fail(path, "expected host:port or an object");
  for (const auto& [k, _] : j.items())
    if (k != "host" && k != "port" && k != "tls" && k != "ca_cert_path") fail(path + "." + k, "unknown key");
  if (j.contains("host")) read_value(j["host"], out.host, path + ".host");
  if (j.contains("port")) read_value(j["port"], out.port, path + ".port");
  if (j.contains("tls")) read_value(j["tls"], out.tls, path + ".tls");
  if (j.contains("ca_cert_path")) read_value(j["ca_cert_path"], out.ca_cert_path, path + ".ca_cert_path");
}

template <class T> json write_value(const T& v) {
  if constexpr (Record<T>) {
    Writer w;
    fields(w, const_cast<T&>(v));
    return w.j;
  } else {
    return v;
  }
}

template <class T> json write_value(const std::optional<T>& v) { return v ? write_value(*v) : json(nullptr); }
json write_value(const sim::Range& r) { return json::array({r.lo, r.hi}); }
json write_value(const agg::Mode& m) { return m == agg::Mode::SampleWeighted ? "sample_weighted" : "uniform_mean"; }
template <std::size_t N> json write_value(const std::array<sim::Range, N>& a) {
  json out = json::array();
  for (const auto& r : a) out.push_back(write_value(r));
  return out;
}

template <class V> void fields(V& v, sim::OrganSpec& o) {
  v("center_offset", o.center_offset);
  v("radii", o.radii);
  v("mean_hu", o.mean_hu);
  v("mean_jitter_hu", o.mean_jitter_hu);
  v("texture_std_hu", o.texture_std_hu);
  v("lobules", o.lobules);
  v("fat_fraction", o.fat_fraction);
  v("fat_hu", o.fat_hu);
}

template <class V> void fields(V& v, sim::TumorSpec& t) {
  v("radius", t.radius);
  v("offset_hu", t.offset_hu);
}

template <class V> void fields(V& v, sim::PhantomSpec& s) {
  v("n_volumes", s.n_volumes);
  v("dims", s.dims);
  v("spacing_mm", s.spacing_mm);
  v("organ", s.organ);
  v("tumor", s.tumor);
  v("background_hu", s.background_hu);
  v("noise_std_hu", s.noise_std_hu);
  v("seed", s.seed);
}

template <class V> void fields(V& v, data::PatchSpec& p) {
  v("size", p.size);
  v("fg_fraction", p.fg_fraction);
}

template <class V> void fields(V& v, ml::ModelConfig& m) {
  v("in_channels", m.in_channels);
  v("n_classes", m.n_classes);
  v("base_filters", m.base_filters);
  v("n_levels", m.n_levels);
  v("latent_dim", m.latent_dim);
  v("patch", m.patch);
}

template <class V> void fields(V& v, ml::LossWeights& w) {
  v("w_kl", w.w_kl);
  v("w_recon", w.w_recon);
}

template <class V> void fields(V& v, agg::AggregationPolicy& a) {
  v("mode", a.mode);
  v("min_clients", a.min_clients);
}

template <class V> void fields(V& v, sim::ExperimentPlan& p) {
  v("seed", p.seed);
  v("c1", p.c1);
  v("c2", p.c2);
  v("split", p.split);
  v("rounds", p.rounds);
  v("epochs_per_round", p.epochs_per_round);
  v("model", p.model);
  v("batch_size", p.batch_size);
  v("patches_per_volume", p.patches_per_volume);
  v("patch_spec", p.patch_spec);
  v("inference_window", p.inference_window);
  v("lr_max", p.lr_max);
  v("lr_min", p.lr_min);
  v("loss_weights", p.loss_weights);
  v("aggregation", p.aggregation);
  v("target_spacing_mm", p.target_spacing_mm);
  v("hu_min", p.hu_min);
  v("hu_max", p.hu_max);
  v("server_validation", p.server_validation);
}

template <class V> void fields(V& v, ServerLaunch& s) {
  auto& c = s.server;
  v("listen_port", c.listen_port);
  v("tls_cert_path", c.tls_cert_path);
  v("tls_key_path", c.tls_key_path);
  v("max_clients", c.max_clients);
  v("min_clients", c.min_clients);
  v("total_rounds", c.total_rounds);
  v("accepted_credentials", c.accepted_credentials);
  v("aggregation", c.aggregation);
  v("model", s.model);
  v("init_seed", s.init_seed);
  v("initial_checkpoint", s.initial_checkpoint);
  v("validation_data_dir", s.validation_data_dir);
  v("inference_window", s.inference_window);
}

template <class V> void fields(V& v, client::ClientConfig& c) {
  v("server_addr", c.server);
  v("credential", c.credential);
  v("data_dir", c.data_dir);
  v("epochs_per_round", c.epochs_per_round);
  v("batch_size", c.batch_size);
  v("patches_per_volume", c.patches_per_volume);
  v("patch_spec", c.patch_spec);
  v("inference_window", c.inference_window);
  v("loss_weights", c.loss_weights);
  v("seed", c.seed);
  v("local_validation_split", c.local_validation_split);
  v("model", c.model);
  v("lr_max", c.lr_max);
  v("lr_min", c.lr_min);
  v("out_dir", c.out_dir);
  v("max_retries", c.max_retries);
  v("retry_base_ms", c.retry_base);
  v("poll_interval_ms", c.poll_interval);
}

// Invalid values surface as ConfigError too, so the CLI reports one kind of failure.
template <class F> void validated(F&& check) {
  try {
    check();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

ServerLaunch server_from_json(const json& j) {
  ServerLaunch s;
  read_record(j, s, "server");
  validated([&] {
    s.server.validate();
    s.model.validate();
  });
  return s;
}

client::ClientConfig client_from_json(const json& j) {
  client::ClientConfig c;
  read_record(j, c, "client");
  validated([&] { c.validate(); });
  return c;
}

sim::ExperimentPlan plan_from_json(const json& j) {
  std::uint64_t seed = 1;
  if (j.is_object() && j.contains("seed")) read_value(j["seed"], seed, "plan.seed");
  sim::ExperimentPlan p = sim::default_plan(seed);
  read_record(j, p, "plan");
  validated([&] { p.validate(); });
  return p;
}

json to_json(const sim::ExperimentPlan& plan) { return write_value(plan); }

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace fedring::config
