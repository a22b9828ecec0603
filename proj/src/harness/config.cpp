#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "safegen/harness.hpp"
#include "toml.hpp"

namespace safegen::harness {
namespace {

constexpr std::array kMethodNames{"DQN",        "DropDQN", "BlockDQN", "EnsDQN",  "MajDQN",   "BlockEnsDQN",
                                  "PPO",        "MajPPO",  "EnsMeanPPO", "DropPPO", "MCDropPPO"};

nlohmann::json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
    return out;
  }
  if (const auto* a = node.as_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : *a) out.push_back(toml_to_json(v));
    return out;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  throw std::invalid_argument("config: unsupported TOML value type");
}

void insert_json(toml::table& table, const std::string& key, const nlohmann::json& value);

toml::array json_to_toml_array(const nlohmann::json& arr) {
  toml::array out;
  for (const auto& v : arr) {
    if (v.is_object()) {
      toml::table t;
      for (const auto& [k, item] : v.items()) insert_json(t, k, item);
      out.push_back(std::move(t));
    } else if (v.is_array()) {
      out.push_back(json_to_toml_array(v));
    } else if (v.is_boolean()) {
      out.push_back(v.get<bool>());
    } else if (v.is_number_integer()) {
      out.push_back(v.get<std::int64_t>());
    } else if (v.is_number_float()) {
      out.push_back(v.get<double>());
    } else {
      out.push_back(v.get<std::string>());
    }
  }
  return out;
}

void insert_json(toml::table& table, const std::string& key, const nlohmann::json& value) {
  if (value.is_object()) {
    toml::table sub;
    for (const auto& [k, item] : value.items()) insert_json(sub, k, item);
    table.insert_or_assign(key, std::move(sub));
  } else if (value.is_array()) {
    table.insert_or_assign(key, json_to_toml_array(value));
  } else if (value.is_boolean()) {
    table.insert_or_assign(key, value.get<bool>());
  } else if (value.is_number_integer()) {
    table.insert_or_assign(key, value.get<std::int64_t>());
  } else if (value.is_number_float()) {
    table.insert_or_assign(key, value.get<double>());
  } else {
    table.insert_or_assign(key, value.get<std::string>());
  }
}

void reject_unknown(const nlohmann::json& doc, const nlohmann::json& reference, const std::string& where) {
  if (!doc.is_object()) throw std::invalid_argument("config: " + where + " must be a table");
  for (const auto& [k, v] : doc.items()) {
    if (!reference.contains(k)) throw std::invalid_argument("config: unknown key " + where + k);
  }
}

nlohmann::json parse_toml_json(std::string_view text) {
  try {
    return toml_to_json(toml::parse(text));
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config: TOML parse error at line " << e.source().begin.line << ": " << e.description();
    throw std::invalid_argument(msg.str());
  }
}

}  // namespace

std::string_view to_string(Method m) { return kMethodNames[static_cast<std::size_t>(m)]; }

Method method_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kMethodNames.size(); ++i) {
    if (name == kMethodNames[i]) return static_cast<Method>(i);
  }
  throw std::invalid_argument("unknown method: " + std::string(name));
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = [] {
    std::vector<Method> m;
    for (std::size_t i = 0; i < kMethodNames.size(); ++i) m.push_back(static_cast<Method>(i));
    return m;
  }();
  return methods;
}

bool is_dqn_family(Method m) { return static_cast<int>(m) <= static_cast<int>(Method::BlockEnsDQN); }

bool method_valid_for(Method m, EnvKind kind) { return is_dqn_family(m) == (kind != EnvKind::LavaRun); }

bool uses_ensemble(Method m) {
  return m == Method::EnsDQN || m == Method::MajDQN || m == Method::BlockEnsDQN || m == Method::MajPPO ||
         m == Method::EnsMeanPPO;
}

void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (!method_valid_for(c.method, c.env_kind)) {
    fail("method " + std::string(to_string(c.method)) + " is not valid for env " + std::string(to_string(c.env_kind)));
  }
  if (c.n_train < 1) fail("n_train must be >= 1");
  if (c.n_test < 1) fail("n_test must be >= 1");
  if (c.seeds.empty()) fail("seeds must not be empty");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) fail("seeds repeat");
  for (auto s : c.seeds) {
    if (s > static_cast<std::uint64_t>(INT64_MAX)) fail("seeds must fit in a signed 64-bit integer");
  }
  if (c.split_seed > static_cast<std::uint64_t>(INT64_MAX)) fail("split_seed must fit in a signed 64-bit integer");
  if (c.ensemble_size < 1) fail("ensemble_size must be >= 1");
  if (c.drop_probability < 0.0 || c.drop_probability >= 1.0) fail("drop_probability must be in [0, 1)");
  if (c.mc_passes < 1) fail("mc_passes must be >= 1");
  if (c.workers < 1) fail("workers must be >= 1");
  if (c.convergence_threshold < 0.0 || c.convergence_threshold > 1.0) fail("convergence_threshold must be in [0, 1]");
  if (c.dqn.hidden.empty() || c.ppo.hidden.empty() || c.blocker.hidden.empty()) fail("hidden sizes must not be empty");
  if (c.dqn.episodes < 1) fail("dqn.episodes must be >= 1");
  if (c.ppo.total_steps < c.ppo.steps_per_rollout) fail("ppo.total_steps must cover one rollout");
  if (c.ppo.steps_per_rollout % c.ppo.minibatches != 0) fail("ppo.steps_per_rollout must divide into minibatches");
  if (c.risk.bootstrap < 2) fail("risk.bootstrap must be >= 2");
  for (int dt : c.risk.dts) {
    if (dt < 1) fail("risk.dts entries must be >= 1");
  }
  for (const auto& v : c.risk.variants) ens::variant_by_name(v);
  if (c.method == Method::MCDropPPO && c.ppo.dropout_start <= 0.0) fail("MCDropPPO needs ppo.dropout_start > 0");
  if (c.method == Method::DropPPO && c.ppo.dropout_start <= 0.0) fail("DropPPO needs ppo.dropout_start > 0");
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"name", c.name},
          {"env", to_string(c.env_kind)},
          {"method", to_string(c.method)},
          {"n_train", c.n_train},
          {"n_test", c.n_test},
          {"split_seed", c.split_seed},
          {"seeds", c.seeds},
          {"ensemble_size", c.ensemble_size},
          {"drop_probability", c.drop_probability},
          {"oracle_blocker", c.oracle_blocker},
          {"convergence_threshold", c.convergence_threshold},
          {"mc_passes", c.mc_passes},
          {"workers", c.workers},
          {"dqn", dqn::to_json(c.dqn)},
          {"blocker", blocker::to_json(c.blocker)},
          {"ppo", ppo::to_json(c.ppo)},
          {"risk",
           {{"enabled", c.risk.enabled},
            {"dts", c.risk.dts},
            {"variants", c.risk.variants},
            {"bootstrap", c.risk.bootstrap},
            {"bootstrap_seed", c.risk.bootstrap_seed},
            {"random_baseline", c.risk.random_baseline}}}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& doc) {
  const ExperimentConfig defaults;
  const auto reference = to_json(defaults);
  reject_unknown(doc, reference, "");
  for (const char* section : {"dqn", "blocker", "ppo", "risk"}) {
    if (doc.contains(section)) reject_unknown(doc.at(section), reference.at(section), std::string(section) + ".");
  }

  ExperimentConfig c;
  try {
    c.name = doc.value("name", c.name);
    c.env_kind = env_kind_from_string(doc.value("env", std::string(to_string(c.env_kind))));
    c.method = method_from_string(doc.value("method", std::string(to_string(c.method))));
    c.n_train = doc.value("n_train", c.n_train);
    c.n_test = doc.value("n_test", c.n_test);
    c.split_seed = doc.value("split_seed", c.split_seed);
    c.seeds = doc.value("seeds", c.seeds);
    c.ensemble_size = doc.value("ensemble_size", c.env_kind == EnvKind::LavaRun ? 5 : c.ensemble_size);
    c.drop_probability = doc.value("drop_probability", c.drop_probability);
    c.oracle_blocker = doc.value("oracle_blocker", c.oracle_blocker);
    c.convergence_threshold = doc.value("convergence_threshold", c.convergence_threshold);
    c.mc_passes = doc.value("mc_passes", c.mc_passes);
    c.workers = doc.value("workers", c.workers);
    c.dqn = dqn::dqn_config_from_json(doc.value("dqn", nlohmann::json::object()));
    c.blocker = blocker::blocker_config_from_json(doc.value("blocker", nlohmann::json::object()));
    c.ppo = ppo::ppo_config_from_json(doc.value("ppo", nlohmann::json::object()));
    if (!doc.contains("ppo") || !doc.at("ppo").contains("dropout_start")) {
      if (c.method == Method::DropPPO || c.method == Method::MCDropPPO) c.ppo.dropout_start = 0.1;
    }
    const auto risk = doc.value("risk", nlohmann::json::object());
    c.risk.enabled = risk.value("enabled", c.risk.enabled);
    c.risk.dts = risk.value("dts", c.risk.dts);
    c.risk.variants = risk.value("variants", c.risk.variants);
    c.risk.bootstrap = risk.value("bootstrap", c.risk.bootstrap);
    c.risk.bootstrap_seed = risk.value("bootstrap_seed", c.risk.bootstrap_seed);
    c.risk.random_baseline = risk.value("random_baseline", c.risk.random_baseline);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: wrong value type: ") + e.what());
  }
  validate(c);
  return c;
}

ExperimentConfig parse_config_toml(std::string_view text) { return experiment_config_from_json(parse_toml_json(text)); }

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config_toml(read_file(path)); }

std::string to_toml(const ExperimentConfig& config) {
  toml::table table;
  const auto doc = to_json(config);
  for (const auto& [k, v] : doc.items()) insert_json(table, k, v);
  std::ostringstream out;
  out << table << '\n';
  return out.str();
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& config) {
  auto doc = to_json(config);
  // Names and thread counts do not change results.
  doc.erase("name");
  doc.erase("workers");
  return fnv1a_hex(std::string(kCodeVersion) + "\n" + doc.dump());
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

SweepConfig parse_sweep_toml(std::string_view text) {
  auto doc = parse_toml_json(text);
  SweepConfig sweep;
  nlohmann::json grid = nlohmann::json::object();
  if (doc.contains("sweep")) {
    grid = doc.at("sweep");
    doc.erase("sweep");
  }
  for (const auto& [k, v] : grid.items()) {
    if (k != "methods" && k != "n_train" && k != "envs") throw std::invalid_argument("config: unknown key sweep." + k);
  }
  // The base config must validate on its own, so borrow the first grid cell.
  if (grid.contains("methods") && !doc.contains("method")) doc["method"] = grid["methods"].at(0);
  if (grid.contains("envs") && !doc.contains("env")) doc["env"] = grid["envs"].at(0);
  sweep.base = experiment_config_from_json(doc);
  for (const auto& m : grid.value("methods", std::vector<std::string>{})) sweep.methods.push_back(method_from_string(m));
  sweep.n_train = grid.value("n_train", std::vector<std::size_t>{});
  for (const auto& e : grid.value("envs", std::vector<std::string>{})) sweep.env_kinds.push_back(env_kind_from_string(e));
  if (sweep.methods.empty()) sweep.methods.push_back(sweep.base.method);
  if (sweep.n_train.empty()) sweep.n_train.push_back(sweep.base.n_train);
  return sweep;
}

SweepConfig load_sweep(const std::filesystem::path& path) { return parse_sweep_toml(read_file(path)); }

std::vector<ExperimentConfig> expand(const SweepConfig& sweep) {
  std::vector<EnvKind> kinds = sweep.env_kinds;
  if (kinds.empty()) kinds.push_back(sweep.base.env_kind);
  std::vector<ExperimentConfig> cells;
  for (EnvKind kind : kinds) {
    for (Method m : sweep.methods) {
      if (!method_valid_for(m, kind)) continue;
      for (std::size_t n : sweep.n_train) {
        ExperimentConfig c = sweep.base;
        c.env_kind = kind;
        c.method = m;
        c.n_train = n;
        if ((m == Method::DropPPO || m == Method::MCDropPPO) && c.ppo.dropout_start <= 0.0) c.ppo.dropout_start = 0.1;
        c.name = sweep.base.name + "/" + std::string(to_string(kind)) + "/" + std::string(to_string(m)) + "/n" +
                 std::to_string(n);
        validate(c);
        cells.push_back(std::move(c));
      }
    }
  }
  return cells;
}

}  // namespace safegen::harness
