#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <thread>

#include "safegen/harness.hpp"

namespace safegen::harness {
namespace {

namespace fs = std::filesystem;

struct CompletedRun {
  ExperimentConfig config;
  EvalSummary summary;
  fs::path dir;
};

std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

// Learned and oracle blockers share a method name; keep them apart in plots.
std::string method_label(const ExperimentConfig& c) {
  std::string label(to_string(c.method));
  const bool blocked = c.method == Method::BlockDQN || c.method == Method::BlockEnsDQN;
  if (blocked && c.oracle_blocker) label += "-oracle";
  return label;
}

std::vector<CompletedRun> scan_runs(const fs::path& out) {
  std::vector<CompletedRun> runs;
  const fs::path root = out / "runs";
  if (!fs::exists(root)) return runs;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "summary.json")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    runs.push_back({parse_config_toml(read_file(d / "config.toml")),
                    eval_summary_from_json(nlohmann::json::parse(read_file(d / "summary.json"))), d});
  }
  std::sort(runs.begin(), runs.end(), [](const CompletedRun& a, const CompletedRun& b) {
    return std::tuple(a.config.env_kind, a.config.method, a.config.oracle_blocker, a.config.n_train, a.dir) <
           std::tuple(b.config.env_kind, b.config.method, b.config.oracle_blocker, b.config.n_train, b.dir);
  });
  return runs;
}

struct RocTable {
  std::vector<double> fpr, tpr, tpr_std;
};

RocTable read_roc_csv(const fs::path& path) {
  RocTable t;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string a, b, c;
    std::getline(row, a, ',');
    std::getline(row, b, ',');
    std::getline(row, c, ',');
    t.fpr.push_back(std::stod(a));
    t.tpr.push_back(std::stod(b));
    t.tpr_std.push_back(std::stod(c));
  }
  return t;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
}

// One ROC table per run: seeds averaged pointwise on the shared FPR grid.
void emit_roc(const CompletedRun& run, const fs::path& plots, PlotEmission& emission) {
  if (!run.config.risk.enabled) return;
  std::string csv = "variant,dt,fpr,tpr,auc_mean,auc_std,tpr_std\n";
  bool any = false;

  auto add_rows = [&](const std::string& variant, const std::string& file_prefix, const std::string& auc_prefix,
                      const std::string& auc_key_variant, int dt) {
    std::vector<RocTable> tables;
    std::vector<double> auc_means, auc_stds;
    for (auto seed : run.config.seeds) {
      const fs::path seed_dir = run.dir / ("seed_" + std::to_string(seed));
      const fs::path roc = seed_dir / (file_prefix + "_dt" + std::to_string(dt) + ".csv");
      if (!fs::exists(roc)) continue;
      tables.push_back(read_roc_csv(roc));
      const auto auc = nlohmann::json::parse(read_file(seed_dir / (auc_prefix + "auc.json")));
      const auto& entry = auc.at(auc_key_variant + "/dt" + std::to_string(dt));
      auc_means.push_back(entry.at("auc_mean").get<double>());
      auc_stds.push_back(entry.at("auc_std").get<double>());
    }
    if (tables.empty()) return;
    any = true;
    // Across seeds: spread of the per-seed bootstrap means.
    const double auc_mean = mean_of(auc_means);
    const double auc_std = tables.size() > 1 ? std_of(auc_means) : auc_stds.front();
    for (std::size_t g = 0; g < tables.front().fpr.size(); ++g) {
      std::vector<double> tprs, stds;
      for (const auto& t : tables) {
        tprs.push_back(t.tpr[g]);
        stds.push_back(t.tpr_std[g]);
      }
      csv += variant + "," + std::to_string(dt) + "," + num(tables.front().fpr[g]) + "," + num(mean_of(tprs)) + "," +
             num(auc_mean) + "," + num(auc_std) + "," + num(tables.size() > 1 ? std_of(tprs) : stds.front()) + "\n";
    }
  };

  for (const auto& variant : run.config.risk.variants) {
    for (int dt : run.config.risk.dts) add_rows(variant, "roc_" + variant, "", variant, dt);
  }
  if (run.config.risk.random_baseline && !run.config.risk.variants.empty()) {
    const auto& first = run.config.risk.variants.front();
    for (int dt : run.config.risk.dts) add_rows("random", "random_roc_" + first, "random_", first, dt);
  }
  if (!any) return;
  const fs::path path = plots / ("roc_" + std::string(to_string(run.config.env_kind)) + "_" + method_label(run.config) +
                                 "_n" + std::to_string(run.config.n_train) + ".csv");
  write_file_atomic(path, csv);
  emission.files.push_back(path);
}

}  // namespace

std::string_view to_string(PlotKind kind) {
  switch (kind) {
    case PlotKind::CatastropheVsEnvs: return "catastrophe_vs_envs";
    case PlotKind::SolvedVsEnvs: return "solved_vs_envs";
    case PlotKind::ROC: return "roc";
  }
  return "unknown";
}

std::vector<EvalSummary> run_sweep(const SweepConfig& sweep, const fs::path& out) {
  const auto cells = expand(sweep);
  std::vector<EvalSummary> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      try {
        auto cell = cells[i];
        cell.workers = 1;  // the pool already uses every worker
        results[i] = run_experiment(cell, out);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int workers = std::max(1, std::min<int>(sweep.base.workers, static_cast<int>(cells.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return results;
}

PlotEmission emit_plot_data(const fs::path& out, PlotKind kind, std::span<const ExperimentConfig> expected) {
  PlotEmission emission;
  for (const auto& c : expected) {
    if (!fs::exists(run_directory(c, out) / "summary.json")) {
      emission.missing.push_back(c.name + " (" + config_hash(c) + ")");
    }
  }

  const auto runs = scan_runs(out);
  const fs::path plots = out / "plots";
  fs::create_directories(plots);

  if (kind == PlotKind::ROC) {
    for (const auto& run : runs) emit_roc(run, plots, emission);
    return emission;
  }

  const bool catastrophe = kind == PlotKind::CatastropheVsEnvs;
  const std::string metric = catastrophe ? "pct_catastrophe" : "pct_solved";
  std::map<EnvKind, std::string> rows, means;
  for (const auto& run : runs) {
    auto& csv = rows[run.config.env_kind];
    auto& mean_csv = means[run.config.env_kind];
    std::vector<double> values;
    for (const auto& s : run.summary.per_seed) {
      const double v = catastrophe ? s.pct_catastrophe : s.pct_solved;
      values.push_back(v);
      csv += method_label(run.config) + "," + std::to_string(run.config.n_train) + "," + std::to_string(s.seed) + "," +
             num(v) + "," + (s.flagged ? "1" : "0") + "\n";
    }
    mean_csv += method_label(run.config) + "," + std::to_string(run.config.n_train) + "," + num(mean_of(values)) + "," +
                num(std_of(values)) + "," + std::to_string(values.size()) + "," +
                std::to_string(run.summary.flagged_seeds.size()) + "\n";
  }
  for (const auto& [env, body] : rows) {
    const std::string stem = std::string(to_string(kind)) + "_" + std::string(to_string(env));
    const fs::path path = plots / (stem + ".csv");
    write_file_atomic(path, "method,n_train,seed," + metric + ",flagged\n" + body);
    emission.files.push_back(path);
    const fs::path mean_path = plots / (stem + "_mean.csv");
    write_file_atomic(mean_path, "method,n_train,mean,std,seeds,flagged_seeds\n" + means[env]);
    emission.files.push_back(mean_path);
  }
  return emission;
}

}  // namespace safegen::harness

namespace safegen::harness {

nlohmann::json roc_from_points_csv(const std::filesystem::path& points_csv, const std::filesystem::path& out_dir,
                                   int bootstrap, std::uint64_t seed) {
  std::istringstream in(read_file(points_csv));
  std::string line;
  std::getline(in, line);
  const std::string expected = "episode,step,mu,sigma,score_variant,score,";
  if (line.rfind(expected, 0) != 0) throw std::invalid_argument("roc: unexpected header in " + points_csv.string());
  std::vector<int> dts;
  {
    std::istringstream header(line.substr(expected.size()));
    for (std::string col; std::getline(header, col, ',');) {
      if (col.rfind("label_dt", 0) != 0) throw std::invalid_argument("roc: unexpected column " + col);
      dts.push_back(std::stoi(col.substr(8)));
    }
  }

  // variant -> episode -> per-dt scores and labels, in file order.
  struct Series {
    std::vector<double> scores;
    std::vector<std::vector<bool>> labels;
  };
  std::map<std::string, std::map<std::int64_t, Series>> data;
  std::vector<std::string> variant_order;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
    if (cells.size() != 6 + dts.size()) throw std::invalid_argument("roc: malformed row: " + line);
    const auto& variant = cells[4];
    if (!data.count(variant)) variant_order.push_back(variant);
    auto& series = data[variant][std::stoll(cells[0])];
    series.scores.push_back(std::stod(cells[5]));
    series.labels.resize(dts.size());
    for (std::size_t k = 0; k < dts.size(); ++k) series.labels[k].push_back(cells[6 + k] == "1");
  }

  std::filesystem::create_directories(out_dir);
  nlohmann::json auc = nlohmann::json::object();
  for (std::size_t v = 0; v < variant_order.size(); ++v) {
    const auto& variant = variant_order[v];
    for (std::size_t k = 0; k < dts.size(); ++k) {
      std::vector<ens::EpisodeScores> episodes;
      bool pos = false, neg = false;
      for (const auto& [id, s] : data[variant]) {
        episodes.push_back({s.scores, s.labels[k]});
        for (bool l : s.labels[k]) (l ? pos : neg) = true;
      }
      const std::string key = variant + "/dt" + std::to_string(dts[k]);
      if (!pos || !neg) {
        auc[key] = nullptr;
        continue;
      }
      const auto roc = ens::bootstrap_roc(episodes, bootstrap, derive_seed(seed, v * 1000 + static_cast<std::uint64_t>(dts[k])));
      ens::write_roc_csv(out_dir / ("roc_" + variant + "_dt" + std::to_string(dts[k]) + ".csv"), roc);
      auc[key] = ens::auc_json(roc);
    }
  }
  write_file_atomic(out_dir / "auc.json", auc.dump(2) + "\n");
  return auc;
}

}  // namespace safegen::harness
