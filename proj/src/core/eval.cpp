// SPDX-License-Identifier: Apache-2.0

#include "eval.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "errors.hpp"
#include "train.hpp"
#include "util.hpp"

namespace cdnet::eval {

using nlohmann::json;
using objectives::Metric;

void EvalConfig::validate() const {
  if (ways < 1 || shots < 1 || queries < 1) throw ConfigError("eval.ways/shots/queries must be >= 1");
  if (tasks < 1) throw ConfigError("eval.tasks must be >= 1");
  if (threads < 1) throw ConfigError("eval.threads must be >= 1");
}

Summary summarize(std::span<const Real> values) {
  Summary s;
  if (values.empty()) return s;
  const auto n = static_cast<Real>(values.size());
  Real sum = 0;
  for (Real v : values) sum += v;
  s.mean = sum / n;
  if (values.size() > 1) {
    Real ss = 0;
    for (Real v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / (n - 1));
    s.ci95 = Real(1.96) * s.sd / std::sqrt(n);
  }
  return s;
}

int nearest_centroid_predict(const Matrix& query, const Matrix& centers, Metric metric) {
  if (centers.rows() < 1) throw ContractError("nearest_centroid_predict: no centers");
  if (query.cols() != centers.cols() || query.rows() != 1) {
    throw ContractError("nearest_centroid_predict: query/center shape mismatch");
  }
  int best = 0;
  Real best_dist = 0;
  for (Index n = 0; n < centers.rows(); ++n) {
    Real dist = (query.row(0) - centers.row(n)).squaredNorm();
    if (metric == Metric::kEuclidean) dist = std::sqrt(dist);
    if (n == 0 || dist < best_dist) {
      best = static_cast<int>(n);
      best_dist = dist;
    }
  }
  return best;
}

Real episode_accuracy(const model::Model& m, const data::SyntheticDataset& ds,
                      const data::Episode& ep, Metric metric) {
  num::Tape tape;
  const auto vars = m.bind_frozen(tape);
  const auto feats = model::forward(m, vars, tape.constant(data::episode_inputs(ds, ep)));
  const Matrix& r_e = feats.trace.r_e.value();
  const Index n_support = static_cast<Index>(ep.support.size());
  Matrix centers(ep.ways, r_e.cols());
  for (int c = 0; c < ep.ways; ++c) {
    centers.row(c) = r_e.middleRows(static_cast<Index>(c) * ep.shots, ep.shots).colwise().sum() /
                     static_cast<Real>(ep.shots);
  }
  int correct = 0;
  for (std::size_t q = 0; q < ep.query.size(); ++q) {
    const Matrix row = r_e.row(n_support + static_cast<Index>(q));
    if (nearest_centroid_predict(row, centers, metric) == ep.query_label(q)) ++correct;
  }
  return static_cast<Real>(correct) / static_cast<Real>(ep.query.size());
}

EvalReport evaluate(const model::Model& m, const data::SyntheticDataset& ds, const EvalConfig& cfg) {
  cfg.validate();
  EvalReport r;
  r.ways = cfg.ways;
  r.shots = cfg.shots;
  r.queries = cfg.queries;
  r.tasks = cfg.tasks;
  r.seed = cfg.seed;
  r.checkpoint_hash = model::hash_hex(model::model_hash(m));
  r.per_task_accuracy.assign(static_cast<std::size_t>(cfg.tasks), 0);

  // Surface infeasible configs before spawning workers.
  {
    Rng probe(derive_seed(cfg.seed, kSeedEval, 0));
    (void)data::sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, cfg.pool, probe);
  }
  auto run_range = [&](int begin, int end) {
    for (int t = begin; t < end; ++t) {
      Rng rng(derive_seed(cfg.seed, kSeedEval, static_cast<std::uint64_t>(t)));
      const auto ep = data::sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, cfg.pool, rng);
      r.per_task_accuracy[static_cast<std::size_t>(t)] = episode_accuracy(m, ds, ep, cfg.metric);
    }
  };
  const int threads = std::min(cfg.threads, cfg.tasks);
  if (threads <= 1) {
    run_range(0, cfg.tasks);
  } else {
    std::vector<std::jthread> workers;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    const int chunk = (cfg.tasks + threads - 1) / threads;
    for (int w = 0; w < threads; ++w) {
      const int begin = w * chunk;
      const int end = std::min(cfg.tasks, begin + chunk);
      workers.emplace_back([&, w, begin, end] {
        try {
          run_range(begin, end);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    workers.clear();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  const Summary s = summarize(r.per_task_accuracy);
  r.mean = s.mean;
  r.ci95 = s.ci95;
  return r;
}

namespace {

std::string fmt(Real v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
  return buf;
}

}  // namespace

std::string report_to_text(const EvalReport& r) {
  std::ostringstream os;
  os << "format: cdnet-eval-report v1\n";
  os << "ways: " << r.ways << '\n';
  os << "shots: " << r.shots << '\n';
  os << "queries: " << r.queries << '\n';
  os << "tasks: " << r.tasks << '\n';
  os << "seed: " << r.seed << '\n';
  os << "checkpoint_hash: " << r.checkpoint_hash << '\n';
  os << "mean: " << fmt(r.mean) << '\n';
  os << "ci95: " << fmt(r.ci95) << '\n';
  os << "per_task_accuracy:";
  for (Real a : r.per_task_accuracy) os << ' ' << fmt(a);
  os << '\n';
  return os.str();
}

std::string report_to_json(const EvalReport& r) {
  json j{{"ways", r.ways},
         {"shots", r.shots},
         {"queries", r.queries},
         {"tasks", r.tasks},
         {"seed", r.seed},
         {"checkpoint_hash", r.checkpoint_hash},
         {"mean", r.mean},
         {"ci95", r.ci95},
         {"per_task_accuracy", r.per_task_accuracy}};
  return j.dump(2);
}

AblationTable ablation_table(const data::SyntheticDataset& ds, const train::TrainConfig& base,
                             const EvalConfig& eval_cfg, std::span<const std::string> variants,
                             std::span<const int> shots, const std::vector<bool>& inits) {
  AblationTable table;
  table.shots.assign(shots.begin(), shots.end());
  // Pre-training depends only on the architecture, so it is shared by every
  // variant and shot count that uses the same one.
  std::map<model::Architecture, model::Checkpoint> pretrained;
  for (bool init : inits) {
    for (const auto& name : variants) {
      AblationRow row;
      row.variant = name;
      row.pretrained = init;
      for (int k : shots) {
        AblationCell cell;
        cell.shots = k;
        try {
          train::TrainConfig cfg = base;
          cfg.variant = train::variant_from_string(name);
          cfg.shots = k;
          cfg.use_pretrained = init;
          const model::Checkpoint* pre = nullptr;
          if (init) {
            const auto arch = train::variant_spec(cfg.variant).architecture;
            auto it = pretrained.find(arch);
            if (it == pretrained.end()) {
              model::Model m(train::model_config(cfg, ds));
              train::pretrain(m, ds, cfg);
              it = pretrained.emplace(arch, model::Checkpoint{std::move(m), "shared", "pretrain"}).first;
            }
            pre = &it->second;
          }
          const auto run = train::run_variant(ds, cfg, pre);
          EvalConfig ec = eval_cfg;
          ec.shots = k;
          cell.report = evaluate(run.finetuned.model, ds, ec);
        } catch (const std::exception& e) {
          cell.error = e.what();
          log_warning("ablation " + name + " K=" + std::to_string(k) + " failed: " + e.what());
        }
        row.cells.push_back(std::move(cell));
      }
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

std::string ablation_to_text(const AblationTable& t) {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-12s %-4s", "variant", "pre");
  os << buf;
  for (int k : t.shots) {
    std::snprintf(buf, sizeof buf, " %18s", (std::to_string(k) + "-shot").c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& row : t.rows) {
    std::snprintf(buf, sizeof buf, "%-12s %-4s", row.variant.c_str(), row.pretrained ? "yes" : "no");
    os << buf;
    for (const auto& c : row.cells) {
      if (c.report) {
        std::snprintf(buf, sizeof buf, " %9.2f +- %5.2f", 100 * c.report->mean, 100 * c.report->ci95);
      } else {
        std::snprintf(buf, sizeof buf, " %18s", "--");
      }
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::string ablation_to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& row : t.rows) {
    json cells = json::array();
    for (const auto& c : row.cells) {
      if (c.report) {
        cells.push_back({{"shots", c.shots},
                         {"mean", c.report->mean},
                         {"ci95", c.report->ci95},
                         {"checkpoint_hash", c.report->checkpoint_hash}});
      } else {
        cells.push_back({{"shots", c.shots}, {"missing", true}, {"error", c.error}});
      }
    }
    rows.push_back({{"variant", row.variant}, {"pretrained", row.pretrained}, {"cells", cells}});
  }
  return json{{"shots", t.shots}, {"rows", rows}}.dump(2);
}

std::vector<SweepPoint> j_sweep(const data::SyntheticDataset& ds, const train::TrainConfig& base,
                                const EvalConfig& eval_cfg, std::span<const int> steps) {
  std::vector<SweepPoint> out;
  for (int j : steps) {
    if (j < 0) throw ConfigError("j_sweep: J must be >= 0");
    train::TrainConfig cfg = base;
    if (j == 0) {
      cfg.variant = train::Variant::kBaseline;
    } else {
      cfg.cascade_steps = j;
    }
    const auto run = train::run_variant(ds, cfg);
    SweepPoint p;
    p.steps = j;
    p.report = evaluate(run.finetuned.model, ds, eval_cfg);
    p.checkpoint_hash = p.report.checkpoint_hash;
    out.push_back(std::move(p));
  }
  return out;
}

std::string sweep_to_text(std::span<const SweepPoint> series) {
  std::ostringstream os;
  os << "# J mean ci95\n";
  for (const auto& p : series) os << p.steps << ' ' << fmt(p.report.mean) << ' ' << fmt(p.report.ci95) << '\n';
  return os.str();
}

}  // namespace cdnet::eval
