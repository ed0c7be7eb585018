// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "data.hpp"
#include "model.hpp"
#include "objectives.hpp"

namespace cdnet::train {
struct TrainConfig;
}

namespace cdnet::eval {

using model::Index;
using model::Matrix;
using model::Real;

struct EvalConfig {
  int ways = 5;
  int shots = 5;
  int queries = 16;
  int tasks = 1000;
  std::uint64_t seed = 0;
  objectives::Metric metric = objectives::Metric::kSquaredEuclidean;
  data::ClassPool pool = data::ClassPool::kNovel;
  int threads = 1;

  void validate() const;
};

struct EvalReport {
  std::vector<Real> per_task_accuracy;
  Real mean = 0;
  Real ci95 = 0;  // 1.96 * sample sd / sqrt(T)
  int ways = 0;
  int shots = 0;
  int queries = 0;
  int tasks = 0;
  std::uint64_t seed = 0;
  std::string checkpoint_hash;
};

// Mean and 1.96 * sd / sqrt(T) with the (T-1) sample standard deviation
// (0 when T == 1).
struct Summary {
  Real mean = 0;
  Real sd = 0;
  Real ci95 = 0;
};
Summary summarize(std::span<const Real> values);

// Index of the nearest center to `query` (1 x d); ties go to the lowest index.
int nearest_centroid_predict(const Matrix& query, const Matrix& centers,
                             objectives::Metric metric = objectives::Metric::kSquaredEuclidean);

// Fraction of queries of one episode classified correctly from r_e.
Real episode_accuracy(const model::Model& m, const data::SyntheticDataset& ds,
                      const data::Episode& ep, objectives::Metric metric);

// T episodes with per-task seeds derived from (seed, task index), so any
// thread count gives identical results. Never modifies the model.
EvalReport evaluate(const model::Model& m, const data::SyntheticDataset& ds, const EvalConfig& cfg);

// Structured text: one "key: value" per line.
std::string report_to_text(const EvalReport& r);
std::string report_to_json(const EvalReport& r);

struct AblationCell {
  int shots = 0;
  std::optional<EvalReport> report;  // empty when the run failed
  std::string error;
};

struct AblationRow {
  std::string variant;
  bool pretrained = true;
  std::vector<AblationCell> cells;  // one per requested shot count
};

struct AblationTable {
  std::vector<int> shots;
  std::vector<AblationRow> rows;
};

// Trains every variant per (init, K) under shared data and seeds and
// evaluates K-shot accuracy on the novel split. A failing run leaves a gap.
AblationTable ablation_table(const data::SyntheticDataset& ds, const train::TrainConfig& base,
                             const EvalConfig& eval_cfg, std::span<const std::string> variants,
                             std::span<const int> shots, const std::vector<bool>& inits);

std::string ablation_to_text(const AblationTable& t);
std::string ablation_to_json(const AblationTable& t);

struct SweepPoint {
  int steps = 0;  // J; 0 is the baseline
  EvalReport report;
  std::string checkpoint_hash;
};

// Trains and evaluates one model per J. J = 0 runs the baseline variant.
std::vector<SweepPoint> j_sweep(const data::SyntheticDataset& ds, const train::TrainConfig& base,
                                const EvalConfig& eval_cfg, std::span<const int> steps);

// Two columns "J mean" plus ci95, whitespace separated, with a header comment.
std::string sweep_to_text(std::span<const SweepPoint> series);

}  // namespace cdnet::eval
