// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include <json.hpp>

#include "errors.hpp"
#include "eval.hpp"
#include "support.hpp"
#include "train.hpp"
#include "util.hpp"

using namespace cdnet;
using namespace cdnet::eval;
using num::Matrix;
using objectives::Metric;
using testing::mat;

namespace {

const data::SyntheticDataset& dataset() {
  static const data::SyntheticDataset ds = [] {
    data::DataConfig c;
    c.raw_dim = 8;
    c.train_per_class = 20;
    c.test_per_class = 20;
    c.seed = 5;
    return data::gen_dataset(c);
  }();
  return ds;
}

train::TrainConfig tiny() {
  train::TrainConfig c;
  c.d = 8;
  c.cascade_steps = 2;
  c.pretrain_iters = 20;
  c.finetune_episodes = 1;
  c.tasks_per_episode = 5;
  c.queries = 3;
  c.adam.lr = 1e-3;
  c.seed = 2;
  return c;
}

EvalConfig small_eval(int tasks = 20) {
  EvalConfig e;
  e.shots = 1;
  e.queries = 4;
  e.tasks = tasks;
  e.seed = 9;
  return e;
}

// Loop reference: class means of r_e over support, nearest by squared distance.
double ref_accuracy(const model::Model& m, const data::SyntheticDataset& ds, const data::Episode& ep) {
  num::Tape t;
  const auto f = model::forward(m, m.bind_frozen(t), t.constant(data::episode_inputs(ds, ep)));
  const auto re = testing::to_mat(f.trace.r_e.value());
  const std::size_t d = re[0].size(), n = static_cast<std::size_t>(ep.ways), k = static_cast<std::size_t>(ep.shots);
  testing::Mat centers(n, testing::Vec(d, 0.0));
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t s = 0; s < k; ++s)
      for (std::size_t j = 0; j < d; ++j) centers[c][j] += re[c * k + s][j] / static_cast<double>(k);
  int correct = 0;
  for (std::size_t q = 0; q < ep.query.size(); ++q) {
    const auto& row = re[n * k + q];
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < n; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += (row[j] - centers[c][j]) * (row[j] - centers[c][j]);
      if (s < best_d) {
        best_d = s;
        best = c;
      }
    }
    correct += static_cast<int>(best) == ep.query_label(q);
  }
  return static_cast<double>(correct) / static_cast<double>(ep.query.size());
}

}  // namespace

TEST_CASE("nearest-centroid examples") {
  const Matrix centers = mat(3, 2, {0, 0, 4, 0, 0, 4});
  CHECK(nearest_centroid_predict(mat(1, 2, {1, 0.5}), centers) == 0);
  CHECK(nearest_centroid_predict(mat(1, 2, {3.5, 0}), centers) == 1);
  CHECK(nearest_centroid_predict(mat(1, 2, {0, 3}), centers, Metric::kEuclidean) == 2);
  // Ties go to the lowest index.
  CHECK(nearest_centroid_predict(mat(1, 2, {2, 0}), centers) == 0);
  CHECK(nearest_centroid_predict(mat(1, 2, {2, 2}), centers) == 0);  // three-way tie
  CHECK(nearest_centroid_predict(mat(1, 2, {7, 7}), Matrix::Zero(4, 2)) == 0);
}

TEST_CASE("summary statistics") {
  const std::vector<double> two = {0.5, 0.7};
  const auto s = summarize(two);
  CHECK(s.mean == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(s.ci95 == doctest::Approx(0.196).epsilon(1e-12));
  const std::vector<double> one = {0.3};
  CHECK(summarize(one).ci95 == 0);
  CHECK(summarize(one).mean == 0.3);
  const std::vector<double> flat(10, 0.25);
  CHECK(summarize(flat).ci95 == 0);

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> v(2 + seed % 50);
    for (auto& x : v) x = u(rng);
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    const auto got = summarize(v);
    CHECK(std::abs(got.mean - mean) <= 1e-12);
    CHECK(std::abs(got.sd - sd) <= 1e-12);
    CHECK(std::abs(got.ci95 - 1.96 * sd / std::sqrt(static_cast<double>(v.size()))) <= 1e-12);
  }
}

TEST_CASE("episode accuracy matches the loop reference") {
  model::Model m(train::model_config(tiny(), dataset()));
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const auto ep = data::sample_episode(dataset(), 5, 1 + i % 3, 4, data::ClassPool::kNovel, rng);
    CHECK(episode_accuracy(m, dataset(), ep, Metric::kSquaredEuclidean) == ref_accuracy(m, dataset(), ep));
  }
}

TEST_CASE("a constant feature map scores exactly chance") {
  const model::Model m = model::Model::zeros(train::model_config(tiny(), dataset()));
  const auto r = evaluate(m, dataset(), small_eval(50));
  for (double a : r.per_task_accuracy) CHECK(a == 0.2);
}

TEST_CASE("evaluation is reproducible and thread independent") {
  model::Model m(train::model_config(tiny(), dataset()));
  const auto before = model::model_hash(m);
  auto cfg = small_eval(40);
  const auto a = evaluate(m, dataset(), cfg);
  cfg.threads = 4;
  const auto b = evaluate(m, dataset(), cfg);
  CHECK(a.per_task_accuracy == b.per_task_accuracy);
  CHECK(a.mean == b.mean);
  CHECK(a.ci95 == b.ci95);
  CHECK(report_to_json(a) == report_to_json(b));
  CHECK(model::model_hash(m) == before);
  CHECK(a.tasks == 40);
  CHECK(a.checkpoint_hash == model::hash_hex(before));
  const auto s = summarize(a.per_task_accuracy);
  CHECK(std::abs(s.mean - a.mean) <= 1e-12);
  CHECK(std::abs(s.ci95 - a.ci95) <= 1e-12);
  cfg.seed = 10;
  CHECK(evaluate(m, dataset(), cfg).per_task_accuracy != a.per_task_accuracy);
}

TEST_CASE("report formats") {
  model::Model m(train::model_config(tiny(), dataset()));
  const auto r = evaluate(m, dataset(), small_eval(5));
  const auto j = nlohmann::json::parse(report_to_json(r));
  CHECK(j.at("mean").get<double>() == r.mean);
  CHECK(j.at("per_task_accuracy").size() == 5);
  const auto text = report_to_text(r);
  CHECK(text.find("mean: ") != std::string::npos);
  CHECK(text.find("ci95: ") != std::string::npos);
}

TEST_CASE("invalid evaluation settings") {
  model::Model m(train::model_config(tiny(), dataset()));
  auto cfg = small_eval();
  cfg.tasks = 0;
  CHECK_THROWS_AS(evaluate(m, dataset(), cfg), ConfigError);
  cfg = small_eval();
  cfg.ways = 9;  // 8 novel classes
  CHECK_THROWS_AS(evaluate(m, dataset(), cfg), SamplingError);
}

TEST_CASE("ablation table layout") {
  std::vector<std::string> names;
  for (auto v : train::all_variants()) names.emplace_back(train::to_string(v));
  const std::vector<int> shots = {1, 30};  // 30 exceeds the 20 rows per cell
  const auto t = ablation_table(dataset(), tiny(), small_eval(5), names, shots, {true});
  REQUIRE(t.rows.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(t.rows[i].variant == names[i]);
    REQUIRE(t.rows[i].cells.size() == 2);
    CHECK(t.rows[i].cells[0].report.has_value());
    CHECK_FALSE(t.rows[i].cells[1].report.has_value());
    CHECK_FALSE(t.rows[i].cells[1].error.empty());
  }
  const auto j = nlohmann::json::parse(ablation_to_json(t));
  CHECK(j.at("rows").size() == 7);
  const auto text = ablation_to_text(t);
  for (const auto& n : names) CHECK(text.find(n) != std::string::npos);

  // A cell equals the stand-alone run of the same variant.
  auto cfg = tiny();
  cfg.variant = train::Variant::kCdnet;
  cfg.shots = 1;
  auto ec = small_eval(5);
  const auto solo = evaluate(train::run_variant(dataset(), cfg).finetuned.model, dataset(), ec);
  CHECK(t.rows[6].cells[0].report->per_task_accuracy == solo.per_task_accuracy);
}

TEST_CASE("J sweep") {
  const std::vector<int> js = {0, 1, 2};
  const auto s = j_sweep(dataset(), tiny(), small_eval(5), js);
  REQUIRE(s.size() == 3);
  auto base = tiny();
  base.variant = train::Variant::kBaseline;
  const auto b = train::run_variant(dataset(), base);
  CHECK(s[0].checkpoint_hash == model::hash_hex(model::model_hash(b.finetuned.model)));
  CHECK(s[0].report.per_task_accuracy == evaluate(b.finetuned.model, dataset(), small_eval(5)).per_task_accuracy);
  CHECK(s[1].checkpoint_hash != s[2].checkpoint_hash);
  CHECK(sweep_to_text(s).find('#') == 0);
  const std::vector<int> bad = {-1};
  CHECK_THROWS_AS(j_sweep(dataset(), tiny(), small_eval(5), bad), ConfigError);
}
