// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "errors.hpp"
#include "support.hpp"
#include "train.hpp"

using namespace cdnet;
using namespace cdnet::train;
using model::Architecture;
using num::Matrix;
using objectives::RegMode;
using testing::random_matrix;

namespace {

const data::SyntheticDataset& dataset() {
  static const data::SyntheticDataset ds = [] {
    data::DataConfig c;
    c.raw_dim = 8;
    c.train_per_class = 20;
    c.test_per_class = 20;
    c.seed = 3;
    return data::gen_dataset(c);
  }();
  return ds;
}

TrainConfig tiny(Variant v = Variant::kCdnet) {
  TrainConfig c;
  c.variant = v;
  c.d = 8;
  c.cascade_steps = 2;
  c.pretrain_iters = 50;
  c.finetune_episodes = 2;
  c.tasks_per_episode = 5;
  c.queries = 3;
  c.adam.lr = 1e-3;
  c.seed = 11;
  return c;
}

num::Parameter param(Matrix value) {
  num::Parameter p{"p", value, Matrix::Zero(value.rows(), value.cols()), true};
  return p;
}

}  // namespace

TEST_CASE("Adam first step example") {
  std::vector<num::Parameter> ps = {param(testing::mat(1, 1, {1.0}))};
  ps[0].grad(0, 0) = 2.0;
  OptimState st;
  st.hp.lr = 0.1;
  adam_step(ps, st);
  // m = 1, v = 0.004; bias-corrected 2 and 4 -> step 0.1 * 2 / (2 + 1e-8).
  CHECK(ps[0].value(0, 0) == doctest::Approx(1.0 - 0.1 * 2 / (2 + 1e-8)).epsilon(1e-15));
  CHECK(st.step == 1);
}

TEST_CASE("Adam matches the scalar reference over many steps") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<num::Parameter> ps = {param(random_matrix(2, 3, rng)), param(random_matrix(1, 4, rng))};
    OptimState st;
    st.hp.lr = 0.01;
    // Reference state per scalar.
    struct S {
      double x, m = 0, v = 0;
    };
    std::vector<S> ref;
    for (const auto& p : ps)
      for (Index k = 0; k < p.value.size(); ++k) ref.push_back({p.value.data()[k]});
    for (int step = 1; step <= 10; ++step) {
      std::size_t i = 0;
      for (auto& p : ps) {
        p.grad = random_matrix(p.value.rows(), p.value.cols(), rng);
        for (Index k = 0; k < p.value.size(); ++k, ++i) {
          const double g = p.grad.data()[k];
          auto& s = ref[i];
          s.m = 0.5 * s.m + 0.5 * g;
          s.v = 0.999 * s.v + 0.001 * g * g;
          const double mh = s.m / (1 - std::pow(0.5, step)), vh = s.v / (1 - std::pow(0.999, step));
          s.x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
        }
      }
      adam_step(ps, st);
    }
    std::size_t i = 0;
    for (const auto& p : ps)
      for (Index k = 0; k < p.value.size(); ++k, ++i) CHECK(p.value.data()[k] == doctest::Approx(ref[i].x).epsilon(1e-12));
  }
}

TEST_CASE("Adam skips frozen parameters and refuses non-finite gradients") {
  std::vector<num::Parameter> ps = {param(testing::mat(1, 2, {1, 2})), param(testing::mat(1, 1, {3}))};
  ps[0].grad.setConstant(1);
  ps[1].grad.setConstant(1);
  ps[1].trainable = false;
  OptimState st;
  adam_step(ps, st);
  CHECK(ps[1].value(0, 0) == 3);
  CHECK(ps[0].value(0, 0) != 1);

  const Matrix before = ps[0].value;
  ps[1].trainable = true;
  ps[1].grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(adam_step(ps, st), DivergenceError);
  CHECK(ps[0].value == before);
  CHECK(ps[1].value(0, 0) == 3);
}

TEST_CASE("default hyperparameters") {
  const TrainConfig c;
  CHECK(c.adam.lr == 1e-4);
  CHECK(c.adam.beta1 == 0.5);
  CHECK(c.adam.beta2 == 0.999);
  CHECK(c.adam.eps == 1e-8);
  CHECK(c.weights.lambda_d_p == 1.0);
  CHECK(c.weights.lambda_d_f == 0.01);
  CHECK(c.weights.lambda_r_f == 1.0);
  CHECK(c.cascade_steps == 3);
  CHECK(c.batch_size == 16);
  CHECK(c.prelu_init == 0.25);
  CHECK(c.variant == Variant::kCdnet);
}

TEST_CASE("variant table") {
  CHECK(all_variants().size() == 7);
  CHECK(to_string(all_variants().front()) == "baseline");
  CHECK(to_string(all_variants().back()) == "cdnet");
  for (auto v : all_variants()) CHECK(variant_from_string(to_string(v)) == v);
  CHECK_THROWS_AS(variant_from_string("cdnet2"), ConfigError);
  auto s = variant_spec(Variant::kBaseline);
  CHECK((s.architecture == Architecture::kBaseline && s.reg_mode == RegMode::kNone && !s.use_domain));
  s = variant_spec(Variant::kDecompose);
  CHECK((s.architecture == Architecture::kSequential && s.reg_mode == RegMode::kNone && s.use_domain));
  s = variant_spec(Variant::kCdnet);
  CHECK((s.architecture == Architecture::kSequential && s.reg_mode == RegMode::kPartial));
  CHECK(variant_spec(Variant::kCdnetFull).reg_mode == RegMode::kFull);
  CHECK(variant_spec(Variant::kCdnetFix).reg_mode == RegMode::kFix);
  CHECK(variant_spec(Variant::kParallel).architecture == Architecture::kParallel);
  CHECK(variant_spec(Variant::kSingle).architecture == Architecture::kSingle);
}

TEST_CASE("pre-training lowers the classification loss") {
  TrainConfig c = tiny();
  c.pretrain_iters = 400;
  model::Model m(model_config(c, dataset()));
  const auto h = pretrain(m, dataset(), c);
  REQUIRE(h.size() == 400);
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    first += h[static_cast<std::size_t>(i)].loss.components.at("cls");
    last += h[h.size() - 1 - static_cast<std::size_t>(i)].loss.components.at("cls");
  }
  CHECK(last < first);
  for (const auto& r : h) {
    CHECK(r.stage == "pretrain");
    CHECK(std::abs(objectives::recombine(r.loss) - r.loss.total) <= 1e-12 * std::max(1.0, r.loss.total));
  }
}

TEST_CASE("zero learning rate leaves every parameter unchanged") {
  for (auto v : {Variant::kCdnet, Variant::kBaseline, Variant::kParallel, Variant::kSingle}) {
    TrainConfig c = tiny(v);
    c.adam.lr = 0;
    model::Model m(model_config(c, dataset()));
    const auto before = model::model_hash(m);
    pretrain(m, dataset(), c);
    CHECK(model::model_hash(m) == before);
    const model::Model teacher = m;
    finetune(m, &teacher, dataset(), c);
    CHECK(model::model_hash(m) == before);
  }
}

TEST_CASE("fix mode freezes the decomposition blocks bitwise") {
  TrainConfig c = tiny(Variant::kCdnetFix);
  model::Model m(model_config(c, dataset()));
  pretrain(m, dataset(), c);
  const model::Model teacher = m;
  finetune(m, &teacher, dataset(), c);
  for (int id : m.decomposition_param_ids()) CHECK(m.param(id).value == teacher.param(id).value);
  CHECK(m.param(m.encoder_ids().w1).value != teacher.param(m.encoder_ids().w1).value);
  // Flags are restored afterwards.
  for (const auto& p : m.params()) CHECK(p.trainable);
}

TEST_CASE("fine-tuning never moves the expression head") {
  TrainConfig c = tiny(Variant::kCdnet);
  model::Model m(model_config(c, dataset()));
  const model::Model teacher = m;
  const auto h = finetune(m, &teacher, dataset(), c);
  CHECK(h.size() == 10);
  CHECK(m.param(m.head_ids().expr_w).value == teacher.param(m.head_ids().expr_w).value);
  CHECK(h.front().loss.components.at("reg") == 0);
}

TEST_CASE("training without a teacher drops the penalty") {
  TrainConfig c = tiny(Variant::kCdnet);
  model::Model m(model_config(c, dataset()));
  const auto h = finetune(m, nullptr, dataset(), c);
  CHECK(h.front().loss.components.count("reg") == 0);
  CHECK(h.front().loss.components.count("domain") == 1);
}

TEST_CASE("architecture mismatches are configuration errors") {
  TrainConfig c = tiny(Variant::kCdnet);
  model::Model m(model_config(c, dataset()));
  TrainConfig p = tiny(Variant::kParallel);
  CHECK_THROWS_AS(finetune(m, nullptr, dataset(), p), ConfigError);
  model::Model other(model_config(p, dataset()));
  CHECK_THROWS_AS(finetune(m, &other, dataset(), c), ConfigError);
}

TEST_CASE("runs are deterministic") {
  for (auto v : {Variant::kCdnet, Variant::kBaseline}) {
    TrainConfig c = tiny(v);
    const auto a = run_variant(dataset(), c), b = run_variant(dataset(), c);
    CHECK(model::model_hash(a.finetuned.model) == model::model_hash(b.finetuned.model));
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].loss.total == b.history[i].loss.total);
    c.seed = 12;
    CHECK(model::model_hash(run_variant(dataset(), c).finetuned.model) != model::model_hash(a.finetuned.model));
  }
}

TEST_CASE("history lines are JSON") {
  HistoryRecord r{3, "finetune", {}};
  r.loss.total = 1.5;
  r.loss.components["cls"] = 1.5;
  r.loss.weights["cls"] = 1;
  std::ostringstream os;
  write_history_line(os, r);
  const auto j = nlohmann::json::parse(os.str());
  CHECK(j.at("step") == 3);
  CHECK(j.at("stage") == "finetune");
  CHECK(j.at("total") == 1.5);
}

TEST_CASE("invalid training configurations") {
  TrainConfig c = tiny();
  c.ways = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.adam.beta1 = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.cascade_steps = 0;  // sequential cascade needs at least one step
  CHECK_THROWS_AS(model::Model(model_config(c, dataset())), ConfigError);
}
