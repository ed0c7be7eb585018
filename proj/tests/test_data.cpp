// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "data.hpp"
#include "errors.hpp"
#include "support.hpp"
#include "util.hpp"

using namespace cdnet;
using namespace cdnet::data;

namespace {

DataConfig small(std::uint64_t seed = 7) {
  DataConfig c;
  c.raw_dim = 8;
  c.train_per_class = 20;
  c.test_per_class = 25;
  c.seed = seed;
  return c;
}

bool same(const SyntheticDataset& a, const SyntheticDataset& b) {
  return a.raw() == b.raw() && a.expr_labels() == b.expr_labels() && a.domain_labels() == b.domain_labels() &&
         a.splits() == b.splits();
}

// mean A^T + offset, by loops.
testing::Vec ref_clean(const ClassSpec& c, const DomainSpec& d) {
  const auto mu = testing::to_mat(c.mean)[0];
  const auto off = testing::to_mat(d.offset)[0];
  return testing::ref_affine(mu, testing::to_mat(d.transform), &off);
}

}  // namespace

TEST_CASE("label unification") {
  const std::vector<std::string> global = {"anger", "fear", "joy"};
  const auto maps = unify_labels({{"joy", "anger"}, {"fear"}, {"anger", "fear", "joy"}}, global);
  CHECK(maps == std::vector<std::vector<int>>{{2, 0}, {1}, {0, 1, 2}});
  CHECK_THROWS_AS(unify_labels({{"joy", "calm"}}, global), ConfigError);
  CHECK_THROWS_AS(unify_labels({{"joy", "joy"}}, global), ConfigError);
  CHECK_THROWS_AS(unify_labels({{"joy"}}, {"joy", "joy"}), ConfigError);
}

TEST_CASE("default generation layout") {
  DataConfig c;
  c.train_per_class = 3;
  c.test_per_class = 4;
  const auto ds = gen_dataset(c);
  CHECK(ds.domains(Split::kTrain) == std::vector<int>{0, 1, 2, 3, 4});
  for (int d = 0; d < 5; ++d) CHECK(ds.classes(Split::kTrain, d) == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  CHECK(ds.domains(Split::kTest) == std::vector<int>{5});
  CHECK(ds.classes(Split::kTest, 5).size() == 8);
  CHECK(ds.size() == 7 * 5 * 3 + 8 * 4);
  for (int d = 0; d < 5; ++d)
    for (int k = 0; k < 7; ++k) CHECK(ds.pool(Split::kTrain, d, k).size() == 3);
}

TEST_CASE("per-domain label tables are unified") {
  DataConfig c = small();
  c.num_domains = 2;
  c.domain_classes = {{"fear", "anger"}, {"neutral"}};
  const auto ds = gen_dataset(c);
  CHECK(ds.classes(Split::kTrain, 0) == std::vector<int>{0, 2});
  CHECK(ds.classes(Split::kTrain, 1) == std::vector<int>{6});
  c.domain_classes = {{"fear"}};
  CHECK_THROWS_AS(gen_dataset(c), ConfigError);
}

TEST_CASE("generation is deterministic in the seed") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    DataConfig c = small(seed);
    c.train_per_class = 2;
    c.test_per_class = 2;
    const auto a = gen_dataset(c), b = gen_dataset(c);
    CHECK(same(a, b));
    c.seed = seed + 1000;
    CHECK(gen_dataset(c).raw() != a.raw());
  }
}

TEST_CASE("noise-free samples sit exactly on the transformed means") {
  DataConfig c = small();
  c.noise = 0;
  const auto ds = gen_dataset(c);
  for (Index r = 0; r < ds.size(); ++r) {
    const auto& cls = ds.class_specs[static_cast<std::size_t>(ds.expr_labels()[static_cast<std::size_t>(r)])];
    const auto& dom = ds.domain_specs[static_cast<std::size_t>(ds.domain_labels()[static_cast<std::size_t>(r)])];
    const auto want = ref_clean(cls, dom);
    for (Index k = 0; k < c.raw_dim; ++k)
      CHECK(ds.raw()(r, k) == doctest::Approx(want[static_cast<std::size_t>(k)]).epsilon(1e-12));
  }
}

TEST_CASE("class geometry") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    DataConfig c = small(seed);
    c.train_per_class = 1;
    c.test_per_class = 1;
    c.mix_min = c.mix_max = 0.5;
    const auto ds = gen_dataset(c);
    const auto& cs = ds.class_specs;
    REQUIRE(cs.size() == 7 + 8);
    for (int a = 0; a < 7; ++a) {
      const auto ma = testing::to_mat(cs[static_cast<std::size_t>(a)].mean)[0];
      double norm = 0;
      for (double v : ma) norm += v * v;
      CHECK(std::sqrt(norm) == doctest::Approx(c.mean_radius * c.separation * c.noise).epsilon(1e-12));
      for (int b = a + 1; b < 7; ++b) {
        const auto mb = testing::to_mat(cs[static_cast<std::size_t>(b)].mean)[0];
        double d2 = 0;
        for (std::size_t k = 0; k < ma.size(); ++k) d2 += (ma[k] - mb[k]) * (ma[k] - mb[k]);
        CHECK(std::sqrt(d2) >= c.separation * c.noise);
      }
    }
    std::set<std::pair<int, int>> parents;
    for (std::size_t k = 7; k < cs.size(); ++k) {
      CHECK(cs[k].kind == ClassSpec::Kind::kCompound);
      CHECK(cs[k].parent_a != cs[k].parent_b);
      CHECK(parents.insert({cs[k].parent_a, cs[k].parent_b}).second);
      const auto a = testing::to_mat(cs[static_cast<std::size_t>(cs[k].parent_a)].mean)[0];
      const auto b = testing::to_mat(cs[static_cast<std::size_t>(cs[k].parent_b)].mean)[0];
      const auto m = testing::to_mat(cs[k].mean)[0];
      for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] == doctest::Approx((a[i] + b[i]) / 2).epsilon(1e-14));
    }
  }
}

TEST_CASE("infeasible configurations are rejected") {
  DataConfig c = small();
  c.raw_dim = 1;  // at most two points on a 1-d sphere
  CHECK_THROWS_AS(gen_dataset(c), ConfigError);
  c = small();
  c.num_novel = 22;  // 21 distinct pairs of 7 classes
  CHECK_THROWS_AS(gen_dataset(c), ConfigError);
  c = small();
  c.separation = 0;
  CHECK_THROWS_AS(gen_dataset(c), ConfigError);
  c = small();
  c.mix_min = 0.8;
  c.mix_max = 0.2;
  CHECK_THROWS_AS(gen_dataset(c), ConfigError);
  c = small();
  c.noise = -1;
  CHECK_THROWS_AS(gen_dataset(c), ConfigError);
}

TEST_CASE("batches come from a single source domain") {
  const auto ds = gen_dataset(small());
  Rng rng(1);
  std::vector<int> counts(5, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto b = sample_batch(ds, 16, rng);
    REQUIRE(b.size() == 16);
    std::set<Index> rows;
    for (const auto& s : b) {
      CHECK(s.y_d == b.front().y_d);
      CHECK(ds.splits()[static_cast<std::size_t>(s.row)] == Split::kTrain);
      CHECK(ds.expr_labels()[static_cast<std::size_t>(s.row)] == s.y_e);
      rows.insert(s.row);
    }
    CHECK(rows.size() == 16);
    ++counts[static_cast<std::size_t>(b.front().y_d)];
  }
  // Uniform domain choice: each count within 5 binomial sigma of draws / 5.
  const double p = 0.2, sigma = std::sqrt(draws * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - draws * p) <= 5 * sigma);
  CHECK_THROWS_AS(sample_batch(ds, 0, rng), ContractError);
}

TEST_CASE("episodes") {
  const auto ds = gen_dataset(small());
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const bool novel = i % 2 == 1;
    const int ways = 2 + i % 4, shots = 1 + i % 5, queries = 1 + i % 7;
    const auto ep = sample_episode(ds, ways, shots, queries, novel ? ClassPool::kNovel : ClassPool::kBase, rng);
    REQUIRE(ep.support.size() == static_cast<std::size_t>(ways * shots));
    REQUIRE(ep.query.size() == static_cast<std::size_t>(ways * queries));
    CHECK(std::set<int>(ep.class_map.begin(), ep.class_map.end()).size() == static_cast<std::size_t>(ways));
    if (novel) CHECK(ep.domain_id == 5);
    else CHECK(ep.domain_id < 5);
    std::set<Index> rows;
    for (std::size_t k = 0; k < ep.support.size(); ++k) {
      const auto& s = ep.support[k];
      CHECK(s.y_d == ep.domain_id);
      CHECK(s.y_e == ep.class_map[k / static_cast<std::size_t>(shots)]);
      CHECK(ds.splits()[static_cast<std::size_t>(s.row)] == (novel ? Split::kTest : Split::kTrain));
      rows.insert(s.row);
    }
    for (std::size_t k = 0; k < ep.query.size(); ++k) {
      const auto& q = ep.query[k];
      CHECK(q.y_e == ep.class_map[static_cast<std::size_t>(ep.query_label(k))]);
      CHECK(q.y_d == ep.domain_id);
      rows.insert(q.row);
    }
    // Support and query are disjoint and free of repeats.
    CHECK(rows.size() == ep.support.size() + ep.query.size());
    const auto x = episode_inputs(ds, ep);
    CHECK(x.rows() == static_cast<Index>(rows.size()));
    CHECK(x.row(0) == ds.raw().row(ep.support[0].row));
    CHECK(x.row(x.rows() - 1) == ds.raw().row(ep.query.back().row));
  }
}

TEST_CASE("episode errors") {
  const auto ds = gen_dataset(small());
  Rng rng(3);
  CHECK_THROWS_AS(sample_episode(ds, 0, 1, 1, ClassPool::kBase, rng), ContractError);
  CHECK_THROWS_AS(sample_episode(ds, 8, 1, 1, ClassPool::kBase, rng), SamplingError);   // 7 base classes
  CHECK_THROWS_AS(sample_episode(ds, 9, 1, 1, ClassPool::kNovel, rng), SamplingError);  // 8 novel classes
  CHECK_THROWS_AS(sample_episode(ds, 5, 10, 11, ClassPool::kBase, rng), SamplingError);  // 20 per cell
  CHECK_NOTHROW(sample_episode(ds, 5, 10, 10, ClassPool::kBase, rng));
  CHECK_NOTHROW(sample_episode(ds, 8, 5, 20, ClassPool::kNovel, rng));
}

TEST_CASE("sampling is deterministic in the generator state") {
  const auto ds = gen_dataset(small());
  Rng a(derive_seed(9, kSeedEval, 4)), b(derive_seed(9, kSeedEval, 4));
  for (int i = 0; i < 100; ++i) {
    const auto ea = sample_episode(ds, 5, 1, 3, ClassPool::kNovel, a);
    const auto eb = sample_episode(ds, 5, 1, 3, ClassPool::kNovel, b);
    CHECK(episode_inputs(ds, ea) == episode_inputs(ds, eb));
  }
}

TEST_CASE("export and import reproduce the dataset bitwise") {
  testing::TempDir dir("data");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    DataConfig c = small(seed);
    c.domain_classes = {{"anger", "fear"}, {"fear", "neutral", "sadness"}, {"joy"}};
    c.class_names = {"anger", "fear", "joy", "neutral", "sadness"};
    c.num_domains = 3;
    c.num_novel = 4;
    const auto ds = gen_dataset(c);
    const auto path = dir.path / ("d" + std::to_string(seed) + ".txt");
    save_dataset(ds, path);
    const auto back = load_dataset(path);
    CHECK(same(ds, back));
    CHECK(config_to_json(back.config()) == config_to_json(ds.config()));
    // Re-export is byte-identical.
    save_dataset(back, dir.path / "again.txt");
    std::ifstream f1(path), f2(dir.path / "again.txt");
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
  }
}

TEST_CASE("malformed dataset files") {
  testing::TempDir dir("baddata");
  CHECK_THROWS_AS(load_dataset(dir.path / "absent.txt"), IoError);
  {
    std::ofstream(dir.path / "junk.txt") << "hello\n";
  }
  CHECK_THROWS_AS(load_dataset(dir.path / "junk.txt"), ConfigError);
  const auto ds = gen_dataset(small());
  save_dataset(ds, dir.path / "ok.txt");
  std::ifstream in(dir.path / "ok.txt");
  std::stringstream s;
  s << in.rdbuf();
  std::string text = s.str();
  text.resize(text.size() * 3 / 4);
  text = text.substr(0, text.rfind('\n') + 1);
  {
    std::ofstream(dir.path / "short.txt") << text;
  }
  CHECK_THROWS_AS(load_dataset(dir.path / "short.txt"), ConfigError);
}
