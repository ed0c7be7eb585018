// SPDX-License-Identifier: Apache-2.0

#include "data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "errors.hpp"

namespace cdnet::data {

namespace fs = std::filesystem;
using nlohmann::json;

void DataConfig::validate() const {
  if (class_names.empty()) throw ConfigError("data.class_names must not be empty");
  if (num_domains < 1) throw ConfigError("data.num_domains must be >= 1");
  if (num_novel < 0) throw ConfigError("data.num_novel must be >= 0");
  if (raw_dim < 1) throw ConfigError("data.raw_dim must be >= 1");
  if (train_per_class < 1) throw ConfigError("data.train_per_class must be >= 1");
  if (test_per_class < 1) throw ConfigError("data.test_per_class must be >= 1");
  if (!(separation > 0)) throw ConfigError("data.separation must be > 0");
  if (!(noise >= 0)) throw ConfigError("data.noise must be >= 0");
  if (!(mean_radius > 0)) throw ConfigError("data.mean_radius must be > 0");
  if (!(domain_shift >= 0) || !(target_shift >= 0) || !(domain_offset >= 0) ||
      !(target_offset >= 0)) {
    throw ConfigError("data domain shift/offset scales must be >= 0");
  }
  if (!(mix_min >= 0 && mix_min <= mix_max && mix_max <= 1)) {
    throw ConfigError("data.mix_min/mix_max must satisfy 0 <= min <= max <= 1");
  }
  if (!domain_classes.empty() && static_cast<int>(domain_classes.size()) != num_domains) {
    throw ConfigError("data.domain_classes must list one table per source domain");
  }
}

SyntheticDataset::SyntheticDataset(DataConfig config, Matrix raw, std::vector<int> y_e,
                                   std::vector<int> y_d, std::vector<Split> split)
    : config_(std::move(config)),
      raw_(std::move(raw)),
      y_e_(std::move(y_e)),
      y_d_(std::move(y_d)),
      split_(std::move(split)) {
  const auto n = static_cast<std::size_t>(raw_.rows());
  if (y_e_.size() != n || y_d_.size() != n || split_.size() != n) {
    throw ContractError("dataset columns have different lengths");
  }
  if (raw_.cols() != config_.raw_dim) throw ContractError("dataset raw width != raw_dim");
  if (!raw_.allFinite()) throw ContractError("dataset contains non-finite values");
  build_index();
}

void SyntheticDataset::build_index() {
  std::map<std::tuple<int, int, int>, std::vector<Index>> cells;
  std::map<std::pair<int, int>, std::vector<Index>> doms;
  for (Index r = 0; r < raw_.rows(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    const int s = static_cast<int>(split_[i]);
    cells[{s, y_d_[i], y_e_[i]}].push_back(r);
    doms[{s, y_d_[i]}].push_back(r);
  }
  for (auto& [k, rows] : cells) {
    cells_.push_back({static_cast<Split>(std::get<0>(k)), std::get<1>(k), std::get<2>(k), std::move(rows)});
  }
  for (auto& [k, rows] : doms) {
    domain_cells_.push_back({static_cast<Split>(k.first), k.second, std::move(rows)});
  }
}

const std::vector<Index>& SyntheticDataset::pool(Split s, int domain, int cls) const {
  static const std::vector<Index> kEmpty;
  for (const auto& c : cells_) {
    if (c.split == s && c.domain == domain && c.cls == cls) return c.rows;
  }
  return kEmpty;
}

const std::vector<Index>& SyntheticDataset::domain_rows(Split s, int domain) const {
  static const std::vector<Index> kEmpty;
  for (const auto& c : domain_cells_) {
    if (c.split == s && c.domain == domain) return c.rows;
  }
  return kEmpty;
}

std::vector<int> SyntheticDataset::domains(Split s) const {
  std::vector<int> out;
  for (const auto& c : domain_cells_) {
    if (c.split == s) out.push_back(c.domain);
  }
  return out;
}

std::vector<int> SyntheticDataset::classes(Split s, int domain) const {
  std::vector<int> out;
  for (const auto& c : cells_) {
    if (c.split == s && c.domain == domain) out.push_back(c.cls);
  }
  return out;
}

std::vector<std::vector<int>> unify_labels(const std::vector<std::vector<std::string>>& per_domain,
                                           const std::vector<std::string>& global_names) {
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < global_names.size(); ++i) {
    if (!index.emplace(global_names[i], static_cast<int>(i)).second) {
      throw ConfigError("duplicate global class name '" + global_names[i] + "'");
    }
  }
  std::vector<std::vector<int>> out;
  for (std::size_t d = 0; d < per_domain.size(); ++d) {
    std::vector<int> map;
    std::vector<bool> seen(global_names.size(), false);
    for (const auto& name : per_domain[d]) {
      auto it = index.find(name);
      if (it == index.end()) {
        throw ConfigError("domain " + std::to_string(d) + " lists unknown class '" + name + "'");
      }
      if (seen[static_cast<std::size_t>(it->second)]) {
        throw ConfigError("domain " + std::to_string(d) + " lists class '" + name + "' twice");
      }
      seen[static_cast<std::size_t>(it->second)] = true;
      map.push_back(it->second);
    }
    out.push_back(std::move(map));
  }
  return out;
}

namespace {

Matrix gaussian(Index rows, Index cols, Real sd, Rng& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<Real> n(0, 1);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = sd * n(rng);
  return m;
}

Real condition_number(const Matrix& a) {
  Eigen::JacobiSVD<Matrix> svd(a);
  const auto& s = svd.singularValues();
  return s(0) / s(s.size() - 1);
}

DomainSpec make_domain(int id, Index dim, Real shift, Real offset, Real noise, Rng& rng) {
  DomainSpec spec;
  spec.domain_id = id;
  spec.noise_scale = noise;
  for (int attempt = 0;; ++attempt) {
    Matrix a = Matrix::Identity(dim, dim) + gaussian(dim, dim, shift / std::sqrt(Real(dim)), rng);
    if (condition_number(a) < 100) {
      spec.transform = std::move(a);
      break;
    }
    if (attempt >= 100) {
      throw ConfigError("domain shift too large: cannot draw a well-conditioned transform");
    }
  }
  spec.offset = gaussian(1, dim, offset, rng);
  return spec;
}

}  // namespace

SyntheticDataset gen_dataset(const DataConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, kSeedData));
  const Index dim = cfg.raw_dim;
  const int n_base = cfg.num_base();
  const Real unit = cfg.noise > 0 ? cfg.noise : Real(1);
  const Real min_dist = cfg.separation * unit;

  // Base means on a sphere of radius mean_radius*separation*unit with pairwise
  // distance at least separation*unit.
  std::vector<ClassSpec> classes;
  bool placed = false;
  for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
    classes.clear();
    for (int c = 0; c < n_base; ++c) {
      Matrix dir = gaussian(1, dim, 1, rng);
      const Real norm = dir.norm();
      if (norm == 0) break;
      classes.push_back({c, ClassSpec::Kind::kBase, dir * (cfg.mean_radius * min_dist / norm), -1, -1, 1});
    }
    if (static_cast<int>(classes.size()) != n_base) continue;
    placed = true;
    for (int a = 0; a < n_base && placed; ++a) {
      for (int b = a + 1; b < n_base; ++b) {
        const auto ia = static_cast<std::size_t>(a);
        const auto ib = static_cast<std::size_t>(b);
        if ((classes[ia].mean - classes[ib].mean).norm() < min_dist) {
          placed = false;
          break;
        }
      }
    }
  }
  if (!placed) {
    throw ConfigError("cannot place " + std::to_string(n_base) + " base classes " +
                      std::to_string(min_dist) + " apart in " + std::to_string(dim) +
                      " dimensions");
  }

  std::vector<DomainSpec> domains;
  for (int d = 0; d < cfg.num_domains; ++d) {
    domains.push_back(make_domain(d, dim, cfg.domain_shift, cfg.domain_offset, cfg.noise, rng));
  }
  domains.push_back(
      make_domain(cfg.num_domains, dim, cfg.target_shift, cfg.target_offset, cfg.noise, rng));

  std::vector<std::pair<int, int>> pairs;
  for (int a = 0; a < n_base; ++a) {
    for (int b = a + 1; b < n_base; ++b) pairs.emplace_back(a, b);
  }
  if (cfg.num_novel > static_cast<int>(pairs.size())) {
    throw ConfigError("num_novel " + std::to_string(cfg.num_novel) + " exceeds the " +
                      std::to_string(pairs.size()) + " distinct base-class pairs");
  }
  for (std::size_t i = pairs.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(pairs[i - 1], pairs[pick(rng)]);
  }
  std::uniform_real_distribution<Real> mix(cfg.mix_min, cfg.mix_max);
  for (int k = 0; k < cfg.num_novel; ++k) {
    const auto [a, b] = pairs[static_cast<std::size_t>(k)];
    const Real t = cfg.mix_max > cfg.mix_min ? mix(rng) : cfg.mix_min;
    Matrix mean = t * classes[static_cast<std::size_t>(a)].mean +
                  (1 - t) * classes[static_cast<std::size_t>(b)].mean;
    classes.push_back({n_base + k, ClassSpec::Kind::kCompound, std::move(mean), a, b, t});
  }

  std::vector<std::vector<std::string>> tables = cfg.domain_classes;
  if (tables.empty()) tables.assign(static_cast<std::size_t>(cfg.num_domains), cfg.class_names);
  const auto unified = unify_labels(tables, cfg.class_names);

  Index total = 0;
  for (const auto& t : unified) total += static_cast<Index>(t.size()) * cfg.train_per_class;
  total += static_cast<Index>(cfg.num_novel) * cfg.test_per_class;

  Matrix raw(total, dim);
  std::vector<int> y_e;
  std::vector<int> y_d;
  std::vector<Split> split;
  y_e.reserve(static_cast<std::size_t>(total));
  Index row = 0;
  auto emit = [&](const ClassSpec& cls, const DomainSpec& dom, int count, Split s) {
    Matrix clean = Matrix::Zero(count, dim);
    clean.rowwise() += cls.mean.row(0);
    if (dom.noise_scale > 0) clean += gaussian(count, dim, dom.noise_scale, rng);
    Matrix shifted = clean * dom.transform.transpose();
    shifted.rowwise() += dom.offset.row(0);
    raw.middleRows(row, count) = shifted;
    row += count;
    y_e.insert(y_e.end(), static_cast<std::size_t>(count), cls.class_id);
    y_d.insert(y_d.end(), static_cast<std::size_t>(count), dom.domain_id);
    split.insert(split.end(), static_cast<std::size_t>(count), s);
  };
  for (int d = 0; d < cfg.num_domains; ++d) {
    for (int unified_label : unified[static_cast<std::size_t>(d)]) {
      emit(classes[static_cast<std::size_t>(unified_label)], domains[static_cast<std::size_t>(d)],
           cfg.train_per_class, Split::kTrain);
    }
  }
  for (int k = 0; k < cfg.num_novel; ++k) {
    emit(classes[static_cast<std::size_t>(n_base + k)], domains.back(), cfg.test_per_class,
         Split::kTest);
  }

  SyntheticDataset ds(cfg, std::move(raw), std::move(y_e), std::move(y_d), std::move(split));
  ds.domain_specs = std::move(domains);
  ds.class_specs = std::move(classes);
  return ds;
}

namespace {

// Partial Fisher-Yates: the first k entries of a shuffled copy of `pool`.
std::vector<Index> choose(const std::vector<Index>& pool, std::size_t k, Rng& rng) {
  std::vector<Index> v = pool;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
    std::swap(v[i], v[pick(rng)]);
  }
  v.resize(k);
  return v;
}

int pick_domain(const std::vector<int>& domains, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, domains.size() - 1);
  return domains[pick(rng)];
}

SampleRef ref(const SyntheticDataset& ds, Index row) {
  const auto i = static_cast<std::size_t>(row);
  return {row, ds.expr_labels()[i], ds.domain_labels()[i]};
}

}  // namespace

std::vector<SampleRef> sample_batch(const SyntheticDataset& ds, int batch_size, Rng& rng) {
  if (batch_size < 1) throw ContractError("sample_batch: batch_size must be >= 1");
  const auto domains = ds.domains(Split::kTrain);
  if (domains.empty()) throw SamplingError("sample_batch: dataset has no training samples");
  const int d = pick_domain(domains, rng);
  const auto& rows = ds.domain_rows(Split::kTrain, d);
  std::vector<SampleRef> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  if (rows.size() >= static_cast<std::size_t>(batch_size)) {
    for (Index r : choose(rows, static_cast<std::size_t>(batch_size), rng)) out.push_back(ref(ds, r));
  } else {
    log_warning("sample_batch: domain " + std::to_string(d) + " holds " +
                std::to_string(rows.size()) + " samples < batch " + std::to_string(batch_size) +
                "; sampling with replacement");
    std::uniform_int_distribution<std::size_t> pick(0, rows.size() - 1);
    for (int i = 0; i < batch_size; ++i) out.push_back(ref(ds, rows[pick(rng)]));
  }
  return out;
}

Episode sample_episode(const SyntheticDataset& ds, int ways, int shots, int queries, ClassPool pool,
                       Rng& rng) {
  if (ways < 1 || shots < 1 || queries < 1) {
    throw ContractError("sample_episode: N, K and Q must be >= 1");
  }
  const Split split = pool == ClassPool::kBase ? Split::kTrain : Split::kTest;
  const auto domains = ds.domains(split);
  if (domains.empty()) {
    throw SamplingError(std::string("sample_episode: no ") +
                        (pool == ClassPool::kBase ? "training" : "test") + " samples");
  }
  const int d = pool == ClassPool::kBase ? pick_domain(domains, rng) : domains.back();
  const std::size_t need = static_cast<std::size_t>(shots + queries);
  std::vector<int> eligible;
  std::size_t largest = 0;
  for (int c : ds.classes(split, d)) {
    const std::size_t n = ds.pool(split, d, c).size();
    largest = std::max(largest, n);
    if (n >= need) eligible.push_back(c);
  }
  if (static_cast<int>(eligible.size()) < ways) {
    throw SamplingError("sample_episode: domain " + std::to_string(d) + " has " +
                        std::to_string(eligible.size()) + " classes with >= " +
                        std::to_string(need) + " samples (K+Q), " + std::to_string(ways) +
                        " needed; largest class holds " + std::to_string(largest));
  }
  std::vector<Index> as_index(eligible.begin(), eligible.end());
  const auto chosen = choose(as_index, static_cast<std::size_t>(ways), rng);

  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.queries = queries;
  ep.domain_id = d;
  std::vector<std::vector<Index>> picked;
  for (Index c : chosen) {
    ep.class_map.push_back(static_cast<int>(c));
    picked.push_back(choose(ds.pool(split, d, static_cast<int>(c)), need, rng));
  }
  for (const auto& rows : picked) {
    for (int k = 0; k < shots; ++k) ep.support.push_back(ref(ds, rows[static_cast<std::size_t>(k)]));
  }
  for (const auto& rows : picked) {
    for (std::size_t q = static_cast<std::size_t>(shots); q < need; ++q) ep.query.push_back(ref(ds, rows[q]));
  }
  return ep;
}

Matrix episode_inputs(const SyntheticDataset& ds, const Episode& ep) {
  Matrix x(static_cast<Index>(ep.support.size() + ep.query.size()), ds.raw().cols());
  Index r = 0;
  for (const auto& s : ep.support) x.row(r++) = ds.raw().row(s.row);
  for (const auto& q : ep.query) x.row(r++) = ds.raw().row(q.row);
  return x;
}

// --- export / import ---------------------------------------------------------

std::string config_to_json(const DataConfig& c) {
  json j{{"num_domains", c.num_domains},     {"num_novel", c.num_novel},
         {"raw_dim", c.raw_dim},             {"train_per_class", c.train_per_class},
         {"test_per_class", c.test_per_class}, {"separation", c.separation},
         {"noise", c.noise},                 {"mean_radius", c.mean_radius},
         {"domain_shift", c.domain_shift},
         {"domain_offset", c.domain_offset}, {"target_shift", c.target_shift},
         {"target_offset", c.target_offset}, {"mix_min", c.mix_min},
         {"mix_max", c.mix_max},             {"class_names", c.class_names},
         {"domain_classes", c.domain_classes}, {"seed", c.seed}};
  return j.dump();
}

DataConfig config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    DataConfig c;
    c.num_domains = j.at("num_domains").get<int>();
    c.num_novel = j.at("num_novel").get<int>();
    c.raw_dim = j.at("raw_dim").get<Index>();
    c.train_per_class = j.at("train_per_class").get<int>();
    c.test_per_class = j.at("test_per_class").get<int>();
    c.separation = j.at("separation").get<Real>();
    c.noise = j.at("noise").get<Real>();
    c.mean_radius = j.at("mean_radius").get<Real>();
    c.domain_shift = j.at("domain_shift").get<Real>();
    c.domain_offset = j.at("domain_offset").get<Real>();
    c.target_shift = j.at("target_shift").get<Real>();
    c.target_offset = j.at("target_offset").get<Real>();
    c.mix_min = j.at("mix_min").get<Real>();
    c.mix_max = j.at("mix_max").get<Real>();
    c.class_names = j.at("class_names").get<std::vector<std::string>>();
    c.domain_classes = j.at("domain_classes").get<std::vector<std::vector<std::string>>>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError("malformed dataset config: " + std::string(e.what()));
  }
}

namespace {

constexpr std::string_view kMagic = "# cdnet-dataset v1";

void append_real(std::string& out, Real v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, end);
}

}  // namespace

void save_dataset(const SyntheticDataset& ds, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write dataset file " + path.string());
  out << kMagic << '\n';
  out << "# config " << config_to_json(ds.config()) << '\n';
  out << "# seed " << ds.config().seed << '\n';
  out << "# rows " << ds.size() << '\n';
  out << "# columns split y_e y_d";
  for (Index k = 0; k < ds.raw().cols(); ++k) out << " x" << k;
  out << '\n';
  std::string line;
  for (Index r = 0; r < ds.size(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    line.clear();
    line += ds.splits()[i] == Split::kTrain ? "train" : "test";
    line += ' ' + std::to_string(ds.expr_labels()[i]) + ' ' + std::to_string(ds.domain_labels()[i]);
    for (Index k = 0; k < ds.raw().cols(); ++k) {
      line += ' ';
      append_real(line, ds.raw()(r, k));
    }
    line += '\n';
    out << line;
  }
  if (!out) throw IoError("short write to " + path.string());
}

SyntheticDataset load_dataset(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("dataset file not found: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw ConfigError(path.string() + " is not a cdnet dataset file");
  }
  DataConfig cfg;
  bool have_config = false;
  Index rows_expected = -1;
  std::vector<std::vector<Real>> values;
  std::vector<int> y_e;
  std::vector<int> y_d;
  std::vector<Split> split;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("# config ", 0) == 0) {
      cfg = config_from_json(line.substr(9));
      have_config = true;
      continue;
    }
    if (line.rfind("# rows ", 0) == 0) {
      rows_expected = std::stoll(line.substr(7));
      continue;
    }
    if (line[0] == '#') continue;
    if (!have_config) throw ConfigError("dataset file has rows before its config header");
    std::istringstream ls(line);
    std::string tag;
    int e = 0;
    int d = 0;
    ls >> tag >> e >> d;
    if (!ls || (tag != "train" && tag != "test")) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": malformed row");
    }
    std::vector<Real> row;
    row.reserve(static_cast<std::size_t>(cfg.raw_dim));
    std::string tok;
    while (ls >> tok) {
      Real v = 0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size()) {
        throw ConfigError("dataset line " + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
      row.push_back(v);
    }
    if (static_cast<Index>(row.size()) != cfg.raw_dim) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": expected " +
                        std::to_string(cfg.raw_dim) + " values");
    }
    values.push_back(std::move(row));
    y_e.push_back(e);
    y_d.push_back(d);
    split.push_back(tag == "train" ? Split::kTrain : Split::kTest);
  }
  if (!have_config) throw ConfigError("dataset file lacks a config header");
  if (rows_expected >= 0 && rows_expected != static_cast<Index>(values.size())) {
    throw ConfigError("dataset file truncated: " + std::to_string(values.size()) + " of " +
                      std::to_string(rows_expected) + " rows");
  }
  Matrix raw(static_cast<Index>(values.size()), cfg.raw_dim);
  for (std::size_t r = 0; r < values.size(); ++r) {
    for (Index k = 0; k < cfg.raw_dim; ++k) raw(static_cast<Index>(r), k) = values[r][static_cast<std::size_t>(k)];
  }
  return SyntheticDataset(cfg, std::move(raw), std::move(y_e), std::move(y_d), std::move(split));
}

}  // namespace cdnet::data
