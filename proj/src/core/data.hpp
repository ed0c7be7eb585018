// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "numerics.hpp"
#include "util.hpp"

namespace cdnet::data {

using num::Index;
using num::Matrix;
using num::Real;

struct DataConfig {
  int num_domains = 5;  // source domains; the target domain gets id num_domains
  int num_novel = 8;    // compound classes, ids num_base .. num_base+num_novel-1
  Index raw_dim = 32;
  int train_per_class = 200;  // per base class per source domain
  int test_per_class = 200;   // per compound class in the target domain
  Real separation = 5.0;      // minimum pairwise base-mean distance in units of noise
  Real noise = 1.0;           // per-coordinate standard deviation
  Real mean_radius = 2.0;     // base-mean norm in units of separation * noise
  Real domain_shift = 0.3;    // source-domain linear distortion scale
  Real domain_offset = 1.0;   // source-domain offset scale
  Real target_shift = 0.3;    // target-domain linear distortion scale
  Real target_offset = 1.0;   // target-domain offset scale
  Real mix_min = 0.35;
  Real mix_max = 0.65;
  // Unified base-class names; their count is C_e.
  std::vector<std::string> class_names = {"anger",   "disgust",  "fear",   "happiness",
                                          "sadness", "surprise", "neutral"};
  // Per-source-domain local label tables (names, in local label order).
  // Empty means every domain lists class_names in order.
  std::vector<std::vector<std::string>> domain_classes;
  std::uint64_t seed = 0;

  [[nodiscard]] int num_base() const { return static_cast<int>(class_names.size()); }
  void validate() const;
};

struct DomainSpec {
  int domain_id = 0;
  Matrix transform;  // raw_dim x raw_dim
  Matrix offset;     // 1 x raw_dim
  Real noise_scale = 0;
};

struct ClassSpec {
  enum class Kind { kBase, kCompound };
  int class_id = 0;
  Kind kind = Kind::kBase;
  Matrix mean;  // 1 x raw_dim, untransformed
  int parent_a = -1;
  int parent_b = -1;
  Real mix = 1;  // mean = mix * mu_a + (1 - mix) * mu_b
};

enum class Split { kTrain, kTest };

enum class ClassPool { kBase, kNovel };

struct SampleRef {
  Index row;
  int y_e;
  int y_d;
};

class SyntheticDataset {
 public:
  SyntheticDataset() = default;
  SyntheticDataset(DataConfig config, Matrix raw, std::vector<int> y_e, std::vector<int> y_d,
                   std::vector<Split> split);

  [[nodiscard]] const DataConfig& config() const { return config_; }
  [[nodiscard]] const Matrix& raw() const { return raw_; }
  [[nodiscard]] const std::vector<int>& expr_labels() const { return y_e_; }
  [[nodiscard]] const std::vector<int>& domain_labels() const { return y_d_; }
  [[nodiscard]] const std::vector<Split>& splits() const { return split_; }
  [[nodiscard]] Index size() const { return raw_.rows(); }

  // Row indices of one (split, domain, class) cell, in row order.
  [[nodiscard]] const std::vector<Index>& pool(Split s, int domain, int cls) const;
  // Row indices of every sample of `split` in `domain`.
  [[nodiscard]] const std::vector<Index>& domain_rows(Split s, int domain) const;
  // Domains holding samples of a split, ascending.
  [[nodiscard]] std::vector<int> domains(Split s) const;
  // Classes present in (split, domain), ascending.
  [[nodiscard]] std::vector<int> classes(Split s, int domain) const;

  // Generation metadata; empty after import.
  std::vector<DomainSpec> domain_specs;
  std::vector<ClassSpec> class_specs;

 private:
  void build_index();

  DataConfig config_;
  Matrix raw_;
  std::vector<int> y_e_;
  std::vector<int> y_d_;
  std::vector<Split> split_;
  struct Cell {
    Split split;
    int domain;
    int cls;
    std::vector<Index> rows;
  };
  std::vector<Cell> cells_;
  struct DomainCell {
    Split split;
    int domain;
    std::vector<Index> rows;
  };
  std::vector<DomainCell> domain_cells_;
};

// Maps each domain's local label index to the unified index of its name in
// `global_names`. Unknown or repeated names are configuration errors.
std::vector<std::vector<int>> unify_labels(const std::vector<std::vector<std::string>>& per_domain,
                                           const std::vector<std::string>& global_names);

SyntheticDataset gen_dataset(const DataConfig& config);

// A batch of rows from one uniformly chosen source domain (train split).
// Draws without replacement unless the domain holds fewer than batch_size rows.
std::vector<SampleRef> sample_batch(const SyntheticDataset& ds, int batch_size, Rng& rng);

struct Episode {
  int ways = 0;
  int shots = 0;
  int queries = 0;
  std::vector<SampleRef> support;  // class-major: ways groups of `shots`
  std::vector<SampleRef> query;    // class-major: ways groups of `queries`
  std::vector<int> class_map;      // episode-local index -> global class id
  int domain_id = 0;

  // Episode-local label of query row i.
  [[nodiscard]] int query_label(std::size_t i) const {
    return static_cast<int>(i / static_cast<std::size_t>(queries));
  }
};

// N-way K-shot Q-query task from one domain: a random source domain for
// kBase (train split), the target domain for kNovel (test split).
Episode sample_episode(const SyntheticDataset& ds, int ways, int shots, int queries, ClassPool pool,
                       Rng& rng);

// Raw rows of support then query, stacked.
Matrix episode_inputs(const SyntheticDataset& ds, const Episode& ep);

// Columnar text export: header lines with config and seed, then one row per
// sample "split y_e y_d x_0 .. x_{raw_dim-1}" with shortest round-trip floats.
void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& path);
SyntheticDataset load_dataset(const std::filesystem::path& path);

std::string config_to_json(const DataConfig& c);
DataConfig config_from_json(const std::string& text);

}  // namespace cdnet::data
