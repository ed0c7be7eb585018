// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "data.hpp"
#include "model.hpp"
#include "objectives.hpp"

namespace cdnet::train {

using model::Index;
using model::Matrix;
using model::Real;

struct AdamConfig {
  Real lr = 1e-4;
  Real beta1 = 0.5;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

struct OptimState {
  AdamConfig hp;
  std::vector<Matrix> m;  // first moments, one per parameter
  std::vector<Matrix> v;  // second moments
  std::int64_t step = 0;
};

// One bias-corrected Adam update from Parameter::grad. Parameters with
// trainable == false are left untouched. A non-finite gradient throws
// DivergenceError before anything is modified. grad_clip > 0 rescales the
// global gradient norm to at most grad_clip.
void adam_step(std::span<num::Parameter> params, OptimState& state, Real grad_clip = 0);

// Ablation variants, in report order.
enum class Variant { kBaseline, kSingle, kParallel, kDecompose, kCdnetFull, kCdnetFix, kCdnet };

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view s);
const std::vector<Variant>& all_variants();

struct VariantSpec {
  model::Architecture architecture;
  objectives::RegMode reg_mode;
  bool use_domain;  // domain head and loss in both stages
};
VariantSpec variant_spec(Variant v);

struct TrainConfig {
  Variant variant = Variant::kCdnet;
  Index d = 64;
  Index cascade_steps = 3;  // J
  Real prelu_init = 0.25;
  Real transform_init_noise = 0.01;

  int pretrain_iters = 10000;
  int batch_size = 16;
  int finetune_episodes = 100;
  int tasks_per_episode = 100;
  int tasks_per_update = 1;  // few-shot tasks whose gradients are averaged per Adam step
  int ways = 5;
  int shots = 1;
  int queries = 16;

  objectives::LossWeights weights;
  AdamConfig adam;
  objectives::Metric metric = objectives::Metric::kSquaredEuclidean;
  bool use_pretrained = true;
  bool finetune_encoder = true;
  Real grad_clip = 0;
  int val_every = 0;  // episodes between validation logs; 0 disables
  int val_tasks = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

struct HistoryRecord {
  std::int64_t step = 0;
  std::string stage;  // "pretrain", "finetune" or "validate"
  objectives::LossBundle loss;
};

using HistorySink = std::function<void(const HistoryRecord&)>;

// One JSON object per line: step, stage, components, weights, total.
void write_history_line(std::ostream& os, const HistoryRecord& r);

model::ModelConfig model_config(const TrainConfig& cfg, const data::SyntheticDataset& ds);

// Batch training on the train split. Every iteration draws one single-domain
// batch. On divergence throws DivergenceError with `m` still holding the last
// finite parameters.
std::vector<HistoryRecord> pretrain(model::Model& m, const data::SyntheticDataset& ds,
                                    const TrainConfig& cfg, const HistorySink& sink = {});

// Episodic training on base-class tasks of random source domains.
// `teacher` is the frozen pre-trained model used by partial/full
// regularization; pass nullptr to train without a teacher (the penalty is
// then dropped).
std::vector<HistoryRecord> finetune(model::Model& student, const model::Model* teacher,
                                    const data::SyntheticDataset& ds, const TrainConfig& cfg,
                                    const HistorySink& sink = {});

struct VariantRun {
  std::optional<model::Checkpoint> pretrained;
  model::Checkpoint finetuned;
  std::vector<HistoryRecord> history;
};

// Initializes, optionally pre-trains, then fine-tunes the given variant.
// A supplied `pretrained` checkpoint replaces the pre-training stage.
VariantRun run_variant(const data::SyntheticDataset& ds, const TrainConfig& cfg,
                       const model::Checkpoint* pretrained = nullptr,
                       const HistorySink& sink = {});

// Throws ConfigError unless `teacher` matches the student's structure.
void require_compatible(const model::ModelConfig& student, const model::ModelConfig& teacher);

}  // namespace cdnet::train
