// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "model.hpp"

namespace cdnet::objectives {

using model::Index;
using model::Real;
using model::Var;

struct LossWeights {
  Real lambda_d_p = 1.0;   // domain term, pre-training
  Real lambda_d_f = 0.01;  // domain term, fine-tuning
  Real lambda_r_f = 1.0;   // regularization term, fine-tuning

  void validate() const;
};

enum class Metric { kSquaredEuclidean, kEuclidean };
std::string_view to_string(Metric m);
Metric metric_from_string(std::string_view s);

enum class RegMode {
  kNone,
  kPartial,  // decomposition-block outputs vs frozen teacher
  kFull,     // whole weighted-prototype outputs vs frozen teacher
  kFix,      // no penalty; decomposition block excluded from updates
};
std::string_view to_string(RegMode m);
RegMode reg_mode_from_string(std::string_view s);

// Tape-level loss with its named components. total is recorded on the tape
// as cls + w_domain * domain + w_reg * reg in that order.
struct LossTerms {
  Var total;
  Var cls;
  std::optional<Var> domain;
  std::optional<Var> reg;
  Real w_domain = 0;
  Real w_reg = 0;
};

// Plain values of a LossTerms, for histories and reports.
struct LossBundle {
  Real total = 0;
  std::map<std::string, Real> components;  // "cls", "domain", "reg"
  std::map<std::string, Real> weights;     // weight applied to each component
};

LossBundle to_bundle(const LossTerms& t);
// Recomputes cls + w_domain * domain + w_reg * reg from a bundle.
Real recombine(const LossBundle& b);

// Batch pre-training loss, averaged over rows:
// CE(F_e(r_e), y_e) + lambda_d_p * CE(F_d(r_d), y_d).
// With use_domain false the domain term is omitted (baseline).
LossTerms pretrain_loss(Var r_e, Var r_d, std::span<const int> y_e, std::span<const int> y_d,
                        const model::HeadVars& heads, const LossWeights& w, bool use_domain = true);

// Class means of consecutive groups of `shots` rows (class-major ordering).
Var class_centers(Var support, Index ways, Index shots);

// Negative metric between every query row and every center (m x N).
Var proto_logits(Var queries, Var centers, Metric metric);

// Mean over query rows of the softmax cross-entropy of proto_logits.
Var proto_episode_loss(Var queries, std::span<const int> labels, Var centers,
                       Metric metric = Metric::kSquaredEuclidean);

// Sum over steps of ||D_teacher(input_i) - D_student(input_i)||^2, averaged
// over rows. The teacher must be bound frozen.
Var partial_reg_loss(std::span<const Var> inputs, const model::DecompositionVars& teacher,
                     const model::DecompositionVars& student);

// As partial_reg_loss on the full weighted prototypes alpha * p.
Var full_reg_loss(std::span<const Var> inputs, const model::LdVars& teacher,
                  const model::LdVars& student);

// Full-regularization analogue for the fused single-transform block.
Var single_reg_loss(std::span<const Var> inputs, const model::SingleVars& teacher,
                    const model::SingleVars& student);

// Everything the fine-tuning objective consumes for one episode. Rows of
// `features` are the support set (class-major, ways*shots rows) followed by
// the queries.
struct EpisodeOutputs {
  model::Features features;
  Index ways = 0;
  Index shots = 0;
  std::vector<int> query_labels;  // episode-local, one per query row
  std::vector<int> domain_labels;  // one per row of features
};

// L_f = L_cls + lambda_d_f * L_d + lambda_r_f * L_r.
// L_cls: mean proto loss over queries. L_d: domain CE over every support and
// query row (skipped when use_domain is false). L_r: per reg mode.
// The teacher is the frozen pre-trained binding; required for kPartial and
// kFull. The cascade inputs come from the student's forward pass.
LossTerms finetune_loss(const EpisodeOutputs& ep, const model::ModelVars& student,
                        const model::ModelVars* teacher, const LossWeights& w, RegMode mode,
                        Metric metric, bool use_domain = true);

}  // namespace cdnet::objectives
