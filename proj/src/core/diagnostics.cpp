// SPDX-License-Identifier: Apache-2.0

#include "diagnostics.hpp"

#include "errors.hpp"

namespace cdnet::diagnostics {

num::GradCheckReport gradcheck_finetune(const config::GradCheckConfig& cfg, std::uint64_t seed,
                                        num::Real floor) {
  data::DataConfig dc;
  dc.raw_dim = cfg.raw_dim;
  dc.num_domains = 2;
  dc.num_novel = 2;
  dc.train_per_class = cfg.shots + cfg.queries;
  dc.test_per_class = cfg.shots + cfg.queries;
  dc.seed = seed;
  const auto ds = data::gen_dataset(dc);

  const auto mode = objectives::reg_mode_from_string(cfg.reg_mode);
  train::TrainConfig tc;
  tc.variant = mode == objectives::RegMode::kPartial ? train::Variant::kCdnet
               : mode == objectives::RegMode::kFull  ? train::Variant::kCdnetFull
               : mode == objectives::RegMode::kFix   ? train::Variant::kCdnetFix
                                                     : train::Variant::kDecompose;
  tc.d = cfg.d;
  tc.cascade_steps = cfg.cascade_steps;
  tc.seed = seed;
  model::Model student(train::model_config(tc, ds));
  Rng rng(derive_seed(seed, kSeedFinetune));
  std::normal_distribution<num::Real> noise(0, 0.05);
  // Zero biases put whole rows exactly on ReLU/PReLU kinks (x0 = 0 when every
  // encoder hidden unit is off), where the loss has no derivative. Jitter the
  // biases so the check runs at a generic point.
  for (auto& p : student.params()) {
    const auto dot = p.name.rfind('.');
    if (p.name.compare(dot + 1, 1, "b") != 0) continue;
    for (num::Index k = 0; k < p.value.size(); ++k) p.value.data()[k] += noise(rng);
  }
  model::Model teacher = student;
  for (int id : teacher.decomposition_param_ids()) {
    auto& v = teacher.param(id).value;
    for (num::Index k = 0; k < v.size(); ++k) v.data()[k] += noise(rng);
  }
  for (const auto& ld : teacher.ld_sets()) {
    auto& w = teacher.param(ld.weighting.w3).value;
    for (num::Index k = 0; k < w.size(); ++k) w.data()[k] += noise(rng);
  }

  const auto ep = data::sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, data::ClassPool::kBase, rng);
  const num::Matrix inputs = data::episode_inputs(ds, ep);
  std::vector<int> query_labels;
  std::vector<int> domain_labels;
  for (std::size_t q = 0; q < ep.query.size(); ++q) query_labels.push_back(ep.query_label(q));
  for (const auto& s : ep.support) domain_labels.push_back(s.y_d);
  for (const auto& s : ep.query) domain_labels.push_back(s.y_d);

  auto loss_fn = [&](num::Tape& tape) {
    auto vars = student.bind(tape);
    auto tvars = teacher.bind_frozen(tape);
    objectives::EpisodeOutputs out;
    out.features = model::forward(student, vars, tape.constant(inputs));
    out.ways = ep.ways;
    out.shots = ep.shots;
    out.query_labels = query_labels;
    out.domain_labels = domain_labels;
    return objectives::finetune_loss(out, vars, &tvars, tc.weights, mode, tc.metric, true).total;
  };
  std::vector<num::Parameter*> params;
  for (auto& p : student.params()) params.push_back(&p);
  return num::grad_check(loss_fn, params, cfg.eps, cfg.tol, floor);
}

}  // namespace cdnet::diagnostics
