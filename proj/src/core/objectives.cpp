// SPDX-License-Identifier: Apache-2.0

#include "objectives.hpp"

#include "errors.hpp"

namespace cdnet::objectives {

using model::Matrix;

void LossWeights::validate() const {
  if (!(lambda_d_p >= 0) || !(lambda_d_f >= 0) || !(lambda_r_f >= 0)) {
    throw ConfigError("loss weights must be non-negative");
  }
}

std::string_view to_string(Metric m) {
  return m == Metric::kEuclidean ? "euclidean" : "squared_euclidean";
}

Metric metric_from_string(std::string_view s) {
  if (s == "squared_euclidean") return Metric::kSquaredEuclidean;
  if (s == "euclidean") return Metric::kEuclidean;
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

std::string_view to_string(RegMode m) {
  switch (m) {
    case RegMode::kNone:
      return "none";
    case RegMode::kPartial:
      return "partial";
    case RegMode::kFull:
      return "full";
    case RegMode::kFix:
      return "fix";
  }
  return "unknown";
}

RegMode reg_mode_from_string(std::string_view s) {
  if (s == "none") return RegMode::kNone;
  if (s == "partial") return RegMode::kPartial;
  if (s == "full") return RegMode::kFull;
  if (s == "fix") return RegMode::kFix;
  throw ConfigError("unknown regularization mode '" + std::string(s) + "'");
}

namespace {

LossTerms combine(Var cls, std::optional<Var> domain, Real w_domain, std::optional<Var> reg,
                  Real w_reg) {
  LossTerms t;
  t.cls = cls;
  t.total = cls;
  if (domain) {
    t.domain = domain;
    t.w_domain = w_domain;
    t.total = num::add(t.total, num::scale(*domain, w_domain));
  }
  if (reg) {
    t.reg = reg;
    t.w_reg = w_reg;
    t.total = num::add(t.total, num::scale(*reg, w_reg));
  }
  return t;
}

}  // namespace

LossBundle to_bundle(const LossTerms& t) {
  LossBundle b;
  b.total = t.total.scalar();
  b.components["cls"] = t.cls.scalar();
  b.weights["cls"] = 1;
  if (t.domain) {
    b.components["domain"] = t.domain->scalar();
    b.weights["domain"] = t.w_domain;
  }
  if (t.reg) {
    b.components["reg"] = t.reg->scalar();
    b.weights["reg"] = t.w_reg;
  }
  return b;
}

Real recombine(const LossBundle& b) {
  Real total = b.components.at("cls");
  if (auto it = b.components.find("domain"); it != b.components.end()) {
    total = total + it->second * b.weights.at("domain");
  }
  if (auto it = b.components.find("reg"); it != b.components.end()) {
    total = total + it->second * b.weights.at("reg");
  }
  return total;
}

LossTerms pretrain_loss(Var r_e, Var r_d, std::span<const int> y_e, std::span<const int> y_d,
                        const model::HeadVars& heads, const LossWeights& w, bool use_domain) {
  Var cls = num::softmax_cross_entropy(model::expr_logits(r_e, heads), y_e);
  std::optional<Var> dom;
  if (use_domain) dom = num::softmax_cross_entropy(model::domain_logits(r_d, heads), y_d);
  return combine(cls, dom, w.lambda_d_p, std::nullopt, 0);
}

Var class_centers(Var support, Index ways, Index shots) {
  return num::group_mean(support, ways, shots);
}

Var proto_logits(Var queries, Var centers, Metric metric) {
  Var dist = num::pairwise_sq_dist(queries, centers);
  if (metric == Metric::kEuclidean) dist = num::sqrt_elem(dist);
  return num::scale(dist, Real(-1));
}

Var proto_episode_loss(Var queries, std::span<const int> labels, Var centers, Metric metric) {
  return num::softmax_cross_entropy(proto_logits(queries, centers, metric), labels);
}

namespace {

Var mean_over_rows(Var sum_sq, Index rows) { return num::scale(sum_sq, Real(1) / static_cast<Real>(rows)); }

template <class TeacherFn, class StudentFn>
Var step_penalty(std::span<const Var> inputs, TeacherFn&& teacher_out, StudentFn&& student_out) {
  if (inputs.empty()) throw ContractError("regularization: no cascade inputs");
  Var total;
  for (const Var& in : inputs) {
    Var term = num::squared_l2(teacher_out(in), student_out(in));
    total = total.valid() ? num::add(total, term) : term;
  }
  return mean_over_rows(total, inputs.front().rows());
}

}  // namespace

Var partial_reg_loss(std::span<const Var> inputs, const model::DecompositionVars& teacher,
                     const model::DecompositionVars& student) {
  auto t = [&](Var x) { return model::decompose(x, teacher); };
  auto s = [&](Var x) { return model::decompose(x, student); };
  return step_penalty(inputs, t, s);
}

Var full_reg_loss(std::span<const Var> inputs, const model::LdVars& teacher,
                  const model::LdVars& student) {
  auto t = [&](Var x) { return model::ld_forward(x, teacher).f; };
  auto s = [&](Var x) { return model::ld_forward(x, student).f; };
  return step_penalty(inputs, t, s);
}

Var single_reg_loss(std::span<const Var> inputs, const model::SingleVars& teacher,
                    const model::SingleVars& student) {
  auto fused = [](const model::SingleVars& sv) {
    return [&sv](Var x) { return num::prelu(num::linear(x, sv.w, sv.b), sv.slope); };
  };
  return step_penalty(inputs, fused(teacher), fused(student));
}

namespace {

Var regularization(const EpisodeOutputs& ep, const model::ModelVars& student,
                   const model::ModelVars& teacher, RegMode mode) {
  const auto& inputs = ep.features.trace.inputs;
  if (inputs.empty()) throw ConfigError("regularization requires a decomposition module");
  if (student.single) {
    if (mode != RegMode::kFull) {
      throw ConfigError("single-transform variant supports only full regularization");
    }
    if (!teacher.single) throw ConfigError("teacher lacks a single-transform block");
    return single_reg_loss(inputs, *teacher.single, *student.single);
  }
  if (teacher.lds.size() != student.lds.size()) {
    throw ConfigError("teacher has " + std::to_string(teacher.lds.size()) +
                      " LD sets, student has " + std::to_string(student.lds.size()));
  }
  if (student.lds.size() == 1) {
    return mode == RegMode::kPartial
               ? partial_reg_loss(inputs, teacher.lds[0].decomposition, student.lds[0].decomposition)
               : full_reg_loss(inputs, teacher.lds[0], student.lds[0]);
  }
  // Parallel: step k belongs to LD set k.
  if (inputs.size() != student.lds.size()) throw ContractError("parallel trace/LD count mismatch");
  Var total;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::span<const Var> one(&inputs[k], 1);
    Var term = mode == RegMode::kPartial
                   ? partial_reg_loss(one, teacher.lds[k].decomposition, student.lds[k].decomposition)
                   : full_reg_loss(one, teacher.lds[k], student.lds[k]);
    total = total.valid() ? num::add(total, term) : term;
  }
  return total;
}

}  // namespace

LossTerms finetune_loss(const EpisodeOutputs& ep, const model::ModelVars& student,
                        const model::ModelVars* teacher, const LossWeights& w, RegMode mode,
                        Metric metric, bool use_domain) {
  const Var r_e = ep.features.trace.r_e;
  const Index n_support = ep.ways * ep.shots;
  const Index n_query = static_cast<Index>(ep.query_labels.size());
  if (r_e.rows() != n_support + n_query) {
    throw ContractError("finetune_loss: " + std::to_string(r_e.rows()) + " feature rows for " +
                        std::to_string(n_support) + " support + " + std::to_string(n_query) +
                        " query samples");
  }
  for (int y : ep.query_labels) {
    if (y < 0 || y >= ep.ways) throw ContractError("finetune_loss: query label out of range");
  }
  Var centers = class_centers(num::take_rows(r_e, 0, n_support), ep.ways, ep.shots);
  Var cls = proto_episode_loss(num::take_rows(r_e, n_support, n_query), ep.query_labels, centers,
                               metric);

  std::optional<Var> dom;
  if (use_domain) {
    dom = num::softmax_cross_entropy(model::domain_logits(ep.features.trace.r_d, student.heads),
                                     ep.domain_labels);
  }
  std::optional<Var> reg;
  if (mode == RegMode::kPartial || mode == RegMode::kFull) {
    if (teacher == nullptr) throw ConfigError("regularization mode requires a teacher model");
    reg = regularization(ep, student, *teacher, mode);
  }
  return combine(cls, dom, w.lambda_d_f, reg, w.lambda_r_f);
}

}  // namespace cdnet::objectives
