// SPDX-License-Identifier: Apache-2.0

#include "train.hpp"

#include <cmath>

#include <json.hpp>

#include "errors.hpp"
#include "eval.hpp"

namespace cdnet::train {

using model::Architecture;
using objectives::RegMode;

void adam_step(std::span<num::Parameter> params, OptimState& st, Real grad_clip) {
  if (st.m.size() != params.size()) {
    st.m.clear();
    st.v.clear();
    for (const auto& p : params) {
      st.m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      st.v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
  }
  Real sq_norm = 0;
  for (const auto& p : params) {
    if (!p.trainable) continue;
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) {
      throw ContractError("adam_step: gradient of " + p.name + " has the wrong shape");
    }
    if (!p.grad.allFinite()) throw DivergenceError("non-finite gradient for parameter " + p.name);
    sq_norm += p.grad.squaredNorm();
  }
  Real clip_scale = 1;
  if (grad_clip > 0) {
    const Real norm = std::sqrt(sq_norm);
    if (norm > grad_clip) clip_scale = grad_clip / norm;
  }
  ++st.step;
  const auto& hp = st.hp;
  const Real bc1 = 1 - std::pow(hp.beta1, static_cast<Real>(st.step));
  const Real bc2 = 1 - std::pow(hp.beta2, static_cast<Real>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    const Matrix g = p.grad * clip_scale;
    st.m[i] = hp.beta1 * st.m[i] + (1 - hp.beta1) * g;
    st.v[i] = hp.beta2 * st.v[i] + (1 - hp.beta2) * g.cwiseProduct(g);
    const auto m_hat = st.m[i].array() / bc1;
    const auto v_hat = st.v[i].array() / bc2;
    p.value.array() -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
  }
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kBaseline:
      return "baseline";
    case Variant::kSingle:
      return "single";
    case Variant::kParallel:
      return "parallel";
    case Variant::kDecompose:
      return "decompose";
    case Variant::kCdnetFull:
      return "cdnet_full";
    case Variant::kCdnetFix:
      return "cdnet_fix";
    case Variant::kCdnet:
      return "cdnet";
  }
  return "unknown";
}

Variant variant_from_string(std::string_view s) {
  for (Variant v : all_variants()) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown variant '" + std::string(s) +
                    "' (expected baseline, single, parallel, decompose, cdnet_full, cdnet_fix or "
                    "cdnet)");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> kAll = {Variant::kBaseline,  Variant::kSingle,
                                            Variant::kParallel,  Variant::kDecompose,
                                            Variant::kCdnetFull, Variant::kCdnetFix,
                                            Variant::kCdnet};
  return kAll;
}

VariantSpec variant_spec(Variant v) {
  switch (v) {
    case Variant::kBaseline:
      return {Architecture::kBaseline, RegMode::kNone, false};
    case Variant::kSingle:
      return {Architecture::kSingle, RegMode::kFull, true};
    case Variant::kParallel:
      return {Architecture::kParallel, RegMode::kPartial, true};
    case Variant::kDecompose:
      return {Architecture::kSequential, RegMode::kNone, true};
    case Variant::kCdnetFull:
      return {Architecture::kSequential, RegMode::kFull, true};
    case Variant::kCdnetFix:
      return {Architecture::kSequential, RegMode::kFix, true};
    case Variant::kCdnet:
      return {Architecture::kSequential, RegMode::kPartial, true};
  }
  throw ConfigError("unknown variant");
}

void TrainConfig::validate() const {
  if (d < 2) throw ConfigError("model.d must be >= 2");
  if (variant != Variant::kBaseline && cascade_steps < 1) {
    throw ConfigError("model.J must be >= 1 for variant " + std::string(to_string(variant)));
  }
  if (pretrain_iters < 0) throw ConfigError("train.pretrain_iters must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (finetune_episodes < 0) throw ConfigError("train.finetune_episodes must be >= 0");
  if (tasks_per_episode < 1) throw ConfigError("train.tasks_per_episode must be >= 1");
  if (tasks_per_update < 1) throw ConfigError("train.tasks_per_update must be >= 1");
  if (ways < 1 || shots < 1 || queries < 1) {
    throw ConfigError("train.ways/shots/queries must be >= 1");
  }
  if (!(adam.lr >= 0)) throw ConfigError("train.lr must be >= 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
  }
  if (!(adam.eps > 0)) throw ConfigError("train.adam_eps must be > 0");
  if (!(grad_clip >= 0)) throw ConfigError("train.grad_clip must be >= 0");
  if (val_every < 0 || val_tasks < 1) throw ConfigError("train.val_every/val_tasks invalid");
  weights.validate();
}

void write_history_line(std::ostream& os, const HistoryRecord& r) {
  nlohmann::json j{{"step", r.step}, {"stage", r.stage}};
  nlohmann::json comps = nlohmann::json::object();
  for (const auto& [k, v] : r.loss.components) comps[k] = v;
  nlohmann::json weights = nlohmann::json::object();
  for (const auto& [k, v] : r.loss.weights) weights[k] = v;
  j["components"] = comps;
  j["weights"] = weights;
  j["total"] = r.loss.total;
  os << j.dump() << '\n';
}

model::ModelConfig model_config(const TrainConfig& cfg, const data::SyntheticDataset& ds) {
  model::ModelConfig m;
  m.raw_dim = ds.config().raw_dim;
  m.d = cfg.d;
  m.architecture = variant_spec(cfg.variant).architecture;
  m.cascade_steps = m.architecture == Architecture::kBaseline ? 0 : cfg.cascade_steps;
  m.num_expr = ds.config().num_base();
  m.num_domains = ds.config().num_domains;
  m.prelu_init = cfg.prelu_init;
  m.transform_init_noise = cfg.transform_init_noise;
  m.seed = derive_seed(cfg.seed, kSeedInit);
  return m;
}

void require_compatible(const model::ModelConfig& s, const model::ModelConfig& t) {
  if (s.raw_dim != t.raw_dim || s.d != t.d || s.cascade_steps != t.cascade_steps ||
      s.architecture != t.architecture || s.num_expr != t.num_expr ||
      s.num_domains != t.num_domains) {
    throw ConfigError(
        "incompatible checkpoint: expected raw_dim=" + std::to_string(s.raw_dim) +
        " d=" + std::to_string(s.d) + " J=" + std::to_string(s.cascade_steps) +
        " architecture=" + std::string(model::to_string(s.architecture)) + ", got raw_dim=" +
        std::to_string(t.raw_dim) + " d=" + std::to_string(t.d) + " J=" +
        std::to_string(t.cascade_steps) + " architecture=" +
        std::string(model::to_string(t.architecture)));
  }
}

namespace {

Matrix gather_rows(const data::SyntheticDataset& ds, std::span<const data::SampleRef> refs) {
  Matrix x(static_cast<Index>(refs.size()), ds.raw().cols());
  for (std::size_t i = 0; i < refs.size(); ++i) x.row(static_cast<Index>(i)) = ds.raw().row(refs[i].row);
  return x;
}

void emit(std::vector<HistoryRecord>& history, const HistorySink& sink, HistoryRecord rec) {
  if (sink) sink(rec);
  history.push_back(std::move(rec));
}

}  // namespace

std::vector<HistoryRecord> pretrain(model::Model& m, const data::SyntheticDataset& ds,
                                    const TrainConfig& cfg, const HistorySink& sink) {
  cfg.validate();
  const bool use_domain = variant_spec(cfg.variant).use_domain &&
                          m.config().architecture != Architecture::kBaseline;
  if (ds.domains(data::Split::kTrain).empty()) {
    throw ConfigError("pretrain: dataset has no base-class training split");
  }
  Rng rng(derive_seed(cfg.seed, kSeedPretrain));
  OptimState state{cfg.adam, {}, {}, 0};
  std::vector<HistoryRecord> history;
  history.reserve(static_cast<std::size_t>(cfg.pretrain_iters));
  for (int it = 0; it < cfg.pretrain_iters; ++it) {
    const auto batch = data::sample_batch(ds, cfg.batch_size, rng);
    std::vector<int> y_e;
    std::vector<int> y_d;
    for (const auto& s : batch) {
      y_e.push_back(s.y_e);
      y_d.push_back(s.y_d);
    }
    objectives::LossBundle bundle;
    try {
      num::Tape tape;
      auto vars = m.bind(tape);
      auto feats = model::forward(m, vars, tape.constant(gather_rows(ds, batch)));
      auto loss = objectives::pretrain_loss(feats.trace.r_e, feats.trace.r_d, y_e, y_d, vars.heads,
                                            cfg.weights, use_domain);
      bundle = objectives::to_bundle(loss);
      if (!std::isfinite(bundle.total)) throw DivergenceError("non-finite loss");
      m.zero_grad();
      tape.backward(loss.total);
      adam_step(m.params(), state, cfg.grad_clip);
    } catch (const ContractError& e) {
      throw DivergenceError("pretrain diverged at iteration " + std::to_string(it) + ": " + e.what());
    } catch (const DivergenceError& e) {
      throw DivergenceError("pretrain diverged at iteration " + std::to_string(it) + ": " + e.what());
    }
    emit(history, sink, {it, "pretrain", std::move(bundle)});
  }
  return history;
}

std::vector<HistoryRecord> finetune(model::Model& student, const model::Model* teacher,
                                    const data::SyntheticDataset& ds, const TrainConfig& cfg,
                                    const HistorySink& sink) {
  cfg.validate();
  const VariantSpec spec = variant_spec(cfg.variant);
  if (student.config().architecture != spec.architecture) {
    throw ConfigError("model architecture " + std::string(model::to_string(student.config().architecture)) +
                      " does not match variant " + std::string(to_string(cfg.variant)));
  }
  RegMode mode = spec.reg_mode;
  if (teacher != nullptr) {
    require_compatible(student.config(), teacher->config());
  } else if (mode == RegMode::kPartial || mode == RegMode::kFull) {
    mode = RegMode::kNone;
  }
  const bool use_domain = spec.use_domain;

  // Restores trainable flags however we leave.
  struct FlagGuard {
    model::Model& m;
    ~FlagGuard() {
      for (auto& p : m.params()) p.trainable = true;
    }
  } guard{student};
  const auto& h = student.head_ids();
  student.param(h.expr_w).trainable = false;
  student.param(h.expr_b).trainable = false;
  if (!use_domain) {
    for (int id : {h.domain_w1, h.domain_b1, h.domain_w2, h.domain_b2}) student.param(id).trainable = false;
  }
  if (mode == RegMode::kFix) {
    for (int id : student.decomposition_param_ids()) student.param(id).trainable = false;
  }
  if (!cfg.finetune_encoder) {
    const auto& e = student.encoder_ids();
    for (int id : {e.w1, e.b1, e.w2, e.b2}) student.param(id).trainable = false;
  }

  Rng rng(derive_seed(cfg.seed, kSeedFinetune));
  OptimState state{cfg.adam, {}, {}, 0};
  std::vector<HistoryRecord> history;
  const std::int64_t total_tasks =
      static_cast<std::int64_t>(cfg.finetune_episodes) * cfg.tasks_per_episode;
  history.reserve(static_cast<std::size_t>(total_tasks));
  int pending = 0;
  student.zero_grad();
  for (std::int64_t task = 0; task < total_tasks; ++task) {
    const auto ep = data::sample_episode(ds, cfg.ways, cfg.shots, cfg.queries,
                                         data::ClassPool::kBase, rng);
    objectives::LossBundle bundle;
    try {
      num::Tape tape;
      auto vars = student.bind(tape);
      std::optional<model::ModelVars> tvars;
      if (teacher != nullptr && (mode == RegMode::kPartial || mode == RegMode::kFull)) {
        tvars = teacher->bind_frozen(tape);
      }
      objectives::EpisodeOutputs out;
      out.features = model::forward(student, vars, tape.constant(data::episode_inputs(ds, ep)));
      out.ways = ep.ways;
      out.shots = ep.shots;
      for (std::size_t q = 0; q < ep.query.size(); ++q) out.query_labels.push_back(ep.query_label(q));
      for (const auto& s : ep.support) out.domain_labels.push_back(s.y_d);
      for (const auto& s : ep.query) out.domain_labels.push_back(s.y_d);
      auto loss = objectives::finetune_loss(out, vars, tvars ? &*tvars : nullptr, cfg.weights,
                                            mode, cfg.metric, use_domain);
      bundle = objectives::to_bundle(loss);
      if (!std::isfinite(bundle.total)) throw DivergenceError("non-finite loss");
      tape.backward(loss.total);
      if (++pending == cfg.tasks_per_update || task + 1 == total_tasks) {
        if (pending > 1) {
          for (auto& p : student.params()) p.grad /= static_cast<Real>(pending);
        }
        adam_step(student.params(), state, cfg.grad_clip);
        student.zero_grad();
        pending = 0;
      }
    } catch (const ContractError& e) {
      throw DivergenceError("finetune diverged at task " + std::to_string(task) + ": " + e.what());
    } catch (const DivergenceError& e) {
      throw DivergenceError("finetune diverged at task " + std::to_string(task) + ": " + e.what());
    }
    emit(history, sink, {task, "finetune", std::move(bundle)});

    if (cfg.val_every > 0 && (task + 1) % (static_cast<std::int64_t>(cfg.val_every) * cfg.tasks_per_episode) == 0) {
      eval::EvalConfig vc;
      vc.ways = cfg.ways;
      vc.shots = cfg.shots;
      vc.queries = cfg.queries;
      vc.tasks = cfg.val_tasks;
      vc.seed = derive_seed(cfg.seed, kSeedFinetune, static_cast<std::uint64_t>(task));
      vc.metric = cfg.metric;
      vc.pool = data::ClassPool::kBase;
      const auto report = eval::evaluate(student, ds, vc);
      objectives::LossBundle acc;
      acc.total = report.mean;
      acc.components["accuracy"] = report.mean;
      acc.components["ci95"] = report.ci95;
      emit(history, sink, {task, "validate", std::move(acc)});
    }
  }
  return history;
}

VariantRun run_variant(const data::SyntheticDataset& ds, const TrainConfig& cfg,
                       const model::Checkpoint* pretrained, const HistorySink& sink) {
  cfg.validate();
  const std::string name(to_string(cfg.variant));
  model::Model m(model_config(cfg, ds));
  VariantRun run{std::nullopt, model::Checkpoint{m, name, "init"}, {}};
  if (pretrained != nullptr) {
    require_compatible(m.config(), pretrained->model.config());
    run.pretrained = *pretrained;
  } else if (cfg.use_pretrained) {
    run.history = pretrain(m, ds, cfg, sink);
    run.pretrained = model::Checkpoint{m, name, "pretrain"};
  }
  model::Model student = run.pretrained ? run.pretrained->model : m;
  auto ft = finetune(student, run.pretrained ? &run.pretrained->model : nullptr, ds, cfg, sink);
  run.history.insert(run.history.end(), std::make_move_iterator(ft.begin()),
                     std::make_move_iterator(ft.end()));
  run.finetuned = model::Checkpoint{std::move(student), name, "finetune"};
  return run;
}

}  // namespace cdnet::train
