// SPDX-License-Identifier: Apache-2.0

#include "cdnet/cdnet.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include <json.hpp>

#include "config.hpp"
#include "diagnostics.hpp"
#include "errors.hpp"
#include "eval.hpp"
#include "model.hpp"
#include "train.hpp"
#include "util.hpp"

#ifndef CDNET_SOURCE_FINGERPRINT
#define CDNET_SOURCE_FINGERPRINT "unknown"
#endif

using namespace cdnet;

struct cdnet_config {
  config::RunConfig cfg;
};
struct cdnet_dataset {
  data::SyntheticDataset ds;
};
struct cdnet_model {
  model::Checkpoint ckpt;
};
struct cdnet_report {
  eval::EvalReport report;
};

namespace {

thread_local std::string g_last_error;

cdnet_status fail(cdnet_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Runs `fn`, mapping the library's exception types onto status codes.
template <class Fn>
cdnet_status guard(Fn&& fn) noexcept {
  try {
    g_last_error.clear();
    fn();
    return CDNET_OK;
  } catch (const ConfigError& e) {
    return fail(CDNET_ERR_CONFIG, e.what());
  } catch (const IoError& e) {
    return fail(CDNET_ERR_IO, e.what());
  } catch (const SamplingError& e) {
    return fail(CDNET_ERR_SAMPLING, e.what());
  } catch (const DivergenceError& e) {
    return fail(CDNET_ERR_DIVERGED, e.what());
  } catch (const ContractError& e) {
    return fail(CDNET_ERR_CONTRACT, e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(CDNET_ERR_CONFIG, std::string("malformed JSON: ") + e.what());
  } catch (const std::exception& e) {
    return fail(CDNET_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(CDNET_ERR_INTERNAL, "unknown error");
  }
}

void require(const void* p, const char* what) {
  if (p == nullptr) throw ContractError(std::string(what) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

train::HistorySink make_sink(cdnet_history_fn fn, void* user) {
  if (fn == nullptr) return {};
  return [fn, user](const train::HistoryRecord& r) {
    std::ostringstream os;
    train::write_history_line(os, r);
    std::string line = os.str();
    if (!line.empty() && line.back() == '\n') line.pop_back();
    fn(line.c_str(), user);
  };
}

// Finalized copy: seeds propagated and every value checked.
config::RunConfig resolved(const cdnet_config* c) {
  config::RunConfig cfg = c->cfg;
  cfg.propagate_seed();
  cfg.validate();
  return cfg;
}

}  // namespace

extern "C" {

const char* cdnet_version(void) { return "1.0.0"; }

const char* cdnet_source_fingerprint(void) { return CDNET_SOURCE_FINGERPRINT; }

const char* cdnet_last_error(void) { return g_last_error.c_str(); }

const char* cdnet_status_name(cdnet_status s) {
  switch (s) {
    case CDNET_OK:
      return "ok";
    case CDNET_ERR_CONTRACT:
      return "contract";
    case CDNET_ERR_CONFIG:
      return "config";
    case CDNET_ERR_IO:
      return "io";
    case CDNET_ERR_SAMPLING:
      return "sampling";
    case CDNET_ERR_DIVERGED:
      return "diverged";
    case CDNET_ERR_INTERNAL:
      return "internal";
  }
  return "unknown";
}

void cdnet_string_free(char* s) { std::free(s); }

uint64_t cdnet_derive_seed(uint64_t master, uint64_t purpose, uint64_t index) {
  return derive_seed(master, purpose, index);
}

void cdnet_set_logging(int enabled) { set_logging(enabled != 0); }

cdnet_status cdnet_config_new(cdnet_config** out) {
  return guard([&] {
    require(out, "out");
    *out = new cdnet_config{};
  });
}

cdnet_status cdnet_config_clone(const cdnet_config* cfg, cdnet_config** out) {
  return guard([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = new cdnet_config{cfg->cfg};
  });
}

void cdnet_config_free(cdnet_config* cfg) { delete cfg; }

size_t cdnet_config_field_count(void) { return config::fields().size(); }

cdnet_status cdnet_config_field_info(size_t index, const char** key, const char** default_value,
                                     const char** doc) {
  return guard([&] {
    const auto& fs = config::fields();
    if (index >= fs.size()) throw ContractError("field index out of range");
    if (key) *key = fs[index].key.c_str();
    if (default_value) *default_value = fs[index].default_value.c_str();
    if (doc) *doc = fs[index].doc.c_str();
  });
}

cdnet_status cdnet_config_set(cdnet_config* cfg, const char* key, const char* value) {
  return guard([&] {
    require(cfg, "cfg");
    require(key, "key");
    config::set_field(cfg->cfg, key, value ? value : "");
  });
}

cdnet_status cdnet_config_get(const cdnet_config* cfg, const char* key, char** out) {
  return guard([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(out, "out");
    *out = dup(config::get_field(cfg->cfg, key));
  });
}

cdnet_status cdnet_config_apply_json(cdnet_config* cfg, const char* json_text) {
  return guard([&] {
    require(cfg, "cfg");
    require(json_text, "json_text");
    config::apply_json(cfg->cfg, json_text);
  });
}

cdnet_status cdnet_config_load(cdnet_config* cfg, const char* path) {
  return guard([&] {
    require(cfg, "cfg");
    require(path, "path");
    std::ifstream in(path);
    if (!in) throw ConfigError(std::string("config file not found: ") + path);
    std::stringstream ss;
    ss << in.rdbuf();
    config::apply_json(cfg->cfg, ss.str());
  });
}

cdnet_status cdnet_config_to_json(const cdnet_config* cfg, char** out) {
  return guard([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = dup(config::to_json(cfg->cfg));
  });
}

cdnet_status cdnet_config_finalize(cdnet_config* cfg) {
  return guard([&] {
    require(cfg, "cfg");
    cfg->cfg = resolved(cfg);
  });
}

cdnet_status cdnet_dataset_generate(const cdnet_config* cfg, cdnet_dataset** out) {
  return guard([&] {
    require(cfg, "cfg");
    require(out, "out");
    const auto c = resolved(cfg);
    *out = new cdnet_dataset{data::gen_dataset(c.data)};
  });
}

cdnet_status cdnet_dataset_save(const cdnet_dataset* ds, const char* path) {
  return guard([&] {
    require(ds, "ds");
    require(path, "path");
    data::save_dataset(ds->ds, path);
  });
}

cdnet_status cdnet_dataset_load(const char* path, cdnet_dataset** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new cdnet_dataset{data::load_dataset(path)};
  });
}

int64_t cdnet_dataset_rows(const cdnet_dataset* ds) { return ds ? static_cast<int64_t>(ds->ds.size()) : -1; }

void cdnet_dataset_free(cdnet_dataset* ds) { delete ds; }

cdnet_status cdnet_model_init(const cdnet_config* cfg, const cdnet_dataset* ds, cdnet_model** out) {
  return guard([&] {
    require(cfg, "cfg");
    require(ds, "ds");
    require(out, "out");
    const auto c = resolved(cfg);
    model::Model m(train::model_config(c.train, ds->ds));
    *out = new cdnet_model{{std::move(m), std::string(train::to_string(c.train.variant)), "init"}};
  });
}

cdnet_status cdnet_pretrain(const cdnet_config* cfg, const cdnet_dataset* ds, cdnet_history_fn history,
                            void* user, cdnet_model** out) {
  return guard([&] {
    require(cfg, "cfg");
    require(ds, "ds");
    require(out, "out");
    const auto c = resolved(cfg);
    model::Model m(train::model_config(c.train, ds->ds));
    train::pretrain(m, ds->ds, c.train, make_sink(history, user));
    *out = new cdnet_model{{std::move(m), std::string(train::to_string(c.train.variant)), "pretrain"}};
  });
}

cdnet_status cdnet_finetune(const cdnet_config* cfg, const cdnet_dataset* ds, const cdnet_model* init,
                            cdnet_history_fn history, void* user, cdnet_model** out) {
  return guard([&] {
    require(cfg, "cfg");
    require(ds, "ds");
    require(out, "out");
    const auto c = resolved(cfg);
    if (init != nullptr && !c.train.use_pretrained) {
      throw ConfigError("train.use_pretrained is false but an initial checkpoint was given");
    }
    auto run = train::run_variant(ds->ds, c.train, init ? &init->ckpt : nullptr, make_sink(history, user));
    *out = new cdnet_model{std::move(run.finetuned)};
  });
}

cdnet_status cdnet_model_save(const cdnet_model* m, const char* dir) {
  return guard([&] {
    require(m, "model");
    require(dir, "dir");
    model::save_checkpoint(m->ckpt, dir);
  });
}

cdnet_status cdnet_model_load(const char* dir, cdnet_model** out) {
  return guard([&] {
    require(dir, "dir");
    require(out, "out");
    *out = new cdnet_model{model::load_checkpoint(dir)};
  });
}

cdnet_status cdnet_model_hash(const cdnet_model* m, char** out) {
  return guard([&] {
    require(m, "model");
    require(out, "out");
    *out = dup(model::hash_hex(model::model_hash(m->ckpt.model)));
  });
}

cdnet_status cdnet_model_describe(const cdnet_model* m, char** out) {
  return guard([&] {
    require(m, "model");
    require(out, "out");
    const auto& mc = m->ckpt.model.config();
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : m->ckpt.model.params()) {
      params.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}});
    }
    nlohmann::json j{{"variant", m->ckpt.variant},
                     {"stage", m->ckpt.stage},
                     {"architecture", model::to_string(mc.architecture)},
                     {"J", mc.cascade_steps},
                     {"d", mc.d},
                     {"ld_sets", m->ckpt.model.ld_sets().size()},
                     {"parameter_count", m->ckpt.model.parameter_count()},
                     {"hash", model::hash_hex(model::model_hash(m->ckpt.model))},
                     {"parameters", params}};
    *out = dup(j.dump(2));
  });
}

void cdnet_model_free(cdnet_model* m) { delete m; }

cdnet_status cdnet_evaluate(const cdnet_config* cfg, const cdnet_dataset* ds, const cdnet_model* m,
                            cdnet_report** out) {
  return guard([&] {
    require(cfg, "cfg");
    require(ds, "ds");
    require(m, "model");
    require(out, "out");
    const auto c = resolved(cfg);
    *out = new cdnet_report{eval::evaluate(m->ckpt.model, ds->ds, c.eval)};
  });
}

double cdnet_report_mean(const cdnet_report* r) { return r ? static_cast<double>(r->report.mean) : 0.0; }

double cdnet_report_ci95(const cdnet_report* r) { return r ? static_cast<double>(r->report.ci95) : 0.0; }

int cdnet_report_tasks(const cdnet_report* r) { return r ? static_cast<int>(r->report.per_task_accuracy.size()) : 0; }

double cdnet_report_task_accuracy(const cdnet_report* r, int task) {
  if (r == nullptr || task < 0 || static_cast<std::size_t>(task) >= r->report.per_task_accuracy.size()) {
    return -1.0;
  }
  return static_cast<double>(r->report.per_task_accuracy[static_cast<std::size_t>(task)]);
}

cdnet_status cdnet_report_text(const cdnet_report* r, char** out) {
  return guard([&] {
    require(r, "report");
    require(out, "out");
    *out = dup(eval::report_to_text(r->report));
  });
}

cdnet_status cdnet_report_json(const cdnet_report* r, char** out) {
  return guard([&] {
    require(r, "report");
    require(out, "out");
    *out = dup(eval::report_to_json(r->report));
  });
}

void cdnet_report_free(cdnet_report* r) { delete r; }

cdnet_status cdnet_ablate(const cdnet_config* cfg, const cdnet_dataset* ds, char** text_out, char** json_out) {
  return guard([&] {
    require(cfg, "cfg");
    require(ds, "ds");
    const auto c = resolved(cfg);
    std::vector<std::string> variants = c.ablate_variants;
    if (variants.empty()) {
      for (auto v : train::all_variants()) variants.emplace_back(train::to_string(v));
    }
    const auto table = eval::ablation_table(ds->ds, c.train, c.eval, variants, c.ablate_shots, c.ablate_inits);
    if (text_out) *text_out = dup(eval::ablation_to_text(table));
    if (json_out) *json_out = dup(eval::ablation_to_json(table));
  });
}

cdnet_status cdnet_sweep_j(const cdnet_config* cfg, const cdnet_dataset* ds, char** text_out, char** json_out) {
  return guard([&] {
    require(cfg, "cfg");
    require(ds, "ds");
    const auto c = resolved(cfg);
    const auto series = eval::j_sweep(ds->ds, c.train, c.eval, c.sweep_js);
    if (text_out) *text_out = dup(eval::sweep_to_text(series));
    if (json_out) {
      nlohmann::json j = nlohmann::json::array();
      for (const auto& p : series) {
        j.push_back({{"J", p.steps},
                     {"mean", p.report.mean},
                     {"ci95", p.report.ci95},
                     {"checkpoint_hash", p.checkpoint_hash}});
      }
      *json_out = dup(j.dump(2));
    }
  });
}

cdnet_status cdnet_gradcheck(const cdnet_config* cfg, double* max_rel_error, int* passed, char** json_out) {
  return guard([&] {
    require(cfg, "cfg");
    const auto c = resolved(cfg);
    const auto rep = diagnostics::gradcheck_finetune(c.gradcheck, c.seed);
    if (max_rel_error) *max_rel_error = static_cast<double>(rep.max_rel_error);
    if (passed) *passed = rep.passed() ? 1 : 0;
    if (json_out) {
      nlohmann::json entries = nlohmann::json::array();
      for (const auto& e : rep.entries) {
        entries.push_back({{"name", e.name},
                           {"max_rel_error", e.max_rel_error},
                           {"worst_index", e.worst_index},
                           {"analytic", e.analytic},
                           {"numeric", e.numeric},
                           {"kinks", e.kinks}});
      }
      nlohmann::json j{{"max_rel_error", rep.max_rel_error},
                       {"tol", c.gradcheck.tol},
                       {"eps", c.gradcheck.eps},
                       {"passed", rep.passed()},
                       {"failures", rep.failures},
                       {"kinks", rep.kinks},
                       {"entries", entries}};
      *json_out = dup(j.dump(2));
    }
  });
}

}  // extern "C"
