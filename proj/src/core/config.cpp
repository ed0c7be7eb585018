// SPDX-License-Identifier: Apache-2.0

#include "config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "errors.hpp"

namespace cdnet::config {

using nlohmann::json;
using model::Index;
using model::Real;

void RunConfig::propagate_seed() {
  data.seed = seed;
  train.seed = seed;
  eval.seed = seed;
}

void RunConfig::validate() const {
  data.validate();
  train.validate();
  eval.validate();
  for (int k : ablate_shots) {
    if (k < 1) throw ConfigError("ablate.shots entries must be >= 1");
  }
  for (const auto& v : ablate_variants) (void)train::variant_from_string(v);
  for (int j : sweep_js) {
    if (j < 0) throw ConfigError("sweep.js entries must be >= 0");
  }
  if (gradcheck.d < 2 || gradcheck.cascade_steps < 1 || gradcheck.raw_dim < 1) {
    throw ConfigError("gradcheck.d/J/raw_dim invalid");
  }
  if (!(gradcheck.eps > 0) || !(gradcheck.tol > 0)) throw ConfigError("gradcheck.eps/tol must be > 0");
}

namespace {

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError(std::string(key) + ": invalid value '" + std::string(value) + "' (expected " +
                    std::string(expected) + ")");
}

template <class T>
T parse_int(std::string_view key, std::string_view v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "an integer");
  return out;
}

Real parse_real(std::string_view key, std::string_view v) {
  Real out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad(key, v, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v, "true or false");
}

std::vector<std::string> split(std::string_view v, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : v) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string fmt_real(Real v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <class T>
std::string join(const std::vector<T>& xs, char sep) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << sep;
    if constexpr (std::is_same_v<T, bool>) {
      os << (xs[i] ? "pre" : "scratch");
    } else {
      os << xs[i];
    }
  }
  return os.str();
}

// JSON type used when writing a field.
enum class Kind { kText, kInt, kReal, kBool };

struct Field {
  std::string key;
  std::string doc;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
  Kind kind = Kind::kText;
};

#define CDNET_INT(KEY, MEMBER, TYPE, DOC)                                                \
  Field {                                                                                \
    KEY, DOC, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_int<TYPE>(KEY, v); }, \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }, Kind::kInt          \
  }
#define CDNET_REAL(KEY, MEMBER, DOC)                                                      \
  Field {                                                                                 \
    KEY, DOC, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_real(KEY, v); },  \
        [](const RunConfig& c) { return fmt_real(c.MEMBER); }, Kind::kReal                \
  }
#define CDNET_BOOL(KEY, MEMBER, DOC)                                                      \
  Field {                                                                                 \
    KEY, DOC, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_bool(KEY, v); },   \
        [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }, Kind::kBool \
  }

const std::vector<Field>& table() {
  static const std::vector<Field> kFields = {
      CDNET_INT("seed", seed, std::uint64_t, "master seed for data, initialization, sampling and evaluation"),
      Field{"out_dir", "run directory for every output of a command",
            [](RunConfig& c, std::string_view v) { c.out_dir = std::string(v); },
            [](const RunConfig& c) { return c.out_dir; }},

      CDNET_INT("data.num_domains", data.num_domains, int, "number of source domains C_d"),
      CDNET_INT("data.num_novel", data.num_novel, int, "number of compound (novel) classes in the target domain"),
      CDNET_INT("data.raw_dim", data.raw_dim, Index, "raw input dimension"),
      CDNET_INT("data.train_per_class", data.train_per_class, int, "samples per base class per source domain"),
      CDNET_INT("data.test_per_class", data.test_per_class, int, "samples per compound class in the target domain"),
      CDNET_REAL("data.separation", data.separation, "minimum base-mean distance in noise units (easy 5.0, hard 2.0)"),
      CDNET_REAL("data.noise", data.noise, "per-coordinate noise standard deviation"),
      CDNET_REAL("data.mean_radius", data.mean_radius, "base-mean norm in units of separation * noise"),
      CDNET_REAL("data.domain_shift", data.domain_shift, "source-domain linear distortion scale"),
      CDNET_REAL("data.domain_offset", data.domain_offset, "source-domain offset scale"),
      CDNET_REAL("data.target_shift", data.target_shift, "target-domain linear distortion scale"),
      CDNET_REAL("data.target_offset", data.target_offset, "target-domain offset scale"),
      CDNET_REAL("data.mix_min", data.mix_min, "lower bound of the compound mixing coefficient"),
      CDNET_REAL("data.mix_max", data.mix_max, "upper bound of the compound mixing coefficient"),
      Field{"data.class_names", "comma-separated unified base-class names (seven basic categories)",
            [](RunConfig& c, std::string_view v) { c.data.class_names = split(v, ','); },
            [](const RunConfig& c) { return join(c.data.class_names, ','); }},
      Field{"data.domain_classes",
            "per-domain local label tables: names comma-separated, domains separated by ';' "
            "(empty: every domain uses data.class_names)",
            [](RunConfig& c, std::string_view v) {
              c.data.domain_classes.clear();
              for (const auto& d : split(v, ';')) c.data.domain_classes.push_back(split(d, ','));
            },
            [](const RunConfig& c) {
              std::vector<std::string> parts;
              for (const auto& d : c.data.domain_classes) parts.push_back(join(d, ','));
              return join(parts, ';');
            }},

      CDNET_INT("model.d", train.d, Index, "feature dimension d"),
      CDNET_INT("model.J", train.cascade_steps, Index, "number of cascaded LD modules J"),
      CDNET_REAL("model.prelu_init", train.prelu_init, "initial PReLU slope"),
      CDNET_REAL("model.transform_init_noise", train.transform_init_noise, "noise added to the identity-initialized transform P"),

      Field{"train.variant", "baseline|single|parallel|decompose|cdnet_full|cdnet_fix|cdnet",
            [](RunConfig& c, std::string_view v) { c.train.variant = train::variant_from_string(v); },
            [](const RunConfig& c) { return std::string(train::to_string(c.train.variant)); }},
      CDNET_INT("train.pretrain_iters", train.pretrain_iters, int, "pre-training iterations"),
      CDNET_INT("train.batch_size", train.batch_size, int, "pre-training batch size"),
      CDNET_INT("train.finetune_episodes", train.finetune_episodes, int, "fine-tuning episodes"),
      CDNET_INT("train.tasks_per_episode", train.tasks_per_episode, int, "few-shot tasks per episode"),
      CDNET_INT("train.tasks_per_update", train.tasks_per_update, int, "tasks averaged per Adam step"),
      CDNET_INT("train.ways", train.ways, int, "N classes per fine-tuning task"),
      CDNET_INT("train.shots", train.shots, int, "K support samples per class"),
      CDNET_INT("train.queries", train.queries, int, "Q query samples per class"),
      CDNET_REAL("train.lr", train.adam.lr, "Adam learning rate"),
      CDNET_REAL("train.beta1", train.adam.beta1, "Adam beta1"),
      CDNET_REAL("train.beta2", train.adam.beta2, "Adam beta2"),
      CDNET_REAL("train.adam_eps", train.adam.eps, "Adam epsilon"),
      CDNET_REAL("train.lambda_d_p", train.weights.lambda_d_p, "pre-training domain loss weight"),
      CDNET_REAL("train.lambda_d_f", train.weights.lambda_d_f, "fine-tuning domain loss weight"),
      CDNET_REAL("train.lambda_r_f", train.weights.lambda_r_f, "fine-tuning regularization weight"),
      Field{"train.metric", "squared_euclidean|euclidean distance for prototypes and evaluation",
            [](RunConfig& c, std::string_view v) {
              c.train.metric = objectives::metric_from_string(v);
              c.eval.metric = c.train.metric;
            },
            [](const RunConfig& c) { return std::string(objectives::to_string(c.train.metric)); }},
      CDNET_BOOL("train.use_pretrained", train.use_pretrained, "initialize fine-tuning from the pre-training stage"),
      CDNET_BOOL("train.finetune_encoder", train.finetune_encoder, "update the encoder during fine-tuning"),
      CDNET_REAL("train.grad_clip", train.grad_clip, "global gradient-norm clip (0 disables)"),
      CDNET_INT("train.val_every", train.val_every, int, "episodes between validation-accuracy records (0 disables)"),
      CDNET_INT("train.val_tasks", train.val_tasks, int, "tasks per validation record"),

      CDNET_INT("eval.ways", eval.ways, int, "N classes per test task"),
      CDNET_INT("eval.shots", eval.shots, int, "K support samples per class at test time"),
      CDNET_INT("eval.queries", eval.queries, int, "Q query samples per class"),
      CDNET_INT("eval.tasks", eval.tasks, int, "number of test tasks T"),
      CDNET_INT("eval.threads", eval.threads, int, "evaluation worker threads"),

      Field{"ablate.variants", "comma-separated variants for the ablation table (empty: all seven)",
            [](RunConfig& c, std::string_view v) {
              c.ablate_variants.clear();
              if (!v.empty()) c.ablate_variants = split(v, ',');
            },
            [](const RunConfig& c) { return join(c.ablate_variants, ','); }},
      Field{"ablate.shots", "comma-separated K values, one column each",
            [](RunConfig& c, std::string_view v) {
              c.ablate_shots.clear();
              for (const auto& s : split(v, ',')) c.ablate_shots.push_back(parse_int<int>("ablate.shots", s));
            },
            [](const RunConfig& c) { return join(c.ablate_shots, ','); }},
      Field{"ablate.inits", "comma-separated initializations: pre, scratch",
            [](RunConfig& c, std::string_view v) {
              c.ablate_inits.clear();
              for (const auto& s : split(v, ',')) {
                if (s == "pre") {
                  c.ablate_inits.push_back(true);
                } else if (s == "scratch") {
                  c.ablate_inits.push_back(false);
                } else {
                  bad("ablate.inits", s, "pre or scratch");
                }
              }
            },
            [](const RunConfig& c) { return join(c.ablate_inits, ','); }},
      Field{"sweep.js", "comma-separated J values for the sweep (0 is the baseline)",
            [](RunConfig& c, std::string_view v) {
              c.sweep_js.clear();
              for (const auto& s : split(v, ',')) c.sweep_js.push_back(parse_int<int>("sweep.js", s));
            },
            [](const RunConfig& c) { return join(c.sweep_js, ','); }},

      CDNET_INT("gradcheck.raw_dim", gradcheck.raw_dim, Index, "raw dimension of the gradient-check model"),
      CDNET_INT("gradcheck.d", gradcheck.d, Index, "feature dimension of the gradient-check model"),
      CDNET_INT("gradcheck.J", gradcheck.cascade_steps, Index, "cascade depth of the gradient-check model"),
      CDNET_INT("gradcheck.ways", gradcheck.ways, int, "N of the gradient-check episode"),
      CDNET_INT("gradcheck.shots", gradcheck.shots, int, "K of the gradient-check episode"),
      CDNET_INT("gradcheck.queries", gradcheck.queries, int, "Q of the gradient-check episode"),
      Field{"gradcheck.reg_mode", "none|partial|full|fix regularization in the checked loss",
            [](RunConfig& c, std::string_view v) {
              (void)objectives::reg_mode_from_string(v);
              c.gradcheck.reg_mode = std::string(v);
            },
            [](const RunConfig& c) { return c.gradcheck.reg_mode; }},
      CDNET_REAL("gradcheck.eps", gradcheck.eps, "central-difference step"),
      CDNET_REAL("gradcheck.tol", gradcheck.tol, "maximum allowed relative error"),
  };
  return kFields;
}

#undef CDNET_INT
#undef CDNET_REAL
#undef CDNET_BOOL

const Field& find_field(std::string_view key) {
  for (const auto& f : table()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

// Keys whose value may legitimately be empty.
bool allows_empty(std::string_view key) {
  return key == "data.domain_classes" || key == "ablate.variants";
}

}  // namespace

const std::vector<FieldInfo>& fields() {
  static const std::vector<FieldInfo> kInfo = [] {
    std::vector<FieldInfo> out;
    const RunConfig defaults;
    for (const auto& f : table()) out.push_back({f.key, f.get(defaults), f.doc});
    return out;
  }();
  return kInfo;
}

void set_field(RunConfig& cfg, std::string_view key, std::string_view value) {
  const Field& f = find_field(key);
  if (value.empty() && !allows_empty(key)) {
    throw ConfigError(std::string(key) + ": missing value");
  }
  f.set(cfg, value);
}

std::string get_field(const RunConfig& cfg, std::string_view key) { return find_field(key).get(cfg); }

namespace {

std::string scalar_text(const std::string& key, const json& v) {
  if (v.is_null()) throw ConfigError(key + ": missing value");
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number_float()) return fmt_real(v.get<Real>());
  if (v.is_array()) {
    std::vector<std::string> parts;
    bool nested = false;
    for (const auto& e : v) {
      if (e.is_array()) {
        nested = true;
        std::vector<std::string> inner;
        for (const auto& x : e) inner.push_back(scalar_text(key, x));
        parts.push_back(join(inner, ','));
      } else {
        parts.push_back(scalar_text(key, e));
      }
    }
    return join(parts, nested ? ';' : ',');
  }
  throw ConfigError(key + ": unsupported value type");
}

}  // namespace

void apply_json(RunConfig& cfg, const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (v.is_object()) {
      for (const auto& [k2, v2] : v.items()) {
        const std::string key = k + "." + k2;
        set_field(cfg, key, scalar_text(key, v2));
      }
    } else {
      set_field(cfg, k, scalar_text(k, v));
    }
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  apply_json(cfg, ss.str());
  return cfg;
}

std::string to_json(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& f : table()) {
    const auto dot = f.key.find('.');
    const std::string text = f.get(cfg);
    json value = text;
    if (f.kind == Kind::kInt) value = json::parse(text);
    if (f.kind == Kind::kReal) value = parse_real(f.key, text);
    if (f.kind == Kind::kBool) value = text == "true";
    if (dot == std::string::npos) {
      j[f.key] = value;
    } else {
      j[f.key.substr(0, dot)][f.key.substr(dot + 1)] = value;
    }
  }
  return j.dump(2);
}

}  // namespace cdnet::config
