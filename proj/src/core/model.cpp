// SPDX-License-Identifier: Apache-2.0

#include "model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "errors.hpp"

namespace cdnet::model {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Architecture a) {
  switch (a) {
    case Architecture::kBaseline:
      return "baseline";
    case Architecture::kSingle:
      return "single";
    case Architecture::kParallel:
      return "parallel";
    case Architecture::kSequential:
      return "sequential";
  }
  return "unknown";
}

Architecture architecture_from_string(std::string_view s) {
  if (s == "baseline") return Architecture::kBaseline;
  if (s == "single") return Architecture::kSingle;
  if (s == "parallel") return Architecture::kParallel;
  if (s == "sequential") return Architecture::kSequential;
  throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (raw_dim < 1) throw ConfigError("model.raw_dim must be >= 1");
  if (d < 2) throw ConfigError("model.d must be >= 2");
  if (architecture != Architecture::kBaseline && cascade_steps < 1) {
    throw ConfigError("model.J must be >= 1 for architecture " +
                      std::string(to_string(architecture)));
  }
  if (num_expr < 1) throw ConfigError("model.num_expr must be >= 1");
  if (num_domains < 1) throw ConfigError("model.num_domains must be >= 1");
}

Model::Model(ModelConfig cfg) : Model(std::move(cfg), true) {}

Model Model::zeros(ModelConfig cfg) { return Model(std::move(cfg), false); }

Model::Model(ModelConfig cfg, bool random_init) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed ^ 0x6d6f64656c696e69ULL);
  auto kaiming = [&](Index out, Index in) {
    Matrix m(out, in);
    if (!random_init) return Matrix(Matrix::Zero(out, in));
    const Real bound = std::sqrt(Real(6) / static_cast<Real>(in));
    std::uniform_real_distribution<Real> u(-bound, bound);
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng);
    return m;
  };
  auto zeros = [](Index r, Index c) { return Matrix(Matrix::Zero(r, c)); };
  auto scalar = [&](Real v) {
    Matrix m(1, 1);
    m(0, 0) = random_init ? v : Real(0);
    return m;
  };

  const Index d = cfg_.d;
  const Index h2 = std::max<Index>(1, d / 2);
  encoder_.w1 = add_param("encoder.w1", kaiming(d, cfg_.raw_dim));
  encoder_.b1 = add_param("encoder.b1", zeros(1, d));
  encoder_.w2 = add_param("encoder.w2", kaiming(d, d));
  encoder_.b2 = add_param("encoder.b2", zeros(1, d));

  auto make_ld = [&](const std::string& prefix) {
    LdIds ids;
    Matrix transform = zeros(d, d);
    if (random_init) {
      std::normal_distribution<Real> noise(0, cfg_.transform_init_noise);
      transform = Matrix::Identity(d, d);
      for (Index k = 0; k < transform.size(); ++k) transform.data()[k] += noise(rng);
    }
    ids.decomposition.transform = add_param(prefix + ".decomposition.P", std::move(transform));
    ids.decomposition.slope = add_param(prefix + ".decomposition.slope", scalar(cfg_.prelu_init));
    ids.weighting.w1 = add_param(prefix + ".weighting.w1", kaiming(d, 2 * d));
    ids.weighting.b1 = add_param(prefix + ".weighting.b1", zeros(1, d));
    ids.weighting.w2 = add_param(prefix + ".weighting.w2", kaiming(h2, d));
    ids.weighting.b2 = add_param(prefix + ".weighting.b2", zeros(1, h2));
    // The output layer starts small with a constant bias so alpha begins near
    // 1/(J+1) for every sample instead of an arbitrary per-sample scale.
    Matrix w3 = kaiming(1, h2) * Real(0.01);
    ids.weighting.w3 = add_param(prefix + ".weighting.w3", std::move(w3));
    ids.weighting.b3 =
        add_param(prefix + ".weighting.b3", scalar(Real(1) / static_cast<Real>(cfg_.cascade_steps + 1)));
    return ids;
  };

  switch (cfg_.architecture) {
    case Architecture::kBaseline:
      break;
    case Architecture::kSequential:
      lds_.push_back(make_ld("ld0"));
      break;
    case Architecture::kParallel:
      for (Index j = 0; j < cfg_.cascade_steps; ++j) lds_.push_back(make_ld("ld" + std::to_string(j)));
      break;
    case Architecture::kSingle: {
      SingleIds s;
      Matrix w = zeros(d, d);
      if (random_init) {
        std::normal_distribution<Real> noise(0, cfg_.transform_init_noise);
        // Start as a small fraction of the identity so each step peels off a
        // modest share of the residual.
        w = Matrix::Identity(d, d) * (Real(1) / static_cast<Real>(cfg_.cascade_steps + 1));
        for (Index k = 0; k < w.size(); ++k) w.data()[k] += noise(rng);
      }
      s.w = add_param("single.w", std::move(w));
      s.b = add_param("single.b", zeros(1, d));
      s.slope = add_param("single.slope", scalar(cfg_.prelu_init));
      single_ = s;
      break;
    }
  }

  const Index hd = std::max<Index>(1, d / 2);
  heads_.expr_w = add_param("heads.expr.w", kaiming(cfg_.num_expr, d));
  heads_.expr_b = add_param("heads.expr.b", zeros(1, cfg_.num_expr));
  heads_.domain_w1 = add_param("heads.domain.w1", kaiming(hd, d));
  heads_.domain_b1 = add_param("heads.domain.b1", zeros(1, hd));
  heads_.domain_w2 = add_param("heads.domain.w2", kaiming(cfg_.num_domains, hd));
  heads_.domain_b2 = add_param("heads.domain.b2", zeros(1, cfg_.num_domains));
  zero_grad();
}

int Model::add_param(std::string name, Matrix value) {
  params_.push_back(Parameter{std::move(name), std::move(value), Matrix(), true});
  return static_cast<int>(params_.size() - 1);
}

const Parameter* Model::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::vector<int> Model::decomposition_param_ids() const {
  std::vector<int> ids;
  for (const auto& ld : lds_) {
    ids.push_back(ld.decomposition.transform);
    ids.push_back(ld.decomposition.slope);
  }
  return ids;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

namespace {

template <class Bind>
ModelVars bind_with(const Model& m, Bind&& b) {
  ModelVars v;
  const auto& e = m.encoder_ids();
  v.encoder = {b(e.w1), b(e.b1), b(e.w2), b(e.b2)};
  for (const auto& ld : m.ld_sets()) {
    LdVars lv;
    lv.decomposition = {b(ld.decomposition.transform), b(ld.decomposition.slope)};
    const auto& w = ld.weighting;
    lv.weighting = {b(w.w1), b(w.b1), b(w.w2), b(w.b2), b(w.w3), b(w.b3)};
    v.lds.push_back(lv);
  }
  if (m.single_ids()) {
    const auto& s = *m.single_ids();
    v.single = SingleVars{b(s.w), b(s.b), b(s.slope)};
  }
  const auto& h = m.head_ids();
  v.heads = {b(h.expr_w), b(h.expr_b), b(h.domain_w1), b(h.domain_b1), b(h.domain_w2),
             b(h.domain_b2)};
  return v;
}

}  // namespace

ModelVars Model::bind(Tape& tape) {
  return bind_with(*this, [&](int id) { return tape.param(param(id)); });
}

ModelVars Model::bind_frozen(Tape& tape) const {
  return bind_with(*this, [&](int id) { return tape.constant(param(id).value); });
}

Var encode(Var raw, const EncoderVars& ep) {
  return num::linear(num::relu(num::linear(raw, ep.w1, ep.b1)), ep.w2, ep.b2);
}

Var decompose(Var x, const DecompositionVars& dp) {
  return num::prelu(num::linear(x, dp.transform), dp.slope);
}

Var weigh(Var x, Var p, const WeightingVars& wp) {
  Var h = num::relu(num::linear(num::concat_cols(x, p), wp.w1, wp.b1));
  h = num::relu(num::linear(h, wp.w2, wp.b2));
  return num::linear(h, wp.w3, wp.b3);
}

LdOutput ld_forward(Var x, const LdVars& ld) {
  Var p = decompose(x, ld.decomposition);
  Var alpha = weigh(x, p, ld.weighting);
  return {num::scale_rows(p, alpha), p, alpha};
}

namespace {

void check_telescoping(const CascadeTrace& t, Var last_output) {
  const Matrix tail = t.inputs.back().value() - last_output.value();
  const Real err = (tail - t.r_d.value()).cwiseAbs().maxCoeff();
  const Real scale = Real(1) + t.inputs.front().value().cwiseAbs().maxCoeff() +
                     t.r_e.value().cwiseAbs().maxCoeff();
  const Real tol = sizeof(Real) == 8 ? Real(1e-9) : Real(1e-3);
  if (!(err <= tol * scale)) {
    throw ContractError("cascade residual does not telescope (error " + std::to_string(err) + ")");
  }
}

}  // namespace

CascadeTrace cascade_forward(Var x0, const LdVars& ld, Index steps) {
  if (steps < 1) throw ContractError("cascade_forward: J must be >= 1");
  CascadeTrace t;
  Var input = x0;
  Var last;
  for (Index i = 0; i < steps; ++i) {
    LdOutput out = ld_forward(input, ld);
    t.inputs.push_back(input);
    t.prototypes.push_back(out.p);
    t.weights.push_back(out.alpha);
    t.r_e = t.r_e.valid() ? num::add(t.r_e, out.f) : out.f;
    last = out.f;
    if (i + 1 < steps) input = num::sub(input, out.f);
  }
  t.r_d = num::sub(x0, t.r_e);
  check_telescoping(t, last);
  return t;
}

CascadeTrace single_transform_forward(Var x0, const SingleVars& sp, Index steps) {
  if (steps < 1) throw ContractError("single_transform_forward: J must be >= 1");
  CascadeTrace t;
  Var input = x0;
  Var last;
  for (Index i = 0; i < steps; ++i) {
    Var f = num::prelu(num::linear(input, sp.w, sp.b), sp.slope);
    t.inputs.push_back(input);
    t.prototypes.push_back(f);
    t.r_e = t.r_e.valid() ? num::add(t.r_e, f) : f;
    last = f;
    if (i + 1 < steps) input = num::sub(input, f);
  }
  t.r_d = num::sub(x0, t.r_e);
  check_telescoping(t, last);
  return t;
}

CascadeTrace parallel_forward(Var x0, std::span<const LdVars> lds) {
  if (lds.empty()) throw ContractError("parallel_forward: J must be >= 1");
  CascadeTrace t;
  for (const auto& ld : lds) {
    LdOutput out = ld_forward(x0, ld);
    t.inputs.push_back(x0);
    t.prototypes.push_back(out.p);
    t.weights.push_back(out.alpha);
    t.r_e = t.r_e.valid() ? num::add(t.r_e, out.f) : out.f;
  }
  t.r_d = num::sub(x0, t.r_e);
  return t;
}

Var expr_logits(Var r_e, const HeadVars& heads) {
  return num::linear(r_e, heads.expr_w, heads.expr_b);
}

Var domain_logits(Var r_d, const HeadVars& heads) {
  Var h = num::relu(num::linear(r_d, heads.domain_w1, heads.domain_b1));
  return num::linear(h, heads.domain_w2, heads.domain_b2);
}

Features forward(const Model& m, const ModelVars& vars, Var raw) {
  Features f;
  f.x0 = encode(raw, vars.encoder);
  const Index steps = m.config().cascade_steps;
  switch (m.config().architecture) {
    case Architecture::kBaseline:
      f.trace.r_e = f.x0;
      f.trace.r_d = f.x0;
      break;
    case Architecture::kSequential:
      f.trace = cascade_forward(f.x0, vars.lds.front(), steps);
      break;
    case Architecture::kParallel:
      f.trace = parallel_forward(f.x0, vars.lds);
      break;
    case Architecture::kSingle:
      f.trace = single_transform_forward(f.x0, *vars.single, steps);
      break;
  }
  return f;
}

// --- checkpoints -------------------------------------------------------------

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kPayload = "params.bin";

json config_json(const ModelConfig& c) {
  return json{{"raw_dim", c.raw_dim},
              {"d", c.d},
              {"J", c.cascade_steps},
              {"architecture", std::string(to_string(c.architecture))},
              {"num_expr", c.num_expr},
              {"num_domains", c.num_domains},
              {"prelu_init", c.prelu_init},
              {"transform_init_noise", c.transform_init_noise},
              {"seed", c.seed}};
}

void append_le(std::string& out, Real v) {
  auto bits = std::bit_cast<std::conditional_t<sizeof(Real) == 8, std::uint64_t, std::uint32_t>>(v);
  for (std::size_t b = 0; b < sizeof(Real); ++b) {
    out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
}

Real read_le(const unsigned char* p) {
  using Bits = std::conditional_t<sizeof(Real) == 8, std::uint64_t, std::uint32_t>;
  Bits bits = 0;
  for (std::size_t b = 0; b < sizeof(Real); ++b) bits |= static_cast<Bits>(p[b]) << (8 * b);
  return std::bit_cast<Real>(bits);
}

std::string payload_bytes(const Model& m) {
  std::string out;
  out.reserve(m.parameter_count() * sizeof(Real));
  for (const auto& p : m.params()) {
    for (Index k = 0; k < p.value.size(); ++k) append_le(out, p.value.data()[k]);
  }
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t model_hash(const Model& m) {
  const std::string cfg = config_json(m.config()).dump();
  return fnv1a(payload_bytes(m), fnv1a(cfg));
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  const Model& m = ckpt.model;
  json params = json::array();
  std::size_t offset = 0;
  for (const auto& p : m.params()) {
    params.push_back({{"name", p.name},
                      {"shape", {p.value.rows(), p.value.cols()}},
                      {"dtype", num::real_dtype()},
                      {"offset", offset}});
    offset += static_cast<std::size_t>(p.value.size()) * sizeof(Real);
  }
  const std::string payload = payload_bytes(m);
  json manifest{{"format", "cdnet-checkpoint"},
                {"version", 1},
                {"dtype", num::real_dtype()},
                {"byte_order", "little"},
                {"variant", ckpt.variant},
                {"stage", ckpt.stage},
                {"config", config_json(m.config())},
                {"params", params},
                {"payload_bytes", payload.size()},
                {"hash", hash_hex(model_hash(m))}};
  {
    std::ofstream out(dir / kManifest, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / kManifest).string());
    out << manifest.dump(2) << '\n';
  }
  std::ofstream out(dir / kPayload, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / kPayload).string());
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("short write to " + (dir / kPayload).string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream min(dir / kManifest);
  if (!min) throw IoError("checkpoint manifest not found: " + (dir / kManifest).string());
  json manifest;
  try {
    manifest = json::parse(min);
  } catch (const json::exception& e) {
    throw ConfigError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  try {
    if (manifest.at("format") != "cdnet-checkpoint") throw ConfigError("not a cdnet checkpoint");
    if (manifest.at("dtype") != num::real_dtype()) {
      throw ConfigError("checkpoint dtype " + manifest.at("dtype").get<std::string>() +
                        " does not match build dtype " + num::real_dtype());
    }
    const json& c = manifest.at("config");
    ModelConfig cfg;
    cfg.raw_dim = c.at("raw_dim").get<Index>();
    cfg.d = c.at("d").get<Index>();
    cfg.cascade_steps = c.at("J").get<Index>();
    cfg.architecture = architecture_from_string(c.at("architecture").get<std::string>());
    cfg.num_expr = c.at("num_expr").get<int>();
    cfg.num_domains = c.at("num_domains").get<int>();
    cfg.prelu_init = c.at("prelu_init").get<Real>();
    cfg.transform_init_noise = c.at("transform_init_noise").get<Real>();
    cfg.seed = c.at("seed").get<std::uint64_t>();
    Checkpoint ckpt{Model::zeros(cfg), manifest.value("variant", ""), manifest.value("stage", "")};

    std::ifstream pin(dir / kPayload, std::ios::binary);
    if (!pin) throw IoError("checkpoint payload not found: " + (dir / kPayload).string());
    std::string payload((std::istreambuf_iterator<char>(pin)), std::istreambuf_iterator<char>());
    if (payload.size() != manifest.at("payload_bytes").get<std::size_t>()) {
      throw ConfigError("checkpoint payload size does not match manifest");
    }
    const json& entries = manifest.at("params");
    if (entries.size() != ckpt.model.params().size()) {
      throw ConfigError("checkpoint lists " + std::to_string(entries.size()) +
                        " parameters, config implies " +
                        std::to_string(ckpt.model.params().size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
      Parameter& p = ckpt.model.params()[i];
      const json& e = entries[i];
      if (e.at("name") != p.name) {
        throw ConfigError("checkpoint parameter " + e.at("name").get<std::string>() +
                          " where " + p.name + " was expected");
      }
      const Index rows = e.at("shape")[0].get<Index>();
      const Index cols = e.at("shape")[1].get<Index>();
      if (rows != p.value.rows() || cols != p.value.cols()) {
        throw ConfigError("checkpoint shape mismatch for " + p.name);
      }
      const std::size_t off = e.at("offset").get<std::size_t>();
      const std::size_t bytes = static_cast<std::size_t>(p.value.size()) * sizeof(Real);
      if (off + bytes > payload.size()) throw ConfigError("checkpoint offset out of range for " + p.name);
      const auto* base = reinterpret_cast<const unsigned char*>(payload.data()) + off;
      for (Index k = 0; k < p.value.size(); ++k) {
        p.value.data()[k] = read_le(base + static_cast<std::size_t>(k) * sizeof(Real));
      }
    }
    ckpt.model.zero_grad();
    return ckpt;
  } catch (const json::exception& e) {
    throw ConfigError("malformed checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace cdnet::model
