// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "numerics.hpp"

namespace cdnet::model {

using num::Index;
using num::Matrix;
using num::Parameter;
using num::Real;
using num::Tape;
using num::Var;

// How the encoder feature is split into r_e and r_d. Fixed at construction.
enum class Architecture {
  kBaseline,    // no decomposition: r_e = x0
  kSingle,      // fused affine+PReLU block cascaded with shared weights
  kParallel,    // J independent LD modules all fed x0
  kSequential,  // one shared LD module cascaded J times
};

std::string_view to_string(Architecture a);
Architecture architecture_from_string(std::string_view s);

struct ModelConfig {
  Index raw_dim = 32;
  Index d = 64;
  Index cascade_steps = 3;  // J
  Architecture architecture = Architecture::kSequential;
  int num_expr = 7;     // C_e
  int num_domains = 5;  // C_d
  Real prelu_init = 0.25;
  Real transform_init_noise = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

// Parameter indices into Model::params().
struct DecompositionIds {
  int transform = -1;  // P, d x d, no bias
  int slope = -1;      // PReLU slope, 1 x 1
};
struct WeightingIds {
  int w1 = -1, b1 = -1, w2 = -1, b2 = -1, w3 = -1, b3 = -1;
};
struct LdIds {
  DecompositionIds decomposition;
  WeightingIds weighting;
};
struct EncoderIds {
  int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};
struct SingleIds {
  int w = -1, b = -1, slope = -1;
};
struct HeadIds {
  int expr_w = -1, expr_b = -1;
  int domain_w1 = -1, domain_b1 = -1, domain_w2 = -1, domain_b2 = -1;
};

// Tape handles for one binding of the parameters.
struct DecompositionVars {
  Var transform, slope;
};
struct WeightingVars {
  Var w1, b1, w2, b2, w3, b3;
};
struct LdVars {
  DecompositionVars decomposition;
  WeightingVars weighting;
};
struct EncoderVars {
  Var w1, b1, w2, b2;
};
struct SingleVars {
  Var w, b, slope;
};
struct HeadVars {
  Var expr_w, expr_b, domain_w1, domain_b1, domain_w2, domain_b2;
};
struct ModelVars {
  EncoderVars encoder;
  std::vector<LdVars> lds;
  std::optional<SingleVars> single;
  HeadVars heads;
};

// Per-forward record of the decomposition. Rows are samples.
// For the single-transform variant `weights` is empty and `prototypes`
// holds the fused outputs f_i.
struct CascadeTrace {
  std::vector<Var> inputs;
  std::vector<Var> prototypes;
  std::vector<Var> weights;
  Var r_e;
  Var r_d;
};

struct LdOutput {
  Var f;
  Var p;
  Var alpha;  // n x 1
};

class Model {
 public:
  // Kaiming-uniform affine layers, zero biases, P = I + noise.
  explicit Model(ModelConfig cfg);

  // Every parameter zero, so all samples map to the same feature.
  static Model zeros(ModelConfig cfg);

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] std::vector<Parameter>& params() { return params_; }
  [[nodiscard]] const std::vector<Parameter>& params() const { return params_; }
  [[nodiscard]] Parameter& param(int id) { return params_[static_cast<std::size_t>(id)]; }
  [[nodiscard]] const Parameter& param(int id) const { return params_[static_cast<std::size_t>(id)]; }
  [[nodiscard]] const Parameter* find(std::string_view name) const;

  [[nodiscard]] const EncoderIds& encoder_ids() const { return encoder_; }
  // One entry for the sequential cascade, J for the parallel variant.
  [[nodiscard]] const std::vector<LdIds>& ld_sets() const { return lds_; }
  [[nodiscard]] const std::optional<SingleIds>& single_ids() const { return single_; }
  [[nodiscard]] const HeadIds& head_ids() const { return heads_; }

  // Indices of the decomposition-block parameters of every LD set.
  [[nodiscard]] std::vector<int> decomposition_param_ids() const;
  [[nodiscard]] std::size_t parameter_count() const;

  // Registers every parameter on the tape. Frozen bindings are constants and
  // receive no gradient.
  ModelVars bind(Tape& tape);
  ModelVars bind_frozen(Tape& tape) const;

  void zero_grad();

 private:
  Model(ModelConfig cfg, bool random_init);
  int add_param(std::string name, Matrix value);

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  EncoderIds encoder_;
  std::vector<LdIds> lds_;
  std::optional<SingleIds> single_;
  HeadIds heads_;
};

// x0 = W2 relu(W1 raw + b1) + b2
Var encode(Var raw, const EncoderVars& ep);
// p = PReLU(P x)
Var decompose(Var x, const DecompositionVars& dp);
// alpha = W([x, p]); 2d -> d -> d/2 -> 1 with ReLU hiddens and linear output.
Var weigh(Var x, Var p, const WeightingVars& wp);
LdOutput ld_forward(Var x, const LdVars& ld);
// Shared LD module applied J times to successive residuals.
CascadeTrace cascade_forward(Var x0, const LdVars& ld, Index steps);
// Fused affine d -> d + PReLU producing the weighted prototype directly.
CascadeTrace single_transform_forward(Var x0, const SingleVars& sp, Index steps);
// Independent LD modules all consuming x0.
CascadeTrace parallel_forward(Var x0, std::span<const LdVars> lds);
Var expr_logits(Var r_e, const HeadVars& heads);
Var domain_logits(Var r_d, const HeadVars& heads);

struct Features {
  Var x0;
  CascadeTrace trace;  // for kBaseline: r_e = r_d = x0 and no steps
};

// Encoder followed by the architecture's decomposition.
Features forward(const Model& m, const ModelVars& vars, Var raw);

// --- checkpoints -----------------------------------------------------------
// A checkpoint is a directory holding manifest.json (names, shapes, dtype,
// byte offsets and the model config) and params.bin (little-endian payload).

struct Checkpoint {
  Model model;
  std::string variant;  // free-form tag, e.g. "cdnet"
  std::string stage;    // "init", "pretrain" or "finetune"
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// FNV-1a over config and parameter bytes.
std::uint64_t model_hash(const Model& m);
std::string hash_hex(std::uint64_t h);

}  // namespace cdnet::model
