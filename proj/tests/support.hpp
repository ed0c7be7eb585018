// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the unit tests. The ref_* functions are deliberately
// naive loop implementations over std::vector so they share no code with the
// library's Eigen/tape path.

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unistd.h>
#include <filesystem>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

#include "numerics.hpp"

namespace cdnet::testing {

using num::Index;
using num::Matrix;
using num::Real;

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major: Mat[r][c]

inline Matrix mat(Index rows, Index cols, std::initializer_list<double> values) {
  Matrix m(rows, cols);
  Index k = 0;
  for (double v : values) m.data()[k++] = static_cast<Real>(v);
  return m;
}

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0, sd);
  Matrix m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<Real>(n(rng));
  return m;
}

inline Mat to_mat(const Matrix& m) {
  Mat out(static_cast<std::size_t>(m.rows()), Vec(static_cast<std::size_t>(m.cols())));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = m(r, c);
  return out;
}

inline double max_abs_diff(const Matrix& a, const Mat& b) {
  double worst = 0;
  for (Index r = 0; r < a.rows(); ++r)
    for (Index c = 0; c < a.cols(); ++c)
      worst = std::max(worst, std::abs(a(r, c) - b[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]));
  return worst;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

// y = x W^T + b for a single row.
inline Vec ref_affine(const Vec& x, const Mat& w, const Vec* b = nullptr) {
  Vec y(w.size(), 0.0);
  for (std::size_t o = 0; o < w.size(); ++o) {
    double acc = b ? (*b)[o] : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += w[o][i] * x[i];
    y[o] = acc;
  }
  return y;
}

inline Vec ref_relu(Vec v) {
  for (double& x : v) x = x > 0 ? x : 0;
  return v;
}

inline Vec ref_prelu(Vec v, double a) {
  for (double& x : v) x = x >= 0 ? x : a * x;
  return v;
}

struct RefLd {
  Mat P;
  double slope = 0.25;
  Mat w1, w2, w3;
  Vec b1, b2, b3;
};

inline RefLd ref_ld_from(const std::vector<num::Parameter>& params, const std::string& prefix) {
  RefLd ld;
  auto get = [&](const std::string& name) -> const Matrix& {
    for (const auto& p : params)
      if (p.name == prefix + name) return p.value;
    throw std::runtime_error("missing parameter " + prefix + name);
  };
  auto row = [](const Matrix& m) { return to_mat(m)[0]; };
  ld.P = to_mat(get(".decomposition.P"));
  ld.slope = get(".decomposition.slope")(0, 0);
  ld.w1 = to_mat(get(".weighting.w1"));
  ld.b1 = row(get(".weighting.b1"));
  ld.w2 = to_mat(get(".weighting.w2"));
  ld.b2 = row(get(".weighting.b2"));
  ld.w3 = to_mat(get(".weighting.w3"));
  ld.b3 = row(get(".weighting.b3"));
  return ld;
}

inline Vec ref_decompose(const Vec& x, const RefLd& ld) { return ref_prelu(ref_affine(x, ld.P), ld.slope); }

inline double ref_alpha(const Vec& x, const Vec& p, const RefLd& ld) {
  Vec xp = x;
  xp.insert(xp.end(), p.begin(), p.end());
  const Vec h1 = ref_relu(ref_affine(xp, ld.w1, &ld.b1));
  const Vec h2 = ref_relu(ref_affine(h1, ld.w2, &ld.b2));
  return ref_affine(h2, ld.w3, &ld.b3)[0];
}

// input_1 = x0; f_i = alpha_i p_i; input_{i+1} = input_i - f_i;
// r_e = sum f_i; r_d = x0 - r_e. `lds` has one entry per step.
struct RefTrace {
  Vec r_e, r_d;
  std::vector<Vec> inputs, prototypes;
  std::vector<double> alphas;
};

inline RefTrace ref_cascade(const Vec& x0, const std::vector<const RefLd*>& steps, bool parallel) {
  RefTrace t;
  t.r_e.assign(x0.size(), 0.0);
  Vec input = x0;
  for (const RefLd* ld : steps) {
    const Vec& in = parallel ? x0 : input;
    t.inputs.push_back(in);
    const Vec p = ref_decompose(in, *ld);
    const double a = ref_alpha(in, p, *ld);
    t.prototypes.push_back(p);
    t.alphas.push_back(a);
    for (std::size_t k = 0; k < x0.size(); ++k) {
      t.r_e[k] += a * p[k];
      input[k] -= a * p[k];
    }
  }
  t.r_d.resize(x0.size());
  for (std::size_t k = 0; k < x0.size(); ++k) t.r_d[k] = x0[k] - t.r_e[k];
  return t;
}

inline double ref_log_softmax_ce(const Vec& logits, int label) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double s = 0;
  for (double v : logits) s += std::exp(v - m);
  return -(logits[static_cast<std::size_t>(label)] - m - std::log(s));
}

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("cdnet-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace cdnet::testing
