// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "config.hpp"
#include "numerics.hpp"

namespace cdnet::diagnostics {

// Finite-difference check of the full fine-tuning loss on one small episode.
// The teacher is the student with a perturbed decomposition block so that the
// regularization term and its gradient are non-trivial.
num::GradCheckReport gradcheck_finetune(const config::GradCheckConfig& cfg, std::uint64_t seed,
                                        num::Real floor = 1e-4);

}  // namespace cdnet::diagnostics
