#pragma once

#include <cstdint>
#include <vector>

#include "m2fn/grad_check.hpp"
#include "m2fn/model.hpp"
#include "m2fn/train.hpp"

namespace m2fn {

// A two-sample micro problem for whole-model gradient checks: 8x8 images,
// two conv stages, dim_aux 4, unit-scale loss weights.
struct MicroProblem {
  ModelConfig config;
  Dataset data;
};

MicroProblem micro_problem(HeadKind head, Toggles toggles, std::uint64_t seed);

// Moves the model to a generic point for finite differences: CBN delta layers
// get small random values and each attention hidden unit's bias is set so the
// unit is active on about half of the micro-batch positions.
void prepare_for_grad_check(Model& model, const Dataset& data, std::uint64_t seed);

// Every differentiable primitive under a seeded random projection, then the
// full forward + loss for each ablation row and each loss kind.
std::vector<GradCheckEntry> gradient_suite(std::uint64_t seed = 0);

}  // namespace m2fn
