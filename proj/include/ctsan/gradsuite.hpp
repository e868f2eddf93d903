#pragma once

// Gradient checks of every task loss on a tiny model and two random clips.

#include <cstdint>

#include "ctsan/gradcheck.hpp"
#include "ctsan/models.hpp"

namespace ctsan {

// D' = 8, hidden 8, K = 3, three 4x4 frames, vocabulary 20, dropout off.
ModelConfig tiny_config(Task task);

// Builds the tiny model for `task` and checks the gradient of its full loss,
// regularisers and concept term included, for every parameter.
GradCheckReport check_task_gradients(Task task, std::uint64_t seed = 1);

}  // namespace ctsan
