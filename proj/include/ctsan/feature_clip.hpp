#pragma once

#include <string>
#include <vector>

#include "ctsan/tensor.hpp"

namespace ctsan {

// One video as a sequence of raw spatial feature grids, each [H, W, C].
struct FeatureClip {
  std::string id;
  std::vector<Tensor> frames;

  std::size_t height() const { return frames.empty() ? 0 : frames.front().dim(0); }
  std::size_t width() const { return frames.empty() ? 0 : frames.front().dim(1); }
  std::size_t channels() const { return frames.empty() ? 0 : frames.front().dim(2); }
};

}  // namespace ctsan
