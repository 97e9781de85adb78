#pragma once

#include <array>
#include <optional>
#include <vector>

#include "crcl/numerics.hpp"

namespace crcl {

// Height x width x channels; present only for image-shaped inputs, and the
// trigger for weak augmentation during training.
using ImageShape = std::array<int, 3>;

struct TaskData {
  Mat inputs;               // rows = samples
  std::vector<int> labels;  // global class ids
  std::optional<ImageShape> image_shape;

  Eigen::Index size() const { return inputs.rows(); }
};

}  // namespace crcl
