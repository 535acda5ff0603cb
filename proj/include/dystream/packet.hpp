#pragma once

#include <cstddef>

#include "dystream/tensor.hpp"

namespace dystream {

// One chunk of dyadic audio features as it arrives on the wire.
struct StreamPacket {
  double arrival_s = 0.0;
  double duration_ms = 0.0;
  std::size_t first_frame = 0;  // audio-frame index of the first row
  Tensor speaker;               // frames x audio_feature_dim
  Tensor listener;
};

}  // namespace dystream
