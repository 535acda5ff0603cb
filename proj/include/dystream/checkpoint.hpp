#pragma once

// "DYST" checkpoint container: u16 version, a key=value config block, and a
// table of named f32 tensors. Saving rounds the live parameters to float
// first, so the model in memory and the one loaded back are bitwise equal.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dystream/config.hpp"
#include "dystream/encoder.hpp"
#include "dystream/generator.hpp"

namespace dystream {

inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointData {
  KeyValues config;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const KeyValues& config, ParamStore& store);
CheckpointData load_checkpoint(const std::filesystem::path& path);
// Copies every tensor into the same-named parameter. The name sets and shapes
// must match exactly.
void apply_checkpoint(const CheckpointData& data, ParamStore& store);

void save_model(const std::filesystem::path& path, MotionModel& model);
std::unique_ptr<MotionModel> load_model(const std::filesystem::path& path);

void save_encoder(const std::filesystem::path& path, EncoderModel& encoder);
std::unique_ptr<EncoderModel> load_encoder(const std::filesystem::path& path);

}  // namespace dystream
