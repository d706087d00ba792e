#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "scedit/nn.hpp"
#include "scedit/tuners.hpp"
#include "scedit/unet.hpp"

namespace scedit {

// File layout (little endian):
//   "SCED" | u32 version | u32 entry count
//   per entry: u32 name length | name bytes | u8 dtype (0 = f32, 1 = f64)
//              | u8 rank | u32 dims[rank] | u8 partition | payload
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointScope { kAll, kTunerOnly };

struct CheckpointEntry {
  std::string name;
  Partition partition = Partition::kBackbone;
  Tensor tensor;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

// Copies entry values into `targets`. Names, order and shapes must match one
// to one, otherwise CheckpointErrc::kLayoutMismatch names the first offending
// entry.
void assign_entries(const std::vector<CheckpointEntry>& entries, const ParamList& targets);

// kAll writes backbone and tuner parameters; kTunerOnly writes tuner and hint
// parameters only.
void save_checkpoint(const std::filesystem::path& path, const UNet& unet, const TunerStack* stack,
                     CheckpointScope scope);

// Loads backbone entries into `unet` (when present) and tuner/hint entries
// into `stack`. Entries of a partition the caller did not supply a target for
// raise kLayoutMismatch.
void load_checkpoint(const std::filesystem::path& path, UNet* unet, TunerStack* stack);

}  // namespace scedit
