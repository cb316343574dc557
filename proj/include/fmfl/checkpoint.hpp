#pragma once

// Binary checkpoint layout (all integers and floats little-endian):
//
//   "FMFL"                      4 bytes magic
//   u32 version                 currently 1
//   u32 mode                    0 = vector, 1 = token
//   u32 input_dim
//   u32 vocab_size
//   u32 num_classes
//   u32 n_hidden, then n_hidden x u32 hidden sizes
//   u32 extra_pairs
//   u32 extra_width
//   u64 parameter count
//   f64 x count                 flatten(params)

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>

#include "fmfl/nn.hpp"

namespace fmfl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& os, const ArchSpec& arch, const ParamSet& params);
std::pair<ArchSpec, ParamSet> read_checkpoint(std::istream& is);

void save_checkpoint(const std::string& path, const ArchSpec& arch, const ParamSet& params);
std::pair<ArchSpec, ParamSet> load_checkpoint(const std::string& path);

}  // namespace fmfl
