#pragma once

#include <string>
#include <utility>
#include <vector>

#include "chronofuse/optim.hpp"
#include "chronofuse/tensor.hpp"

namespace chronofuse {

// CFCK parameter checkpoint.
//
// Layout, all little-endian:
//   magic   4 bytes  "CFCK"
//   version u32      currently 1
//   count   u32      number of named entries
// then per entry:
//   name_len u32, name bytes (UTF-8, no terminator)
//   rank     u32
//   extents  rank x u64
//   values   f64 x product(extents), row-major
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& entries);
void save_checkpoint(const std::string& path, const ParamRegistry& registry);

// Reads every entry. Malformed or truncated files raise DataError.
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

// Strict restore: the file and the registry must hold exactly the same
// names with matching shapes; values are copied in place (requires_grad
// flags are left as the registry has them).
void load_into_registry(const std::string& path, ParamRegistry& registry);

}  // namespace chronofuse
