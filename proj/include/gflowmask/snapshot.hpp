#pragma once

#include <string>
#include <vector>

#include "gflowmask/autodiff.hpp"

namespace gfm {

// Snapshot file: magic "GFMK1", u64 tensor count, then per tensor:
// u32 name length, name bytes, u32 rank, u64 extents, little-endian f64 data.
// Round-trips bit-exactly; loading requires the exact same parameter set
// (names and shapes) as was saved.
void save_snapshot(const std::string& path, const std::vector<Parameter*>& params);
void load_snapshot(const std::string& path, const std::vector<Parameter*>& params);

} // namespace gfm
