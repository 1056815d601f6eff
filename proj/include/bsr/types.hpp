#pragma once

#include <cstdint>
#include <vector>

namespace bsr {

// Per-layer truncation ranks, one entry per compressible layer, each in
// [1, min(m_l, n_l)].
using RankVector = std::vector<int64_t>;

} // namespace bsr
