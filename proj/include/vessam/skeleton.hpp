#pragma once

#include "vessam/raster.hpp"

namespace vessam {

// Zhang-Suen two-subiteration thinning. Deterministic; the result is a
// subset of the input foreground and keeps its 8-connected component count
// on vessel-like inputs. Sweeps until a full two-pass sweep deletes nothing;
// exceeding width+height sweeps raises InternalLimit (unreachable on valid
// inputs, signals a logic bug).
BinaryMask skeletonize(const BinaryMask& mask);

// True iff no 2x2 window is fully foreground.
bool is_thin(const BinaryMask& mask);

}  // namespace vessam
