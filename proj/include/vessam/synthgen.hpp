#pragma once

#include <cstdint>
#include <vector>

#include "vessam/raster.hpp"

namespace vessam {

struct TreeSpec {
  uint64_t seed = 0;
  int size = 64;          // square canvas, >= 16
  int branch_events = 0;  // number of binary splits
  int width_px = 3;       // stroke width, 1..5
  double wiggle = 0.25;   // curvature, [0, 1]
};

struct TreeTruth {
  std::vector<Point> branch_points;
  BinaryMask centerline;
};

struct GeneratedTree {
  BinaryMask mask;
  TreeTruth truth;
};

// Deterministic random-walk vessel tree: integer fixed-point positions and a
// frozen 1/256-turn direction table, so equal specs give bit-identical masks
// on every platform. The mask is a single 8-connected component and the
// centerline is a subset of it.
GeneratedTree generate_vessel_tree(const TreeSpec& spec);

}  // namespace vessam
