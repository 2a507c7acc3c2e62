#pragma once

#include <vector>

#include "vessam/raster.hpp"

namespace vessam {

// One skeleton branch traced endpoint/junction to endpoint/junction.
// Consecutive path points are 8-adjacent and all points are distinct.
struct Segment {
  std::vector<Point> path;
};

struct Midpoint {
  Point point;
  double tangent_x = 0.0;  // unit vector, or (0,0) for length-1 segments
  double tangent_y = 0.0;

  friend bool operator==(const Midpoint& a, const Midpoint& b) {
    return a.point == b.point && a.tangent_x == b.tangent_x &&
           a.tangent_y == b.tangent_y;
  }
};

struct PromptSet {
  std::vector<Point> bifurcations;
  std::vector<Midpoint> midpoints;
  BinaryMask skeleton;
  int width = 0;  // source mask dims; equal to skeleton dims
  int height = 0;

  friend bool operator==(const PromptSet& a, const PromptSet& b) {
    return a.bifurcations == b.bifurcations && a.midpoints == b.midpoints &&
           a.skeleton == b.skeleton && a.width == b.width && a.height == b.height;
  }
};

// Maximal 8-connected groups of junction pixels (skeleton pixels with >= 3
// skeleton 8-neighbors). Cluster members and the cluster list are sorted by
// (y, x). Raises NotThin if the input fails is_thin.
std::vector<std::vector<Point>> junction_clusters(const BinaryMask& skeleton);

// Representative per cluster: the member closest to the cluster centroid,
// ties to the smallest (y, x). Result sorted by (y, x).
std::vector<Point> detect_bifurcations(const BinaryMask& skeleton);

// Removes every junction-cluster pixel, then traces each remaining
// 8-connected component into one ordered path. Simple cycles are cut at
// their smallest (y, x) pixel. Segments sorted by starting point.
std::vector<Segment> decompose_segments(const BinaryMask& skeleton,
                                        const std::vector<Point>& junctions);

// Arc-length middle pixel (lower median for even lengths) with a unit
// central-difference tangent; zero tangent for length-1 segments.
Midpoint segment_midpoint(const Segment& segment);

// skeletonize -> detect_bifurcations -> decompose_segments -> midpoints.
// An empty mask yields an empty PromptSet (not an error).
PromptSet generate_prompt_set(const BinaryMask& mask);

// JSON document: version "1", dims, bifurcations, midpoints, skeleton_rle.
std::vector<uint8_t> serialize_prompts(const PromptSet& ps);
PromptSet deserialize_prompts(const std::vector<uint8_t>& bytes);

}  // namespace vessam
