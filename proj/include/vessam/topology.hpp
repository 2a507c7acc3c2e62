#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "vessam/prompts.hpp"

namespace vessam {

enum class NodeKind { Bifurcation, Midpoint };

struct GraphNode {
  Point point;
  NodeKind kind;
  double tangent_x = 0.0;  // zero for bifurcations
  double tangent_y = 0.0;
};

// Undirected prompt graph: nodes are bifurcation and midpoint prompts,
// edges connect each segment midpoint to the junction clusters its segment
// extremities touch. Edges stored as (i, j) with i < j, no duplicates.
struct VesselGraph {
  std::vector<GraphNode> nodes;
  std::vector<std::pair<int, int>> edges;

  std::vector<int> degrees() const;
};

// Node order: bifurcations (sorted by (y,x)) then midpoints (sorted by (y,x)).
// Raises InconsistentPromptSet when prompts do not lie on the skeleton.
VesselGraph build_graph(const PromptSet& ps);

// A_hat = D^{-1/2} (A + I) D^{-1/2}, dense row-major n*n. Raises EmptyGraph
// for n = 0.
std::vector<double> normalized_adjacency(const VesselGraph& g);

// JSON node/edge list ({"nodes": [...], "edges": [...]}) and DOT text.
std::string graph_to_json(const VesselGraph& g);
std::string graph_to_dot(const VesselGraph& g);

}  // namespace vessam
