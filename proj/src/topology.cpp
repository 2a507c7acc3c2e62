#include "vessam/topology.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace vessam {

std::vector<int> VesselGraph::degrees() const {
  std::vector<int> deg(nodes.size(), 0);
  for (auto [i, j] : edges) {
    ++deg[i];
    ++deg[j];
  }
  return deg;
}

VesselGraph build_graph(const PromptSet& ps) {
  const BinaryMask& skel = ps.skeleton;
  for (Point p : ps.bifurcations)
    if (!skel.in_bounds(p) || !skel.at(p))
      raise(ErrorCode::InconsistentPromptSet, "bifurcation not on the skeleton");
  for (const Midpoint& m : ps.midpoints)
    if (!skel.in_bounds(m.point) || !skel.at(m.point))
      raise(ErrorCode::InconsistentPromptSet, "midpoint not on the skeleton");

  VesselGraph g;
  std::vector<Point> bifs = ps.bifurcations;
  std::sort(bifs.begin(), bifs.end());
  std::vector<Midpoint> mids = ps.midpoints;
  std::sort(mids.begin(), mids.end(),
            [](const Midpoint& a, const Midpoint& b) { return a.point < b.point; });
  for (Point p : bifs) g.nodes.push_back({p, NodeKind::Bifurcation, 0.0, 0.0});
  for (const Midpoint& m : mids)
    g.nodes.push_back({m.point, NodeKind::Midpoint, m.tangent_x, m.tangent_y});

  if (bifs.empty()) return g;  // nothing to connect to

  // Clusters and the cluster id under each pixel.
  auto clusters = junction_clusters(skel);
  std::map<Point, int> cluster_of_pixel;
  for (size_t c = 0; c < clusters.size(); ++c)
    for (Point p : clusters[c]) cluster_of_pixel[p] = int(c);

  // Each cluster must hold exactly one of the prompt set's bifurcations;
  // that bifurcation is the cluster's graph node.
  std::map<Point, int> bif_node;
  for (size_t i = 0; i < bifs.size(); ++i) bif_node[bifs[i]] = int(i);
  std::vector<int> cluster_node(clusters.size(), -1);
  for (Point p : bifs) {
    auto it = cluster_of_pixel.find(p);
    if (it == cluster_of_pixel.end())
      raise(ErrorCode::InconsistentPromptSet, "bifurcation is not a junction pixel");
    if (cluster_node[it->second] >= 0)
      raise(ErrorCode::InconsistentPromptSet, "two bifurcations share one junction cluster");
    cluster_node[it->second] = bif_node[p];
  }

  std::map<Point, int> mid_node;
  for (size_t i = 0; i < mids.size(); ++i)
    mid_node[mids[i].point] = int(bifs.size() + i);

  auto segments = decompose_segments(skel, ps.bifurcations);
  std::set<std::pair<int, int>> edge_set;
  for (const Segment& seg : segments) {
    Point mp = segment_midpoint(seg).point;
    auto mit = mid_node.find(mp);
    if (mit == mid_node.end())
      raise(ErrorCode::InconsistentPromptSet, "segment midpoint missing from prompt set");
    int mnode = mit->second;
    for (Point end : {seg.path.front(), seg.path.back()}) {
      for (auto [dx, dy] : kNeighbor8) {
        Point q{end.x + dx, end.y + dy};
        auto cit = cluster_of_pixel.find(q);
        if (cit == cluster_of_pixel.end()) continue;
        int cnode = cluster_node[cit->second];
        if (cnode < 0)
          raise(ErrorCode::InconsistentPromptSet, "junction cluster without a bifurcation");
        edge_set.insert({std::min(cnode, mnode), std::max(cnode, mnode)});
      }
    }
  }
  g.edges.assign(edge_set.begin(), edge_set.end());
  return g;
}

std::vector<double> normalized_adjacency(const VesselGraph& g) {
  const size_t n = g.nodes.size();
  if (n == 0) raise(ErrorCode::EmptyGraph, "normalized adjacency of an empty graph");
  std::vector<double> a(n * n, 0.0);
  for (size_t i = 0; i < n; ++i) a[i * n + i] = 1.0;  // self-loops
  for (auto [i, j] : g.edges) {
    a[size_t(i) * n + j] = 1.0;
    a[size_t(j) * n + i] = 1.0;
  }
  std::vector<double> inv_sqrt_deg(n);
  for (size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (size_t j = 0; j < n; ++j) d += a[i * n + j];
    inv_sqrt_deg[i] = 1.0 / std::sqrt(d);
  }
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
  return a;
}

std::string graph_to_json(const VesselGraph& g) {
  nlohmann::ordered_json doc;
  auto nodes = nlohmann::ordered_json::array();
  for (const GraphNode& n : g.nodes) {
    nlohmann::ordered_json jn;
    jn["p"] = {n.point.x, n.point.y};
    jn["kind"] = n.kind == NodeKind::Bifurcation ? "bifurcation" : "midpoint";
    jn["t"] = {n.tangent_x, n.tangent_y};
    nodes.push_back(std::move(jn));
  }
  doc["nodes"] = std::move(nodes);
  auto edges = nlohmann::ordered_json::array();
  for (auto [i, j] : g.edges) edges.push_back({i, j});
  doc["edges"] = std::move(edges);
  return doc.dump() + "\n";
}

std::string graph_to_dot(const VesselGraph& g) {
  std::ostringstream out;
  out << "graph vessels {\n";
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const GraphNode& n = g.nodes[i];
    out << "  n" << i << " [label=\""
        << (n.kind == NodeKind::Bifurcation ? "B" : "M") << "(" << n.point.x
        << "," << n.point.y << ")\"];\n";
  }
  for (auto [i, j] : g.edges) out << "  n" << i << " -- n" << j << ";\n";
  out << "}\n";
  return out.str();
}

}  // namespace vessam
