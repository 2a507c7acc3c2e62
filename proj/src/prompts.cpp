#include "vessam/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <set>

#include "json.hpp"
#include "vessam/skeleton.hpp"

namespace vessam {

namespace {

bool is_junction(const BinaryMask& skel, Point p) {
  return skel.at(p) && neighbors8(skel, p).count >= 3;
}

}  // namespace

std::vector<std::vector<Point>> junction_clusters(const BinaryMask& skeleton) {
  if (!is_thin(skeleton))
    raise(ErrorCode::NotThin, "junction detection requires a thin skeleton");
  const int w = skeleton.width(), h = skeleton.height();
  std::vector<uint8_t> junction(size_t(w) * h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (is_junction(skeleton, {x, y})) junction[size_t(y) * w + x] = 1;

  std::vector<std::vector<Point>> clusters;
  std::vector<uint8_t> seen(size_t(w) * h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      size_t idx = size_t(y) * w + x;
      if (!junction[idx] || seen[idx]) continue;
      std::vector<Point> cluster;
      std::deque<Point> queue{{x, y}};
      seen[idx] = 1;
      while (!queue.empty()) {
        Point p = queue.front();
        queue.pop_front();
        cluster.push_back(p);
        for (auto [dx, dy] : kNeighbor8) {
          int nx = p.x + dx, ny = p.y + dy;
          if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
          size_t nidx = size_t(ny) * w + nx;
          if (junction[nidx] && !seen[nidx]) {
            seen[nidx] = 1;
            queue.push_back({nx, ny});
          }
        }
      }
      std::sort(cluster.begin(), cluster.end());
      clusters.push_back(std::move(cluster));
    }
  }
  std::sort(clusters.begin(), clusters.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return clusters;
}

std::vector<Point> detect_bifurcations(const BinaryMask& skeleton) {
  std::vector<Point> reps;
  for (const auto& cluster : junction_clusters(skeleton)) {
    // Representative: member closest to the centroid, ties to smallest (y,x).
    // Compare n^2 * dist^2 in integers so ties are exact.
    long long n = (long long)cluster.size(), sx = 0, sy = 0;
    for (Point p : cluster) {
      sx += p.x;
      sy += p.y;
    }
    Point best = cluster.front();
    long long best_d2 = -1;
    for (Point p : cluster) {
      long long ddx = n * p.x - sx, ddy = n * p.y - sy;
      long long d2 = ddx * ddx + ddy * ddy;
      if (best_d2 < 0 || d2 < best_d2) {
        best_d2 = d2;
        best = p;
      }
    }
    reps.push_back(best);
  }
  std::sort(reps.begin(), reps.end());
  return reps;
}

namespace {

std::vector<Point> component_neighbors(const BinaryMask& m, Point p) {
  std::vector<Point> out;
  for (auto [dx, dy] : kNeighbor8) {
    int nx = p.x + dx, ny = p.y + dy;
    if (nx >= 0 && nx < m.width() && ny >= 0 && ny < m.height() && m.at(nx, ny))
      out.push_back({nx, ny});
  }
  return out;
}

Segment trace_component(const BinaryMask& residual, const std::vector<Point>& pixels) {
  std::vector<Point> extremities;
  for (Point p : pixels) {
    size_t deg = component_neighbors(residual, p).size();
    if (deg >= 3)
      raise(ErrorCode::BranchAmbiguity,
            "residual pixel with >= 3 neighbors after junction removal");
    if (deg <= 1) extremities.push_back(p);
  }

  Point start;
  if (extremities.empty()) {
    // Simple cycle: cut at the smallest (y,x) pixel.
    start = *std::min_element(pixels.begin(), pixels.end());
  } else {
    start = *std::min_element(extremities.begin(), extremities.end());
  }

  Segment seg;
  std::set<Point> visited;
  Point cur = start;
  seg.path.push_back(cur);
  visited.insert(cur);
  while (true) {
    auto nbrs = component_neighbors(residual, cur);
    std::vector<Point> next;
    for (Point n : nbrs)
      if (!visited.count(n)) next.push_back(n);
    if (next.empty()) break;
    // At the cycle cut point both directions are open; take the smaller one.
    Point step = *std::min_element(next.begin(), next.end());
    seg.path.push_back(step);
    visited.insert(step);
    cur = step;
  }
  return seg;
}

}  // namespace

std::vector<Segment> decompose_segments(const BinaryMask& skeleton,
                                        const std::vector<Point>& junctions) {
  for (Point j : junctions) {
    if (!skeleton.in_bounds(j))
      raise(ErrorCode::PointOutOfBounds, "junction outside the skeleton raster");
    if (!skeleton.at(j))
      raise(ErrorCode::InconsistentPromptSet, "junction not on a skeleton pixel");
  }
  auto clusters = junction_clusters(skeleton);  // NotThin propagates

  BinaryMask residual = skeleton;
  for (const auto& cluster : clusters)
    for (Point p : cluster) residual.set(p, 0);

  Labeling labeled = connected_components(residual, 8);
  std::vector<std::vector<Point>> components(labeled.count);
  for (int y = 0; y < residual.height(); ++y)
    for (int x = 0; x < residual.width(); ++x) {
      int l = labeled.labels[size_t(y) * residual.width() + x];
      if (l > 0) components[l - 1].push_back({x, y});
    }

  std::vector<Segment> segments;
  segments.reserve(components.size());
  for (const auto& pixels : components)
    segments.push_back(trace_component(residual, pixels));
  std::sort(segments.begin(), segments.end(), [](const Segment& a, const Segment& b) {
    return a.path.front() < b.path.front();
  });
  return segments;
}

Midpoint segment_midpoint(const Segment& segment) {
  const auto& path = segment.path;
  const size_t len = path.size();
  const size_t i = (len - 1) / 2;
  Midpoint mp;
  mp.point = path[i];
  if (len == 1) return mp;
  Point a = path[i == 0 ? 0 : i - 1];
  Point b = path[std::min(i + 1, len - 1)];
  double dx = double(b.x - a.x), dy = double(b.y - a.y);
  double norm = std::sqrt(dx * dx + dy * dy);
  mp.tangent_x = dx / norm;
  mp.tangent_y = dy / norm;
  return mp;
}

PromptSet generate_prompt_set(const BinaryMask& mask) {
  PromptSet ps;
  ps.width = mask.width();
  ps.height = mask.height();
  ps.skeleton = skeletonize(mask);
  ps.bifurcations = detect_bifurcations(ps.skeleton);
  for (const Segment& seg : decompose_segments(ps.skeleton, ps.bifurcations))
    ps.midpoints.push_back(segment_midpoint(seg));
  return ps;
}

namespace {

using json = nlohmann::ordered_json;

json rle_encode(const BinaryMask& m) {
  json runs = json::array();
  const auto& bits = m.bits();
  size_t i = 0;
  while (i < bits.size()) {
    if (!bits[i]) {
      ++i;
      continue;
    }
    size_t start = i;
    while (i < bits.size() && bits[i]) ++i;
    runs.push_back({start, i - start});
  }
  return runs;
}

[[noreturn]] void schema_fail(const std::string& detail) {
  raise(ErrorCode::SchemaViolation, detail);
}

void check_point_in_dims(int x, int y, int w, int h, const char* what) {
  if (x < 0 || x >= w || y < 0 || y >= h)
    raise(ErrorCode::PointOutOfBounds, std::string(what) + " outside dims");
}

}  // namespace

std::vector<uint8_t> serialize_prompts(const PromptSet& ps) {
  json doc;
  doc["version"] = "1";
  doc["dims"] = {ps.width, ps.height};
  json bifs = json::array();
  for (Point p : ps.bifurcations) bifs.push_back({p.x, p.y});
  doc["bifurcations"] = std::move(bifs);
  json mids = json::array();
  for (const Midpoint& m : ps.midpoints) {
    json jm;
    jm["p"] = {m.point.x, m.point.y};
    jm["t"] = {m.tangent_x, m.tangent_y};
    mids.push_back(std::move(jm));
  }
  doc["midpoints"] = std::move(mids);
  doc["skeleton_rle"] = rle_encode(ps.skeleton);
  std::string text = doc.dump();
  text.push_back('\n');
  return std::vector<uint8_t>(text.begin(), text.end());
}

PromptSet deserialize_prompts(const std::vector<uint8_t>& bytes) {
  json doc = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (doc.is_discarded()) schema_fail("prompt document is not valid JSON");
  if (!doc.is_object()) schema_fail("prompt document must be a JSON object");
  for (const char* key : {"version", "dims", "bifurcations", "midpoints", "skeleton_rle"})
    if (!doc.contains(key)) schema_fail(std::string("missing field '") + key + "'");

  if (!doc["version"].is_string()) schema_fail("'version' must be a string");
  if (doc["version"].get<std::string>() != "1")
    raise(ErrorCode::VersionMismatch,
          "unsupported prompt document version '" + doc["version"].get<std::string>() + "'");

  const auto& dims = doc["dims"];
  if (!dims.is_array() || dims.size() != 2 || !dims[0].is_number_integer() ||
      !dims[1].is_number_integer())
    schema_fail("'dims' must be [width, height]");
  int w = dims[0].get<int>(), h = dims[1].get<int>();
  if (w < 1 || h < 1) schema_fail("'dims' must be positive");

  PromptSet ps;
  ps.width = w;
  ps.height = h;

  if (!doc["bifurcations"].is_array()) schema_fail("'bifurcations' must be an array");
  for (const auto& jp : doc["bifurcations"]) {
    if (!jp.is_array() || jp.size() != 2 || !jp[0].is_number_integer() ||
        !jp[1].is_number_integer())
      schema_fail("bifurcation entries must be [x, y]");
    Point p{jp[0].get<int>(), jp[1].get<int>()};
    check_point_in_dims(p.x, p.y, w, h, "bifurcation");
    ps.bifurcations.push_back(p);
  }

  if (!doc["midpoints"].is_array()) schema_fail("'midpoints' must be an array");
  for (const auto& jm : doc["midpoints"]) {
    if (!jm.is_object() || !jm.contains("p") || !jm.contains("t"))
      schema_fail("midpoint entries must have 'p' and 't'");
    const auto& jp = jm["p"];
    const auto& jt = jm["t"];
    if (!jp.is_array() || jp.size() != 2 || !jp[0].is_number_integer() ||
        !jp[1].is_number_integer())
      schema_fail("midpoint 'p' must be [x, y]");
    if (!jt.is_array() || jt.size() != 2 || !jt[0].is_number() || !jt[1].is_number())
      schema_fail("midpoint 't' must be [tx, ty]");
    Midpoint m;
    m.point = {jp[0].get<int>(), jp[1].get<int>()};
    check_point_in_dims(m.point.x, m.point.y, w, h, "midpoint");
    m.tangent_x = jt[0].get<double>();
    m.tangent_y = jt[1].get<double>();
    ps.midpoints.push_back(m);
  }

  if (!doc["skeleton_rle"].is_array()) schema_fail("'skeleton_rle' must be an array");
  ps.skeleton = BinaryMask(w, h);
  const size_t total = size_t(w) * h;
  for (const auto& run : doc["skeleton_rle"]) {
    if (!run.is_array() || run.size() != 2 || !run[0].is_number_integer() ||
        !run[1].is_number_integer())
      schema_fail("skeleton_rle entries must be [start, len]");
    long long start = run[0].get<long long>(), len = run[1].get<long long>();
    if (start < 0 || len < 1 || size_t(start) + size_t(len) > total)
      schema_fail("skeleton_rle run outside the raster");
    for (long long i = start; i < start + len; ++i) ps.skeleton.bits()[size_t(i)] = 1;
  }
  return ps;
}

}  // namespace vessam
