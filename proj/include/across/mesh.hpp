#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <map>
#include <queue>
#include <set>
#include <sstream>

#include "across/common.hpp"

// Fixed-topology triangulated sensor surfaces: symmetric normalized graph
// Laplacian, Chebyshev filter basis for spectral graph convolution, and the
// quadric-error-metric pooling hierarchy the mesh autoencoders run on.

namespace across::mesh {

using Vec3 = Eigen::Vector3d;

struct Tri {
  int a = 0, b = 0, c = 0;
  int operator[](int i) const { return i == 0 ? a : (i == 1 ? b : c); }
};

// ---------------------------------------------------------------------------
// Laplacian
// ---------------------------------------------------------------------------

// Symmetric normalized Laplacian L = I - D^{-1/2} A D^{-1/2} over the edge
// graph of the triangulation. Vertices of degree zero are rejected; a
// disconnected graph only warns.
inline Eigen::SparseMatrix<double> build_laplacian(int vertex_count, const std::vector<Tri>& tris) {
  require(vertex_count > 0, Errc::empty_input, "build_laplacian: no vertices");
  std::set<std::pair<int, int>> edges;
  for (const auto& t : tris) {
    int idx[3] = {t.a, t.b, t.c};
    for (int i = 0; i < 3; ++i) {
      require(idx[i] >= 0 && idx[i] < vertex_count, Errc::shape_mismatch,
              "triangle index out of range");
      int u = idx[i], v = idx[(i + 1) % 3];
      if (u != v) edges.insert({std::min(u, v), std::max(u, v)});
    }
  }
  std::vector<int> degree(vertex_count, 0);
  for (const auto& [u, v] : edges) {
    ++degree[u];
    ++degree[v];
  }
  for (int v = 0; v < vertex_count; ++v) {
    if (degree[v] == 0)
      fail(Errc::isolated_vertex, "vertex " + std::to_string(v) + " has no incident edge");
  }

  // Connectivity check (warn only).
  {
    std::vector<std::vector<int>> adj(vertex_count);
    for (const auto& [u, v] : edges) {
      adj[u].push_back(v);
      adj[v].push_back(u);
    }
    std::vector<char> seen(vertex_count, 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    int count = 1;
    while (!stack.empty()) {
      int u = stack.back();
      stack.pop_back();
      for (int v : adj[u])
        if (!seen[v]) {
          seen[v] = 1;
          ++count;
          stack.push_back(v);
        }
    }
    if (count != vertex_count) warn("mesh graph is disconnected");
  }

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(edges.size() * 2 + static_cast<std::size_t>(vertex_count));
  for (int v = 0; v < vertex_count; ++v) trip.emplace_back(v, v, 1.0);
  for (const auto& [u, v] : edges) {
    double w = -1.0 / std::sqrt(static_cast<double>(degree[u]) * static_cast<double>(degree[v]));
    trip.emplace_back(u, v, w);
    trip.emplace_back(v, u, w);
  }
  Eigen::SparseMatrix<double> L(vertex_count, vertex_count);
  L.setFromTriplets(trip.begin(), trip.end());
  L.makeCompressed();
  return L;
}

// ---------------------------------------------------------------------------
// Chebyshev basis
// ---------------------------------------------------------------------------

// Scaled Laplacian L~ = (2/lambda_max) L - I with the polynomial order K.
// lambda_max defaults to 2, the upper bound for the normalized Laplacian.
struct ChebBasis {
  Eigen::SparseMatrix<double> scaled;
  int order = 1;
};

inline ChebBasis build_cheb_basis(const Eigen::SparseMatrix<double>& laplacian, int order,
                                  double lambda_max = 2.0) {
  require(order >= 1, Errc::shape_mismatch, "Chebyshev order must be >= 1");
  require(lambda_max > 0, Errc::shape_mismatch, "lambda_max must be positive");
  ChebBasis b;
  b.order = order;
  Eigen::SparseMatrix<double> id(laplacian.rows(), laplacian.cols());
  id.setIdentity();
  b.scaled = (2.0 / lambda_max) * laplacian - id;
  b.scaled.makeCompressed();
  return b;
}

// Y = sum_k T_k(L~) X W_k with T_0 = I, T_1 = L~, T_k = 2 L~ T_{k-1} - T_{k-2}.
inline Eigen::MatrixXd chebyshev_apply(const ChebBasis& basis, const Eigen::MatrixXd& x,
                                       const std::vector<Eigen::MatrixXd>& w) {
  require(static_cast<int>(w.size()) == basis.order, Errc::shape_mismatch,
          "chebyshev_apply: W count != order");
  require(x.rows() == basis.scaled.rows(), Errc::shape_mismatch,
          "chebyshev_apply: X rows != vertex count");
  const auto f_in = x.cols();
  for (const auto& wk : w)
    require(wk.rows() == f_in && wk.cols() == w[0].cols(), Errc::shape_mismatch,
            "chebyshev_apply: inconsistent W shapes");
  Eigen::MatrixXd prev2 = x;
  Eigen::MatrixXd y = prev2 * w[0];
  if (basis.order == 1) return y;
  Eigen::MatrixXd prev1 = basis.scaled * x;
  y += prev1 * w[1];
  for (int k = 2; k < basis.order; ++k) {
    Eigen::MatrixXd cur = 2.0 * (basis.scaled * prev1) - prev2;
    y += cur * w[k];
    prev2.swap(prev1);
    prev1.swap(cur);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Topology and hierarchy
// ---------------------------------------------------------------------------

struct PoolLevel {
  std::vector<Tri> triangles;              // coarse triangulation
  Eigen::MatrixXd positions;               // coarse reference positions (V_{l+1} x 3)
  Eigen::SparseMatrix<double> laplacian;   // coarse normalized Laplacian
  Eigen::SparseMatrix<double> down;        // V_{l+1} x V_l, one unit entry per row
  Eigen::SparseMatrix<double> up;          // V_l x V_{l+1}, barycentric rows
};

class MeshTopology {
 public:
  MeshTopology() = default;
  MeshTopology(Eigen::MatrixXd positions, std::vector<Tri> triangles)
      : positions_(std::move(positions)), triangles_(std::move(triangles)) {
    laplacian_ = build_laplacian(static_cast<int>(positions_.rows()), triangles_);
  }

  int vertex_count(int level = 0) const {
    return level == 0 ? static_cast<int>(positions_.rows())
                      : static_cast<int>(level_data(level).positions.rows());
  }
  const std::vector<Tri>& triangles(int level = 0) const {
    return level == 0 ? triangles_ : level_data(level).triangles;
  }
  const Eigen::MatrixXd& reference(int level = 0) const {
    return level == 0 ? positions_ : level_data(level).positions;
  }
  const Eigen::SparseMatrix<double>& laplacian(int level = 0) const {
    return level == 0 ? laplacian_ : level_data(level).laplacian;
  }

  int pool_levels() const { return static_cast<int>(levels_.size()); }
  // Transform from level l to level l+1 (rows select retained fine vertices).
  const Eigen::SparseMatrix<double>& down(int l) const { return level_data(l + 1).down; }
  // Transform from level l+1 back to level l.
  const Eigen::SparseMatrix<double>& up(int l) const { return level_data(l + 1).up; }

  std::vector<PoolLevel>& mutable_levels() { return levels_; }

 private:
  const PoolLevel& level_data(int level) const {
    require(level >= 1 && level <= pool_levels(), Errc::hierarchy_depth_mismatch,
            "no pooling level " + std::to_string(level));
    return levels_[static_cast<std::size_t>(level - 1)];
  }

  Eigen::MatrixXd positions_;
  std::vector<Tri> triangles_;
  Eigen::SparseMatrix<double> laplacian_;
  std::vector<PoolLevel> levels_;
};

struct SurfaceMesh {
  const MeshTopology* topology = nullptr;
  Eigen::MatrixXd positions;  // V x 3, millimeters
};

// ---------------------------------------------------------------------------
// Quadric error metric decimation
// ---------------------------------------------------------------------------

namespace detail {

struct Quadric {
  Eigen::Matrix4d q = Eigen::Matrix4d::Zero();

  void add_plane(const Vec3& n, double d, double weight = 1.0) {
    Eigen::Vector4d h(n.x(), n.y(), n.z(), d);
    q += weight * (h * h.transpose());
  }
  double eval(const Vec3& p) const {
    Eigen::Vector4d h(p.x(), p.y(), p.z(), 1.0);
    return h.dot(q * h);
  }
};

struct CollapseResult {
  std::vector<int> kept;        // original indices of surviving vertices, ascending
  std::vector<Tri> triangles;   // reindexed into kept
};

inline Vec3 tri_normal(const Eigen::MatrixXd& pos, const Tri& t, double* area = nullptr) {
  Vec3 p0 = pos.row(t.a), p1 = pos.row(t.b), p2 = pos.row(t.c);
  Vec3 n = (p1 - p0).cross(p2 - p0);
  double len = n.norm();
  if (area) *area = 0.5 * len;
  if (len > 0) n /= len;
  return n;
}

// Edge-collapse decimation where the kept endpoint retains its original
// position, so each down-transform row selects exactly one fine vertex.
// Boundary edges receive perpendicular constraint planes. Ties in cost are
// broken toward the lowest vertex index.
inline CollapseResult decimate_qem(const Eigen::MatrixXd& pos, const std::vector<Tri>& tris,
                                   int target_count) {
  const int v_total = static_cast<int>(pos.rows());
  require(target_count >= 4 && target_count < v_total, Errc::too_few_vertices,
          "decimate: bad target count");

  std::vector<Quadric> quadric(static_cast<std::size_t>(v_total));
  std::vector<Tri> mesh = tris;
  std::vector<bool> tri_alive(mesh.size(), true);
  std::vector<std::vector<int>> vtris(static_cast<std::size_t>(v_total));
  for (std::size_t t = 0; t < mesh.size(); ++t) {
    vtris[static_cast<std::size_t>(mesh[t].a)].push_back(static_cast<int>(t));
    vtris[static_cast<std::size_t>(mesh[t].b)].push_back(static_cast<int>(t));
    vtris[static_cast<std::size_t>(mesh[t].c)].push_back(static_cast<int>(t));
  }

  std::map<std::pair<int, int>, int> edge_tris;  // canonical edge -> incident count
  for (const auto& t : mesh) {
    double area = 0.0;
    Vec3 n = tri_normal(pos, t, &area);
    double d = -n.dot(Vec3(pos.row(t.a)));
    quadric[static_cast<std::size_t>(t.a)].add_plane(n, d);
    quadric[static_cast<std::size_t>(t.b)].add_plane(n, d);
    quadric[static_cast<std::size_t>(t.c)].add_plane(n, d);
    int idx[3] = {t.a, t.b, t.c};
    for (int i = 0; i < 3; ++i) {
      auto key = std::minmax(idx[i], idx[(i + 1) % 3]);
      ++edge_tris[{key.first, key.second}];
    }
  }
  // Boundary constraints.
  for (const auto& t : mesh) {
    Vec3 tn = tri_normal(pos, t);
    int idx[3] = {t.a, t.b, t.c};
    for (int i = 0; i < 3; ++i) {
      int u = idx[i], v = idx[(i + 1) % 3];
      auto key = std::minmax(u, v);
      if (edge_tris[{key.first, key.second}] != 1) continue;
      Vec3 pu = pos.row(u), pv = pos.row(v);
      Vec3 dir = pv - pu;
      double len = dir.norm();
      if (len <= 0) continue;
      Vec3 n = dir.cross(tn);
      double nl = n.norm();
      if (nl <= 0) continue;
      n /= nl;
      double d = -n.dot(pu);
      quadric[static_cast<std::size_t>(u)].add_plane(n, d, 10.0 * len * len);
      quadric[static_cast<std::size_t>(v)].add_plane(n, d, 10.0 * len * len);
    }
  }

  std::vector<bool> v_alive(static_cast<std::size_t>(v_total), true);
  std::vector<std::uint32_t> stamp(static_cast<std::size_t>(v_total), 0);

  struct Entry {
    double cost;
    int a, b;
    std::uint32_t sa, sb;
  };
  auto cmp = [](const Entry& x, const Entry& y) {
    if (x.cost != y.cost) return x.cost > y.cost;
    if (x.a != y.a) return x.a > y.a;
    return x.b > y.b;
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(cmp)> heap(cmp);

  auto edge_cost = [&](int a, int b) {
    Quadric q = quadric[static_cast<std::size_t>(a)];
    q.q += quadric[static_cast<std::size_t>(b)].q;
    return std::min(q.eval(Vec3(pos.row(a))), q.eval(Vec3(pos.row(b))));
  };
  auto push_edge = [&](int a, int b) {
    if (a > b) std::swap(a, b);
    heap.push({edge_cost(a, b), a, b, stamp[static_cast<std::size_t>(a)],
               stamp[static_cast<std::size_t>(b)]});
  };
  for (const auto& [key, count] : edge_tris) push_edge(key.first, key.second);

  auto neighbors = [&](int v) {
    std::vector<int> out;
    for (int t : vtris[static_cast<std::size_t>(v)]) {
      if (!tri_alive[static_cast<std::size_t>(t)]) continue;
      int idx[3] = {mesh[static_cast<std::size_t>(t)].a, mesh[static_cast<std::size_t>(t)].b,
                    mesh[static_cast<std::size_t>(t)].c};
      for (int i : idx)
        if (i != v) out.push_back(i);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  };
  auto alive_tri_count = [&](int v) {
    int n = 0;
    for (int t : vtris[static_cast<std::size_t>(v)])
      if (tri_alive[static_cast<std::size_t>(t)]) ++n;
    return n;
  };

  int alive_count = v_total;
  while (alive_count > target_count) {
    if (heap.empty())
      fail(Errc::too_few_vertices, "decimation ran out of collapsible edges at " +
                                       std::to_string(alive_count) + " vertices");
    Entry e = heap.top();
    heap.pop();
    if (!v_alive[static_cast<std::size_t>(e.a)] || !v_alive[static_cast<std::size_t>(e.b)])
      continue;
    if (stamp[static_cast<std::size_t>(e.a)] != e.sa || stamp[static_cast<std::size_t>(e.b)] != e.sb)
      continue;

    // Keep the endpoint with the cheaper combined quadric; ties keep the
    // lower index.
    Quadric combined = quadric[static_cast<std::size_t>(e.a)];
    combined.q += quadric[static_cast<std::size_t>(e.b)].q;
    double ca = combined.eval(Vec3(pos.row(e.a)));
    double cb = combined.eval(Vec3(pos.row(e.b)));
    int keep = (cb < ca) ? e.b : e.a;
    int gone = (keep == e.a) ? e.b : e.a;

    // Legality: collapsing must not orphan a wing vertex or the kept vertex.
    bool legal = true;
    std::vector<int> dying;
    for (int t : vtris[static_cast<std::size_t>(gone)]) {
      if (!tri_alive[static_cast<std::size_t>(t)]) continue;
      const Tri& tt = mesh[static_cast<std::size_t>(t)];
      bool has_keep = tt.a == keep || tt.b == keep || tt.c == keep;
      if (!has_keep) continue;
      dying.push_back(t);
      int third = tt.a + tt.b + tt.c - keep - gone;
      if (alive_tri_count(third) <= 1) {
        legal = false;
        break;
      }
    }
    if (legal && alive_tri_count(keep) + alive_tri_count(gone) - 2 * static_cast<int>(dying.size()) <= 0)
      legal = false;
    if (!legal) continue;

    for (int t : dying) {
      tri_alive[static_cast<std::size_t>(t)] = false;
    }
    for (int t : vtris[static_cast<std::size_t>(gone)]) {
      if (!tri_alive[static_cast<std::size_t>(t)]) continue;
      Tri& tt = mesh[static_cast<std::size_t>(t)];
      if (tt.a == gone) tt.a = keep;
      if (tt.b == gone) tt.b = keep;
      if (tt.c == gone) tt.c = keep;
      // A remap can duplicate an existing triangle around `keep`; drop it.
      bool dup = false;
      for (int s : vtris[static_cast<std::size_t>(keep)]) {
        if (s == t || !tri_alive[static_cast<std::size_t>(s)]) continue;
        const Tri& ss = mesh[static_cast<std::size_t>(s)];
        std::array<int, 3> k1{tt.a, tt.b, tt.c}, k2{ss.a, ss.b, ss.c};
        std::sort(k1.begin(), k1.end());
        std::sort(k2.begin(), k2.end());
        if (k1 == k2) {
          dup = true;
          break;
        }
      }
      if (dup) {
        tri_alive[static_cast<std::size_t>(t)] = false;
      } else {
        vtris[static_cast<std::size_t>(keep)].push_back(t);
      }
    }
    quadric[static_cast<std::size_t>(keep)].q += quadric[static_cast<std::size_t>(gone)].q;
    v_alive[static_cast<std::size_t>(gone)] = false;
    ++stamp[static_cast<std::size_t>(keep)];
    --alive_count;

    for (int n : neighbors(keep)) push_edge(keep, n);
  }

  CollapseResult out;
  std::vector<int> remap(static_cast<std::size_t>(v_total), -1);
  for (int v = 0; v < v_total; ++v) {
    if (v_alive[static_cast<std::size_t>(v)]) {
      remap[static_cast<std::size_t>(v)] = static_cast<int>(out.kept.size());
      out.kept.push_back(v);
    }
  }
  std::set<std::array<int, 3>> seen;
  for (std::size_t t = 0; t < mesh.size(); ++t) {
    if (!tri_alive[t]) continue;
    const Tri& tt = mesh[t];
    if (tt.a == tt.b || tt.b == tt.c || tt.a == tt.c) continue;
    Tri r{remap[static_cast<std::size_t>(tt.a)], remap[static_cast<std::size_t>(tt.b)],
          remap[static_cast<std::size_t>(tt.c)]};
    std::array<int, 3> key{r.a, r.b, r.c};
    std::sort(key.begin(), key.end());
    if (seen.insert(key).second) out.triangles.push_back(r);
  }
  return out;
}

// Closest point on triangle abc to p (Ericson), with barycentric output.
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c,
                                      Vec3* bary) {
  Vec3 ab = b - a, ac = c - a, ap = p - a;
  double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) {
    *bary = Vec3(1, 0, 0);
    return a;
  }
  Vec3 bp = p - b;
  double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) {
    *bary = Vec3(0, 1, 0);
    return b;
  }
  double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) {
    double v = d1 / (d1 - d3);
    *bary = Vec3(1 - v, v, 0);
    return a + v * ab;
  }
  Vec3 cp = p - c;
  double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) {
    *bary = Vec3(0, 0, 1);
    return c;
  }
  double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) {
    double w = d2 / (d2 - d6);
    *bary = Vec3(1 - w, 0, w);
    return a + w * ac;
  }
  double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    *bary = Vec3(0, 1 - w, w);
    return b + w * (c - b);
  }
  double denom = 1.0 / (va + vb + vc);
  double v = vb * denom, w = vc * denom;
  *bary = Vec3(1 - v - w, v, w);
  return a + ab * v + ac * w;
}

}  // namespace detail

// Builds `levels` pooling levels, each coarsening by ceil(V / factor) via
// QEM edge collapse on the reference mesh. Down-transforms select retained
// vertices; up-transforms carry barycentric weights of each fine vertex in
// its closest coarse triangle.
inline void build_pooling_hierarchy(MeshTopology& topo, int levels, int factor) {
  require(levels >= 1, Errc::hierarchy_depth_mismatch, "levels must be >= 1");
  require(factor >= 2, Errc::hierarchy_depth_mismatch, "factor must be >= 2");
  double v_final = topo.vertex_count(0);
  for (int l = 0; l < levels; ++l) v_final = std::ceil(v_final / factor);
  require(v_final >= 4, Errc::too_few_vertices,
          "hierarchy would reduce the mesh below 4 vertices");

  topo.mutable_levels().clear();
  Eigen::MatrixXd fine_pos = topo.reference(0);
  std::vector<Tri> fine_tris = topo.triangles(0);
  for (int l = 0; l < levels; ++l) {
    const int v_fine = static_cast<int>(fine_pos.rows());
    const int target = (v_fine + factor - 1) / factor;
    auto collapsed = detail::decimate_qem(fine_pos, fine_tris, target);
    const int v_coarse = static_cast<int>(collapsed.kept.size());

    PoolLevel level;
    level.triangles = collapsed.triangles;
    level.positions.resize(v_coarse, 3);
    for (int i = 0; i < v_coarse; ++i)
      level.positions.row(i) = fine_pos.row(collapsed.kept[static_cast<std::size_t>(i)]);
    level.laplacian = build_laplacian(v_coarse, level.triangles);

    std::vector<Eigen::Triplet<double>> dtrip;
    dtrip.reserve(static_cast<std::size_t>(v_coarse));
    std::vector<int> coarse_of(static_cast<std::size_t>(v_fine), -1);
    for (int i = 0; i < v_coarse; ++i) {
      dtrip.emplace_back(i, collapsed.kept[static_cast<std::size_t>(i)], 1.0);
      coarse_of[static_cast<std::size_t>(collapsed.kept[static_cast<std::size_t>(i)])] = i;
    }
    level.down.resize(v_coarse, v_fine);
    level.down.setFromTriplets(dtrip.begin(), dtrip.end());
    level.down.makeCompressed();

    std::vector<Eigen::Triplet<double>> utrip;
    for (int i = 0; i < v_fine; ++i) {
      if (coarse_of[static_cast<std::size_t>(i)] >= 0) {
        utrip.emplace_back(i, coarse_of[static_cast<std::size_t>(i)], 1.0);
        continue;
      }
      Vec3 p = fine_pos.row(i);
      double best = std::numeric_limits<double>::infinity();
      Vec3 best_bary(1, 0, 0);
      const Tri* best_tri = nullptr;
      for (const auto& t : level.triangles) {
        Vec3 bary;
        Vec3 q = detail::closest_point_on_triangle(p, Vec3(level.positions.row(t.a)),
                                                   Vec3(level.positions.row(t.b)),
                                                   Vec3(level.positions.row(t.c)), &bary);
        double d = (q - p).squaredNorm();
        if (d < best) {
          best = d;
          best_bary = bary;
          best_tri = &t;
        }
      }
      require(best_tri != nullptr, Errc::too_few_vertices, "coarse mesh has no triangles");
      for (int k = 0; k < 3; ++k) {
        if (best_bary[k] > 0) utrip.emplace_back(i, (*best_tri)[k], best_bary[k]);
      }
    }
    level.up.resize(v_fine, v_coarse);
    level.up.setFromTriplets(utrip.begin(), utrip.end());
    level.up.makeCompressed();

    fine_pos = level.positions;
    fine_tris = level.triangles;
    topo.mutable_levels().push_back(std::move(level));
  }
}

// ---------------------------------------------------------------------------
// Normalization (per-axis z-score over a training set)
// ---------------------------------------------------------------------------

// Per-vertex-coordinate mean and population std over a training set: the
// mean mesh is subtracted, so undeformed shape carries no signal and
// normalized values express deformation.
struct MeshNormStats {
  Eigen::MatrixXd mean;  // V x 3
  Eigen::MatrixXd std;   // V x 3, strictly positive

  static MeshNormStats neutral(int vertex_count) {
    MeshNormStats s;
    s.mean = Eigen::MatrixXd::Zero(vertex_count, 3);
    s.std = Eigen::MatrixXd::Ones(vertex_count, 3);
    return s;
  }

  int vertex_count() const { return static_cast<int>(mean.rows()); }

  void validate() const {
    require(mean.rows() == std.rows() && mean.cols() == 3 && std.cols() == 3,
            Errc::stats_mismatch, "mesh stats: malformed mean/std");
    require((std.array() > 0).all(), Errc::zero_variance, "mesh stats: std must be positive");
  }
};

// Coordinates whose variance is below min_std^2 keep std = min_std: rarely
// displaced vertices would otherwise blow up under the z-score, and never
// displaced ones stay exactly zero regardless of the floor. The default
// floor is 10 um, the deformation-region threshold.
inline constexpr double kMeshStatsMinStd = 0.01;  // mm

// Stacked form: N meshes as an (N*V) x 3 matrix.
template <class Derived>
inline MeshNormStats compute_mesh_norm_stats_stacked(const Eigen::MatrixBase<Derived>& stacked,
                                                     int vertex_count,
                                                     double min_std = kMeshStatsMinStd) {
  require(vertex_count > 0 && stacked.rows() % vertex_count == 0 && stacked.rows() > 0,
          Errc::empty_input, "compute_mesh_norm_stats: bad stacked shape");
  const auto n = stacked.rows() / vertex_count;
  MeshNormStats s;
  s.mean = Eigen::MatrixXd::Zero(vertex_count, 3);
  s.std = Eigen::MatrixXd::Zero(vertex_count, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    s.mean += stacked.template middleRows(i * vertex_count, vertex_count).template cast<double>();
  s.mean /= static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::MatrixXd d =
        stacked.template middleRows(i * vertex_count, vertex_count).template cast<double>() - s.mean;
    s.std += d.cwiseProduct(d);
  }
  s.std = (s.std / static_cast<double>(n)).cwiseSqrt().cwiseMax(min_std);
  return s;
}

inline MeshNormStats compute_mesh_norm_stats(const std::vector<Eigen::MatrixXd>& meshes,
                                             double min_std = kMeshStatsMinStd) {
  require(!meshes.empty(), Errc::empty_input, "compute_mesh_norm_stats: no meshes");
  const auto v = meshes.front().rows();
  Eigen::MatrixXd stacked(static_cast<Eigen::Index>(meshes.size()) * v, 3);
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    require(meshes[i].rows() == v, Errc::topology_mismatch, "meshes differ in vertex count");
    stacked.middleRows(static_cast<Eigen::Index>(i) * v, v) = meshes[i];
  }
  return compute_mesh_norm_stats_stacked(stacked, static_cast<int>(v), min_std);
}

inline Eigen::MatrixXd normalize_mesh(const Eigen::MatrixXd& positions, const MeshNormStats& s) {
  s.validate();
  require(positions.rows() == s.mean.rows(), Errc::stats_mismatch,
          "normalize_mesh: stats cover a different vertex count");
  return (positions - s.mean).cwiseQuotient(s.std);
}

inline Eigen::MatrixXd denormalize_mesh(const Eigen::MatrixXd& normalized, const MeshNormStats& s) {
  s.validate();
  require(normalized.rows() == s.mean.rows(), Errc::stats_mismatch,
          "denormalize_mesh: stats cover a different vertex count");
  return normalized.cwiseProduct(s.std) + s.mean;
}

// ---------------------------------------------------------------------------
// Geometry helpers
// ---------------------------------------------------------------------------

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

// One-third of incident triangle area per vertex.
inline Eigen::VectorXd vertex_areas(const Eigen::MatrixXd& positions,
                                    const std::vector<Tri>& tris) {
  Eigen::VectorXd areas = Eigen::VectorXd::Zero(positions.rows());
  for (const auto& t : tris) {
    double a = triangle_area(positions.row(t.a), positions.row(t.b), positions.row(t.c)) / 3.0;
    areas[t.a] += a;
    areas[t.b] += a;
    areas[t.c] += a;
  }
  return areas;
}

// Area-weighted vertex normals.
inline Eigen::MatrixXd vertex_normals(const Eigen::MatrixXd& positions,
                                      const std::vector<Tri>& tris) {
  Eigen::MatrixXd normals = Eigen::MatrixXd::Zero(positions.rows(), 3);
  for (const auto& t : tris) {
    Vec3 p0 = positions.row(t.a), p1 = positions.row(t.b), p2 = positions.row(t.c);
    Vec3 n = (p1 - p0).cross(p2 - p0);  // magnitude = 2x area
    normals.row(t.a) += n.transpose();
    normals.row(t.b) += n.transpose();
    normals.row(t.c) += n.transpose();
  }
  for (int v = 0; v < normals.rows(); ++v) {
    double len = normals.row(v).norm();
    if (len > 0) normals.row(v) /= len;
  }
  return normals;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// Topology text format: "v x y z" lines then "f i j k" lines (zero-based).
inline std::string topology_to_text(const Eigen::MatrixXd& positions,
                                    const std::vector<Tri>& tris) {
  std::string out;
  for (int v = 0; v < positions.rows(); ++v) {
    out += "v " + format_double(positions(v, 0)) + " " + format_double(positions(v, 1)) + " " +
           format_double(positions(v, 2)) + "\n";
  }
  for (const auto& t : tris) {
    out += "f " + std::to_string(t.a) + " " + std::to_string(t.b) + " " + std::to_string(t.c) +
           "\n";
  }
  return out;
}

inline void topology_from_text(const std::string& text, Eigen::MatrixXd& positions,
                               std::vector<Tri>& tris, const std::string& name = "topology") {
  std::vector<Vec3> verts;
  tris.clear();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 p;
      if (!(ls >> p.x() >> p.y() >> p.z()))
        fail(Errc::format_error, name + ": bad vertex line " + std::to_string(lineno));
      verts.push_back(p);
    } else if (tag == "f") {
      Tri t;
      if (!(ls >> t.a >> t.b >> t.c))
        fail(Errc::format_error, name + ": bad face line " + std::to_string(lineno));
      tris.push_back(t);
    } else {
      fail(Errc::format_error, name + ": unknown line tag '" + tag + "'");
    }
  }
  positions.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) positions.row(static_cast<Eigen::Index>(i)) = verts[i];
}

inline void save_topology(const std::filesystem::path& path, const MeshTopology& topo) {
  io::write_file(path, topology_to_text(topo.reference(0), topo.triangles(0)));
}

inline MeshTopology load_topology(const std::filesystem::path& path) {
  Eigen::MatrixXd pos;
  std::vector<Tri> tris;
  topology_from_text(io::read_file(path), pos, tris, path.string());
  return MeshTopology(std::move(pos), std::move(tris));
}

// Deformation frame: binary, little-endian. Magic "ACRM", u32 version=1,
// u32 V, then V*3 f32 positions in millimeters (row-major x,y,z per vertex).
inline std::string frame_to_acrm(const Eigen::MatrixXd& positions) {
  std::string out;
  out += "ACRM";
  io::put_u32(out, 1);
  io::put_u32(out, static_cast<std::uint32_t>(positions.rows()));
  for (int v = 0; v < positions.rows(); ++v)
    for (int a = 0; a < 3; ++a) io::put_f32(out, static_cast<float>(positions(v, a)));
  return out;
}

inline Eigen::MatrixXd frame_from_acrm(const std::string& data, const std::string& name = "acrm") {
  io::Reader r(data, name);
  if (r.bytes(4) != "ACRM") fail(Errc::format_error, name + ": bad magic (expected ACRM)");
  std::uint32_t version = r.u32();
  if (version != 1) fail(Errc::format_error, name + ": unsupported version");
  std::uint32_t v = r.u32();
  Eigen::MatrixXd pos(static_cast<Eigen::Index>(v), 3);
  for (std::uint32_t i = 0; i < v; ++i)
    for (int a = 0; a < 3; ++a) pos(static_cast<Eigen::Index>(i), a) = r.f32();
  return pos;
}

inline void save_frame(const std::filesystem::path& path, const Eigen::MatrixXd& positions) {
  io::write_file(path, frame_to_acrm(positions));
}

inline Eigen::MatrixXd load_frame(const std::filesystem::path& path) {
  return frame_from_acrm(io::read_file(path), path.string());
}

// Mesh stats file: header "mesh_stats <V>", then one line per vertex with
// mean xyz followed by std xyz.
inline std::string mesh_stats_to_text(const MeshNormStats& s) {
  s.validate();
  std::string out = "mesh_stats " + std::to_string(s.vertex_count()) + "\n";
  for (int v = 0; v < s.vertex_count(); ++v) {
    for (int a = 0; a < 3; ++a) out += format_double(s.mean(v, a)) + " ";
    for (int a = 0; a < 3; ++a) {
      out += format_double(s.std(v, a));
      out += a == 2 ? "\n" : " ";
    }
  }
  return out;
}

inline MeshNormStats mesh_stats_from_text(const std::string& text,
                                          const std::string& name = "mesh stats") {
  std::istringstream in(text);
  std::string tag;
  int v = 0;
  if (!(in >> tag >> v) || tag != "mesh_stats" || v <= 0)
    fail(Errc::format_error, name + ": bad header");
  MeshNormStats s;
  s.mean.resize(v, 3);
  s.std.resize(v, 3);
  for (int i = 0; i < v; ++i) {
    for (int a = 0; a < 3; ++a)
      if (!(in >> s.mean(i, a))) fail(Errc::format_error, name + ": truncated mean row");
    for (int a = 0; a < 3; ++a)
      if (!(in >> s.std(i, a))) fail(Errc::format_error, name + ": truncated std row");
  }
  s.validate();
  return s;
}

}  // namespace across::mesh
