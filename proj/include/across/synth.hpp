#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "across/common.hpp"
#include "across/mesh.hpp"
#include "across/signal.hpp"

// Analytic stand-in for FEM data collection: paired BioTac/DIGIT surface
// deformations from signed-distance indenter contact with a membrane
// falloff, plus the rigid+unfolding alignment that keeps the pairs
// geometrically consistent, trajectory generation and trajectory-level
// splits.

namespace across::synth {

// FEM material constants recorded as dataset provenance metadata only;
// the analytic generator does not use them.
inline constexpr double kFemElasticityKPa = 539.0;
inline constexpr double kFemPoissonRatio = 0.499;
inline constexpr double kFemFrictionCoefficient = 0.78;

// ---------------------------------------------------------------------------
// Indenters
// ---------------------------------------------------------------------------

enum class IndenterKind {
  sphere,
  small_sphere,
  cylinder_flat,
  cylinder_round,
  cube_edge,
  cone,
  ring,
  ellipsoid,
  bar,
};

inline constexpr int kIndenterKindCount = 9;

inline const std::array<IndenterKind, kIndenterKindCount>& all_indenter_kinds() {
  static const std::array<IndenterKind, kIndenterKindCount> kinds{
      IndenterKind::sphere,       IndenterKind::small_sphere, IndenterKind::cylinder_flat,
      IndenterKind::cylinder_round, IndenterKind::cube_edge,  IndenterKind::cone,
      IndenterKind::ring,         IndenterKind::ellipsoid,   IndenterKind::bar};
  return kinds;
}

inline const char* indenter_kind_name(IndenterKind k) {
  switch (k) {
    case IndenterKind::sphere: return "sphere";
    case IndenterKind::small_sphere: return "small_sphere";
    case IndenterKind::cylinder_flat: return "cylinder_flat";
    case IndenterKind::cylinder_round: return "cylinder_round";
    case IndenterKind::cube_edge: return "cube_edge";
    case IndenterKind::cone: return "cone";
    case IndenterKind::ring: return "ring";
    case IndenterKind::ellipsoid: return "ellipsoid";
    case IndenterKind::bar: return "bar";
  }
  return "?";
}

inline IndenterKind indenter_kind_from_name(const std::string& name) {
  for (auto k : all_indenter_kinds())
    if (name == indenter_kind_name(k)) return k;
  fail(Errc::format_error, "unknown indenter kind '" + name + "'");
}

// Rigid probe with a signed distance field. The local frame has the tip
// (lowest point at rest orientation) at the origin and the body extending
// toward +z; the probe presses along its local -z.
struct Indenter {
  IndenterKind kind = IndenterKind::sphere;
  Eigen::Vector3d size = Eigen::Vector3d::Zero();  // semantics per kind, mm
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Quaterniond orientation = Eigen::Quaterniond::Identity();

  static Indenter make(IndenterKind kind) {
    Indenter it;
    it.kind = kind;
    switch (kind) {
      case IndenterKind::sphere: it.size << 3.0, 0, 0; break;          // radius
      case IndenterKind::small_sphere: it.size << 1.5, 0, 0; break;    // radius
      case IndenterKind::cylinder_flat: it.size << 2.5, 8.0, 0; break; // radius, length
      case IndenterKind::cylinder_round: it.size << 2.5, 8.0, 0; break;
      case IndenterKind::cube_edge: it.size << 4.0, 0, 0; break;       // edge length
      case IndenterKind::cone: it.size << 0.4, 3.0, 6.0; break;        // tip r, base r, height
      // Major radius stays well under the fingertip girth so the contact
      // arc cannot wrap around the cap; the minor radius stays above half
      // the 2 mm depth sweep so the tube never passes fully through the
      // surface skin.
      case IndenterKind::ring: it.size << 2.0, 1.3, 0; break;          // major, minor radius
      case IndenterKind::ellipsoid: it.size << 3.0, 2.0, 1.5; break;   // semi-axes
      case IndenterKind::bar: it.size << 6.0, 1.5, 4.0; break;         // length, width, height
    }
    return it;
  }

  Eigen::Vector3d approach_direction() const { return orientation * Eigen::Vector3d(0, 0, -1); }

  double sdf_local(const Eigen::Vector3d& p) const {
    switch (kind) {
      case IndenterKind::sphere:
      case IndenterKind::small_sphere: {
        double r = size[0];
        return (p - Eigen::Vector3d(0, 0, r)).norm() - r;
      }
      case IndenterKind::cylinder_flat: {
        double r = size[0], half = 0.5 * size[1];
        Eigen::Vector3d q = p - Eigen::Vector3d(0, 0, half);
        double dr = std::hypot(q.x(), q.y()) - r;
        double dz = std::abs(q.z()) - half;
        double outside = std::hypot(std::max(dr, 0.0), std::max(dz, 0.0));
        return outside + std::min(std::max(dr, dz), 0.0);
      }
      case IndenterKind::cylinder_round: {
        double r = size[0], len = size[1];
        Eigen::Vector3d tip_center(0, 0, r);
        double tip = (p - tip_center).norm() - r;
        Eigen::Vector3d q = p - Eigen::Vector3d(0, 0, r + 0.5 * (len - r));
        double half = 0.5 * (len - r);
        double dr = std::hypot(q.x(), q.y()) - r;
        double dz = std::abs(q.z()) - half;
        double shaft = std::hypot(std::max(dr, 0.0), std::max(dz, 0.0)) +
                       std::min(std::max(dr, dz), 0.0);
        return std::min(tip, shaft);
      }
      case IndenterKind::cube_edge: {
        double half = 0.5 * size[0];
        // Cube rotated 45 degrees about x so an edge points down; the edge
        // sits at the origin, the center at half*sqrt(2) above it.
        static const Eigen::Matrix3d undo45 =
            Eigen::AngleAxisd(-M_PI / 4.0, Eigen::Vector3d::UnitX()).toRotationMatrix();
        Eigen::Vector3d q = undo45 * (p - Eigen::Vector3d(0, 0, half * std::sqrt(2.0)));
        Eigen::Vector3d d = q.cwiseAbs() - Eigen::Vector3d(half, half, half);
        return d.cwiseMax(0.0).norm() + std::min(d.maxCoeff(), 0.0);
      }
      case IndenterKind::cone: {
        // Round cone: tip sphere r1 blending to sphere r2 at height h.
        double r1 = size[0], r2 = size[1], h = size[2];
        Eigen::Vector3d q = p - Eigen::Vector3d(0, 0, r1);
        double qx = std::hypot(q.x(), q.y()), qz = q.z();
        double b = (r1 - r2) / h;
        double a = std::sqrt(std::max(1.0 - b * b, 1e-12));
        double k = qx * (-b) + qz * a;
        if (k < 0.0) return std::hypot(qx, qz) - r1;
        if (k > a * h) return std::hypot(qx, qz - h) - r2;
        return qx * a + qz * b - r1;
      }
      case IndenterKind::ring: {
        double major = size[0], minor = size[1];
        Eigen::Vector3d q = p - Eigen::Vector3d(0, 0, minor);
        double qr = std::hypot(q.x(), q.y()) - major;
        return std::hypot(qr, q.z()) - minor;
      }
      case IndenterKind::ellipsoid: {
        Eigen::Vector3d r = size;
        Eigen::Vector3d q = p - Eigen::Vector3d(0, 0, r.z());
        double k0 = (q.array() / r.array()).matrix().norm();
        double k1 = (q.array() / (r.array() * r.array())).matrix().norm();
        if (k1 == 0.0) return -r.minCoeff();
        return k0 * (k0 - 1.0) / k1;
      }
      case IndenterKind::bar: {
        Eigen::Vector3d half(0.5 * size[0], 0.5 * size[1], 0.5 * size[2]);
        Eigen::Vector3d q = p - Eigen::Vector3d(0, 0, half.z());
        Eigen::Vector3d d = q.cwiseAbs() - half;
        return d.cwiseMax(0.0).norm() + std::min(d.maxCoeff(), 0.0);
      }
    }
    return 1e9;
  }

  double sdf(const Eigen::Vector3d& world) const {
    return sdf_local(orientation.conjugate() * (world - position));
  }
};

// ---------------------------------------------------------------------------
// Sensor surfaces
// ---------------------------------------------------------------------------

// BioTac patch: spherical fingertip cap blending into a cylinder ring,
// parameterized by geodesic distance u from the apex and azimuth theta.
// Native frame: capsule axis along +x, apex at the origin with outward
// normal +x, cylinder extending toward -x.
struct BiotacPatch {
  double cap_radius = 4.5;
  double extent = 8.5;  // u_max, mm
  Eigen::MatrixXd positions;
  std::vector<mesh::Tri> triangles;
  Eigen::MatrixXd uv;       // per-vertex (u, theta)
  Eigen::MatrixXd outward;  // analytic unit outward normals

  Eigen::Vector3d point_at(double u, double theta) const {
    const double r = cap_radius;
    Eigen::Vector3d center(-r, 0, 0);
    double cap_arc = r * M_PI / 2.0;
    if (u <= cap_arc) {
      double phi = u / r;
      return center + r * Eigen::Vector3d(std::cos(phi), std::sin(phi) * std::cos(theta),
                                          std::sin(phi) * std::sin(theta));
    }
    double d = u - cap_arc;
    return Eigen::Vector3d(-r - d, r * std::cos(theta), r * std::sin(theta));
  }

  Eigen::Vector3d normal_at(double u, double theta) const {
    const double r = cap_radius;
    double cap_arc = r * M_PI / 2.0;
    if (u <= cap_arc) {
      double phi = u / r;
      return Eigen::Vector3d(std::cos(phi), std::sin(phi) * std::cos(theta),
                             std::sin(phi) * std::sin(theta));
    }
    return Eigen::Vector3d(0, std::cos(theta), std::sin(theta));
  }
};

inline BiotacPatch build_biotac_patch(int target_vertices, double cap_radius = 4.5,
                                      double extent = 8.5) {
  require(target_vertices >= 16, Errc::too_few_vertices, "biotac patch needs >= 16 vertices");
  BiotacPatch patch;
  patch.cap_radius = cap_radius;
  patch.extent = extent;

  int rings = std::max(3, static_cast<int>(std::lround(std::sqrt((target_vertices - 1) / 2.2))));
  int segments = std::max(6, (target_vertices - 1) / rings);
  const int v_total = 1 + rings * segments;

  patch.positions.resize(v_total, 3);
  patch.uv.resize(v_total, 2);
  patch.outward.resize(v_total, 3);
  patch.positions.row(0) = patch.point_at(0, 0);
  patch.uv.row(0) << 0.0, 0.0;
  patch.outward.row(0) = patch.normal_at(0, 0);
  for (int r = 1; r <= rings; ++r) {
    double u = extent * r / rings;
    for (int s = 0; s < segments; ++s) {
      double theta = 2.0 * M_PI * s / segments;
      int v = 1 + (r - 1) * segments + s;
      patch.positions.row(v) = patch.point_at(u, theta);
      patch.uv.row(v) << u, theta;
      patch.outward.row(v) = patch.normal_at(u, theta);
    }
  }
  for (int s = 0; s < segments; ++s)
    patch.triangles.push_back({0, 1 + s, 1 + (s + 1) % segments});
  for (int r = 1; r < rings; ++r) {
    int base0 = 1 + (r - 1) * segments, base1 = 1 + r * segments;
    for (int s = 0; s < segments; ++s) {
      int sn = (s + 1) % segments;
      patch.triangles.push_back({base0 + s, base1 + s, base1 + sn});
      patch.triangles.push_back({base0 + s, base1 + sn, base0 + sn});
    }
  }
  return patch;
}

// DIGIT pad: flat rounded rectangle in the z=0 plane, outward normal +z,
// centered on the origin.
struct DigitPad {
  double width = 19.0, height = 14.0, corner_radius = 1.5;
  Eigen::MatrixXd positions;
  std::vector<mesh::Tri> triangles;
};

inline DigitPad build_digit_pad(int target_vertices, double width = 19.0, double height = 14.0,
                                double corner_radius = 1.5) {
  require(target_vertices >= 16, Errc::too_few_vertices, "digit pad needs >= 16 vertices");
  DigitPad pad;
  pad.width = width;
  pad.height = height;
  pad.corner_radius = corner_radius;

  int nx = std::max(4, static_cast<int>(std::lround(std::sqrt(target_vertices * width / height))));
  int ny = std::max(4, target_vertices / nx);
  pad.positions.resize(nx * ny, 3);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      double x = -0.5 * width + width * i / (nx - 1);
      double y = -0.5 * height + height * j / (ny - 1);
      // Pull corner-exterior vertices onto the rounded corner arc.
      double cx = 0.5 * width - corner_radius, cy = 0.5 * height - corner_radius;
      if (std::abs(x) > cx && std::abs(y) > cy) {
        double dx = std::abs(x) - cx, dy = std::abs(y) - cy;
        double d = std::hypot(dx, dy);
        if (d > corner_radius) {
          double scale = corner_radius / d;
          x = std::copysign(cx + dx * scale, x);
          y = std::copysign(cy + dy * scale, y);
        }
      }
      pad.positions.row(j * nx + i) << x, y, 0.0;
    }
  for (int j = 0; j + 1 < ny; ++j)
    for (int i = 0; i + 1 < nx; ++i) {
      int v00 = j * nx + i, v10 = v00 + 1, v01 = v00 + nx, v11 = v01 + 1;
      pad.triangles.push_back({v00, v10, v11});
      pad.triangles.push_back({v00, v11, v01});
    }
  return pad;
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

// Rigid motion taking the BioTac frame into the DIGIT frame (apex to pad
// center, apex normal to the pad normal) composed with the exponential-map
// unfolding of the capsule patch onto the pad plane. Geodesic distance from
// the apex is preserved exactly by construction.
struct AlignmentTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double cap_radius = 4.5;

  // Unfolded pad-plane image of a point on (or near) the BioTac patch.
  Eigen::Vector3d map_point(const Eigen::Vector3d& biotac_point) const {
    Eigen::Vector3d q = rotation * biotac_point + translation;  // apex frame: apex origin, normal +z
    Eigen::Vector3d rel = q - Eigen::Vector3d(0, 0, -cap_radius);
    double len = rel.norm();
    if (len == 0.0) return Eigen::Vector3d(0, 0, 0);
    double phi = std::acos(std::clamp(rel.z() / len, -1.0, 1.0));
    double u, theta;
    if (phi <= M_PI / 2.0) {
      u = cap_radius * phi;
      theta = std::atan2(rel.y(), rel.x());
    } else {
      theta = std::atan2(q.y(), q.x());
      double d = -q.z() - cap_radius;
      u = cap_radius * M_PI / 2.0 + std::max(d, 0.0);
    }
    return Eigen::Vector3d(u * std::cos(theta), u * std::sin(theta), 0.0);
  }
};

inline AlignmentTransform build_alignment(const BiotacPatch& patch, const DigitPad& pad) {
  AlignmentTransform t;
  t.cap_radius = patch.cap_radius;
  // BioTac native frame: apex at origin, outward +x, theta measured from +y
  // around +x. Map apex normal +x -> pad +z, theta=0 tangent +y -> pad +x,
  // theta=90 tangent +z -> pad +y.
  t.rotation << 0, 1, 0,
                0, 0, 1,
                1, 0, 0;
  t.translation.setZero();
  if (patch.extent > 0.5 * std::min(pad.width, pad.height))
    warn("BioTac patch unfolds beyond the DIGIT pad; shared region clipped");
  return t;
}

// ---------------------------------------------------------------------------
// Deformation
// ---------------------------------------------------------------------------

struct DeformConfig {
  double falloff_radius_mm = 3.0;
  double max_depth_mm = 2.0;
};

// C1 membrane falloff: 1 at the contact, 0 with zero slope at the radius.
inline double falloff_weight(double dist, double radius) {
  if (dist >= radius) return 0.0;
  double x = dist / radius;
  double b = 1.0 - x * x;
  return b * b;
}

struct DeformResult {
  Eigen::MatrixXd positions;
  Eigen::VectorXd displacement;  // per-vertex magnitude, mm
  int contact_vertices = 0;
};

// Displaces each vertex along its inward normal by the indenter's SDF
// penetration, extended by the membrane falloff. The indenter pose is the
// touching pose; the commanded depth advances it along its approach axis.
// Vertices outside contact + falloff are returned bit-identical.
inline DeformResult deform_surface(const Eigen::MatrixXd& reference,
                                   const Eigen::MatrixXd& inward_normals,
                                   const Indenter& touching, double depth,
                                   const DeformConfig& cfg = {}) {
  require(depth > 0.0 && depth <= cfg.max_depth_mm + 1e-12, Errc::excessive_depth,
          "depth " + std::to_string(depth) + " outside (0, " + std::to_string(cfg.max_depth_mm) +
              "] mm");
  const auto v_count = reference.rows();
  require(inward_normals.rows() == v_count, Errc::shape_mismatch, "normals do not match mesh");

  Indenter advanced = touching;
  advanced.position += depth * touching.approach_direction();

  std::vector<int> contact;
  Eigen::VectorXd penetration = Eigen::VectorXd::Zero(v_count);
  double min_sdf = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < v_count; ++i) {
    double s = advanced.sdf(reference.row(i));
    min_sdf = std::min(min_sdf, s);
    if (s < 0.0) {
      penetration[i] = -s;
      contact.push_back(static_cast<int>(i));
    }
  }
  // A strictly clear indenter is an error. A grazing side contact can leave
  // every discrete vertex unpenetrated (and can even back away from the
  // touched vertex as it advances), which is the legitimate
  // zero-deformation limit; 0.02 mm covers that vertex-sampling slack.
  if (contact.empty() && min_sdf > 0.02)
    fail(Errc::no_contact, "indenter misses the surface by " + std::to_string(min_sdf) + " mm");

  DeformResult out;
  out.positions = reference;
  out.displacement = Eigen::VectorXd::Zero(v_count);
  out.contact_vertices = static_cast<int>(contact.size());
  if (contact.empty()) return out;
  for (Eigen::Index i = 0; i < v_count; ++i) {
    double best = 0.0;
    for (int j : contact) {
      double dist = (reference.row(i) - reference.row(j)).norm();
      double cand = penetration[j] * falloff_weight(dist, cfg.falloff_radius_mm);
      if (cand > best) best = cand;
    }
    if (best > 0.0) {
      out.displacement[i] = best;
      out.positions.row(i) = reference.row(i) + best * inward_normals.row(i);
    }
  }
  return out;
}

// Slides the indenter along the approach direction until it just touches
// the surface (bisection on the minimum SDF over the vertices).
inline Indenter place_indenter(const Eigen::MatrixXd& reference, Indenter proto,
                               const Eigen::Vector3d& contact_point,
                               const Eigen::Vector3d& approach_dir, double roll) {
  Eigen::Vector3d approach = approach_dir.normalized();
  Eigen::Quaterniond align =
      Eigen::Quaterniond::FromTwoVectors(Eigen::Vector3d(0, 0, -1), approach);
  proto.orientation = align * Eigen::AngleAxisd(roll, Eigen::Vector3d(0, 0, 1));

  const double start_back = 15.0, scan_max = 35.0, coarse_step = 0.2;
  auto min_sdf_at = [&](double s) {
    proto.position = contact_point - (start_back - s) * approach;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < reference.rows(); ++i)
      best = std::min(best, proto.sdf(reference.row(i)));
    return best;
  };
  if (min_sdf_at(0.0) <= 0.0)
    fail(Errc::no_contact, "indenter already intersects at the start pose");
  // The minimum SDF is only negative while the body overlaps the surface,
  // so scan for the first crossing and bisect inside that bracket.
  double lo = 0.0, hi = -1.0;
  for (double s = coarse_step; s <= scan_max; s += coarse_step) {
    if (min_sdf_at(s) <= 0.0) {
      hi = s;
      break;
    }
    lo = s;
  }
  if (hi < 0.0) fail(Errc::no_contact, "indenter never reaches the surface");
  for (int iter = 0; iter < 60; ++iter) {
    double mid = 0.5 * (lo + hi);
    if (min_sdf_at(mid) > 0.0) lo = mid;
    else hi = mid;
  }
  double touch = 0.5 * (lo + hi);
  proto.position = contact_point - (start_back - touch) * approach;
  return proto;
}

// ---------------------------------------------------------------------------
// Sensor rig: geometry + alignment + electrodes
// ---------------------------------------------------------------------------

struct RigConfig {
  int biotac_vertices = 4246;  // Table-sized default; desk presets shrink this
  int digit_vertices = 6103;
  double biotac_cap_radius = 4.5;
  double biotac_extent = 8.5;
  double digit_width = 19.0;
  double digit_height = 14.0;
  double digit_corner_radius = 1.5;
  double falloff_radius = 3.0;
  double max_depth = 2.0;
  double contact_margin = 3.0;  // contacts stay this far inside the pad
  double signal_gain = 400.0;   // raw electrode units per unit tanh response
  double signal_d0 = 1.0;       // mm, saturation scale of the response
};

struct SensorRig {
  RigConfig config;
  BiotacPatch biotac;
  DigitPad digit;
  Eigen::MatrixXd biotac_inward;  // -outward
  AlignmentTransform alignment;
  std::vector<int> electrode_vertices;   // 19 sites on the patch
  std::vector<int> contact_candidates;   // vertices whose unfolded image is in the contact zone
  DeformConfig deform_config;

  double electrode_default(int e) const { return 2600.0 - 4.0 * e; }

  // Electrode reading for a displacement field on the patch: rest default
  // minus a saturating monotone response to local displacement.
  signal::SignalFrame signal_from_displacement(const Eigen::VectorXd& displacement,
                                               std::int64_t timestamp, bool contact) const {
    signal::SignalFrame f;
    f.timestamp_index = timestamp;
    f.contact = contact;
    for (int e = 0; e < signal::kNumElectrodes; ++e) {
      double d = displacement[electrode_vertices[static_cast<std::size_t>(e)]];
      f.electrodes[static_cast<std::size_t>(e)] =
          electrode_default(e) - config.signal_gain * std::tanh(d / config.signal_d0);
    }
    return f;
  }

  signal::SignalFrame rest_signal(std::int64_t timestamp = 0) const {
    return signal_from_displacement(Eigen::VectorXd::Zero(biotac.positions.rows()), timestamp,
                                    false);
  }
};

inline SensorRig build_sensor_rig(const RigConfig& cfg = {}) {
  SensorRig rig;
  rig.config = cfg;
  rig.biotac = build_biotac_patch(cfg.biotac_vertices, cfg.biotac_cap_radius, cfg.biotac_extent);
  rig.digit = build_digit_pad(cfg.digit_vertices, cfg.digit_width, cfg.digit_height,
                              cfg.digit_corner_radius);
  rig.biotac_inward = -rig.biotac.outward;
  rig.alignment = build_alignment(rig.biotac, rig.digit);
  rig.deform_config.falloff_radius_mm = cfg.falloff_radius;
  rig.deform_config.max_depth_mm = cfg.max_depth;

  // 19 electrode sites: apex, a ring of 6, a ring of 12, laid out in the
  // (u, theta) parameterization and snapped to the nearest patch vertex.
  std::vector<std::pair<double, double>> sites;
  sites.emplace_back(0.0, 0.0);
  double u_span = std::min(cfg.biotac_extent,
                           0.5 * std::min(cfg.digit_width, cfg.digit_height) - 0.5);
  for (int i = 0; i < 6; ++i) sites.emplace_back(0.38 * u_span, 2.0 * M_PI * i / 6.0);
  for (int i = 0; i < 12; ++i)
    sites.emplace_back(0.78 * u_span, 2.0 * M_PI * i / 12.0 + M_PI / 12.0);
  for (const auto& [u, theta] : sites) {
    Eigen::Vector3d p = rig.biotac.point_at(u, theta);
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index v = 0; v < rig.biotac.positions.rows(); ++v) {
      double d = (rig.biotac.positions.row(v).transpose() - p).norm();
      if (d < best_d) {
        best_d = d;
        best = v;
      }
    }
    rig.electrode_vertices.push_back(static_cast<int>(best));
  }

  // Contact zone: unfolded image inside the pad shrunk by the margin, and
  // far enough from the patch rim that the falloff stays on the patch.
  for (Eigen::Index v = 0; v < rig.biotac.positions.rows(); ++v) {
    Eigen::Vector3d q = rig.alignment.map_point(rig.biotac.positions.row(v));
    double margin = cfg.contact_margin;
    if (std::abs(q.x()) > 0.5 * cfg.digit_width - margin) continue;
    if (std::abs(q.y()) > 0.5 * cfg.digit_height - margin) continue;
    if (rig.biotac.uv(v, 0) > cfg.biotac_extent - margin) continue;
    rig.contact_candidates.push_back(static_cast<int>(v));
  }
  require(!rig.contact_candidates.empty(), Errc::too_few_vertices,
          "no contact candidates inside the shared region");
  return rig;
}

// ---------------------------------------------------------------------------
// Trajectories and paired generation
// ---------------------------------------------------------------------------

inline std::vector<double> depth_schedule() {
  std::vector<double> d;
  for (int k = 1; k <= 20; ++k) d.push_back(0.1 * k);
  return d;
}

// Area-weighted centroid of a displacement field; the area weights remove
// the sampling bias of non-uniform surface grids.
inline Eigen::Vector3d deformation_centroid(const Eigen::MatrixXd& reference,
                                            const Eigen::VectorXd& displacement,
                                            const Eigen::VectorXd& vertex_areas) {
  Eigen::VectorXd w = displacement.cwiseProduct(vertex_areas);
  double total = w.sum();
  require(total > 0, Errc::empty_mask, "deformation_centroid: no displaced vertices");
  return (reference.transpose() * w) / total;
}

struct Trajectory {
  int trajectory_id = 0;
  int contact_vertex = 0;            // index into the BioTac patch
  Eigen::Vector3d contact_biotac = Eigen::Vector3d::Zero();
  Eigen::Vector3d contact_digit = Eigen::Vector3d::Zero();
  double roll = 0.0;
  std::vector<double> depths = depth_schedule();
};

struct PairedSample {
  int trajectory_id = 0;
  IndenterKind indenter_kind = IndenterKind::sphere;
  int depth_index = 0;  // 1-based
  double depth_mm = 0.0;
  Eigen::MatrixXd biotac_positions, digit_positions;
  Eigen::VectorXd biotac_displacement;
  signal::SignalFrame signal;
  double force_proxy_n = 0.0;
  Eigen::Vector3d contact_biotac = Eigen::Vector3d::Zero();
};

inline std::vector<Trajectory> sample_trajectories(const SensorRig& rig, int count,
                                                   std::uint64_t seed) {
  require(count >= 1, Errc::too_few_trajectories, "need at least one trajectory");
  Rng rng(seed);
  std::vector<Trajectory> out;
  for (int t = 0; t < count; ++t) {
    Trajectory traj;
    traj.trajectory_id = t;
    traj.contact_vertex = rig.contact_candidates[static_cast<std::size_t>(
        rng.below(rig.contact_candidates.size()))];
    traj.contact_biotac = rig.biotac.positions.row(traj.contact_vertex);
    traj.contact_digit = rig.alignment.map_point(traj.contact_biotac);
    traj.roll = rng.uniform(0.0, 2.0 * M_PI);
    out.push_back(traj);
  }
  return out;
}

// Generates every (trajectory x indenter x depth) paired sample in a fixed
// order, invoking the sink per sample. Placement failures skip the
// (trajectory, indenter) pair with a warning; the paired contact is the
// alignment image of the BioTac contact.
template <class Sink>
inline void generate_paired_dataset(const SensorRig& rig, const std::vector<Trajectory>& trajs,
                                    const std::vector<IndenterKind>& kinds, Sink&& sink) {
  Eigen::VectorXd biotac_areas =
      mesh::vertex_areas(rig.biotac.positions, rig.biotac.triangles);
  const double force_scale = kFemElasticityKPa * 1e-3 / 2.0;  // N/mm^2 over 2 mm gel

  Eigen::MatrixXd digit_inward(rig.digit.positions.rows(), 3);
  digit_inward.rowwise() = Eigen::RowVector3d(0, 0, -1);

  for (const auto& traj : trajs) {
    Eigen::Vector3d biotac_inward_dir = rig.biotac_inward.row(traj.contact_vertex);
    for (auto kind : kinds) {
      Indenter biotac_touch, digit_touch;
      Eigen::Vector3d realized_contact;
      try {
        biotac_touch = place_indenter(rig.biotac.positions, Indenter::make(kind),
                                      traj.contact_biotac, biotac_inward_dir, traj.roll);
        // On the curved patch the realized contact can sit away from the
        // sampled vertex (and, for non-compact shapes like the ring, away
        // from the indenter axis). The pair anchors on the deformation
        // centroid at full depth, mapped through the alignment, so both
        // sensors deform around corresponding locations.
        auto probe = deform_surface(rig.biotac.positions, rig.biotac_inward, biotac_touch,
                                    rig.deform_config.max_depth_mm, rig.deform_config);
        realized_contact =
            deformation_centroid(rig.biotac.positions, probe.displacement, biotac_areas);
        digit_touch = place_indenter(rig.digit.positions, Indenter::make(kind),
                                     rig.alignment.map_point(realized_contact),
                                     Eigen::Vector3d(0, 0, -1), traj.roll);
      } catch (const Error& e) {
        warn("skipping trajectory " + std::to_string(traj.trajectory_id) + " indenter " +
             indenter_kind_name(kind) + ": " + e.what());
        continue;
      }
      for (std::size_t di = 0; di < traj.depths.size(); ++di) {
        double depth = traj.depths[di];
        PairedSample s;
        s.trajectory_id = traj.trajectory_id;
        s.indenter_kind = kind;
        s.depth_index = static_cast<int>(di) + 1;
        s.depth_mm = depth;
        s.contact_biotac = realized_contact;
        auto bio = deform_surface(rig.biotac.positions, rig.biotac_inward, biotac_touch, depth,
                                  rig.deform_config);
        auto dig = deform_surface(rig.digit.positions, digit_inward, digit_touch, depth,
                                  rig.deform_config);
        s.biotac_positions = std::move(bio.positions);
        s.digit_positions = std::move(dig.positions);
        s.biotac_displacement = std::move(bio.displacement);
        s.force_proxy_n = force_scale * s.biotac_displacement.dot(biotac_areas);
        s.signal = rig.signal_from_displacement(s.biotac_displacement,
                                                static_cast<std::int64_t>(di) + 1, true);
        sink(s);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Trajectory-level splits
// ---------------------------------------------------------------------------

struct SplitSets {
  std::vector<int> train, val, test;
};

// Whole trajectories land in exactly one split; round(fraction * N) sizes.
inline SplitSets split_by_trajectory(std::vector<int> trajectory_ids, double test_fraction,
                                     double val_fraction, std::uint64_t seed) {
  require(test_fraction >= 0 && val_fraction >= 0 && test_fraction + val_fraction < 1.0,
          Errc::config_error, "split fractions must sum below 1");
  std::sort(trajectory_ids.begin(), trajectory_ids.end());
  trajectory_ids.erase(std::unique(trajectory_ids.begin(), trajectory_ids.end()),
                       trajectory_ids.end());
  const auto n = trajectory_ids.size();
  require(n >= 2, Errc::too_few_trajectories, "need at least 2 trajectories to split");
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  require(n_test + n_val < n, Errc::too_few_trajectories, "splits leave no training trajectories");

  Rng rng(seed);
  rng.shuffle(trajectory_ids);
  SplitSets s;
  s.test.assign(trajectory_ids.begin(), trajectory_ids.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.val.assign(trajectory_ids.begin() + static_cast<std::ptrdiff_t>(n_test),
               trajectory_ids.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  s.train.assign(trajectory_ids.begin() + static_cast<std::ptrdiff_t>(n_test + n_val),
                 trajectory_ids.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

// ---------------------------------------------------------------------------
// Manifest (CSV)
// ---------------------------------------------------------------------------

struct ManifestRow {
  int trajectory_id = 0;
  IndenterKind indenter_kind = IndenterKind::sphere;
  double depth_mm = 0.0;
  std::string biotac_mesh_path, digit_mesh_path, signal_path;
  Eigen::Vector3d contact = Eigen::Vector3d::Zero();
};

inline constexpr const char* kManifestHeader =
    "trajectory_id,indenter_kind,depth_mm,biotac_mesh_path,digit_mesh_path,signal_path,"
    "contact_x,contact_y,contact_z";

inline std::string manifest_to_csv(const std::vector<ManifestRow>& rows) {
  std::string out = std::string(kManifestHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.trajectory_id);
    out += ",";
    out += indenter_kind_name(r.indenter_kind);
    out += "," + format_double(r.depth_mm);
    out += "," + r.biotac_mesh_path + "," + r.digit_mesh_path + "," + r.signal_path;
    out += "," + format_double(r.contact.x()) + "," + format_double(r.contact.y()) + "," +
           format_double(r.contact.z());
    out += "\n";
  }
  return out;
}

inline std::vector<ManifestRow> manifest_from_csv(const std::string& text,
                                                  const std::string& name = "manifest") {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && trim(line) == kManifestHeader,
          Errc::format_error, name + ": bad header");
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = split(trim(line), ',');
    require(cells.size() == 9, Errc::format_error, name + ": bad row");
    ManifestRow r;
    r.trajectory_id = static_cast<int>(parse_int(cells[0], name));
    r.indenter_kind = indenter_kind_from_name(cells[1]);
    r.depth_mm = parse_double(cells[2], name);
    r.biotac_mesh_path = cells[3];
    r.digit_mesh_path = cells[4];
    r.signal_path = cells[5];
    r.contact << parse_double(cells[6], name), parse_double(cells[7], name),
        parse_double(cells[8], name);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace across::synth
