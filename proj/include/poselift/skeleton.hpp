#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <queue>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "poselift/errors.hpp"
#include "poselift/rng.hpp"
#include "poselift/tensor.hpp"

namespace poselift::skeleton {

// frames x joints x Dim coordinates. Dim = 2 holds normalized image
// coordinates, Dim = 3 holds millimetres.
template <std::size_t Dim>
class JointSequence {
 public:
  static constexpr std::size_t kDim = Dim;

  JointSequence() = default;
  JointSequence(std::size_t frames, std::size_t joints)
      : coords_({frames, joints, Dim}) {}
  explicit JointSequence(Tensor<double> coords) : coords_(std::move(coords)) {
    if (coords_.rank() != 3 || coords_.dim(2) != Dim) {
      throw DimensionError("joint sequence needs shape [N x J x " +
                           std::to_string(Dim) + "], got " +
                           shape_string(coords_.shape()));
    }
  }

  std::size_t frames() const { return coords_.rank() ? coords_.dim(0) : 0; }
  std::size_t joints() const { return coords_.rank() ? coords_.dim(1) : 0; }

  double& at(std::size_t f, std::size_t j, std::size_t c) { return coords_.at(f, j, c); }
  double at(std::size_t f, std::size_t j, std::size_t c) const {
    return coords_.at(f, j, c);
  }

  const Tensor<double>& tensor() const { return coords_; }
  Tensor<double>& tensor() { return coords_; }

  bool all_finite() const { return coords_.all_finite(); }

  bool operator==(const JointSequence&) const = default;

 private:
  Tensor<double> coords_;
};

using JointSequence2D = JointSequence<2>;
using JointSequence3D = JointSequence<3>;

struct Edge {
  std::size_t parent;
  std::size_t child;
};

struct MirrorPair {
  std::size_t left;
  std::size_t right;
};

// Kinematic tree with a rest pose. rest_offsets[j] is joint j relative to its
// parent in millimetres (y up, subject facing -z, i.e. towards the camera).
struct SkeletonTopology {
  std::size_t joint_count = 0;
  std::vector<Edge> edges;
  std::vector<MirrorPair> mirror_pairs;
  std::size_t root_index = 0;
  std::vector<std::array<double, 3>> rest_offsets;

  // Throws TopologyError unless the edges form a spanning tree rooted at
  // root_index and mirror pairs are well formed.
  void validate() const {
    if (joint_count == 0) throw TopologyError("topology has no joints");
    if (root_index >= joint_count) throw TopologyError("root index out of range");
    if (edges.size() + 1 != joint_count) {
      throw TopologyError("a tree over " + std::to_string(joint_count) +
                          " joints needs " + std::to_string(joint_count - 1) +
                          " edges");
    }
    std::vector<int> parent_count(joint_count, 0);
    for (const auto& e : edges) {
      if (e.parent >= joint_count || e.child >= joint_count || e.parent == e.child)
        throw TopologyError("edge index out of range");
      ++parent_count[e.child];
    }
    for (std::size_t j = 0; j < joint_count; ++j) {
      const int expected = j == root_index ? 0 : 1;
      if (parent_count[j] != expected)
        throw TopologyError("joint " + std::to_string(j) + " has " +
                            std::to_string(parent_count[j]) + " parents");
    }
    if (traversal_order().size() != joint_count)
      throw TopologyError("edges do not connect every joint to the root");
    for (const auto& m : mirror_pairs) {
      if (m.left >= joint_count || m.right >= joint_count)
        throw TopologyError("mirror pair index out of range");
      if (m.left == m.right) throw TopologyError("mirror pair must use distinct joints");
    }
    if (!rest_offsets.empty() && rest_offsets.size() != joint_count)
      throw TopologyError("rest offsets must cover every joint");
  }

  std::vector<std::ptrdiff_t> parents() const {
    std::vector<std::ptrdiff_t> p(joint_count, -1);
    for (const auto& e : edges) p[e.child] = static_cast<std::ptrdiff_t>(e.parent);
    return p;
  }

  // Breadth-first order from the root; parents precede children.
  std::vector<std::size_t> traversal_order() const {
    std::vector<std::vector<std::size_t>> children(joint_count);
    for (const auto& e : edges) {
      if (e.parent < joint_count && e.child < joint_count)
        children[e.parent].push_back(e.child);
    }
    std::vector<std::size_t> order;
    std::vector<bool> seen(joint_count, false);
    std::queue<std::size_t> q;
    q.push(root_index);
    seen[root_index] = true;
    while (!q.empty()) {
      const std::size_t j = q.front();
      q.pop();
      order.push_back(j);
      for (auto c : children[j]) {
        if (seen[c]) continue;
        seen[c] = true;
        q.push(c);
      }
    }
    return order;
  }

  // Symmetric 0/1 adjacency without self-loops.
  Tensor<double> adjacency() const {
    Tensor<double> a({joint_count, joint_count});
    for (const auto& e : edges) {
      a.at(e.parent, e.child) = 1.0;
      a.at(e.child, e.parent) = 1.0;
    }
    return a;
  }

  double rest_bone_length(std::size_t joint) const {
    const auto& o = rest_offsets.at(joint);
    return std::sqrt(o[0] * o[0] + o[1] * o[1] + o[2] * o[2]);
  }
};

// Human3.6M 17-joint layout:
//  0 pelvis  1 r_hip  2 r_knee  3 r_ankle  4 l_hip  5 l_knee  6 l_ankle
//  7 spine  8 thorax  9 neck/nose  10 head
//  11 l_shoulder  12 l_elbow  13 l_wrist  14 r_shoulder  15 r_elbow  16 r_wrist
inline SkeletonTopology human_topology() {
  SkeletonTopology t;
  t.joint_count = 17;
  t.root_index = 0;
  t.edges = {{0, 1}, {1, 2},  {2, 3},  {0, 4},   {4, 5},   {5, 6},
             {0, 7}, {7, 8},  {8, 9},  {9, 10},  {8, 11},  {11, 12},
             {12, 13}, {8, 14}, {14, 15}, {15, 16}};
  t.mirror_pairs = {{4, 1}, {5, 2}, {6, 3}, {11, 14}, {12, 15}, {13, 16}};
  t.rest_offsets = {
      {0, 0, 0},                                   // pelvis
      {-130, 0, 0},   {0, -450, 0}, {0, -440, 0},  // right leg
      {130, 0, 0},    {0, -450, 0}, {0, -440, 0},  // left leg
      {0, 230, 0},    {0, 250, 0},                 // spine, thorax
      {0, 110, -60},  {0, 120, 30},                // nose sits forward of the neck
      {170, 0, 0},    {0, -280, 0}, {0, -250, 0},  // left arm
      {-170, 0, 0},   {0, -280, 0}, {0, -250, 0},  // right arm
  };
  return t;
}

// Five-joint skeleton (pelvis, spine, head, two arms) for small test models.
inline SkeletonTopology micro_topology() {
  SkeletonTopology t;
  t.joint_count = 5;
  t.root_index = 0;
  t.edges = {{0, 1}, {1, 2}, {1, 3}, {1, 4}};
  t.mirror_pairs = {{3, 4}};
  t.rest_offsets = {{0, 0, 0}, {0, 400, 0}, {0, 200, -40}, {200, 0, 0}, {-200, 0, 0}};
  return t;
}

enum class ProjectionKind { orthographic, pinhole };

struct Camera {
  double focal = 2.0;            // unitless for pinhole; per-mm for orthographic
  double depth_offset = 4500.0;  // mm from the camera to the root joint
  ProjectionKind kind = ProjectionKind::pinhole;

  void validate() const {
    if (!(focal > 0.0)) throw ConfigError("camera focal length must be positive");
  }
};

// orthographic: f * (x, y); pinhole: f * (x, y) / (z + offset).
inline JointSequence2D project(const JointSequence3D& pose, const Camera& cam) {
  cam.validate();
  JointSequence2D out(pose.frames(), pose.joints());
  for (std::size_t f = 0; f < pose.frames(); ++f) {
    for (std::size_t j = 0; j < pose.joints(); ++j) {
      const double x = pose.at(f, j, 0), y = pose.at(f, j, 1), z = pose.at(f, j, 2);
      if (cam.kind == ProjectionKind::orthographic) {
        out.at(f, j, 0) = cam.focal * x;
        out.at(f, j, 1) = cam.focal * y;
      } else {
        const double depth = z + cam.depth_offset;
        if (!(depth > 0.0)) {
          throw ProjectionError("non-positive camera depth at frame " +
                                std::to_string(f) + ", joint " + std::to_string(j));
        }
        out.at(f, j, 0) = cam.focal * x / depth;
        out.at(f, j, 1) = cam.focal * y / depth;
      }
    }
  }
  return out;
}

struct SynthConfig {
  std::size_t frames = 27;
  double amplitude = 0.6;        // peak local joint rotation, radians
  double period = 30.0;          // mean motion period, frames
  double yaw_range = 3.14159265358979323846;  // initial heading drawn from [-r, r]
  Camera camera;

  void validate() const {
    if (frames < 1) throw ConfigError("synth: frames must be >= 1");
    if (amplitude < 0.0) throw ConfigError("synth: amplitude must be >= 0");
    if (!(period > 0.0)) throw ConfigError("synth: period must be positive");
    if (yaw_range < 0.0) throw ConfigError("synth: yaw range must be >= 0");
    camera.validate();
  }
};

struct SynthSample {
  JointSequence3D pose3d;
  JointSequence2D pose2d;
};

namespace detail {

using Rot = std::array<std::array<double, 3>, 3>;

inline Rot rot_mul(const Rot& a, const Rot& b) {
  Rot c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Rot rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return Rot{{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
}
inline Rot rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return Rot{{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
}
inline Rot rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  return Rot{{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
}

struct JointMotion {
  double amp_x, amp_z, omega_x, omega_z, phase_x, phase_z;
};

}  // namespace detail

// Rest skeleton animated by per-joint sinusoidal rotations composed through
// forward kinematics, so bone lengths are exactly those of the rest pose.
// The 3D output is root-relative; the 2D output is its camera projection.
inline SynthSample synth_sequence(const SynthConfig& cfg, const SkeletonTopology& topo,
                                  std::uint64_t seed) {
  cfg.validate();
  topo.validate();
  if (topo.rest_offsets.size() != topo.joint_count)
    throw TopologyError("synth: topology has no rest pose");
  Rng rng = make_rng(seed, "synth");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double kTwoPi = 6.28318530717958647692;

  const double yaw0 = (2.0 * unit(rng) - 1.0) * cfg.yaw_range;
  const double yaw_omega = kTwoPi / (cfg.period * (2.0 + 2.0 * unit(rng)));
  const double yaw_phase = kTwoPi * unit(rng);
  std::vector<detail::JointMotion> motion(topo.joint_count);
  for (auto& m : motion) {
    m.amp_x = cfg.amplitude * (0.3 + 0.7 * unit(rng));
    m.amp_z = cfg.amplitude * 0.5 * unit(rng);
    m.omega_x = kTwoPi / (cfg.period * (0.7 + 0.6 * unit(rng)));
    m.omega_z = kTwoPi / (cfg.period * (0.7 + 0.6 * unit(rng)));
    m.phase_x = kTwoPi * unit(rng);
    m.phase_z = kTwoPi * unit(rng);
  }

  const auto order = topo.traversal_order();
  const auto parent = topo.parents();
  JointSequence3D pose(cfg.frames, topo.joint_count);
  std::vector<detail::Rot> world(topo.joint_count);
  std::vector<std::array<double, 3>> pos(topo.joint_count);
  for (std::size_t f = 0; f < cfg.frames; ++f) {
    const double t = static_cast<double>(f);
    const double yaw = yaw0 + 0.5 * cfg.amplitude * std::sin(yaw_omega * t + yaw_phase);
    for (auto j : order) {
      if (parent[j] < 0) {
        world[j] = detail::rot_y(yaw);
        pos[j] = {0.0, 0.0, 0.0};
        continue;
      }
      const auto& m = motion[j];
      const auto local = detail::rot_mul(detail::rot_x(m.amp_x * std::sin(m.omega_x * t + m.phase_x)),
                                         detail::rot_z(m.amp_z * std::sin(m.omega_z * t + m.phase_z)));
      const std::size_t p = static_cast<std::size_t>(parent[j]);
      world[j] = detail::rot_mul(world[p], local);
      const auto& o = topo.rest_offsets[j];
      for (int i = 0; i < 3; ++i) {
        pos[j][i] = pos[p][i] + world[j][i][0] * o[0] + world[j][i][1] * o[1] +
                    world[j][i][2] * o[2];
      }
    }
    for (std::size_t j = 0; j < topo.joint_count; ++j)
      for (std::size_t c = 0; c < 3; ++c) pose.at(f, j, c) = pos[j][c];
  }
  JointSequence2D pose2d = project(pose, cfg.camera);
  return {std::move(pose), std::move(pose2d)};
}

// Adds i.i.d. N(0, sigma^2) to every coordinate.
inline JointSequence2D add_noise(const JointSequence2D& pose, double sigma,
                                 std::uint64_t seed) {
  if (sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
  JointSequence2D out = pose;
  if (sigma == 0.0) return out;
  Rng rng = make_rng(seed, "noise");
  std::normal_distribution<double> normal(0.0, sigma);
  for (auto& v : out.tensor().storage()) v += normal(rng);
  return out;
}

// Negates x and swaps every mirror pair.
template <std::size_t Dim>
JointSequence<Dim> hflip(const JointSequence<Dim>& pose, const SkeletonTopology& topo) {
  if (pose.joints() != topo.joint_count)
    throw TopologyError("hflip: pose has " + std::to_string(pose.joints()) +
                        " joints, topology has " + std::to_string(topo.joint_count));
  for (const auto& m : topo.mirror_pairs) {
    if (m.left >= topo.joint_count || m.right >= topo.joint_count)
      throw TopologyError("hflip: mirror pair index out of range");
  }
  JointSequence<Dim> out = pose;
  for (std::size_t f = 0; f < pose.frames(); ++f) {
    for (std::size_t j = 0; j < pose.joints(); ++j) out.at(f, j, 0) = -pose.at(f, j, 0);
    for (const auto& m : topo.mirror_pairs) {
      for (std::size_t c = 0; c < Dim; ++c) std::swap(out.at(f, m.left, c), out.at(f, m.right, c));
    }
  }
  return out;
}

inline std::pair<JointSequence2D, JointSequence3D> hflip(const JointSequence2D& pose2d,
                                                  const JointSequence3D& pose3d,
                                                  const SkeletonTopology& topo) {
  return {hflip(pose2d, topo), hflip(pose3d, topo)};
}

// Subtracts the root joint from every joint, per frame.
template <std::size_t Dim>
JointSequence<Dim> root_relative(const JointSequence<Dim>& pose, std::size_t root = 0) {
  if (root >= pose.joints()) throw DimensionError("root index out of range");
  JointSequence<Dim> out = pose;
  for (std::size_t f = 0; f < pose.frames(); ++f)
    for (std::size_t j = 0; j < pose.joints(); ++j)
      for (std::size_t c = 0; c < Dim; ++c) out.at(f, j, c) -= pose.at(f, root, c);
  return out;
}

}  // namespace poselift::skeleton
