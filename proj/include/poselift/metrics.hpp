#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poselift/errors.hpp"
#include "poselift/skeleton.hpp"
#include "poselift/svd3.hpp"

namespace poselift::metrics {

using skeleton::JointSequence3D;

struct MetricsReport {
  double mpjpe = 0.0;    // mm
  double p_mpjpe = 0.0;  // mm
  double pck150 = 0.0;   // percent
  double auc = 0.0;      // percent
  std::vector<double> per_joint_mpjpe;
  std::size_t excluded_frames = 0;  // skipped by P-MPJPE alignment

  nlohmann::json to_json() const {
    return {{"mpjpe", mpjpe},
            {"p_mpjpe", p_mpjpe},
            {"pck150", pck150},
            {"auc", auc},
            {"per_joint_mpjpe", per_joint_mpjpe},
            {"excluded_frames", excluded_frames}};
  }

  static std::string csv_header() { return "mpjpe,p_mpjpe,pck150,auc"; }

  std::string csv_row() const {
    std::ostringstream os;
    os.precision(17);
    os << mpjpe << ',' << p_mpjpe << ',' << pck150 << ',' << auc;
    return os.str();
  }
};

namespace detail {

inline void require_match(const JointSequence3D& pred, const JointSequence3D& gt) {
  if (pred.tensor().shape() != gt.tensor().shape())
    throw DimensionError("metrics: prediction " + shape_string(pred.tensor().shape()) +
                         " vs ground truth " + shape_string(gt.tensor().shape()));
}

// Per (frame, joint) Euclidean error after root-centering both poses.
inline std::vector<double> joint_errors(const JointSequence3D& pred, const JointSequence3D& gt,
                                        std::size_t root) {
  require_match(pred, gt);
  if (pred.joints() == 0 || root >= pred.joints())
    throw DimensionError("metrics: root index out of range");
  std::vector<double> err;
  err.reserve(pred.frames() * pred.joints());
  for (std::size_t f = 0; f < pred.frames(); ++f) {
    for (std::size_t j = 0; j < pred.joints(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = (pred.at(f, j, c) - pred.at(f, root, c)) -
                         (gt.at(f, j, c) - gt.at(f, root, c));
        s += d * d;
      }
      err.push_back(std::sqrt(s));
    }
  }
  return err;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double pck_of(const std::vector<double>& err, double threshold) {
  if (err.empty()) return 100.0;
  std::size_t hit = 0;
  for (double e : err) hit += e < threshold ? 1 : 0;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(err.size());
}

}  // namespace detail

inline double mpjpe(const JointSequence3D& pred, const JointSequence3D& gt, std::size_t root = 0) {
  return detail::mean(detail::joint_errors(pred, gt, root));
}

inline double pck(const JointSequence3D& pred, const JointSequence3D& gt,
                  double threshold_mm = 150.0, std::size_t root = 0) {
  return detail::pck_of(detail::joint_errors(pred, gt, root), threshold_mm);
}

inline std::vector<double> auc_thresholds() {
  std::vector<double> t;
  for (int k = 1; k <= 30; ++k) t.push_back(5.0 * k);
  return t;
}

inline double auc(const JointSequence3D& pred, const JointSequence3D& gt, std::size_t root = 0) {
  const auto err = detail::joint_errors(pred, gt, root);
  double s = 0.0;
  const auto grid = auc_thresholds();
  for (double t : grid) s += detail::pck_of(err, t);
  return s / static_cast<double>(grid.size());
}

// Similarity transform (scale, rotation, translation) minimizing the squared
// distance from `src` to `dst`, both [J, 3] for one frame. Returns false when
// the source points span fewer than two dimensions.
struct Similarity {
  double scale = 1.0;
  numerics::Mat3 rotation = numerics::mat3_identity();
  numerics::Vec3 translation{};
};

inline bool procrustes(const std::vector<numerics::Vec3>& src,
                       const std::vector<numerics::Vec3>& dst, Similarity& out) {
  const std::size_t n = src.size();
  if (n < 3 || dst.size() != n) return false;
  numerics::Vec3 ms{}, md{};
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      ms[c] += src[i][c];
      md[c] += dst[i][c];
    }
  for (int c = 0; c < 3; ++c) {
    ms[c] /= static_cast<double>(n);
    md[c] /= static_cast<double>(n);
  }
  numerics::Mat3 h{};
  double src_var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) {
      const double xa = src[i][a] - ms[a];
      src_var += xa * xa;
      for (int b = 0; b < 3; ++b) h[a][b] += xa * (dst[i][b] - md[b]);
    }
  }
  // h = U S V^T; the optimal rotation is V D U^T with D fixing reflections.
  const numerics::Svd3 svd = numerics::svd3(h);
  if (!(src_var > 0.0) || !(svd.s[0] > 0.0) || svd.s[1] <= 1e-12 * svd.s[0]) return false;
  const numerics::Mat3 vut = numerics::mat3_mul(svd.v, numerics::mat3_transpose(svd.u));
  const double sign = numerics::mat3_det(vut) < 0.0 ? -1.0 : 1.0;
  numerics::Mat3 vd = svd.v;
  for (int r = 0; r < 3; ++r) vd[r][2] *= sign;
  out.rotation = numerics::mat3_mul(vd, numerics::mat3_transpose(svd.u));
  out.scale = (svd.s[0] + svd.s[1] + sign * svd.s[2]) / src_var;
  for (int r = 0; r < 3; ++r) {
    double rm = 0.0;
    for (int c = 0; c < 3; ++c) rm += out.rotation[r][c] * ms[c];
    out.translation[r] = md[r] - out.scale * rm;
  }
  return true;
}

struct ProcrustesResult {
  double p_mpjpe = 0.0;
  std::vector<std::size_t> excluded_frames;
};

// Per frame: align pred to gt with a similarity transform, then MPJPE.
// Degenerate frames are excluded and listed.
inline ProcrustesResult p_mpjpe_detailed(const JointSequence3D& pred, const JointSequence3D& gt) {
  detail::require_match(pred, gt);
  ProcrustesResult res;
  double total = 0.0;
  std::size_t used = 0;
  const std::size_t jn = pred.joints();
  std::vector<numerics::Vec3> src(jn), dst(jn);
  for (std::size_t f = 0; f < pred.frames(); ++f) {
    for (std::size_t j = 0; j < jn; ++j)
      for (std::size_t c = 0; c < 3; ++c) {
        src[j][c] = pred.at(f, j, c);
        dst[j][c] = gt.at(f, j, c);
      }
    Similarity sim;
    if (!procrustes(src, dst, sim)) {
      res.excluded_frames.push_back(f);
      continue;
    }
    double frame_sum = 0.0;
    for (std::size_t j = 0; j < jn; ++j) {
      double s = 0.0;
      for (int r = 0; r < 3; ++r) {
        double v = sim.translation[r];
        for (int c = 0; c < 3; ++c) v += sim.scale * sim.rotation[r][c] * src[j][c];
        const double d = v - dst[j][r];
        s += d * d;
      }
      frame_sum += std::sqrt(s);
    }
    total += frame_sum / static_cast<double>(jn);
    ++used;
  }
  res.p_mpjpe = used ? total / static_cast<double>(used) : 0.0;
  return res;
}

inline double p_mpjpe(const JointSequence3D& pred, const JointSequence3D& gt) {
  return p_mpjpe_detailed(pred, gt).p_mpjpe;
}

inline MetricsReport evaluate(const JointSequence3D& pred, const JointSequence3D& gt,
                              std::size_t root = 0) {
  const auto err = detail::joint_errors(pred, gt, root);
  MetricsReport r;
  r.mpjpe = detail::mean(err);
  r.pck150 = detail::pck_of(err, 150.0);
  double s = 0.0;
  const auto grid = auc_thresholds();
  for (double t : grid) s += detail::pck_of(err, t);
  r.auc = s / static_cast<double>(grid.size());
  const std::size_t jn = pred.joints();
  r.per_joint_mpjpe.assign(jn, 0.0);
  for (std::size_t i = 0; i < err.size(); ++i) r.per_joint_mpjpe[i % jn] += err[i];
  for (auto& v : r.per_joint_mpjpe) v /= static_cast<double>(pred.frames());
  const auto pa = p_mpjpe_detailed(pred, gt);
  r.p_mpjpe = pa.p_mpjpe;
  r.excluded_frames = pa.excluded_frames.size();
  return r;
}

// Pools many sequences into one report: every (frame, joint) counts once.
inline MetricsReport evaluate(const std::vector<JointSequence3D>& pred,
                              const std::vector<JointSequence3D>& gt, std::size_t root = 0) {
  if (pred.size() != gt.size()) throw DimensionError("metrics: sequence count mismatch");
  if (pred.empty()) return {};
  const std::size_t jn = gt.front().joints();
  std::size_t frames = 0;
  for (const auto& g : gt) {
    if (g.joints() != jn) throw DimensionError("metrics: joint count differs across sequences");
    frames += g.frames();
  }
  JointSequence3D p_all(frames, jn), g_all(frames, jn);
  std::size_t off = 0;
  for (std::size_t s = 0; s < gt.size(); ++s) {
    detail::require_match(pred[s], gt[s]);
    const std::size_t n = gt[s].tensor().size();
    std::copy_n(pred[s].tensor().storage().begin(), n, p_all.tensor().storage().begin() + off);
    std::copy_n(gt[s].tensor().storage().begin(), n, g_all.tensor().storage().begin() + off);
    off += n;
  }
  return evaluate(p_all, g_all, root);
}

}  // namespace poselift::metrics
