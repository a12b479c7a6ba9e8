#pragma once

// 2-d affine poses in homogeneous coordinates, stored as the offset from the
// identity: a pose with offset A acts through the realized matrix I + A whose
// bottom row is fixed at [0,0,1].

#include "caps/tensor.hpp"

#include <cmath>

namespace caps {

inline constexpr double kPoseSingularTol = 1e-9;

struct Pose {
  Tensor offset;  // 2x3

  Pose() : offset(Tensor::zeros({2, 3})) {}
  explicit Pose(Tensor off) : offset(std::move(off)) {
    if (offset.shape() != Shape{2, 3})
      throw ShapeError("pose: offset must be 2x3, got " + shape_str(offset.shape()));
  }
};

inline Pose identity_pose() { return Pose(); }

// I + A as a 3x3 tensor with constant bottom row.
inline Tensor realized(const Pose& p) {
  Tensor top = add(p.offset, Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0}));
  return concat0(top, Tensor::from({1, 3}, {0, 0, 1}));
}

inline double pose_determinant(const Pose& p) {
  const auto& a = p.offset.values();
  return (1.0 + a[0]) * (1.0 + a[4]) - a[1] * a[3];
}

inline bool pose_invertible(const Pose& p, double tol = kPoseSingularTol) {
  return std::abs(pose_determinant(p)) > tol;
}

// realized(result) = realized(parent) * realized(offset).
inline Pose compose(const Pose& parent, const Pose& offset) {
  Tensor prod = matmul(realized(parent), realized(offset));
  Tensor top = slice0(prod, 0, 2);
  return Pose(sub(top, Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0})));
}

inline Pose invert(const Pose& p) {
  if (!pose_invertible(p))
    throw DomainError("invert: pose is singular (|det| <= 1e-9)");
  Tensor a = reshape(p.offset, {6});
  Tensor r00 = take(a, {0}) + 1.0, r01 = take(a, {1}), r02 = take(a, {2});
  Tensor r10 = take(a, {3}), r11 = take(a, {4}) + 1.0, r12 = take(a, {5});
  Tensor det = r00 * r11 - r01 * r10;
  Tensor i00 = r11 / det, i01 = neg(r01) / det;
  Tensor i10 = neg(r10) / det, i11 = r00 / det;
  Tensor i02 = (r01 * r12 - r11 * r02) / det;
  Tensor i12 = (r10 * r02 - r00 * r12) / det;
  Tensor off = stack_scalars({i00 - 1.0, i01, i02, i10, i11 - 1.0, i12});
  return Pose(reshape(off, {2, 3}));
}

// Realized matrix T(tx,ty) * R(angle) * Shear(shear) * Scale(sx, sy); angle
// in radians. Fixed order so tests are reproducible.
inline Pose make_pose(double tx, double ty, double angle = 0.0, double scale_x = 1.0,
                      double scale_y = 1.0, double shear = 0.0) {
  if (scale_x == 0.0 || scale_y == 0.0)
    throw DomainError("make_pose: zero scale");
  const double c = std::cos(angle), s = std::sin(angle);
  // R * Sh * S
  const double m00 = c * scale_x, m01 = (c * shear - s) * scale_y;
  const double m10 = s * scale_x, m11 = (s * shear + c) * scale_y;
  return Pose(Tensor::from({2, 3}, {m00 - 1.0, m01, tx, m10, m11 - 1.0, ty}));
}

// Translation column of the realized matrix.
inline std::pair<double, double> pose_translation(const Pose& p) {
  return {p.offset[2], p.offset[5]};
}

// Rotation angle recovered from the first column; exact for poses built as
// rotation times positive uniform scale.
inline double pose_rotation(const Pose& p) {
  return std::atan2(p.offset[3], 1.0 + p.offset[0]);
}

}  // namespace caps
