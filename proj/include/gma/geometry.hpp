#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <vector>

namespace gma {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// Unit quaternion stored as (w, x, y, z).
using Quat = Eigen::Vector4d;

using Face = std::array<int, 3>;

/// Rotation matrix of a (not necessarily normalized) quaternion; the input is
/// normalized first.
Mat3 quat_to_matrix(const Quat& q);

/// Backpropagates a gradient on the rotation matrix to the raw quaternion,
/// including the normalization step. The result is orthogonal to q.
Quat quat_to_matrix_backward(const Quat& q, const Mat3& grad_matrix);

/// Quaternion of a proper rotation matrix, canonicalized to w >= 0.
Quat matrix_to_quat(const Mat3& r);

Quat quat_multiply(const Quat& a, const Quat& b);

/// Rodrigues formula for an axis-angle vector.
Mat3 axis_angle_to_matrix(const Vec3& axis_angle);

}  // namespace gma
