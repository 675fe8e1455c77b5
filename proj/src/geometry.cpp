#include "gma/geometry.hpp"

#include <cmath>

namespace gma {

namespace {

// Rotation matrix of a unit quaternion plus its partial derivatives with
// respect to (w, x, y, z).
Mat3 unit_quat_matrix(double w, double x, double y, double z) {
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

}  // namespace

Mat3 quat_to_matrix(const Quat& q) {
    const Quat u = q / q.norm();
    return unit_quat_matrix(u[0], u[1], u[2], u[3]);
}

Quat quat_to_matrix_backward(const Quat& q, const Mat3& g) {
    const double n = q.norm();
    const Quat u = q / n;
    const double w = u[0], x = u[1], y = u[2], z = u[3];

    Quat gu;
    // d r / d w
    gu[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    // d r / d x
    gu[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
                 w * g(2, 1) - 2 * x * g(2, 2));
    // d r / d y
    gu[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                 z * g(2, 1) - 2 * y * g(2, 2));
    // d r / d z
    gu[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
                 x * g(2, 0) + y * g(2, 1));

    return (gu - u * u.dot(gu)) / n;
}

Quat matrix_to_quat(const Mat3& r) {
    Eigen::Quaterniond e(r);
    Quat q(e.w(), e.x(), e.y(), e.z());
    q.normalize();
    if (q[0] < 0) q = -q;
    return q;
}

Quat quat_multiply(const Quat& a, const Quat& b) {
    return Quat(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

Mat3 axis_angle_to_matrix(const Vec3& aa) {
    const double angle = aa.norm();
    if (angle < 1e-12) {
        // first-order expansion keeps tiny rotations differentiable
        Mat3 k;
        k << 0, -aa.z(), aa.y(), aa.z(), 0, -aa.x(), -aa.y(), aa.x(), 0;
        return Mat3::Identity() + k;
    }
    return Eigen::AngleAxisd(angle, aa / angle).toRotationMatrix();
}

}  // namespace gma
