#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace dap {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        double n = norm();
        if (n == 0.0) throw std::runtime_error("cannot normalize zero vector");
        return *this / n;
    }
    bool finite() const {
        return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
    }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

using Point3 = Vec3;

// Rigid body transform p -> R*p + t. Rotation stored row-major.
struct RigidTransform {
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
    Vec3 translation{};

    static RigidTransform identity() { return {}; }

    Vec3 rotate(const Vec3& p) const {
        const auto& r = rotation;
        return {r[0] * p.x + r[1] * p.y + r[2] * p.z,
                r[3] * p.x + r[4] * p.y + r[5] * p.z,
                r[6] * p.x + r[7] * p.y + r[8] * p.z};
    }

    Vec3 apply(const Vec3& p) const { return rotate(p) + translation; }

    // rotation is orthonormal, so the inverse uses the transpose
    RigidTransform inverse() const {
        RigidTransform inv;
        const auto& r = rotation;
        inv.rotation = {r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]};
        inv.translation = -inv.rotate(translation);
        return inv;
    }

    // this ∘ other: apply `other` first
    RigidTransform compose(const RigidTransform& other) const {
        RigidTransform out;
        const auto& a = rotation;
        const auto& b = other.rotation;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += a[3 * i + k] * b[3 * k + j];
                out.rotation[3 * i + j] = s;
            }
        out.translation = rotate(other.translation) + translation;
        return out;
    }

    bool orthonormal(double tol = 1e-9) const {
        const auto& r = rotation;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += r[3 * k + i] * r[3 * k + j];
                if (std::abs(s - (i == j ? 1.0 : 0.0)) > tol) return false;
            }
        double det = r[0] * (r[4] * r[8] - r[5] * r[7]) -
                     r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
        return std::abs(det - 1.0) <= tol;
    }
};

// Rodrigues rotation about a unit axis through the origin.
inline RigidTransform axis_angle_rotation(const Vec3& axis, double angle) {
    double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    double ax = axis.x, ay = axis.y, az = axis.z;
    RigidTransform tr;
    tr.rotation = {t * ax * ax + c,      t * ax * ay - s * az, t * ax * az + s * ay,
                   t * ax * ay + s * az, t * ay * ay + c,      t * ay * az - s * ax,
                   t * ax * az - s * ay, t * ay * az + s * ax, t * az * az + c};
    return tr;
}

struct Joint {
    enum class Kind { Prismatic, Revolute };

    Kind kind = Kind::Prismatic;
    Vec3 axis{0, 0, 1};
    Point3 origin{};  // revolute pivot; ignored for prismatic
    double lo = 0.0;
    double hi = 1.0;

    Joint() = default;
    Joint(Kind k, const Vec3& ax, const Point3& org, double lo_, double hi_)
        : kind(k), axis(ax), origin(org), lo(lo_), hi(hi_) {
        if (std::abs(axis.norm() - 1.0) > 1e-9)
            throw std::invalid_argument("joint axis must be a unit vector");
        if (!(lo < hi)) throw std::invalid_argument("joint limits require lo < hi");
    }

    double clamp(double value) const { return std::min(hi, std::max(lo, value)); }
};

// Per-point channel: width 1 (scalar) or 3 (vector), stored flat.
struct Channel {
    int width = 1;
    std::vector<double> data;
};

struct PointCloud {
    std::vector<Point3> points;
    std::map<std::string, Channel> channels;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }

    void set_scalar_channel(const std::string& name, std::vector<double> values) {
        if (values.size() != points.size())
            throw std::invalid_argument("channel length must equal point count");
        channels[name] = Channel{1, std::move(values)};
    }

    void set_vec3_channel(const std::string& name, const std::vector<Vec3>& values) {
        if (values.size() != points.size())
            throw std::invalid_argument("channel length must equal point count");
        Channel ch{3, {}};
        ch.data.reserve(3 * values.size());
        for (const auto& v : values) {
            ch.data.push_back(v.x);
            ch.data.push_back(v.y);
            ch.data.push_back(v.z);
        }
        channels[name] = std::move(ch);
    }

    bool has_channel(const std::string& name) const { return channels.count(name) > 0; }

    const Channel& channel(const std::string& name) const {
        auto it = channels.find(name);
        if (it == channels.end())
            throw std::out_of_range("no such channel: " + name);
        return it->second;
    }

    Vec3 channel_vec3(const std::string& name, std::size_t i) const {
        const Channel& ch = channel(name);
        return {ch.data[3 * i], ch.data[3 * i + 1], ch.data[3 * i + 2]};
    }
};

// Minimum Euclidean distance from p to any point of the cloud.
inline double nearest_distance(const Point3& p, const PointCloud& cloud) {
    if (cloud.empty()) throw std::invalid_argument("empty key-part cloud");
    double best = std::numeric_limits<double>::infinity();
    for (const auto& k : cloud.points) best = std::min(best, (p - k).norm());
    return best;
}

// Greedy max-min-distance subset of size n. Ties break toward the lowest
// point index; selected points keep their channel values.
inline PointCloud farthest_point_sample(const PointCloud& cloud, std::size_t n,
                                        std::size_t start_index = 0) {
    if (n == 0) throw std::invalid_argument("farthest_point_sample: n must be >= 1");
    if (n > cloud.size())
        throw std::invalid_argument("farthest_point_sample: n exceeds cloud size");
    if (start_index >= cloud.size())
        throw std::invalid_argument("farthest_point_sample: start_index out of range");

    const std::size_t m = cloud.size();
    std::vector<std::size_t> selected;
    selected.reserve(n);
    std::vector<double> min_dist(m, std::numeric_limits<double>::infinity());

    std::size_t current = start_index;
    selected.push_back(current);
    for (std::size_t step = 1; step < n; ++step) {
        double best = -1.0;
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < m; ++i) {
            double d = (cloud.points[i] - cloud.points[current]).norm();
            if (d < min_dist[i]) min_dist[i] = d;
            if (min_dist[i] > best) {
                best = min_dist[i];
                best_idx = i;
            }
        }
        current = best_idx;
        selected.push_back(current);
    }

    PointCloud out;
    out.points.reserve(n);
    for (std::size_t idx : selected) out.points.push_back(cloud.points[idx]);
    for (const auto& [name, ch] : cloud.channels) {
        Channel sub{ch.width, {}};
        sub.data.reserve(ch.width * n);
        for (std::size_t idx : selected)
            for (int w = 0; w < ch.width; ++w) sub.data.push_back(ch.data[ch.width * idx + w]);
        out.channels[name] = std::move(sub);
    }
    return out;
}

// Forward kinematics: pose of the moving part at the given joint value,
// relative to its rest pose.
inline RigidTransform fk_transform(const Joint& joint, double value) {
    if (joint.kind == Joint::Kind::Prismatic) {
        RigidTransform t;
        t.translation = joint.axis * value;
        return t;
    }
    RigidTransform rot = axis_angle_rotation(joint.axis, value);
    rot.translation = joint.origin - rot.rotate(joint.origin);
    return rot;
}

inline PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud) {
    PointCloud out = cloud;
    for (auto& p : out.points) p = t.apply(p);
    return out;
}

}  // namespace dap
