#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dap/geometry.hpp"

namespace dap {

// Proximity-based affordance, one value per scene point, range (-1, 1].
// 1 exactly on the key part, approaching -1 far away.
struct AffordanceMap {
    std::vector<double> values;
};

// Per-point instantaneous motion, zero off the moving part.
struct FlowField {
    std::vector<Vec3> vectors;
    bool degenerate_step = false;  // set when j_next == j_now in normalize_flow
};

enum class StageLabel : uint8_t { Approach = 0, Manipulate = 1 };

enum class GripperState : uint8_t { Open = 0, Closed = 1 };

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// Smallest affordance value we emit. The formula's open lower bound -1 is
// unreachable in reals but f64 rounding hits it once sigmoid saturates; the
// clamp keeps the range invariant while sitting below every value the
// formula can produce without saturating.
inline constexpr double kAffordanceFloor = -1.0 + 1e-15;

// A(p) = 3 - 4*sigmoid(alpha * d(p)), d(p) = distance to nearest key-part point.
inline AffordanceMap affordance_map(const PointCloud& scene, const PointCloud& key_part,
                                    double alpha) {
    if (alpha <= 0.0) throw std::invalid_argument("scaling factor must be positive");
    if (key_part.empty()) throw std::invalid_argument("empty key-part cloud");
    AffordanceMap map;
    map.values.reserve(scene.size());
    for (const auto& p : scene.points) {
        double d = nearest_distance(p, key_part);
        double a = 3.0 - 4.0 * sigmoid(alpha * d);
        map.values.push_back(std::max(a, kAffordanceFloor));
    }
    return map;
}

// Raw per-point flow between two joint configurations: masked points move by
// the pose delta T(j_next) ∘ T(j_now)^-1, everything else stays put. One
// frame per step, so dt = 1 and the division drops out.
inline FlowField motion_flow(const PointCloud& scene, const std::vector<bool>& moving_mask,
                             const Joint& joint, double j_now, double j_next) {
    if (moving_mask.size() != scene.size())
        throw std::invalid_argument("moving mask length must equal scene size");
    RigidTransform delta = fk_transform(joint, j_next).compose(fk_transform(joint, j_now).inverse());
    FlowField field;
    field.vectors.resize(scene.size(), Vec3{});
    for (std::size_t i = 0; i < scene.size(); ++i) {
        if (!moving_mask[i]) continue;
        field.vectors[i] = delta.apply(scene.points[i]) - scene.points[i];
    }
    return field;
}

inline double distance_to_axis(const Point3& p, const Joint& joint) {
    Vec3 rel = p - joint.origin;
    Vec3 radial = rel - joint.axis * rel.dot(joint.axis);
    return radial.norm();
}

// Scale-invariant flow. Prismatic motion (and free rigid translation) rescales
// every nonzero vector to unit length; revolute motion divides by
// v_max = |j_next - j_now| * r_max with r_max the largest moving-point radius.
inline FlowField normalize_flow(const FlowField& raw, const Joint& joint, double j_now,
                                double j_next, const std::vector<bool>& moving_mask,
                                const PointCloud& moving_points) {
    if (moving_mask.size() != raw.vectors.size())
        throw std::invalid_argument("moving mask length must equal field size");
    FlowField out = raw;  // a degenerate step returns the (all-zero) field unchanged
    if (j_next == j_now) {
        out.degenerate_step = true;
        return out;
    }
    if (joint.kind == Joint::Kind::Prismatic) {
        for (std::size_t i = 0; i < out.vectors.size(); ++i) {
            if (!moving_mask[i]) continue;
            double n = out.vectors[i].norm();
            if (n > 0.0) out.vectors[i] = out.vectors[i] / n;
        }
        return out;
    }
    double r_max = 0.0;
    for (const auto& p : moving_points.points)
        r_max = std::max(r_max, distance_to_axis(p, joint));
    if (r_max == 0.0) throw std::runtime_error("moving part lies on axis");
    double v_max = std::abs(j_next - j_now) * r_max;
    for (std::size_t i = 0; i < out.vectors.size(); ++i) {
        if (!moving_mask[i]) continue;
        out.vectors[i] = out.vectors[i] / v_max;
    }
    return out;
}

// Derive the binary gripper state from a width sequence. Threshold at half of
// full open width with +/-5% hysteresis; sequences start in the open state.
inline std::vector<GripperState> gripper_states_from_widths(const std::vector<double>& widths) {
    std::vector<GripperState> states;
    states.reserve(widths.size());
    GripperState cur = GripperState::Open;
    for (double w : widths) {
        if (cur == GripperState::Open && w < 0.45)
            cur = GripperState::Closed;
        else if (cur == GripperState::Closed && w > 0.55)
            cur = GripperState::Open;
        states.push_back(cur);
    }
    return states;
}

// Gripper-transition heuristic: an open->closed transition starts the
// manipulation stage, closed->open ends it and labeling resets to Approach,
// so multi-step tasks cycle. Trailing frames after the final release stay
// Approach.
inline std::vector<StageLabel> annotate_phases(const std::vector<GripperState>& gripper) {
    if (gripper.empty()) throw std::invalid_argument("empty gripper sequence");
    if (gripper.front() == GripperState::Closed)
        throw std::invalid_argument("demonstration must begin pre-grasp");
    std::vector<StageLabel> labels;
    labels.reserve(gripper.size());
    StageLabel cur = StageLabel::Approach;
    GripperState prev = gripper.front();
    labels.push_back(StageLabel::Approach);
    for (std::size_t i = 1; i < gripper.size(); ++i) {
        GripperState g = gripper[i];
        if (prev == GripperState::Open && g == GripperState::Closed)
            cur = StageLabel::Manipulate;
        else if (prev == GripperState::Closed && g == GripperState::Open)
            cur = StageLabel::Approach;
        labels.push_back(cur);
        prev = g;
    }
    return labels;
}

}  // namespace dap
