#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include "dap/priors.hpp"
#include "dap/toyenv.hpp"

using namespace dap;

namespace {

std::string state_fingerprint(const EnvState& s) {
    std::ostringstream os;
    os.precision(17);
    os << s.joint_value << "," << s.ee_position.x << "," << s.ee_position.y << ","
       << s.ee_position.z << "," << s.gripper_width << "," << int(s.attached) << ","
       << s.clamped_flag << "," << s.step_count << "," << s.block_pos.x << ","
       << s.block_pos.y << "," << s.block_pos.z << "," << s.block_in_drawer;
    return os.str();
}

std::string scene_fingerprint(const ArticulatedScene& sc) {
    std::ostringstream os;
    os.precision(17);
    for (const auto& p : sc.static_cloud.points) os << p.x << "," << p.y << "," << p.z << ";";
    for (const auto& p : sc.moving_cloud_rest.points) os << p.x << "," << p.y << ";";
    os << sc.joint.axis.x << "," << sc.joint.axis.y << "," << sc.joint.axis.z << ","
       << sc.joint.origin.x << "," << sc.joint.origin.y;
    return os.str();
}

// Run the scripted expert for one episode; returns (success, width history).
std::pair<bool, std::vector<double>> run_expert(TaskId id, std::uint64_t seed) {
    TaskSpec task = make_task(id);
    auto [scene, state] = reset(task, seed);
    std::vector<double> widths{state.gripper_width};
    bool success = false;
    for (int t = 0; t < task.horizon; ++t) {
        Action a = scripted_expert(scene, state, task);
        state = step(scene, state, a);
        widths.push_back(state.gripper_width);
        if (is_success(scene, state, task) && state.gripper_width > 0.55) {
            success = true;
            break;
        }
    }
    return {success, widths};
}

}  // namespace

TEST_CASE("reset is bit-deterministic in (task, seed)") {
    for (auto id : {TaskId::OpenDrawer, TaskId::OpenDoor, TaskId::PutBlockShort}) {
        TaskSpec task = make_task(id);
        auto [s1, e1] = reset(task, 31);
        auto [s2, e2] = reset(task, 31);
        REQUIRE(scene_fingerprint(s1) == scene_fingerprint(s2));
        REQUIRE(state_fingerprint(e1) == state_fingerprint(e2));
        auto [s3, e3] = reset(task, 32);
        REQUIRE(scene_fingerprint(s1) != scene_fingerprint(s3));
    }
}

TEST_CASE("open tasks reset with the joint closed") {
    for (auto id : {TaskId::OpenDrawer, TaskId::OpenDoor}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            auto [scene, state] = reset(make_task(id), seed);
            REQUIRE(state.joint_value == 0.0);
        }
    }
}

TEST_CASE("close tasks and block task reset pre-opened") {
    for (auto id : {TaskId::CloseDrawer, TaskId::CloseDoor, TaskId::PutBlockShort}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            auto [scene, state] = reset(make_task(id), seed);
            REQUIRE(state.joint_value >= 0.75 * scene.joint.hi - 1e-12);
            REQUIRE(state.joint_value <= 0.95 * scene.joint.hi + 1e-12);
        }
    }
}

TEST_CASE("EE spawns within the configured annulus around the handle") {
    for (auto id : {TaskId::OpenDrawer, TaskId::OpenDoor, TaskId::PutBlockShort}) {
        TaskSpec task = make_task(id);
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            auto [scene, state] = reset(task, seed);
            double d = (state.ee_position - posed_key_centroid(scene, state.joint_value)).norm();
            REQUIRE(d >= task.spawn_min - 1e-9);
            REQUIRE(d <= task.spawn_max + 1e-9);
        }
    }
}

TEST_CASE("key part is a subset of the moving cloud") {
    for (auto id : {TaskId::OpenDrawer, TaskId::OpenDoor}) {
        auto [scene, state] = reset(make_task(id), 7);
        std::set<std::string> moving;
        std::ostringstream os;
        for (const auto& p : scene.moving_cloud_rest.points) {
            os.str("");
            os.precision(17);
            os << p.x << "," << p.y << "," << p.z;
            moving.insert(os.str());
        }
        for (const auto& p : scene.key_part_rest.points) {
            os.str("");
            os.precision(17);
            os << p.x << "," << p.y << "," << p.z;
            REQUIRE(moving.count(os.str()) == 1);
        }
    }
}

TEST_CASE("zero action changes only the step counter") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 3);
    Action zero;
    zero.delta_ee = {};
    zero.gripper_cmd = state.gripper_width;
    EnvState next = step(scene, state, zero);
    REQUIRE(next.step_count == state.step_count + 1);
    next.step_count = state.step_count;
    REQUIRE(state_fingerprint(next) == state_fingerprint(state));
}

TEST_CASE("EE delta magnitude is clamped to 0.05") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 4);
    Action a;
    a.delta_ee = {10.0, 0.0, 0.0};
    a.gripper_cmd = 1.0;
    EnvState next = step(scene, state, a);
    REQUIRE((next.ee_position - state.ee_position).norm() == Catch::Approx(0.05).margin(1e-12));
}

TEST_CASE("gripper width slews at 0.25 per step") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 5);
    REQUIRE(state.gripper_width == 1.0);
    Action a;
    a.gripper_cmd = 0.0;
    auto s1 = step(scene, state, a);
    REQUIRE(s1.gripper_width == Catch::Approx(0.75));
    auto s2 = step(scene, s1, a);
    REQUIRE(s2.gripper_width == Catch::Approx(0.5));
    auto s3 = step(scene, s2, a);
    REQUIRE(s3.gripper_width == Catch::Approx(0.25));
}

namespace {

// Drive the EE to the handle and close the gripper until attached.
EnvState attach_to_handle(const ArticulatedScene& scene, EnvState state) {
    for (int t = 0; t < 60; ++t) {
        Point3 h = posed_key_centroid(scene, state.joint_value);
        Vec3 to = h - state.ee_position;
        Action a;
        if (to.norm() > 0.01) {
            a.delta_ee = to * (std::min(0.045, to.norm()) / to.norm());
            a.gripper_cmd = 1.0;
        } else {
            a.gripper_cmd = 0.0;
        }
        state = step(scene, state, a);
        if (state.attached == EnvState::Attach::Handle) return state;
    }
    throw std::runtime_error("failed to attach in test harness");
}

}  // namespace

TEST_CASE("prismatic drag projects the commanded delta onto the axis") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 6);
    state = attach_to_handle(scene, state);
    double j0 = state.joint_value;
    Action a;
    a.delta_ee = scene.joint.axis * 0.04;
    a.gripper_cmd = 0.0;
    EnvState next = step(scene, state, a);
    REQUIRE(next.joint_value == Catch::Approx(j0 + 0.04).margin(1e-12));
}

TEST_CASE("revolute drag converts tangential motion to joint angle by radius") {
    auto [scene, state] = reset(make_task(TaskId::OpenDoor), 6);
    state = attach_to_handle(scene, state);
    double j0 = state.joint_value;
    Point3 h = posed_key_centroid(scene, state.joint_value);
    Vec3 rel = h - scene.joint.origin;
    Vec3 radial = rel - scene.joint.axis * rel.dot(scene.joint.axis);
    double radius = radial.norm();
    Vec3 tangent = scene.joint.axis.cross(radial).normalized();
    Action a;
    a.delta_ee = tangent * 0.03;
    a.gripper_cmd = 0.0;
    EnvState next = step(scene, state, a);
    REQUIRE(next.joint_value == Catch::Approx(j0 + 0.03 / radius).margin(1e-12));
}

TEST_CASE("joint value clamps at limits and sets the flag") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 8);
    state = attach_to_handle(scene, state);
    Action pull;
    pull.delta_ee = scene.joint.axis * (-0.05);  // push toward lo = 0
    pull.gripper_cmd = 0.0;
    for (int i = 0; i < 4; ++i) state = step(scene, state, pull);
    REQUIRE(state.joint_value == 0.0);
    REQUIRE(state.clamped_flag);
}

TEST_CASE("orthogonal pulling beyond 0.03 m detaches") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 9);
    state = attach_to_handle(scene, state);
    // Axis is horizontal; pull straight up, orthogonal to it.
    Action up;
    up.delta_ee = {0, 0, 0.02};
    up.gripper_cmd = 0.0;
    auto s1 = step(scene, state, up);
    REQUIRE(s1.attached == EnvState::Attach::Handle);
    auto s2 = step(scene, s1, up);
    REQUIRE(s2.attached == EnvState::Attach::None);  // drift 0.04 > 0.03
}

TEST_CASE("opening the gripper releases the handle") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 10);
    state = attach_to_handle(scene, state);
    Action open;
    open.gripper_cmd = 1.0;
    auto s1 = step(scene, state, open);   // width 0.25 -> 0.5, still attached
    auto s2 = step(scene, s1, open);      // width 0.75 > 0.5: released
    REQUIRE(s2.attached == EnvState::Attach::None);
}

TEST_CASE("attached EE stays near the posed handle centroid") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 11);
    state = attach_to_handle(scene, state);
    Action drag;
    drag.delta_ee = scene.joint.axis * 0.045 + Vec3{0.004, 0, 0.004};
    drag.gripper_cmd = 0.0;
    for (int i = 0; i < 3 && state.attached == EnvState::Attach::Handle; ++i) {
        state = step(scene, state, drag);
        if (state.attached == EnvState::Attach::Handle) {
            double d =
                (state.ee_position - posed_key_centroid(scene, state.joint_value)).norm();
            REQUIRE(d <= kAttachRadius + kDetachDrift + 1e-9);
        }
    }
}

TEST_CASE("joint value never exits its limits under random actions") {
    CounterRng rng(77, 0);
    for (auto id : {TaskId::OpenDrawer, TaskId::OpenDoor}) {
        auto [scene, state] = reset(make_task(id), 12);
        for (int t = 0; t < 150; ++t) {
            Action a;
            a.delta_ee = {rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.06),
                          rng.uniform(-0.06, 0.06)};
            a.gripper_cmd = rng.uniform();
            state = step(scene, state, a);
            REQUIRE(state.joint_value >= scene.joint.lo);
            REQUIRE(state.joint_value <= scene.joint.hi);
            REQUIRE(state.gripper_width >= 0.0);
            REQUIRE(state.gripper_width <= 1.0);
        }
    }
}

TEST_CASE("step is deterministic for identical action sequences") {
    for (int run = 0; run < 2; ++run) {
        // nothing persists between runs; fingerprints must agree
    }
    auto run_once = [] {
        auto [scene, state] = reset(make_task(TaskId::PutBlockShort), 13);
        TaskSpec task = make_task(TaskId::PutBlockShort);
        for (int t = 0; t < task.horizon; ++t) {
            Action a = scripted_expert(scene, state, task);
            state = step(scene, state, a);
        }
        return state_fingerprint(state);
    };
    REQUIRE(run_once() == run_once());
}

TEST_CASE("observe returns exactly n_points with a segment channel") {
    auto [scene, state] = reset(make_task(TaskId::PutBlockShort), 14);
    for (std::uint64_t s = 0; s < 100; ++s) {
        PointCloud obs = observe(scene, state, 128, s);
        REQUIRE(obs.size() == 128);
        REQUIRE(obs.has_channel("segment"));
    }
}

TEST_CASE("observe with zero noise and joint 0 reproduces rest-cloud points") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 15);
    REQUIRE(state.joint_value == 0.0);
    PointCloud obs = observe(scene, state, 400, 0, 0.0);
    std::set<std::string> rest;
    std::ostringstream os;
    os.precision(17);
    for (const auto& p : scene.moving_cloud_rest.points) {
        os.str("");
        os << p.x << "," << p.y << "," << p.z;
        rest.insert(os.str());
    }
    const auto& seg = obs.channel("segment").data;
    int moving_seen = 0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
        if (seg[i] != 1.0) continue;
        ++moving_seen;
        os.str("");
        os << obs.points[i].x << "," << obs.points[i].y << "," << obs.points[i].z;
        REQUIRE(rest.count(os.str()) == 1);
    }
    REQUIRE(moving_seen > 0);
}

TEST_CASE("observe shows the prismatic part exactly shifted along the axis") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 16);
    state.joint_value = 0.1;
    PointCloud obs = observe(scene, state, 400, 0, 0.0);
    // Every moving point must be rest point + 0.1 * axis for some rest point.
    std::set<std::string> shifted;
    std::ostringstream os;
    os.precision(15);
    for (const auto& p : scene.moving_cloud_rest.points) {
        Point3 q = p + scene.joint.axis * 0.1;
        os.str("");
        os << std::round(q.x * 1e12) << "," << std::round(q.y * 1e12) << ","
           << std::round(q.z * 1e12);
        shifted.insert(os.str());
    }
    const auto& seg = obs.channel("segment").data;
    for (std::size_t i = 0; i < obs.size(); ++i) {
        if (seg[i] != 1.0) continue;
        os.str("");
        os << std::round(obs.points[i].x * 1e12) << "," << std::round(obs.points[i].y * 1e12)
           << "," << std::round(obs.points[i].z * 1e12);
        REQUIRE(shifted.count(os.str()) == 1);
    }
}

TEST_CASE("success predicates") {
    TaskSpec open_drawer = make_task(TaskId::OpenDrawer);
    auto [scene, state] = reset(open_drawer, 17);
    REQUIRE_FALSE(is_success(scene, state, open_drawer));
    state.joint_value = scene.joint.hi;
    REQUIRE(is_success(scene, state, open_drawer));

    TaskSpec put = make_task(TaskId::PutBlockShort);
    auto [ps, pe] = reset(put, 18);
    REQUIRE_FALSE(is_success(ps, pe, put));  // open drawer, block outside
    // Put the block inside but leave the drawer open: still a failure.
    pe.block_pos = from_canonical(ps, pe.joint_value, ps.interior_center);
    REQUIRE(block_inside_drawer(ps, pe));
    REQUIRE_FALSE(is_success(ps, pe, put));
    // Close the drawer with the block riding: success.
    pe.block_in_drawer = true;
    pe.block_local = ps.interior_center;
    pe.joint_value = 0.0;
    pe.block_pos = from_canonical(ps, 0.0, pe.block_local);
    REQUIRE(is_success(ps, pe, put));
}

TEST_CASE("expert points toward the grasp target with an open gripper when far") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 19);
    Action a = scripted_expert(scene, state, make_task(TaskId::OpenDrawer));
    REQUIRE(a.gripper_cmd == 1.0);
    Vec3 to = posed_key_centroid(scene, state.joint_value) - state.ee_position;
    double cos = a.delta_ee.dot(to) / (a.delta_ee.norm() * to.norm());
    REQUIRE(cos == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("expert drags the prismatic joint along its axis") {
    auto [scene, state] = reset(make_task(TaskId::OpenDrawer), 20);
    state = attach_to_handle(scene, state);
    Action a = scripted_expert(scene, state, make_task(TaskId::OpenDrawer));
    REQUIRE(a.gripper_cmd == 0.0);
    REQUIRE(a.delta_ee.cross(scene.joint.axis).norm() < 1e-9);
}

TEST_CASE("expert succeeds on at least 95% of 200 seeded episodes per task") {
    for (auto id : {TaskId::OpenDrawer, TaskId::CloseDrawer, TaskId::OpenDoor,
                    TaskId::CloseDoor, TaskId::PutBlockShort}) {
        int ok = 0;
        for (std::uint64_t seed = 0; seed < 200; ++seed)
            if (run_expert(id, seed).first) ++ok;
        INFO("task " << task_name(id) << " successes " << ok << "/200");
        REQUIRE(ok >= 190);
    }
}

TEST_CASE("expert gripper sequences satisfy the annotation preconditions") {
    for (auto id : {TaskId::OpenDrawer, TaskId::OpenDoor, TaskId::PutBlockShort}) {
        auto [success, widths] = run_expert(id, 21);
        REQUIRE(success);
        auto states = gripper_states_from_widths(widths);
        REQUIRE(states.front() == GripperState::Open);
        REQUIRE(states.back() == GripperState::Open);
        int oc = 0, co = 0;
        for (std::size_t i = 1; i < states.size(); ++i) {
            if (states[i - 1] == GripperState::Open && states[i] == GripperState::Closed) ++oc;
            if (states[i - 1] == GripperState::Closed && states[i] == GripperState::Open) ++co;
        }
        REQUIRE(oc >= 1);
        REQUIRE(co >= 1);
        REQUIRE_NOTHROW(annotate_phases(states));
        if (id == TaskId::PutBlockShort) {
            REQUIRE(oc >= 2);  // block grasp + handle grasp
        }
    }
}

TEST_CASE("task names round trip") {
    for (auto id : {TaskId::OpenDrawer, TaskId::CloseDrawer, TaskId::OpenDoor,
                    TaskId::CloseDoor, TaskId::PutBlockShort})
        REQUIRE(parse_task(task_name(id)) == id);
    REQUIRE_THROWS_AS(parse_task("Nope"), std::invalid_argument);
}
