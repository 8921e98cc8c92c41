#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dap/geometry.hpp"
#include "dap/nn/checkpoint.hpp"
#include "dap/priors.hpp"
#include "dap/rng.hpp"
#include "dap/toyenv.hpp"

// Demonstration recording, ground-truth prior annotation, stage-homogeneous
// batch planning, and bit-exact binary persistence of episodes.

namespace dap {

// One timestep of a demonstration. `obs` carries the point coordinates plus
// any annotation channels; the trailing fields after `joint_value` are
// transient bookkeeping consumed by ground-truth annotation and are neither
// serialized nor needed afterwards.
struct Frame {
    PointCloud obs;
    std::array<double, 4> state{};   // ee x, y, z, gripper width
    std::array<double, 4> action{};  // commanded delta x, y, z, gripper command
    GripperState gripper = GripperState::Open;
    StageLabel stage = StageLabel::Approach;
    double joint_value = 0.0;

    bool block_in_drawer = false;  // block rides the drawer from here on
    bool carrying_block = false;   // block attached to the end effector
    bool has_block = false;
    Point3 block_pos{};
};

struct Demonstration {
    TaskId task = TaskId::OpenDrawer;
    std::uint64_t seed = 0;
    bool success = false;
    std::vector<Frame> frames;
    ArticulatedScene scene;  // valid only when has_scene (lost on reload)
    bool has_scene = false;
};

// Channel names used on Frame::obs.
inline constexpr const char* kGtAffordance = "gt_affordance";
inline constexpr const char* kGtFlow = "gt_flow";
inline constexpr const char* kPredAffordance = "pred_affordance";
inline constexpr const char* kPredFlow = "pred_flow";

// ---------------------------------------------------------------------------
// Recording

// Rolls the scripted expert to success-and-released or to the task horizon,
// storing one frame per executed action plus a terminal hold frame, so the
// final gripper state (and hence the closing Open phase of a finished
// grasp-release cycle) is part of the record. Deterministic in (task, seed).
inline Demonstration record_episode(const TaskSpec& task, std::uint64_t seed,
                                    std::size_t n_points, double sigma_obs) {
    Demonstration demo;
    demo.task = task.id;
    demo.seed = seed;

    auto [scene, state] = reset(task, seed);
    demo.scene = scene;
    demo.has_scene = true;

    auto push_frame = [&](const EnvState& s, const Action& a) {
        Frame f;
        f.obs = observe(scene, s, n_points,
                        CounterRng::derive(seed, 0xB0, demo.frames.size()), sigma_obs);
        f.state = {s.ee_position.x, s.ee_position.y, s.ee_position.z, s.gripper_width};
        f.action = {a.delta_ee.x, a.delta_ee.y, a.delta_ee.z, a.gripper_cmd};
        f.joint_value = s.joint_value;
        f.block_in_drawer = s.block_in_drawer;
        f.carrying_block = s.attached == EnvState::Attach::Block;
        f.has_block = s.has_block;
        f.block_pos = s.block_pos;
        demo.frames.push_back(std::move(f));
    };

    for (int t = 0; t < task.horizon; ++t) {
        Action a = scripted_expert(scene, state, task);
        push_frame(state, a);
        state = step(scene, state, a);
        if (is_success(scene, state, task) && state.gripper_width > 0.55) {
            demo.success = true;
            break;
        }
    }
    // Terminal frame: hold position with the gripper open.
    push_frame(state, Action{Vec3{}, 1.0});

    std::vector<double> widths;
    widths.reserve(demo.frames.size());
    for (const auto& f : demo.frames) widths.push_back(f.state[3]);
    auto grips = gripper_states_from_widths(widths);
    for (std::size_t i = 0; i < demo.frames.size(); ++i) demo.frames[i].gripper = grips[i];
    return demo;
}

// ---------------------------------------------------------------------------
// Ground-truth annotation

namespace datadetail {

inline std::vector<bool> channel_mask(const PointCloud& obs, const std::string& name,
                                      double value) {
    const auto& ch = obs.channel(name);
    std::vector<bool> mask(obs.size(), false);
    for (std::size_t i = 0; i < obs.size(); ++i) mask[i] = ch.data[i] == value;
    return mask;
}

inline PointCloud masked_points(const PointCloud& obs, const std::vector<bool>& mask) {
    PointCloud out;
    for (std::size_t i = 0; i < obs.size(); ++i)
        if (mask[i]) out.points.push_back(obs.points[i]);
    return out;
}

inline std::size_t mask_count(const std::vector<bool>& mask) {
    return std::size_t(std::count(mask.begin(), mask.end(), true));
}

}  // namespace datadetail

// Per-frame ground-truth priors. Affordance is measured against the key
// functional part as it appears in the observation itself (so zero-distance
// points exist); for the pick-and-place task the block is the key part until
// it has been placed in the drawer, after which the handle takes over. Flow
// covers the articulated part (plus a block riding inside it) between
// consecutive joint values, and a block carried by the gripper contributes a
// rigid-translation flow of its own. The last frame duplicates the previous
// flow. Stages come from the gripper open/close transitions.
inline void annotate_ground_truth(Demonstration& demo, double alpha) {
    using namespace datadetail;
    if (!demo.has_scene)
        throw std::invalid_argument("ground-truth annotation requires the scene snapshot");
    if (demo.frames.empty()) throw std::invalid_argument("empty demonstration");
    const ArticulatedScene& scene = demo.scene;
    const std::size_t n = demo.frames.size();

    std::vector<GripperState> grips;
    grips.reserve(n);
    for (const auto& f : demo.frames) grips.push_back(f.gripper);
    auto stages = annotate_phases(grips);
    for (std::size_t i = 0; i < n; ++i) demo.frames[i].stage = stages[i];

    std::vector<Vec3> prev_flow;
    for (std::size_t i = 0; i < n; ++i) {
        Frame& fr = demo.frames[i];
        const std::size_t n_pts = fr.obs.size();

        auto moving_mask = channel_mask(fr.obs, "segment", 1.0);
        auto block_mask = channel_mask(fr.obs, "segment", 2.0);

        // Affordance against the key part as observed.
        PointCloud key_cloud;
        if (demo.task == TaskId::PutBlockShort && !fr.block_in_drawer)
            key_cloud = masked_points(fr.obs, block_mask);
        if (key_cloud.empty())
            key_cloud = masked_points(fr.obs, channel_mask(fr.obs, "key", 1.0));
        if (key_cloud.empty())  // all key points lost to downsampling: use the posed part
            key_cloud = apply_transform(fk_transform(scene.joint, fr.joint_value),
                                        scene.key_part_rest);
        fr.obs.set_scalar_channel(kGtAffordance,
                                  affordance_map(fr.obs, key_cloud, alpha).values);

        // Flow to the next frame; the final frame copies its predecessor.
        std::vector<Vec3> flow(n_pts, Vec3{});
        if (i + 1 < n) {
            const Frame& nx = demo.frames[i + 1];
            // Articulated part, with a riding block moving rigidly along.
            if (nx.joint_value != fr.joint_value) {
                auto mask = moving_mask;
                if (fr.block_in_drawer)
                    for (std::size_t k = 0; k < n_pts; ++k)
                        if (block_mask[k]) mask[k] = true;
                auto raw = motion_flow(fr.obs, mask, scene.joint, fr.joint_value,
                                       nx.joint_value);
                auto norm = normalize_flow(raw, scene.joint, fr.joint_value, nx.joint_value,
                                           mask, masked_points(fr.obs, mask));
                for (std::size_t k = 0; k < n_pts; ++k)
                    if (mask[k]) flow[k] = norm.vectors[k];
            }
            // Carried block: rigid translation by the block displacement.
            Vec3 dblock = nx.block_pos - fr.block_pos;
            if (fr.carrying_block && fr.has_block && dblock.norm() > 0.0 &&
                mask_count(block_mask) > 0) {
                double span = dblock.norm();
                Joint carry(Joint::Kind::Prismatic, dblock / span, Point3{}, 0.0,
                            span + 1.0);
                auto raw = motion_flow(fr.obs, block_mask, carry, 0.0, span);
                auto norm = normalize_flow(raw, carry, 0.0, span, block_mask,
                                           masked_points(fr.obs, block_mask));
                for (std::size_t k = 0; k < n_pts; ++k)
                    if (block_mask[k]) flow[k] = norm.vectors[k];
            }
            prev_flow = flow;
        } else if (!prev_flow.empty() && prev_flow.size() == n_pts) {
            flow = prev_flow;
        }
        fr.obs.set_vec3_channel(kGtFlow, flow);
    }
}

// Installs predicted prior channels on one frame (the sampling itself lives
// with the generative model; this is the dataset-side write).
inline void set_predicted_priors(Frame& frame, const std::vector<double>& affordance,
                                 const std::vector<Vec3>& flow) {
    frame.obs.set_scalar_channel(kPredAffordance, affordance);
    frame.obs.set_vec3_channel(kPredFlow, flow);
}

// ---------------------------------------------------------------------------
// Persistence: episodes/ep_<seed>_<task>.dpm + manifest.json

inline constexpr std::uint32_t kEpisodeFormatVersion = 1;

struct ManifestEntry {
    TaskId task = TaskId::OpenDrawer;
    std::uint64_t seed = 0;
    std::uint32_t frame_count = 0;
    std::string file;
    std::uint32_t crc = 0;
    bool success = false;
};

struct Manifest {
    std::uint32_t format_version = kEpisodeFormatVersion;
    std::map<std::string, std::string> config;  // effective-config snapshot
    std::vector<ManifestEntry> episodes;
};

namespace datadetail {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t read_u64(nn::detail::Reader& r) {
    std::uint64_t lo = r.u32();
    std::uint64_t hi = r.u32();
    return lo | hi << 32;
}

// Affordance lives in (-1, 1]; keep the open lower bound after the f64->f32
// narrowing at the serialization boundary.
inline float clamp_affordance_f32(double v) {
    float f = float(v);
    if (f <= -1.0f) f = std::nextafterf(-1.0f, 0.0f);
    return f;
}

inline void put_scalar_channel(std::vector<std::uint8_t>& out, const PointCloud& obs,
                               const char* name, bool clamp_open_interval) {
    if (obs.has_channel(name)) {
        const auto& ch = obs.channel(name);
        for (double v : ch.data)
            nn::detail::put_f32(out, clamp_open_interval ? clamp_affordance_f32(v)
                                                         : float(v));
    } else {
        for (std::size_t i = 0; i < obs.size(); ++i)
            nn::detail::put_f32(out, std::numeric_limits<float>::quiet_NaN());
    }
}

inline void put_vec3_channel(std::vector<std::uint8_t>& out, const PointCloud& obs,
                             const char* name) {
    if (obs.has_channel(name)) {
        const auto& ch = obs.channel(name);
        for (double v : ch.data) nn::detail::put_f32(out, float(v));
    } else {
        for (std::size_t i = 0; i < 3 * obs.size(); ++i)
            nn::detail::put_f32(out, std::numeric_limits<float>::quiet_NaN());
    }
}

// Reads n floats; returns false (channel absent) when every value is NaN.
inline bool read_block(nn::detail::Reader& r, std::size_t n, std::vector<double>& out) {
    out.resize(n);
    bool all_nan = true;
    for (std::size_t i = 0; i < n; ++i) {
        float f = r.f32();
        if (!std::isnan(f)) all_nan = false;
        out[i] = double(f);
    }
    return !all_nan;
}

}  // namespace datadetail

inline std::vector<std::uint8_t> serialize_episode(const Demonstration& demo) {
    using namespace datadetail;
    using nn::detail::put_f32;
    if (demo.frames.empty()) throw std::invalid_argument("empty demonstration");
    if (!demo.frames.front().obs.has_channel(kGtAffordance) ||
        !demo.frames.front().obs.has_channel(kGtFlow))
        throw std::invalid_argument("episode lacks ground-truth channels; annotate first");

    const std::size_t n_pts = demo.frames.front().obs.size();
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'D', 'P', 'O', 'M'});
    nn::detail::put_u32(out, kEpisodeFormatVersion);
    nn::detail::put_u16(out, std::uint16_t(demo.task));
    put_u64(out, demo.seed);
    nn::detail::put_u32(out, std::uint32_t(demo.frames.size()));
    nn::detail::put_u32(out, std::uint32_t(n_pts));

    for (const auto& f : demo.frames) {
        if (f.obs.size() != n_pts)
            throw std::invalid_argument("episode frames disagree on point count");
        for (const auto& p : f.obs.points) {
            put_f32(out, float(p.x));
            put_f32(out, float(p.y));
            put_f32(out, float(p.z));
        }
        put_scalar_channel(out, f.obs, kGtAffordance, true);
        put_vec3_channel(out, f.obs, kGtFlow);
        put_scalar_channel(out, f.obs, kPredAffordance, true);
        put_vec3_channel(out, f.obs, kPredFlow);
        for (double v : f.state) put_f32(out, float(v));
        for (double v : f.action) put_f32(out, float(v));
        out.push_back(std::uint8_t(f.gripper));
        out.push_back(std::uint8_t(f.stage));
    }
    nn::detail::put_u32(out, nn::crc32(out.data(), out.size()));
    return out;
}

inline Demonstration parse_episode(const std::vector<std::uint8_t>& bytes) {
    using namespace datadetail;
    if (bytes.size() < 8) throw std::runtime_error("episode file truncated");
    std::uint32_t stored =
        nn::detail::Reader{bytes.data() + bytes.size() - 4, bytes.data() + bytes.size()}.u32();
    if (nn::crc32(bytes.data(), bytes.size() - 4) != stored)
        throw std::runtime_error("episode checksum mismatch");

    nn::detail::Reader r{bytes.data(), bytes.data() + bytes.size() - 4};
    if (r.str(4) != "DPOM") throw std::runtime_error("episode magic mismatch");
    std::uint32_t version = r.u32();
    if (version != kEpisodeFormatVersion)
        throw std::runtime_error("unsupported episode format version " +
                                 std::to_string(version));
    Demonstration demo;
    demo.task = TaskId(r.u16());
    demo.seed = read_u64(r);
    std::uint32_t frame_count = r.u32();
    std::uint32_t n_pts = r.u32();
    demo.has_scene = false;

    demo.frames.resize(frame_count);
    for (auto& f : demo.frames) {
        f.obs.points.resize(n_pts);
        for (auto& p : f.obs.points) {
            p.x = double(r.f32());
            p.y = double(r.f32());
            p.z = double(r.f32());
        }
        std::vector<double> block;
        read_block(r, n_pts, block);
        f.obs.set_scalar_channel(kGtAffordance, block);
        read_block(r, 3 * n_pts, block);
        f.obs.channels[kGtFlow] = Channel{3, block};
        if (read_block(r, n_pts, block)) f.obs.set_scalar_channel(kPredAffordance, block);
        bool has_pred_flow = read_block(r, 3 * n_pts, block);
        if (has_pred_flow) f.obs.channels[kPredFlow] = Channel{3, block};
        for (auto& v : f.state) v = double(r.f32());
        for (auto& v : f.action) v = double(r.f32());
        f.gripper = GripperState(r.u8());
        f.stage = StageLabel(r.u8());
    }
    if (r.p != r.end) throw std::runtime_error("episode file has trailing bytes");
    return demo;
}

inline std::string episode_file_name(const Demonstration& demo) {
    return "episodes/ep_" + std::to_string(demo.seed) + "_" + task_name(demo.task) + ".dpm";
}

// Writes every episode plus manifest.json under `dir`; returns the manifest.
inline Manifest save_dataset(const std::string& dir,
                             const std::vector<Demonstration>& demos,
                             const std::map<std::string, std::string>& config) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "episodes");

    Manifest manifest;
    manifest.config = config;
    for (const auto& demo : demos) {
        auto bytes = serialize_episode(demo);
        ManifestEntry e;
        e.task = demo.task;
        e.seed = demo.seed;
        e.frame_count = std::uint32_t(demo.frames.size());
        e.file = episode_file_name(demo);
        e.crc = nn::crc32(bytes.data(), bytes.size());
        e.success = demo.success;
        nn::write_file_bytes((fs::path(dir) / e.file).string(), bytes);
        manifest.episodes.push_back(std::move(e));
    }

    nlohmann::json j;
    j["format_version"] = manifest.format_version;
    j["config"] = manifest.config;
    j["episodes"] = nlohmann::json::array();
    for (const auto& e : manifest.episodes) {
        j["episodes"].push_back({{"task", task_name(e.task)},
                                 {"seed", e.seed},
                                 {"frames", e.frame_count},
                                 {"file", e.file},
                                 {"crc32", e.crc},
                                 {"success", e.success}});
    }
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write manifest.json under " + dir);
    return manifest;
}

struct LoadedDataset {
    std::vector<Demonstration> demos;
    Manifest manifest;
};

inline LoadedDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw std::runtime_error("missing manifest.json under " + dir);
    nlohmann::json j;
    in >> j;

    LoadedDataset out;
    out.manifest.format_version = j.at("format_version").get<std::uint32_t>();
    if (out.manifest.format_version != kEpisodeFormatVersion)
        throw std::runtime_error("unsupported dataset format version " +
                                 std::to_string(out.manifest.format_version));
    if (j.contains("config"))
        out.manifest.config = j["config"].get<std::map<std::string, std::string>>();

    for (const auto& je : j.at("episodes")) {
        ManifestEntry e;
        e.task = parse_task(je.at("task").get<std::string>());
        e.seed = je.at("seed").get<std::uint64_t>();
        e.frame_count = je.at("frames").get<std::uint32_t>();
        e.file = je.at("file").get<std::string>();
        e.crc = je.at("crc32").get<std::uint32_t>();
        e.success = je.at("success").get<bool>();

        auto path = (fs::path(dir) / e.file).string();
        std::vector<std::uint8_t> bytes;
        try {
            bytes = nn::read_file_bytes(path);
        } catch (const std::exception&) {
            throw std::runtime_error("missing episode file: " + e.file);
        }
        if (nn::crc32(bytes.data(), bytes.size()) != e.crc)
            throw std::runtime_error("episode checksum mismatch: " + e.file);
        Demonstration demo;
        try {
            demo = parse_episode(bytes);
        } catch (const std::exception& ex) {
            throw std::runtime_error(std::string(ex.what()) + ": " + e.file);
        }
        if (demo.task != e.task || demo.seed != e.seed ||
            demo.frames.size() != e.frame_count)
            throw std::runtime_error("manifest disagrees with episode header: " + e.file);
        demo.success = e.success;
        out.demos.push_back(std::move(demo));
        out.manifest.episodes.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch planning

struct WindowRef {
    std::size_t demo = 0;
    std::size_t frame = 0;
};

struct Batch {
    StageLabel stage = StageLabel::Approach;
    std::vector<WindowRef> windows;
};

struct BatchingOptions {
    std::size_t batch_size = 32;
    std::size_t horizon = 8;
    bool include_failures = false;
};

struct BatchPlan {
    std::vector<Batch> batches;
    std::size_t total_windows = 0;
    std::size_t skipped_episodes = 0;
};

// The action chunk starting at `frame`, tail-padded by repeating the final
// action of the episode.
inline std::vector<std::array<double, 4>> action_chunk(const Demonstration& demo,
                                                       std::size_t frame,
                                                       std::size_t horizon) {
    std::vector<std::array<double, 4>> chunk;
    chunk.reserve(horizon);
    for (std::size_t k = 0; k < horizon; ++k) {
        std::size_t idx = std::min(frame + k, demo.frames.size() - 1);
        chunk.push_back(demo.frames[idx].action);
    }
    return chunk;
}

// One window per frame, stage-homogeneous batches, seeded shuffle. Episodes
// shorter than the horizon are skipped (counted); failures are skipped unless
// requested.
inline BatchPlan make_batches(const std::vector<Demonstration>& demos,
                              const BatchingOptions& opt, std::uint64_t seed) {
    if (opt.batch_size == 0) throw std::invalid_argument("batch size must be positive");
    BatchPlan plan;
    std::array<std::vector<WindowRef>, 2> by_stage;
    for (std::size_t d = 0; d < demos.size(); ++d) {
        const auto& demo = demos[d];
        if (!demo.success && !opt.include_failures) continue;
        if (demo.frames.size() < opt.horizon) {
            ++plan.skipped_episodes;
            continue;
        }
        for (std::size_t f = 0; f < demo.frames.size(); ++f)
            by_stage[std::size_t(demo.frames[f].stage)].push_back({d, f});
    }

    auto shuffle = [](auto& v, CounterRng& rng) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[rng.next_u64() % i]);
    };

    for (std::size_t s = 0; s < 2; ++s) {
        CounterRng rng(seed, CounterRng::derive(0xBA, s));
        shuffle(by_stage[s], rng);
        plan.total_windows += by_stage[s].size();
        for (std::size_t start = 0; start < by_stage[s].size(); start += opt.batch_size) {
            Batch b;
            b.stage = StageLabel(s);
            std::size_t stop = std::min(start + opt.batch_size, by_stage[s].size());
            b.windows.assign(by_stage[s].begin() + long(start),
                             by_stage[s].begin() + long(stop));
            plan.batches.push_back(std::move(b));
        }
    }
    CounterRng order_rng(seed, CounterRng::derive(0xBA, 2));
    shuffle(plan.batches, order_rng);
    return plan;
}

}  // namespace dap
