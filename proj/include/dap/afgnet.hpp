#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dap/dataset.hpp"
#include "dap/geometry.hpp"
#include "dap/nn/adamw.hpp"
#include "dap/nn/checkpoint.hpp"
#include "dap/nn/encoding.hpp"
#include "dap/nn/mlp.hpp"
#include "dap/nn/tape.hpp"
#include "dap/priors.hpp"
#include "dap/rng.hpp"
#include "dap/toyenv.hpp"

// The affordance/flow generation network: a shared per-point encoder with
// symmetric max-pooling, a task-embedding table, and two per-point generative
// heads trained by flow matching and sampled by forward-Euler integration.

namespace dap {

inline constexpr std::size_t kTaskCount = 5;

struct AfgConfig {
    std::size_t n_points = 512;
    std::vector<std::size_t> encoder_hidden = {64, 64};
    std::size_t enc_dim = 64;
    std::size_t task_dim = 8;
    std::size_t noise_dim = 8;
    bool use_noise_embedding = true;
    std::size_t time_dim = 16;
    std::vector<std::size_t> head_hidden = {96, 96};
    std::size_t euler_steps = 10;

    // Heads act pointwise on [coords | global | task | noise | x_t | t-embed].
    std::size_t head_in_dim(std::size_t x_dim) const {
        return 3 + enc_dim + task_dim + noise_dim + x_dim + time_dim;
    }
};

struct AfgParams {
    AfgConfig config;
    nn::MlpParams encoder;          // 3 -> encoder_hidden -> enc_dim
    nn::Tensor task_table;          // (kTaskCount, task_dim)
    nn::MlpParams affordance_head;  // head_in(1) -> head_hidden -> 1
    nn::MlpParams flow_head;        // head_in(3) -> head_hidden -> 3

    static AfgParams init(const AfgConfig& config, std::uint64_t seed) {
        AfgParams p;
        p.config = config;

        std::vector<std::size_t> enc_sizes{3};
        for (auto h : config.encoder_hidden) enc_sizes.push_back(h);
        enc_sizes.push_back(config.enc_dim);
        CounterRng enc_rng(seed, CounterRng::derive(0xAF6, 0));
        p.encoder = nn::MlpParams::init(enc_sizes, enc_rng);

        CounterRng table_rng(seed, CounterRng::derive(0xAF6, 1));
        p.task_table = nn::Tensor(kTaskCount, config.task_dim);
        double table_std = 1.0 / std::sqrt(double(config.task_dim));
        for (auto& v : p.task_table.data) v = float(table_rng.normal() * table_std);

        auto head_sizes = [&](std::size_t x_dim) {
            std::vector<std::size_t> s{config.head_in_dim(x_dim)};
            for (auto h : config.head_hidden) s.push_back(h);
            s.push_back(x_dim);
            return s;
        };
        CounterRng aff_rng(seed, CounterRng::derive(0xAF6, 2));
        p.affordance_head = nn::MlpParams::init(head_sizes(1), aff_rng);
        CounterRng flow_rng(seed, CounterRng::derive(0xAF6, 3));
        p.flow_head = nn::MlpParams::init(head_sizes(3), flow_rng);
        return p;
    }
};

// Conditioning components, kept unconcatenated; heads assemble their per-point
// input rows from these plus the current sample and time embedding.
struct Condition {
    nn::Tensor per_point_coords;  // (N, 3)
    nn::Tensor global_feature;    // (1, enc_dim)
    nn::Tensor task_embedding;    // (1, task_dim)
    nn::Tensor noise_embedding;   // (1, noise_dim)
};

inline nn::Tensor coords_tensor(const PointCloud& obs) {
    nn::Tensor t(obs.size(), 3);
    for (std::size_t i = 0; i < obs.size(); ++i) {
        t.at(i, 0) = float(obs.points[i].x);
        t.at(i, 1) = float(obs.points[i].y);
        t.at(i, 2) = float(obs.points[i].z);
    }
    return t;
}

inline Condition encode_condition(const AfgParams& params, const PointCloud& obs,
                                  TaskId task, const std::vector<double>& noise) {
    const auto& cfg = params.config;
    if (obs.size() != cfg.n_points)
        throw std::invalid_argument("observation point count " + std::to_string(obs.size()) +
                                    " does not match the configured " +
                                    std::to_string(cfg.n_points));
    if (std::size_t(task) >= kTaskCount)
        throw std::invalid_argument("unknown task id " +
                                    std::to_string(std::size_t(task)));
    if (noise.size() != cfg.noise_dim)
        throw std::invalid_argument("noise vector dimension mismatch");

    Condition c;
    c.per_point_coords = coords_tensor(obs);

    nn::Tensor feats = nn::mlp_forward(params.encoder, c.per_point_coords);  // (N, enc)
    c.global_feature = nn::Tensor(1, cfg.enc_dim);
    for (std::size_t j = 0; j < cfg.enc_dim; ++j) {
        float best = feats.at(0, j);
        for (std::size_t i = 1; i < feats.rows; ++i) best = std::max(best, feats.at(i, j));
        c.global_feature.at(0, j) = best;
    }

    c.task_embedding = nn::Tensor(1, cfg.task_dim);
    for (std::size_t j = 0; j < cfg.task_dim; ++j)
        c.task_embedding.at(0, j) = params.task_table.at(std::size_t(task), j);

    c.noise_embedding = nn::Tensor(1, cfg.noise_dim);
    if (cfg.use_noise_embedding)
        for (std::size_t j = 0; j < cfg.noise_dim; ++j)
            c.noise_embedding.at(0, j) = float(noise[j]);
    return c;
}

// One flow-matching training draw: linear interpolation between a base draw
// and the data sample; the regression target is the constant velocity x1 - x0.
struct FlowMatchSample {
    nn::Tensor x0, x1;
    double t = 0.0;

    nn::Tensor xt() const {
        nn::Tensor out(x1.rows, x1.cols);
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] = float((1.0 - t) * double(x0.data[i]) + t * double(x1.data[i]));
        return out;
    }
    nn::Tensor velocity() const {
        nn::Tensor out(x1.rows, x1.cols);
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] = float(double(x1.data[i]) - double(x0.data[i]));
        return out;
    }
};

// One training example view: ground-truth channels aligned to the observation.
struct AfgExample {
    const PointCloud* obs = nullptr;
    TaskId task = TaskId::OpenDrawer;
};

namespace afgdetail {

// Per-point head input rows: [coords | global | task | noise | x_t | t-embed].
inline nn::Tensor head_input(const Condition& c, const nn::Tensor& xt, double t,
                             std::size_t time_dim) {
    const std::size_t n = c.per_point_coords.rows;
    nn::Tensor temb = nn::time_embed(t, time_dim);
    const std::size_t cols = 3 + c.global_feature.cols + c.task_embedding.cols +
                             c.noise_embedding.cols + xt.cols + time_dim;
    nn::Tensor in(n, cols);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = 0;
        for (std::size_t k = 0; k < 3; ++k) in.at(i, j++) = c.per_point_coords.at(i, k);
        for (std::size_t k = 0; k < c.global_feature.cols; ++k)
            in.at(i, j++) = c.global_feature.at(0, k);
        for (std::size_t k = 0; k < c.task_embedding.cols; ++k)
            in.at(i, j++) = c.task_embedding.at(0, k);
        for (std::size_t k = 0; k < c.noise_embedding.cols; ++k)
            in.at(i, j++) = c.noise_embedding.at(0, k);
        for (std::size_t k = 0; k < xt.cols; ++k) in.at(i, j++) = xt.at(i, k);
        for (std::size_t k = 0; k < time_dim; ++k) in.at(i, j++) = temb.at(0, k);
    }
    return in;
}

inline std::vector<double> draw_noise(const AfgConfig& cfg, std::uint64_t seed,
                                      std::uint64_t stream) {
    std::vector<double> noise(cfg.noise_dim, 0.0);
    if (cfg.use_noise_embedding) {
        CounterRng rng(seed, stream);
        for (auto& v : noise) v = rng.normal();
    }
    return noise;
}

// Forward-Euler integration of dx/dt = head(x_t, t | condition) from t=0 to 1
// with an f64 integration state; the network itself runs in f32.
inline std::vector<double> euler_sample(const nn::MlpParams& head, const AfgConfig& cfg,
                                        const Condition& cond, std::size_t x_dim,
                                        std::size_t steps, std::vector<double> x) {
    const std::size_t n = cond.per_point_coords.rows;
    if (steps == 0) throw std::invalid_argument("sampler needs at least one step");
    if (x.size() != n * x_dim) throw std::invalid_argument("sampler state size mismatch");
    const double dt = 1.0 / double(steps);
    nn::Tensor xt(n, x_dim);
    for (std::size_t k = 0; k < steps; ++k) {
        for (std::size_t i = 0; i < x.size(); ++i) xt.data[i] = float(x[i]);
        double t = double(k) / double(steps);
        nn::Tensor v = nn::mlp_forward(head, head_input(cond, xt, t, cfg.time_dim));
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += dt * double(v.data[i]);
    }
    return x;
}

inline std::vector<double> gaussian_state(std::size_t count, std::uint64_t seed,
                                          std::uint64_t stream) {
    std::vector<double> x(count);
    CounterRng rng(seed, stream);
    for (auto& v : x) v = rng.normal();
    return x;
}

}  // namespace afgdetail

// ---------------------------------------------------------------------------
// Training

struct AfgTrainHooks {
    std::optional<double> fixed_t;  // force the interpolation time for every element
    bool zero_x0 = false;           // force the base draw to zero
};

struct AfgLosses {
    double affordance = 0.0;
    double flow = 0.0;
    double total() const { return affordance + flow; }
};

// Parameter tensors in a fixed order shared by the optimizer and checkpoints.
inline std::vector<nn::Tensor*> afg_param_ptrs(AfgParams& p) {
    std::vector<nn::Tensor*> out;
    for (auto& w : p.encoder.weights) out.push_back(&w);
    for (auto& b : p.encoder.biases) out.push_back(&b);
    out.push_back(&p.task_table);
    for (auto& w : p.affordance_head.weights) out.push_back(&w);
    for (auto& b : p.affordance_head.biases) out.push_back(&b);
    for (auto& w : p.flow_head.weights) out.push_back(&w);
    for (auto& b : p.flow_head.biases) out.push_back(&b);
    return out;
}

// Weight set at an arbitrary precision. Production training runs the graph in
// f32; the f64 instantiation rebuilds the identical graph for gradient
// verification against central differences.
template <typename Real>
struct AfgWeightsT {
    nn::MlpParamsT<Real> encoder;
    nn::TensorT<Real> task_table;
    nn::MlpParamsT<Real> affordance_head;
    nn::MlpParamsT<Real> flow_head;
};

template <typename Real>
AfgWeightsT<Real> afg_weights_cast(const AfgParams& p) {
    return {nn::mlp_cast<Real>(p.encoder), nn::tensor_cast<Real>(p.task_table),
            nn::mlp_cast<Real>(p.affordance_head), nn::mlp_cast<Real>(p.flow_head)};
}

template <typename Real>
struct AfgGraphT {
    nn::MlpIdsT<Real> encoder, affordance_head, flow_head;
    typename nn::TapeT<Real>::Id task_table{};
    typename nn::TapeT<Real>::Id affordance_loss{}, flow_loss{}, total{};

    // Gradients in afg_param_ptrs order, valid after tape.backward(total).
    std::vector<const nn::TensorT<Real>*> grads(const nn::TapeT<Real>& tape) const {
        std::vector<const nn::TensorT<Real>*> out;
        auto collect = [&](const nn::MlpIdsT<Real>& ids) {
            for (auto id : ids.weights) out.push_back(&tape.grad(id));
            for (auto id : ids.biases) out.push_back(&tape.grad(id));
        };
        collect(encoder);
        out.push_back(&tape.grad(task_table));
        collect(affordance_head);
        collect(flow_head);
        return out;
    }
};

// Builds the full batch loss graph: all clouds stacked into (B*N) point rows,
// one encoder/head pass each, losses as means over every entry. Inputs are
// quantized through f32 regardless of Real so the f64 instantiation evaluates
// the exact function the f32 training step uses.
template <typename Real>
AfgGraphT<Real> afg_build_graph(nn::TapeT<Real>& tape, const AfgWeightsT<Real>& w,
                                const AfgConfig& cfg, const std::vector<AfgExample>& batch,
                                std::uint64_t seed, const AfgTrainHooks& hooks = {}) {
    if (batch.empty()) throw std::invalid_argument("empty training batch");
    const std::size_t B = batch.size();
    const std::size_t N = cfg.n_points;
    for (const auto& ex : batch) {
        if (!ex.obs || ex.obs->size() != N)
            throw std::invalid_argument("observation point count mismatch in batch");
        if (!ex.obs->has_channel(kGtAffordance) || !ex.obs->has_channel(kGtFlow))
            throw std::invalid_argument("training example lacks ground-truth channels");
        if (std::size_t(ex.task) >= kTaskCount)
            throw std::invalid_argument("unknown task id " +
                                        std::to_string(std::size_t(ex.task)));
    }

    nn::TensorT<Real> coords(B * N, 3);
    nn::TensorT<Real> noise_rows(B, cfg.noise_dim);
    nn::TensorT<Real> temb_rows(B, cfg.time_dim);
    std::vector<std::size_t> task_idx(B);
    nn::TensorT<Real> aff_xt(B * N, 1), aff_vel(B * N, 1);
    nn::TensorT<Real> flow_xt(B * N, 3), flow_vel(B * N, 3);

    for (std::size_t e = 0; e < B; ++e) {
        const PointCloud& obs = *batch[e].obs;
        task_idx[e] = std::size_t(batch[e].task);
        for (std::size_t i = 0; i < N; ++i) {
            coords.at(e * N + i, 0) = Real(float(obs.points[i].x));
            coords.at(e * N + i, 1) = Real(float(obs.points[i].y));
            coords.at(e * N + i, 2) = Real(float(obs.points[i].z));
        }

        auto noise = afgdetail::draw_noise(cfg, seed, CounterRng::derive(0xE0, e));
        for (std::size_t j = 0; j < cfg.noise_dim; ++j)
            noise_rows.at(e, j) = Real(float(noise[j]));

        double t = hooks.fixed_t ? *hooks.fixed_t
                                 : CounterRng(seed, CounterRng::derive(0xE1, e)).uniform();
        nn::Tensor temb = nn::time_embed(t, cfg.time_dim);
        for (std::size_t j = 0; j < cfg.time_dim; ++j) temb_rows.at(e, j) = Real(temb.data[j]);

        // Interpolant x_t = (1-t) x0 + t x1 and its constant velocity x1 - x0,
        // computed in f64 over the f32-quantized endpoints so t=0 and t=1
        // reproduce the endpoints bit-exactly.
        auto fill = [&](const std::vector<double>& gt, std::size_t dim, std::uint64_t stream,
                        nn::TensorT<Real>& xt, nn::TensorT<Real>& vel) {
            CounterRng rng(seed, stream);
            for (std::size_t k = 0; k < N * dim; ++k) {
                double x0 = hooks.zero_x0 ? 0.0 : double(float(rng.normal()));
                double x1 = double(float(gt[k]));
                xt.data[e * N * dim + k] = Real(float((1.0 - t) * x0 + t * x1));
                vel.data[e * N * dim + k] = Real(float(x1 - x0));
            }
        };
        fill(obs.channel(kGtAffordance).data, 1, CounterRng::derive(0xE2, e), aff_xt, aff_vel);
        fill(obs.channel(kGtFlow).data, 3, CounterRng::derive(0xE3, e), flow_xt, flow_vel);
    }

    AfgGraphT<Real> g;
    g.encoder = nn::mlp_leaves(tape, w.encoder);
    g.task_table = tape.leaf(w.task_table);
    g.affordance_head = nn::mlp_leaves(tape, w.affordance_head);
    g.flow_head = nn::mlp_leaves(tape, w.flow_head);

    auto coords_id = tape.leaf(std::move(coords));
    auto feats = nn::mlp_apply(tape, g.encoder, coords_id);
    auto global_rep = tape.repeat_groups(tape.maxpool_groups(feats, N), N);
    auto task_rep = tape.repeat_groups(tape.gather_rows(g.task_table, task_idx), N);
    auto noise_rep = tape.repeat_groups(tape.leaf(std::move(noise_rows)), N);
    auto temb_rep = tape.repeat_groups(tape.leaf(std::move(temb_rows)), N);

    auto in_aff = tape.concat_cols(
        {coords_id, global_rep, task_rep, noise_rep, tape.leaf(std::move(aff_xt)), temb_rep});
    g.affordance_loss =
        tape.mse_loss(nn::mlp_apply(tape, g.affordance_head, in_aff), std::move(aff_vel));

    auto in_flow = tape.concat_cols(
        {coords_id, global_rep, task_rep, noise_rep, tape.leaf(std::move(flow_xt)), temb_rep});
    g.flow_loss = tape.mse_loss(nn::mlp_apply(tape, g.flow_head, in_flow), std::move(flow_vel));

    g.total = tape.add(g.affordance_loss, g.flow_loss);
    return g;
}

// One optimizer step on L = L_affordance + L_flow over the batch; the two
// returned components are batch means. Draws t and the base samples per
// element from `seed`.
inline AfgLosses afg_train_step(AfgParams& params, const std::vector<AfgExample>& batch,
                                nn::AdamWState& opt, std::uint64_t seed,
                                const AfgTrainHooks& hooks = {}) {
    nn::Tape tape;
    auto g = afg_build_graph(tape, afg_weights_cast<float>(params), params.config, batch,
                             seed, hooks);

    AfgLosses losses;
    losses.affordance = double(tape.value(g.affordance_loss).data[0]);
    losses.flow = double(tape.value(g.flow_loss).data[0]);
    if (!std::isfinite(losses.total()))
        throw std::runtime_error("divergence detected in generative-prior training");

    tape.backward(g.total);
    adamw_step(afg_param_ptrs(params), g.grads(tape), opt);
    return losses;
}

// ---------------------------------------------------------------------------
// Sampling

inline AffordanceMap sample_affordance(const AfgParams& params, const PointCloud& obs,
                                       TaskId task, std::size_t steps, std::uint64_t seed,
                                       const std::vector<double>* x0_override = nullptr) {
    const auto& cfg = params.config;
    auto cond = encode_condition(params, obs, task,
                                 afgdetail::draw_noise(cfg, seed, 0xE5));
    std::vector<double> x0 = x0_override
                                 ? *x0_override
                                 : afgdetail::gaussian_state(obs.size(), seed, 0xE6);
    auto x = afgdetail::euler_sample(params.affordance_head, cfg, cond, 1, steps,
                                     std::move(x0));
    AffordanceMap map;
    map.values.reserve(x.size());
    for (double v : x) {
        if (v > 1.0) v = 1.0;
        if (v <= -1.0) v = -1.0 + 1e-6;
        map.values.push_back(v);
    }
    return map;
}

inline FlowField sample_flow(const AfgParams& params, const PointCloud& obs, TaskId task,
                             std::size_t steps, std::uint64_t seed,
                             const std::vector<double>* x0_override = nullptr) {
    const auto& cfg = params.config;
    auto cond = encode_condition(params, obs, task,
                                 afgdetail::draw_noise(cfg, seed, 0xE5));
    std::vector<double> x0 = x0_override
                                 ? *x0_override
                                 : afgdetail::gaussian_state(3 * obs.size(), seed, 0xE7);
    auto x = afgdetail::euler_sample(params.flow_head, cfg, cond, 3, steps, std::move(x0));
    FlowField field;
    field.vectors.reserve(obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i)
        field.vectors.push_back({x[3 * i], x[3 * i + 1], x[3 * i + 2]});
    return field;
}

// Replaces the predicted prior channels on every frame with seeded samples;
// ground truth stays under its own channel names.
inline void annotate_with_afg(Demonstration& demo, const AfgParams& params,
                              std::uint64_t seed) {
    for (std::size_t i = 0; i < demo.frames.size(); ++i) {
        Frame& fr = demo.frames[i];
        auto aff = sample_affordance(params, fr.obs, demo.task, params.config.euler_steps,
                                     CounterRng::derive(seed, 0xAA, i));
        auto flow = sample_flow(params, fr.obs, demo.task, params.config.euler_steps,
                                CounterRng::derive(seed, 0xAB, i));
        set_predicted_priors(fr, aff.values, flow.vectors);
    }
}

// ---------------------------------------------------------------------------
// Checkpointing (entry prefix "afg.")

inline std::vector<std::string> afg_param_names(const AfgParams& p) {
    std::vector<std::string> names;
    auto mlp_names = [&](const std::string& part, const nn::MlpParams& m) {
        for (std::size_t l = 0; l < m.weights.size(); ++l)
            names.push_back("afg." + part + ".w" + std::to_string(l));
        for (std::size_t l = 0; l < m.biases.size(); ++l)
            names.push_back("afg." + part + ".b" + std::to_string(l));
    };
    mlp_names("encoder", p.encoder);
    names.push_back("afg.task_table");
    mlp_names("affordance_head", p.affordance_head);
    mlp_names("flow_head", p.flow_head);
    return names;
}

inline nn::NamedTensorRefs afg_checkpoint_entries(const AfgParams& p) {
    auto names = afg_param_names(p);
    auto ptrs = afg_param_ptrs(const_cast<AfgParams&>(p));
    nn::NamedTensorRefs entries;
    for (std::size_t i = 0; i < names.size(); ++i) entries.push_back({names[i], ptrs[i]});
    return entries;
}

inline void afg_restore(AfgParams& p, const nn::NamedTensors& loaded) {
    auto names = afg_param_names(p);
    auto ptrs = afg_param_ptrs(p);
    std::vector<std::pair<std::string, nn::Tensor*>> targets;
    for (std::size_t i = 0; i < names.size(); ++i) targets.push_back({names[i], ptrs[i]});
    nn::restore_params(loaded, targets);
}

}  // namespace dap
