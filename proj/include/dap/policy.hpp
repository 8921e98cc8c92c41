#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dap/afgnet.hpp"
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

// The dual-actor manipulation policy: two denoising actors with identical
// architecture conditioned on different visual priors, a stage-decision
// classifier that routes between them, and the receding-horizon rollout loop.

namespace dap {

// ---------------------------------------------------------------------------
// Denoising schedule

// Cumulative signal fractions alpha_bar[0..T] on a cosine profile, pinned to
// exactly 1 at t=0 so the final denoising step reproduces the model's clean
// prediction without residual noise.
struct DiffusionSchedule {
    std::size_t T = 0;
    std::vector<double> alpha_bar;  // size T+1, strictly decreasing from 1
};

inline DiffusionSchedule make_schedule(std::size_t T) {
    if (T == 0) throw std::invalid_argument("diffusion schedule needs at least one step");
    DiffusionSchedule s;
    s.T = T;
    s.alpha_bar.resize(T + 1);
    const double offset = 0.008;
    auto f = [&](double t) {
        double c = std::cos((t / double(T) + offset) / (1.0 + offset) * M_PI / 2.0);
        return c * c;
    };
    const double f0 = f(0.0);
    s.alpha_bar[0] = 1.0;
    for (std::size_t t = 1; t <= T; ++t) s.alpha_bar[t] = f(double(t)) / f0;
    return s;
}

// ---------------------------------------------------------------------------
// Action normalization

// Actions live in a normalized cube: translation deltas scaled by the per-step
// limit, gripper command mapped from [0,1] to [-1,1].
inline std::array<double, 4> normalize_action(const std::array<double, 4>& a) {
    return {a[0] / kMaxStepDelta, a[1] / kMaxStepDelta, a[2] / kMaxStepDelta,
            2.0 * a[3] - 1.0};
}

inline Action denormalize_action(const double* z) {
    Action a;
    a.delta_ee = {z[0] * kMaxStepDelta, z[1] * kMaxStepDelta, z[2] * kMaxStepDelta};
    a.gripper_cmd = std::clamp((z[3] + 1.0) / 2.0, 0.0, 1.0);
    return a;
}

struct ActionChunk {
    std::size_t horizon = 0;
    std::size_t action_dim = 4;
    std::vector<double> z;  // normalized, horizon * action_dim

    std::vector<Action> actions() const {
        std::vector<Action> out;
        out.reserve(horizon);
        for (std::size_t h = 0; h < horizon; ++h)
            out.push_back(denormalize_action(&z[h * action_dim]));
        return out;
    }
};

// ---------------------------------------------------------------------------
// Conditioning

// Everything an actor sees for one decision: the observation, the robot
// state, the task id, and the prior fields as flat per-point channels
// (empty when a prior is not supplied).
struct ConditionBundle {
    const PointCloud* obs = nullptr;
    std::array<double, 4> state{};
    TaskId task = TaskId::OpenDrawer;
    std::vector<double> affordance;  // n values, or empty
    std::vector<double> flow;        // 3n values, or empty
};

inline std::vector<double> flatten_flow(const std::vector<Vec3>& v) {
    std::vector<double> out;
    out.reserve(3 * v.size());
    for (const auto& f : v) {
        out.push_back(f.x);
        out.push_back(f.y);
        out.push_back(f.z);
    }
    return out;
}

// Builds the bundle for one recorded frame, reading the prior fields from the
// ground-truth or predicted channels.
inline ConditionBundle frame_bundle(const Frame& frame, TaskId task, bool use_gt_priors) {
    ConditionBundle b;
    b.obs = &frame.obs;
    b.state = frame.state;
    b.task = task;
    const char* aff_name = use_gt_priors ? kGtAffordance : kPredAffordance;
    const char* flow_name = use_gt_priors ? kGtFlow : kPredFlow;
    if (frame.obs.has_channel(aff_name)) b.affordance = frame.obs.channel(aff_name).data;
    if (frame.obs.has_channel(flow_name)) b.flow = frame.obs.channel(flow_name).data;
    return b;
}

// ---------------------------------------------------------------------------
// Actors

// Both actors share one input layout: per-point rows
// [x, y, z, affordance, flow_x, flow_y, flow_z] where only the slots the
// actor is configured to consume are filled; the rest stay zero. Which prior
// fills its slot is the only asymmetry between the two actors.
inline constexpr std::size_t kPointRowDim = 7;

struct ActorConfig {
    std::size_t n_points = 512;
    std::vector<std::size_t> point_hidden = {64, 64};
    std::size_t enc_dim = 64;
    std::size_t task_dim = 8;
    std::size_t time_dim = 16;
    std::vector<std::size_t> trunk_hidden = {128, 128};
    std::size_t horizon = 8;
    std::size_t action_dim = 4;
    bool fill_affordance = true;
    bool fill_flow = false;
    bool predict_epsilon = false;  // default: the network regresses the clean chunk

    std::size_t chunk_dim() const { return horizon * action_dim; }
    std::size_t trunk_in_dim() const {
        return enc_dim + 4 + task_dim + chunk_dim() + time_dim;
    }
};

struct ActorParams {
    ActorConfig config;
    StageLabel role = StageLabel::Approach;
    nn::MlpParams point_encoder;  // kPointRowDim -> point_hidden -> enc_dim
    nn::Tensor task_table;        // (kTaskCount, task_dim)
    nn::MlpParams trunk;          // trunk_in -> trunk_hidden -> chunk_dim

    static ActorParams init(const ActorConfig& config, StageLabel role, std::uint64_t seed) {
        ActorParams p;
        p.config = config;
        p.role = role;

        std::vector<std::size_t> enc_sizes{kPointRowDim};
        for (auto h : config.point_hidden) enc_sizes.push_back(h);
        enc_sizes.push_back(config.enc_dim);
        CounterRng enc_rng(seed, CounterRng::derive(0xAC7, 0));
        p.point_encoder = nn::MlpParams::init(enc_sizes, enc_rng);

        CounterRng table_rng(seed, CounterRng::derive(0xAC7, 1));
        p.task_table = nn::Tensor(kTaskCount, config.task_dim);
        double table_std = 1.0 / std::sqrt(double(config.task_dim));
        for (auto& v : p.task_table.data) v = float(table_rng.normal() * table_std);

        std::vector<std::size_t> trunk_sizes{config.trunk_in_dim()};
        for (auto h : config.trunk_hidden) trunk_sizes.push_back(h);
        trunk_sizes.push_back(config.chunk_dim());
        CounterRng trunk_rng(seed, CounterRng::derive(0xAC7, 2));
        p.trunk = nn::MlpParams::init(trunk_sizes, trunk_rng);
        return p;
    }
};

inline std::vector<nn::Tensor*> actor_param_ptrs(ActorParams& p) {
    std::vector<nn::Tensor*> out;
    for (auto& w : p.point_encoder.weights) out.push_back(&w);
    for (auto& b : p.point_encoder.biases) out.push_back(&b);
    out.push_back(&p.task_table);
    for (auto& w : p.trunk.weights) out.push_back(&w);
    for (auto& b : p.trunk.biases) out.push_back(&b);
    return out;
}

namespace policydetail {

// Fills one observation's point rows into `rows` starting at `row0`,
// honoring the actor's prior slots.
template <typename Real>
void fill_point_rows(nn::TensorT<Real>& rows, std::size_t row0, const ActorConfig& cfg,
                     const ConditionBundle& b) {
    const std::size_t n = cfg.n_points;
    if (!b.obs || b.obs->size() != n)
        throw std::invalid_argument("observation point count does not match the actor");
    if (cfg.fill_affordance && b.affordance.size() != n)
        throw std::invalid_argument("bundle lacks the affordance prior channel");
    if (cfg.fill_flow && b.flow.size() != 3 * n)
        throw std::invalid_argument("bundle lacks the flow prior channel");
    for (std::size_t i = 0; i < n; ++i) {
        Real* r = &rows.data[(row0 + i) * kPointRowDim];
        r[0] = Real(float(b.obs->points[i].x));
        r[1] = Real(float(b.obs->points[i].y));
        r[2] = Real(float(b.obs->points[i].z));
        r[3] = cfg.fill_affordance ? Real(float(b.affordance[i])) : Real(0);
        r[4] = cfg.fill_flow ? Real(float(b.flow[3 * i])) : Real(0);
        r[5] = cfg.fill_flow ? Real(float(b.flow[3 * i + 1])) : Real(0);
        r[6] = cfg.fill_flow ? Real(float(b.flow[3 * i + 2])) : Real(0);
    }
}

}  // namespace policydetail

// ---------------------------------------------------------------------------
// Actor training graph

struct ActorExample {
    ConditionBundle bundle;
    std::vector<double> chunk;  // normalized actions, horizon * action_dim
};

struct ActorTrainHooks {
    std::optional<std::size_t> fixed_t;  // force the noise level for every element
    bool zero_eps = false;               // force the corrupting noise to zero
};

template <typename Real>
struct ActorWeightsT {
    nn::MlpParamsT<Real> point_encoder;
    nn::TensorT<Real> task_table;
    nn::MlpParamsT<Real> trunk;
};

template <typename Real>
ActorWeightsT<Real> actor_weights_cast(const ActorParams& p) {
    return {nn::mlp_cast<Real>(p.point_encoder), nn::tensor_cast<Real>(p.task_table),
            nn::mlp_cast<Real>(p.trunk)};
}

template <typename Real>
struct ActorGraphT {
    nn::MlpIdsT<Real> point_encoder, trunk;
    typename nn::TapeT<Real>::Id task_table{};
    typename nn::TapeT<Real>::Id loss{};

    std::vector<const nn::TensorT<Real>*> grads(const nn::TapeT<Real>& tape) const {
        std::vector<const nn::TensorT<Real>*> out;
        auto collect = [&](const nn::MlpIdsT<Real>& ids) {
            for (auto id : ids.weights) out.push_back(&tape.grad(id));
            for (auto id : ids.biases) out.push_back(&tape.grad(id));
        };
        collect(point_encoder);
        out.push_back(&tape.grad(task_table));
        collect(trunk);
        return out;
    }
};

// Denoising regression over one batch: each element draws a noise level
// t in 1..T and corrupting noise eps, forms z_t = sqrt(ab) z + sqrt(1-ab) eps,
// and the trunk regresses the clean chunk (or eps when the actor is
// configured for noise prediction). Inputs quantize through f32 so the f64
// instantiation evaluates the exact f32 training function.
template <typename Real>
ActorGraphT<Real> actor_build_graph(nn::TapeT<Real>& tape, const ActorWeightsT<Real>& w,
                                    const ActorConfig& cfg, const DiffusionSchedule& sched,
                                    const std::vector<ActorExample>& batch,
                                    std::uint64_t seed, const ActorTrainHooks& hooks = {}) {
    if (batch.empty()) throw std::invalid_argument("empty training batch");
    if (sched.T == 0 || sched.alpha_bar.size() != sched.T + 1)
        throw std::invalid_argument("invalid diffusion schedule");
    const std::size_t B = batch.size();
    const std::size_t N = cfg.n_points;
    const std::size_t D = cfg.chunk_dim();

    nn::TensorT<Real> points(B * N, kPointRowDim);
    nn::TensorT<Real> state_rows(B, 4);
    nn::TensorT<Real> zt_rows(B, D);
    nn::TensorT<Real> targets(B, D);
    nn::TensorT<Real> temb_rows(B, cfg.time_dim);
    std::vector<std::size_t> task_idx(B);

    for (std::size_t e = 0; e < B; ++e) {
        const ActorExample& ex = batch[e];
        if (ex.chunk.size() != D)
            throw std::invalid_argument("action chunk length does not match the actor");
        if (std::size_t(ex.bundle.task) >= kTaskCount)
            throw std::invalid_argument("unknown task id " +
                                        std::to_string(std::size_t(ex.bundle.task)));
        policydetail::fill_point_rows(points, e * N, cfg, ex.bundle);
        task_idx[e] = std::size_t(ex.bundle.task);
        for (std::size_t j = 0; j < 4; ++j)
            state_rows.at(e, j) = Real(float(ex.bundle.state[j]));

        std::size_t t = hooks.fixed_t
                            ? *hooks.fixed_t
                            : 1 + std::min<std::size_t>(
                                      sched.T - 1,
                                      std::size_t(CounterRng(seed, CounterRng::derive(0xD7, e))
                                                      .uniform() *
                                                  double(sched.T)));
        if (t < 1 || t > sched.T)
            throw std::invalid_argument("noise level outside the schedule");
        const double ab = sched.alpha_bar[t];
        CounterRng eps_rng(seed, CounterRng::derive(0xD8, e));
        for (std::size_t k = 0; k < D; ++k) {
            double eps = hooks.zero_eps ? 0.0 : double(float(eps_rng.normal()));
            double z = double(float(ex.chunk[k]));
            zt_rows.at(e, k) =
                Real(float(std::sqrt(ab) * z + std::sqrt(1.0 - ab) * eps));
            targets.at(e, k) = Real(float(cfg.predict_epsilon ? eps : z));
        }

        nn::Tensor temb = nn::time_embed(double(t) / double(sched.T), cfg.time_dim);
        for (std::size_t j = 0; j < cfg.time_dim; ++j) temb_rows.at(e, j) = Real(temb.data[j]);
    }

    ActorGraphT<Real> g;
    g.point_encoder = nn::mlp_leaves(tape, w.point_encoder);
    g.task_table = tape.leaf(w.task_table);
    g.trunk = nn::mlp_leaves(tape, w.trunk);

    auto feats = nn::mlp_apply(tape, g.point_encoder, tape.leaf(std::move(points)));
    auto pooled = tape.maxpool_groups(feats, N);
    auto trunk_in = tape.concat_cols({pooled, tape.leaf(std::move(state_rows)),
                                      tape.gather_rows(g.task_table, task_idx),
                                      tape.leaf(std::move(zt_rows)),
                                      tape.leaf(std::move(temb_rows))});
    auto pred = nn::mlp_apply(tape, g.trunk, trunk_in);
    g.loss = tape.mse_loss(pred, std::move(targets));
    return g;
}

// Mean squared denoising error over the batch, without touching parameters.
inline double actor_loss(const ActorParams& params, const std::vector<ActorExample>& batch,
                         const DiffusionSchedule& sched, std::uint64_t seed,
                         const ActorTrainHooks& hooks = {}) {
    nn::Tape tape;
    auto g = actor_build_graph(tape, actor_weights_cast<float>(params), params.config,
                               sched, batch, seed, hooks);
    double loss = double(tape.value(g.loss).data[0]);
    if (!std::isfinite(loss)) throw std::runtime_error("divergence detected in actor training");
    return loss;
}

// ---------------------------------------------------------------------------
// Dual-actor training step

struct DualStepReport {
    double loss_actor1 = 0.0;
    double loss_actor2 = 0.0;
    double total = 0.0;
    double max_grad_actor1 = 0.0;  // largest |gradient entry| after stage weighting
    double max_grad_actor2 = 0.0;
};

namespace policydetail {

struct WeightedGrad {
    double loss = 0.0;
    std::vector<nn::Tensor> grads;
    double max_abs = 0.0;
};

inline WeightedGrad actor_weighted_grad(const ActorParams& params,
                                        const std::vector<ActorExample>& batch,
                                        const DiffusionSchedule& sched, double weight,
                                        std::uint64_t seed, const ActorTrainHooks& hooks) {
    nn::Tape tape;
    auto g = actor_build_graph(tape, actor_weights_cast<float>(params), params.config,
                               sched, batch, seed, hooks);
    WeightedGrad out;
    out.loss = double(tape.value(g.loss).data[0]);
    if (!std::isfinite(out.loss))
        throw std::runtime_error("divergence detected in actor training");
    tape.backward(g.loss);
    for (const auto* grad : g.grads(tape)) {
        nn::Tensor scaled(grad->rows, grad->cols);
        for (std::size_t i = 0; i < grad->size(); ++i) {
            double v = weight * double(grad->data[i]);
            scaled.data[i] = float(v);
            out.max_abs = std::max(out.max_abs, std::abs(v));
        }
        out.grads.push_back(std::move(scaled));
    }
    return out;
}

}  // namespace policydetail

// One combined step L = w1 L1 + w2 L2 with the stage weight gamma on the
// batch's own actor and 1-gamma on the other; both optimizers step every
// time. The same batch feeds both actors, each reading its own prior slots.
inline DualStepReport dual_train_step(ActorParams& actor1, ActorParams& actor2,
                                      const std::vector<ActorExample>& batch,
                                      StageLabel stage, double gamma,
                                      const DiffusionSchedule& sched, nn::AdamWState& opt1,
                                      nn::AdamWState& opt2, std::uint64_t seed,
                                      const ActorTrainHooks& hooks = {}) {
    if (!(gamma > 0.5 && gamma < 1.0))
        throw std::invalid_argument("stage weight gamma must lie in (0.5, 1)");
    const double w1 = (stage == StageLabel::Approach) ? gamma : 1.0 - gamma;
    const double w2 = 1.0 - w1;

    auto g1 = policydetail::actor_weighted_grad(actor1, batch, sched, w1,
                                                CounterRng::derive(seed, 1), hooks);
    auto g2 = policydetail::actor_weighted_grad(actor2, batch, sched, w2,
                                                CounterRng::derive(seed, 2), hooks);

    auto step = [](ActorParams& p, const std::vector<nn::Tensor>& grads,
                   nn::AdamWState& opt) {
        std::vector<const nn::Tensor*> refs;
        for (const auto& g : grads) refs.push_back(&g);
        adamw_step(actor_param_ptrs(p), refs, opt);
    };
    step(actor1, g1.grads, opt1);
    step(actor2, g2.grads, opt2);

    DualStepReport rep;
    rep.loss_actor1 = g1.loss;
    rep.loss_actor2 = g2.loss;
    rep.total = w1 * g1.loss + w2 * g2.loss;
    rep.max_grad_actor1 = g1.max_abs;
    rep.max_grad_actor2 = g2.max_abs;
    return rep;
}

// Plain unweighted step for a single actor trained on every stage.
inline double single_train_step(ActorParams& actor, const std::vector<ActorExample>& batch,
                                const DiffusionSchedule& sched, nn::AdamWState& opt,
                                std::uint64_t seed, const ActorTrainHooks& hooks = {}) {
    auto g = policydetail::actor_weighted_grad(actor, batch, sched, 1.0,
                                               CounterRng::derive(seed, 1), hooks);
    std::vector<const nn::Tensor*> refs;
    for (const auto& grad : g.grads) refs.push_back(&grad);
    adamw_step(actor_param_ptrs(actor), refs, opt);
    return g.loss;
}

// ---------------------------------------------------------------------------
// DDIM sampling

// Deterministic strided denoising from t=T to t=0 through `inference_steps`
// knots; with the full stride this is standard step-by-step denoising, and
// one knot degenerates to a single network evaluation.
inline std::vector<std::size_t> ddim_knots(std::size_t T, std::size_t steps) {
    if (steps == 0) throw std::invalid_argument("sampler needs at least one step");
    if (steps > T)
        throw std::invalid_argument("inference steps exceed the training schedule");
    std::vector<std::size_t> knots(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i)
        knots[i] = std::size_t(std::llround(double(T) * (1.0 - double(i) / double(steps))));
    for (std::size_t i = 0; i + 1 < knots.size(); ++i)
        if (knots[i] <= knots[i + 1])
            throw std::logic_error("denoising knots must strictly decrease");
    return knots;
}

// The time-independent half of the actor's conditioning: encode the point
// rows once, reuse the pooled feature for every denoising step.
namespace policydetail {

struct ActorContext {
    nn::Tensor pooled;  // (1, enc_dim)
    std::array<float, 4> state;
    std::vector<float> task_row;
};

inline ActorContext actor_context(const ActorParams& p, const ConditionBundle& b) {
    const auto& cfg = p.config;
    if (std::size_t(b.task) >= kTaskCount)
        throw std::invalid_argument("unknown task id " + std::to_string(std::size_t(b.task)));
    nn::Tensor rows(cfg.n_points, kPointRowDim);
    fill_point_rows(rows, 0, cfg, b);
    nn::Tensor feats = nn::mlp_forward(p.point_encoder, rows);
    ActorContext ctx;
    ctx.pooled = nn::Tensor(1, cfg.enc_dim);
    for (std::size_t j = 0; j < cfg.enc_dim; ++j) {
        float best = feats.at(0, j);
        for (std::size_t i = 1; i < feats.rows; ++i) best = std::max(best, feats.at(i, j));
        ctx.pooled.at(0, j) = best;
    }
    for (std::size_t j = 0; j < 4; ++j) ctx.state[j] = float(b.state[j]);
    ctx.task_row.resize(cfg.task_dim);
    for (std::size_t j = 0; j < cfg.task_dim; ++j)
        ctx.task_row[j] = p.task_table.at(std::size_t(b.task), j);
    return ctx;
}

inline nn::Tensor actor_predict(const ActorParams& p, const ActorContext& ctx,
                                const std::vector<double>& z, std::size_t t, std::size_t T) {
    const auto& cfg = p.config;
    nn::Tensor in(1, cfg.trunk_in_dim());
    std::size_t j = 0;
    for (std::size_t k = 0; k < cfg.enc_dim; ++k) in.data[j++] = ctx.pooled.data[k];
    for (std::size_t k = 0; k < 4; ++k) in.data[j++] = ctx.state[k];
    for (std::size_t k = 0; k < cfg.task_dim; ++k) in.data[j++] = ctx.task_row[k];
    for (std::size_t k = 0; k < z.size(); ++k) in.data[j++] = float(z[k]);
    nn::Tensor temb = nn::time_embed(double(t) / double(T), cfg.time_dim);
    for (std::size_t k = 0; k < cfg.time_dim; ++k) in.data[j++] = temb.data[k];
    return nn::mlp_forward(p.trunk, in);
}

}  // namespace policydetail

inline ActionChunk ddim_sample(const ActorParams& actor, const ConditionBundle& bundle,
                               const DiffusionSchedule& sched, std::size_t inference_steps,
                               std::uint64_t seed) {
    const auto& cfg = actor.config;
    auto knots = ddim_knots(sched.T, inference_steps);
    auto ctx = policydetail::actor_context(actor, bundle);

    const std::size_t D = cfg.chunk_dim();
    std::vector<double> z(D);
    CounterRng rng(seed, 0xDD);
    for (auto& v : z) v = rng.normal();

    for (std::size_t i = 0; i + 1 < knots.size(); ++i) {
        const std::size_t t = knots[i], tn = knots[i + 1];
        const double ab = sched.alpha_bar[t];
        const double ab_next = sched.alpha_bar[tn];
        nn::Tensor pred = policydetail::actor_predict(actor, ctx, z, t, sched.T);

        std::vector<double> z0(D), eps(D);
        if (cfg.predict_epsilon) {
            for (std::size_t k = 0; k < D; ++k) {
                eps[k] = double(pred.data[k]);
                z0[k] = (z[k] - std::sqrt(1.0 - ab) * eps[k]) / std::sqrt(ab);
            }
        } else {
            for (std::size_t k = 0; k < D; ++k) {
                z0[k] = double(pred.data[k]);
                eps[k] = (z[k] - std::sqrt(ab) * z0[k]) / std::sqrt(1.0 - ab);
            }
        }
        for (std::size_t k = 0; k < D; ++k)
            z[k] = std::sqrt(ab_next) * z0[k] + std::sqrt(1.0 - ab_next) * eps[k];
    }

    ActionChunk chunk;
    chunk.horizon = cfg.horizon;
    chunk.action_dim = cfg.action_dim;
    chunk.z = std::move(z);
    return chunk;
}

// ---------------------------------------------------------------------------
// Decision maker

struct DecisionConfig {
    std::size_t n_points = 512;
    std::vector<std::size_t> point_hidden = {64, 64};
    std::size_t enc_dim = 64;
    std::size_t task_dim = 8;
    std::vector<std::size_t> head_hidden = {64};

    std::size_t head_in_dim() const { return enc_dim + 4 + task_dim; }
};

struct DecisionParams {
    DecisionConfig config;
    nn::MlpParams point_encoder;  // 3 -> point_hidden -> enc_dim
    nn::Tensor task_table;        // (kTaskCount, task_dim)
    nn::MlpParams head;           // enc+4+task -> head_hidden -> 2 logits

    static DecisionParams init(const DecisionConfig& config, std::uint64_t seed) {
        DecisionParams p;
        p.config = config;

        std::vector<std::size_t> enc_sizes{3};
        for (auto h : config.point_hidden) enc_sizes.push_back(h);
        enc_sizes.push_back(config.enc_dim);
        CounterRng enc_rng(seed, CounterRng::derive(0xDEC, 0));
        p.point_encoder = nn::MlpParams::init(enc_sizes, enc_rng);

        CounterRng table_rng(seed, CounterRng::derive(0xDEC, 1));
        p.task_table = nn::Tensor(kTaskCount, config.task_dim);
        double table_std = 1.0 / std::sqrt(double(config.task_dim));
        for (auto& v : p.task_table.data) v = float(table_rng.normal() * table_std);

        std::vector<std::size_t> head_sizes{config.head_in_dim()};
        for (auto h : config.head_hidden) head_sizes.push_back(h);
        head_sizes.push_back(2);
        CounterRng head_rng(seed, CounterRng::derive(0xDEC, 2));
        p.head = nn::MlpParams::init(head_sizes, head_rng);
        return p;
    }
};

inline std::vector<nn::Tensor*> decision_param_ptrs(DecisionParams& p) {
    std::vector<nn::Tensor*> out;
    for (auto& w : p.point_encoder.weights) out.push_back(&w);
    for (auto& b : p.point_encoder.biases) out.push_back(&b);
    out.push_back(&p.task_table);
    for (auto& w : p.head.weights) out.push_back(&w);
    for (auto& b : p.head.biases) out.push_back(&b);
    return out;
}

struct DecisionExample {
    const PointCloud* obs = nullptr;
    std::array<double, 4> state{};
    TaskId task = TaskId::OpenDrawer;
    StageLabel stage = StageLabel::Approach;
};

template <typename Real>
struct DecisionWeightsT {
    nn::MlpParamsT<Real> point_encoder;
    nn::TensorT<Real> task_table;
    nn::MlpParamsT<Real> head;
};

template <typename Real>
DecisionWeightsT<Real> decision_weights_cast(const DecisionParams& p) {
    return {nn::mlp_cast<Real>(p.point_encoder), nn::tensor_cast<Real>(p.task_table),
            nn::mlp_cast<Real>(p.head)};
}

template <typename Real>
struct DecisionGraphT {
    nn::MlpIdsT<Real> point_encoder, head;
    typename nn::TapeT<Real>::Id task_table{};
    typename nn::TapeT<Real>::Id loss{};

    std::vector<const nn::TensorT<Real>*> grads(const nn::TapeT<Real>& tape) const {
        std::vector<const nn::TensorT<Real>*> out;
        auto collect = [&](const nn::MlpIdsT<Real>& ids) {
            for (auto id : ids.weights) out.push_back(&tape.grad(id));
            for (auto id : ids.biases) out.push_back(&tape.grad(id));
        };
        collect(point_encoder);
        out.push_back(&tape.grad(task_table));
        collect(head);
        return out;
    }
};

template <typename Real>
DecisionGraphT<Real> decision_build_graph(nn::TapeT<Real>& tape,
                                          const DecisionWeightsT<Real>& w,
                                          const DecisionConfig& cfg,
                                          const std::vector<DecisionExample>& batch) {
    if (batch.empty()) throw std::invalid_argument("empty training batch");
    const std::size_t B = batch.size();
    const std::size_t N = cfg.n_points;

    nn::TensorT<Real> coords(B * N, 3);
    nn::TensorT<Real> state_rows(B, 4);
    std::vector<std::size_t> task_idx(B);
    std::vector<std::size_t> labels(B);
    for (std::size_t e = 0; e < B; ++e) {
        const DecisionExample& ex = batch[e];
        if (!ex.obs || ex.obs->size() != N)
            throw std::invalid_argument("observation point count does not match the decider");
        if (std::size_t(ex.task) >= kTaskCount)
            throw std::invalid_argument("unknown task id " +
                                        std::to_string(std::size_t(ex.task)));
        for (std::size_t i = 0; i < N; ++i) {
            coords.at(e * N + i, 0) = Real(float(ex.obs->points[i].x));
            coords.at(e * N + i, 1) = Real(float(ex.obs->points[i].y));
            coords.at(e * N + i, 2) = Real(float(ex.obs->points[i].z));
        }
        for (std::size_t j = 0; j < 4; ++j)
            state_rows.at(e, j) = Real(float(ex.state[j]));
        task_idx[e] = std::size_t(ex.task);
        labels[e] = std::size_t(ex.stage);
    }

    DecisionGraphT<Real> g;
    g.point_encoder = nn::mlp_leaves(tape, w.point_encoder);
    g.task_table = tape.leaf(w.task_table);
    g.head = nn::mlp_leaves(tape, w.head);

    auto feats = nn::mlp_apply(tape, g.point_encoder, tape.leaf(std::move(coords)));
    auto pooled = tape.maxpool_groups(feats, N);
    auto head_in = tape.concat_cols({pooled, tape.leaf(std::move(state_rows)),
                                     tape.gather_rows(g.task_table, task_idx)});
    auto logits = nn::mlp_apply(tape, g.head, head_in);
    g.loss = tape.softmax_ce(logits, std::move(labels));
    return g;
}

inline double decision_train_step(DecisionParams& params,
                                  const std::vector<DecisionExample>& batch,
                                  nn::AdamWState& opt) {
    nn::Tape tape;
    auto g = decision_build_graph(tape, decision_weights_cast<float>(params),
                                  params.config, batch);
    double loss = double(tape.value(g.loss).data[0]);
    if (!std::isfinite(loss))
        throw std::runtime_error("divergence detected in decision training");
    tape.backward(g.loss);
    adamw_step(decision_param_ptrs(params), g.grads(tape), opt);
    return loss;
}

inline std::array<double, 2> decision_logits(const DecisionParams& p, const PointCloud& obs,
                                             const std::array<double, 4>& state, TaskId task) {
    const auto& cfg = p.config;
    if (obs.size() != cfg.n_points)
        throw std::invalid_argument("observation point count does not match the decider");
    if (std::size_t(task) >= kTaskCount)
        throw std::invalid_argument("unknown task id " + std::to_string(std::size_t(task)));
    nn::Tensor coords = coords_tensor(obs);
    nn::Tensor feats = nn::mlp_forward(p.point_encoder, coords);
    nn::Tensor in(1, cfg.head_in_dim());
    std::size_t j = 0;
    for (std::size_t k = 0; k < cfg.enc_dim; ++k) {
        float best = feats.at(0, k);
        for (std::size_t i = 1; i < feats.rows; ++i) best = std::max(best, feats.at(i, k));
        in.data[j++] = best;
    }
    for (std::size_t k = 0; k < 4; ++k) in.data[j++] = float(state[k]);
    for (std::size_t k = 0; k < cfg.task_dim; ++k)
        in.data[j++] = p.task_table.at(std::size_t(task), k);
    nn::Tensor logits = nn::mlp_forward(p.head, in);
    return {double(logits.data[0]), double(logits.data[1])};
}

// Argmax routing; a tie keeps the approach actor in charge.
inline StageLabel select_actor(const DecisionParams& p, const PointCloud& obs,
                               const std::array<double, 4>& state, TaskId task) {
    auto logits = decision_logits(p, obs, state, task);
    return logits[1] > logits[0] ? StageLabel::Manipulate : StageLabel::Approach;
}

// ---------------------------------------------------------------------------
// Closed-loop rollout

struct RolloutConfig {
    std::size_t n_points = 512;
    double sigma_obs = 0.002;
    std::size_t max_steps = 0;      // episode budget; zero fails immediately
    std::size_t execute_steps = 4;  // actions executed per re-plan
    std::size_t ddim_steps = 10;
    std::size_t afg_steps = 10;  // integration steps when sampling the priors
    bool dual = true;            // false routes every re-plan to the first actor
};

struct RolloutHooks {
    // Replaces the action source entirely (planning is skipped); used to
    // verify the loop against the scripted expert.
    std::function<Action(const ArticulatedScene&, const EnvState&, const TaskSpec&)>
        action_override;
};

struct EpisodeResult {
    bool success = false;
    std::size_t steps = 0;
    std::vector<StageLabel> decisions;  // one entry per executed step

    std::size_t stage_switches() const {
        std::size_t n = 0;
        for (std::size_t i = 1; i < decisions.size(); ++i)
            if (decisions[i] != decisions[i - 1]) ++n;
        return n;
    }
};

// Receding-horizon execution: every re-plan observes, samples both priors
// fresh, routes through the decision maker, denoises an action chunk with the
// chosen actor, and executes the first `execute_steps` actions.
inline EpisodeResult rollout(const ActorParams& actor1, const ActorParams& actor2,
                             const DecisionParams& decision, const AfgParams& afg,
                             const DiffusionSchedule& sched, TaskId task,
                             std::uint64_t seed, const RolloutConfig& rc,
                             const RolloutHooks& hooks = {}) {
    if (rc.execute_steps == 0)
        throw std::invalid_argument("rollout must execute at least one action per re-plan");
    const TaskSpec spec = make_task(task);
    auto [scene, state] = reset(spec, seed);

    EpisodeResult res;
    if (rc.max_steps == 0) return res;

    std::size_t replan = 0;
    while (res.steps < rc.max_steps) {
        StageLabel stage = StageLabel::Approach;
        std::vector<Action> plan;
        if (!hooks.action_override) {
            PointCloud obs = observe(scene, state, rc.n_points,
                                     CounterRng::derive(seed, 0xD0, replan), rc.sigma_obs);
            std::array<double, 4> st{state.ee_position.x, state.ee_position.y,
                                     state.ee_position.z, state.gripper_width};
            auto aff = sample_affordance(afg, obs, task, rc.afg_steps,
                                         CounterRng::derive(seed, 0xD1, replan));
            auto flow = sample_flow(afg, obs, task, rc.afg_steps,
                                    CounterRng::derive(seed, 0xD2, replan));
            if (rc.dual) stage = select_actor(decision, obs, st, task);
            const ActorParams& actor =
                (!rc.dual || stage == StageLabel::Approach) ? actor1 : actor2;

            ConditionBundle bundle;
            bundle.obs = &obs;
            bundle.state = st;
            bundle.task = task;
            bundle.affordance = std::move(aff.values);
            bundle.flow = flatten_flow(flow.vectors);
            plan = ddim_sample(actor, bundle, sched, rc.ddim_steps,
                               CounterRng::derive(seed, 0xD3, replan))
                       .actions();
        }

        for (std::size_t e = 0; e < rc.execute_steps && res.steps < rc.max_steps; ++e) {
            Action a = hooks.action_override ? hooks.action_override(scene, state, spec)
                                             : plan[e];
            state = step(scene, state, a);
            ++res.steps;
            res.decisions.push_back(stage);
            if (is_success(scene, state, spec)) {
                res.success = true;
                return res;
            }
        }
        ++replan;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpointing (entry prefixes "actor1.", "actor2.", "decision.")

inline std::vector<std::string> actor_param_names(const ActorParams& p,
                                                  const std::string& prefix) {
    std::vector<std::string> names;
    auto mlp_names = [&](const std::string& part, const nn::MlpParams& m) {
        for (std::size_t l = 0; l < m.weights.size(); ++l)
            names.push_back(prefix + part + ".w" + std::to_string(l));
        for (std::size_t l = 0; l < m.biases.size(); ++l)
            names.push_back(prefix + part + ".b" + std::to_string(l));
    };
    mlp_names("point_encoder", p.point_encoder);
    names.push_back(prefix + "task_table");
    mlp_names("trunk", p.trunk);
    return names;
}

inline nn::NamedTensorRefs actor_checkpoint_entries(const ActorParams& p,
                                                    const std::string& prefix) {
    auto names = actor_param_names(p, prefix);
    auto ptrs = actor_param_ptrs(const_cast<ActorParams&>(p));
    nn::NamedTensorRefs entries;
    for (std::size_t i = 0; i < names.size(); ++i) entries.push_back({names[i], ptrs[i]});
    return entries;
}

inline void actor_restore(ActorParams& p, const nn::NamedTensors& loaded,
                          const std::string& prefix) {
    auto names = actor_param_names(p, prefix);
    auto ptrs = actor_param_ptrs(p);
    std::vector<std::pair<std::string, nn::Tensor*>> targets;
    for (std::size_t i = 0; i < names.size(); ++i) targets.push_back({names[i], ptrs[i]});
    nn::restore_params(loaded, targets);
}

inline std::vector<std::string> decision_param_names(const DecisionParams& p) {
    std::vector<std::string> names;
    auto mlp_names = [&](const std::string& part, const nn::MlpParams& m) {
        for (std::size_t l = 0; l < m.weights.size(); ++l)
            names.push_back("decision." + part + ".w" + std::to_string(l));
        for (std::size_t l = 0; l < m.biases.size(); ++l)
            names.push_back("decision." + part + ".b" + std::to_string(l));
    };
    mlp_names("point_encoder", p.point_encoder);
    names.push_back("decision.task_table");
    mlp_names("head", p.head);
    return names;
}

inline nn::NamedTensorRefs decision_checkpoint_entries(const DecisionParams& p) {
    auto names = decision_param_names(p);
    auto ptrs = decision_param_ptrs(const_cast<DecisionParams&>(p));
    nn::NamedTensorRefs entries;
    for (std::size_t i = 0; i < names.size(); ++i) entries.push_back({names[i], ptrs[i]});
    return entries;
}

inline void decision_restore(DecisionParams& p, const nn::NamedTensors& loaded) {
    auto names = decision_param_names(p);
    auto ptrs = decision_param_ptrs(p);
    std::vector<std::pair<std::string, nn::Tensor*>> targets;
    for (std::size_t i = 0; i < names.size(); ++i) targets.push_back({names[i], ptrs[i]});
    nn::restore_params(loaded, targets);
}

}  // namespace dap
