#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "dap/afgnet.hpp"

using namespace dap;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

AfgConfig small_cfg(std::size_t n) {
    AfgConfig c;
    c.n_points = n;
    c.encoder_hidden = {16, 16};
    c.enc_dim = 16;
    c.task_dim = 4;
    c.noise_dim = 4;
    c.time_dim = 8;
    c.head_hidden = {24, 24};
    c.euler_steps = 8;
    return c;
}

// Synthetic observation with plausible ground-truth channels; no env needed.
PointCloud fake_cloud(std::size_t n, std::uint64_t seed) {
    CounterRng rng(seed, 0x50C);
    PointCloud pc;
    pc.points.resize(n);
    for (auto& p : pc.points)
        p = {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.0, 0.5)};
    std::vector<double> aff(n);
    for (auto& v : aff) v = rng.uniform(-0.99, 1.0);
    std::vector<Vec3> flow(n);
    for (auto& v : flow) v = {rng.normal() * 0.3, rng.normal() * 0.3, rng.normal() * 0.3};
    pc.set_scalar_channel(kGtAffordance, std::move(aff));
    pc.set_vec3_channel(kGtFlow, flow);
    return pc;
}

double l2_diff(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        Vec3 d{a[i].x - b[i].x, a[i].y - b[i].y, a[i].z - b[i].z};
        s += d.x * d.x + d.y * d.y + d.z * d.z;
    }
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("condition encoding is deterministic, permutation-invariant, and task-aware") {
    auto cfg = small_cfg(32);
    auto params = AfgParams::init(cfg, 7);
    PointCloud obs = fake_cloud(32, 1);
    std::vector<double> noise{0.1, -0.2, 0.3, 0.4};

    auto c1 = encode_condition(params, obs, TaskId::OpenDrawer, noise);
    auto c2 = encode_condition(params, obs, TaskId::OpenDrawer, noise);
    REQUIRE(c1.global_feature.data == c2.global_feature.data);
    REQUIRE(c1.task_embedding.data == c2.task_embedding.data);
    REQUIRE(c1.noise_embedding.data == c2.noise_embedding.data);
    REQUIRE(c1.per_point_coords.data == c2.per_point_coords.data);

    PointCloud rev = obs;
    std::reverse(rev.points.begin(), rev.points.end());
    for (auto& [name, ch] : rev.channels) {
        if (ch.width == 1) std::reverse(ch.data.begin(), ch.data.end());
    }
    auto c3 = encode_condition(params, rev, TaskId::OpenDrawer, noise);
    double max_diff = 0.0;
    for (std::size_t j = 0; j < cfg.enc_dim; ++j)
        max_diff = std::max(max_diff, std::abs(double(c3.global_feature.data[j]) -
                                               double(c1.global_feature.data[j])));
    REQUIRE(max_diff <= 1e-6);

    auto c4 = encode_condition(params, obs, TaskId::OpenDoor, noise);
    double task_diff = 0.0;
    for (std::size_t j = 0; j < cfg.task_dim; ++j)
        task_diff = std::max(task_diff, std::abs(double(c4.task_embedding.data[j]) -
                                                 double(c1.task_embedding.data[j])));
    REQUIRE(task_diff > 1e-6);

    PointCloud small = obs;
    small.points.pop_back();
    REQUIRE_THROWS_MATCHES(encode_condition(params, small, TaskId::OpenDrawer, noise),
                           std::invalid_argument,
                           MessageMatches(ContainsSubstring("does not match the configured")));
    REQUIRE_THROWS_MATCHES(encode_condition(params, obs, TaskId(9), noise),
                           std::invalid_argument,
                           MessageMatches(ContainsSubstring("unknown task id")));
    std::vector<double> bad_noise{0.1, 0.2};
    REQUIRE_THROWS_MATCHES(encode_condition(params, obs, TaskId::OpenDrawer, bad_noise),
                           std::invalid_argument,
                           MessageMatches(ContainsSubstring("noise vector dimension")));
}

TEST_CASE("flow-matching interpolation hits both endpoints bit-exactly") {
    CounterRng rng(3, 0);
    nn::Tensor x0(16, 3), x1(16, 3);
    for (auto& v : x0.data) v = float(rng.normal());
    for (auto& v : x1.data) v = float(rng.normal());

    FlowMatchSample fm;
    fm.x0 = x0;
    fm.x1 = x1;

    fm.t = 0.0;
    REQUIRE(fm.xt().data == x0.data);
    fm.t = 1.0;
    REQUIRE(fm.xt().data == x1.data);

    fm.t = 0.5;
    auto mid = fm.xt();
    auto vel = fm.velocity();
    for (std::size_t i = 0; i < mid.size(); ++i) {
        REQUIRE(std::isfinite(double(mid.data[i])));
        REQUIRE(vel.data[i] == float(double(x1.data[i]) - double(x0.data[i])));
    }
}

TEST_CASE("hooked train step reduces to the mean squared head output") {
    auto cfg = small_cfg(32);
    auto params = AfgParams::init(cfg, 11);
    const std::uint64_t seed = 5;

    std::vector<PointCloud> clouds;
    for (std::uint64_t s = 0; s < 3; ++s) {
        PointCloud pc = fake_cloud(32, 10 + s);
        pc.set_scalar_channel(kGtAffordance, std::vector<double>(32, 0.0));
        pc.set_vec3_channel(kGtFlow, std::vector<Vec3>(32, Vec3{0.0, 0.0, 0.0}));
        clouds.push_back(std::move(pc));
    }
    std::vector<AfgExample> batch;
    for (auto& pc : clouds) batch.push_back({&pc, TaskId::OpenDoor});

    AfgTrainHooks hooks;
    hooks.fixed_t = 0.3;
    hooks.zero_x0 = true;

    // With x0 = 0 and targets = 0 the interpolant is zero and the regression
    // target is zero, so each head's loss is the mean of its squared outputs.
    double want_aff = 0.0, want_flow = 0.0;
    for (std::size_t e = 0; e < batch.size(); ++e) {
        auto noise = afgdetail::draw_noise(cfg, seed, CounterRng::derive(0xE0, e));
        auto cond = encode_condition(params, *batch[e].obs, batch[e].task, noise);
        nn::Tensor xt1(32, 1), xt3(32, 3);
        auto in1 = afgdetail::head_input(cond, xt1, 0.3, cfg.time_dim);
        auto in3 = afgdetail::head_input(cond, xt3, 0.3, cfg.time_dim);
        auto p1 = nn::mlp_forward(params.affordance_head, in1);
        auto p3 = nn::mlp_forward(params.flow_head, in3);
        for (float v : p1.data) want_aff += double(v) * double(v);
        for (float v : p3.data) want_flow += double(v) * double(v);
    }
    want_aff /= double(batch.size() * 32);
    want_flow /= double(batch.size() * 32 * 3);

    nn::AdamWState opt;
    auto losses = afg_train_step(params, batch, opt, seed, hooks);
    REQUIRE(losses.affordance == Catch::Approx(want_aff).epsilon(1e-5));
    REQUIRE(losses.flow == Catch::Approx(want_flow).epsilon(1e-5));

    std::vector<AfgExample> empty;
    REQUIRE_THROWS_MATCHES(afg_train_step(params, empty, opt, seed),
                           std::invalid_argument,
                           MessageMatches(ContainsSubstring("empty training batch")));
    PointCloud bare;
    bare.points.resize(32, Point3{0, 0, 0});
    std::vector<AfgExample> no_gt{{&bare, TaskId::OpenDrawer}};
    REQUIRE_THROWS_MATCHES(afg_train_step(params, no_gt, opt, seed),
                           std::invalid_argument,
                           MessageMatches(ContainsSubstring("ground-truth")));
}

TEST_CASE("f64 graph instantiation matches the f32 training loss") {
    auto cfg = small_cfg(32);
    auto params = AfgParams::init(cfg, 3);
    PointCloud a = fake_cloud(32, 20), b = fake_cloud(32, 21);
    std::vector<AfgExample> batch{{&a, TaskId::OpenDrawer}, {&b, TaskId::PutBlockShort}};

    auto check = params;
    nn::AdamWState opt;
    auto losses = afg_train_step(check, batch, opt, 9);

    nn::TapeT<double> tape;
    auto g = afg_build_graph(tape, afg_weights_cast<double>(params), cfg, batch, 9);
    double aff64 = tape.value(g.affordance_loss).data[0];
    double flow64 = tape.value(g.flow_loss).data[0];
    REQUIRE(std::abs(aff64 - losses.affordance) <= 1e-3 * (1.0 + std::abs(aff64)));
    REQUIRE(std::abs(flow64 - losses.flow) <= 1e-3 * (1.0 + std::abs(flow64)));
}

TEST_CASE("analytic gradients match central differences through the whole graph") {
    AfgConfig cfg;
    cfg.n_points = 8;
    cfg.encoder_hidden = {8};
    cfg.enc_dim = 8;
    cfg.task_dim = 4;
    cfg.noise_dim = 4;
    cfg.time_dim = 4;
    cfg.head_hidden = {12};
    auto params = AfgParams::init(cfg, 13);
    PointCloud a = fake_cloud(8, 30), b = fake_cloud(8, 31);
    std::vector<AfgExample> batch{{&a, TaskId::OpenDoor}, {&b, TaskId::CloseDrawer}};
    const std::uint64_t seed = 21;

    auto weights = afg_weights_cast<double>(params);
    auto tensor_list = [](AfgWeightsT<double>& w) {
        std::vector<nn::TensorT<double>*> out;
        for (auto& t : w.encoder.weights) out.push_back(&t);
        for (auto& t : w.encoder.biases) out.push_back(&t);
        out.push_back(&w.task_table);
        for (auto& t : w.affordance_head.weights) out.push_back(&t);
        for (auto& t : w.affordance_head.biases) out.push_back(&t);
        for (auto& t : w.flow_head.weights) out.push_back(&t);
        for (auto& t : w.flow_head.biases) out.push_back(&t);
        return out;
    };
    auto loss_at = [&](const AfgWeightsT<double>& w) {
        nn::TapeT<double> tape;
        auto g = afg_build_graph(tape, w, cfg, batch, seed);
        return double(tape.value(g.total).data[0]);
    };

    nn::TapeT<double> tape;
    auto g = afg_build_graph(tape, weights, cfg, batch, seed);
    tape.backward(g.total);
    auto grads = g.grads(tape);
    auto tensors = tensor_list(weights);
    REQUIRE(grads.size() == tensors.size());

    const double h = 1e-5;
    std::size_t checked = 0;
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        auto& t = *tensors[ti];
        std::size_t stride = std::max<std::size_t>(1, t.size() / 4);
        for (std::size_t k = 0; k < t.size(); k += stride) {
            double orig = t.data[k];
            t.data[k] = orig + h;
            double lp = loss_at(weights);
            t.data[k] = orig - h;
            double lm = loss_at(weights);
            t.data[k] = orig;
            double fd = (lp - lm) / (2.0 * h);
            double ad = grads[ti]->data[k];
            REQUIRE(std::abs(ad - fd) <= 1e-6 + 1e-4 * std::max(std::abs(ad), std::abs(fd)));
            ++checked;
        }
    }
    REQUIRE(checked >= 30);
}

TEST_CASE("training on recorded demonstrations reduces the loss") {
    std::vector<Demonstration> demos;
    for (std::uint64_t s = 1; s <= 10; ++s) {
        auto d = record_episode(make_task(TaskId::OpenDrawer), s, 32, 0.002);
        annotate_ground_truth(d, 10.0);
        demos.push_back(std::move(d));
    }

    AfgConfig cfg;
    cfg.n_points = 32;
    cfg.encoder_hidden = {24, 24};
    cfg.enc_dim = 24;
    cfg.task_dim = 4;
    cfg.noise_dim = 4;
    cfg.time_dim = 8;
    cfg.head_hidden = {32, 32};
    auto params = AfgParams::init(cfg, 1);

    std::vector<AfgExample> examples;
    for (const auto& d : demos)
        for (const auto& fr : d.frames) examples.push_back({&fr.obs, d.task});
    CounterRng shuffle_rng(7, 0);
    for (std::size_t i = examples.size(); i > 1; --i)
        std::swap(examples[i - 1],
                  examples[std::size_t(shuffle_rng.uniform() * double(i))]);

    nn::AdamWState opt;
    opt.lr = 1e-3;
    const std::size_t batch_size = 8;
    std::vector<double> totals;
    std::size_t cursor = 0;
    for (int step = 0; step < 500; ++step) {
        std::vector<AfgExample> batch;
        for (std::size_t j = 0; j < batch_size; ++j) {
            batch.push_back(examples[cursor]);
            cursor = (cursor + 1) % examples.size();
        }
        auto losses = afg_train_step(params, batch, opt, 1000 + std::uint64_t(step));
        totals.push_back(losses.total());
    }
    double first = (totals[0] + totals[1] + totals[2]) / 3.0;
    double last = (totals[497] + totals[498] + totals[499]) / 3.0;
    INFO("first " << first << " last " << last);
    REQUIRE(last < 0.25 * first);
}

TEST_CASE("constant-velocity heads integrate exactly") {
    auto cfg = small_cfg(32);
    auto params = AfgParams::init(cfg, 5);
    for (auto& w : params.affordance_head.weights) w.fill(0.0f);
    for (auto& w : params.flow_head.weights) w.fill(0.0f);
    params.affordance_head.biases.back().data[0] = 0.25f;
    params.flow_head.biases.back().data[0] = 0.25f;
    params.flow_head.biases.back().data[1] = -0.5f;
    params.flow_head.biases.back().data[2] = 0.125f;

    PointCloud obs = fake_cloud(32, 2);

    std::vector<double> aff_x0(32, 0.5);
    auto aff = sample_affordance(params, obs, TaskId::OpenDrawer, 8, 42, &aff_x0);
    for (double v : aff.values) REQUIRE(v == 0.75);

    std::vector<double> flow_x0(96);
    for (std::size_t i = 0; i < 32; ++i) {
        flow_x0[3 * i] = -0.25;
        flow_x0[3 * i + 1] = 0.5;
        flow_x0[3 * i + 2] = 0.25;
    }
    auto flow = sample_flow(params, obs, TaskId::OpenDrawer, 8, 42, &flow_x0);
    for (const auto& v : flow.vectors) {
        REQUIRE(v.x == 0.0);
        REQUIRE(v.y == 0.0);
        REQUIRE(v.z == 0.375);
    }

    REQUIRE_THROWS_MATCHES(sample_flow(params, obs, TaskId::OpenDrawer, 0, 42),
                           std::invalid_argument,
                           MessageMatches(ContainsSubstring("at least one step")));
}

TEST_CASE("a single integration step is one network evaluation from the base draw") {
    auto cfg = small_cfg(32);
    auto params = AfgParams::init(cfg, 5);
    PointCloud obs = fake_cloud(32, 2);
    const std::uint64_t seed = 42;

    std::vector<double> x0(32);
    for (std::size_t i = 0; i < 32; ++i) x0[i] = 0.5 - 0.03 * double(i);

    auto got = sample_affordance(params, obs, TaskId::OpenDoor, 1, seed, &x0);

    auto noise = afgdetail::draw_noise(cfg, seed, 0xE5);
    auto cond = encode_condition(params, obs, TaskId::OpenDoor, noise);
    nn::Tensor xt(32, 1);
    for (std::size_t i = 0; i < 32; ++i) xt.data[i] = float(x0[i]);
    auto v = nn::mlp_forward(params.affordance_head,
                             afgdetail::head_input(cond, xt, 0.0, cfg.time_dim));
    for (std::size_t i = 0; i < 32; ++i) {
        double want = x0[i] + double(v.data[i]);
        if (want > 1.0) want = 1.0;
        if (want <= -1.0) want = -1.0 + 1e-6;
        REQUIRE(got.values[i] == want);
    }
}

TEST_CASE("sampling is deterministic in the seed and refines monotonically") {
    auto cfg = small_cfg(32);
    auto params = AfgParams::init(cfg, 17);
    PointCloud obs = fake_cloud(32, 3);

    auto a1 = sample_affordance(params, obs, TaskId::OpenDoor, 8, 42);
    auto a2 = sample_affordance(params, obs, TaskId::OpenDoor, 8, 42);
    REQUIRE(a1.values == a2.values);
    auto f1 = sample_flow(params, obs, TaskId::OpenDoor, 8, 42);
    auto f2 = sample_flow(params, obs, TaskId::OpenDoor, 8, 42);
    REQUIRE(l2_diff(f1.vectors, f2.vectors) == 0.0);

    auto a3 = sample_affordance(params, obs, TaskId::OpenDoor, 8, 43);
    double diff = 0.0;
    for (std::size_t i = 0; i < a1.values.size(); ++i)
        diff = std::max(diff, std::abs(a1.values[i] - a3.values[i]));
    REQUIRE(diff > 0.0);

    std::vector<double> x0(96);
    CounterRng rng(6, 1);
    for (auto& v : x0) v = rng.normal();
    auto s8 = sample_flow(params, obs, TaskId::OpenDoor, 8, 42, &x0);
    auto s16 = sample_flow(params, obs, TaskId::OpenDoor, 16, 42, &x0);
    auto s32 = sample_flow(params, obs, TaskId::OpenDoor, 32, 42, &x0);
    REQUIRE(l2_diff(s16.vectors, s32.vectors) <= l2_diff(s8.vectors, s16.vectors) + 1e-6);
}

TEST_CASE("untrained priors annotate far from ground truth, reproducibly") {
    auto demo = record_episode(make_task(TaskId::OpenDrawer), 4, 32, 0.002);
    annotate_ground_truth(demo, 10.0);

    auto cfg = small_cfg(32);
    auto params = AfgParams::init(cfg, 23);
    annotate_with_afg(demo, params, 99);

    double abs_err = 0.0;
    std::size_t count = 0;
    for (const auto& fr : demo.frames) {
        REQUIRE(fr.obs.has_channel(kPredAffordance));
        REQUIRE(fr.obs.has_channel(kPredFlow));
        const auto& gt = fr.obs.channel(kGtAffordance).data;
        const auto& pred = fr.obs.channel(kPredAffordance).data;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            abs_err += std::abs(pred[i] - gt[i]);
            ++count;
        }
    }
    REQUIRE(abs_err / double(count) > 0.3);

    std::vector<std::vector<double>> first_aff, first_flow;
    for (const auto& fr : demo.frames) {
        first_aff.push_back(fr.obs.channel(kPredAffordance).data);
        first_flow.push_back(fr.obs.channel(kPredFlow).data);
    }
    annotate_with_afg(demo, params, 99);
    for (std::size_t i = 0; i < demo.frames.size(); ++i) {
        REQUIRE(demo.frames[i].obs.channel(kPredAffordance).data == first_aff[i]);
        REQUIRE(demo.frames[i].obs.channel(kPredFlow).data == first_flow[i]);
    }

    annotate_with_afg(demo, params, 100);
    bool changed = false;
    for (std::size_t i = 0; i < demo.frames.size() && !changed; ++i)
        changed = demo.frames[i].obs.channel(kPredAffordance).data != first_aff[i];
    REQUIRE(changed);
}

TEST_CASE("checkpoints restore every tensor under the afg prefix") {
    auto cfg = small_cfg(32);
    auto params = AfgParams::init(cfg, 31);

    auto entries = afg_checkpoint_entries(params);
    REQUIRE(entries.size() == afg_param_ptrs(params).size());
    for (const auto& [name, ptr] : entries) {
        REQUIRE(name.rfind("afg.", 0) == 0);
        REQUIRE(ptr != nullptr);
    }

    auto bytes = nn::serialize_checkpoint(entries);
    auto loaded = nn::parse_checkpoint(bytes);

    auto other = AfgParams::init(cfg, 32);
    REQUIRE(other.task_table.data != params.task_table.data);
    afg_restore(other, loaded);

    auto want = afg_param_ptrs(params);
    auto got = afg_param_ptrs(other);
    for (std::size_t i = 0; i < want.size(); ++i) {
        REQUIRE(got[i]->rows == want[i]->rows);
        REQUIRE(got[i]->cols == want[i]->cols);
        REQUIRE(got[i]->data == want[i]->data);
    }

    auto a1 = sample_affordance(params, fake_cloud(32, 8), TaskId::OpenDrawer, 4, 7);
    auto a2 = sample_affordance(other, fake_cloud(32, 8), TaskId::OpenDrawer, 4, 7);
    REQUIRE(a1.values == a2.values);
}
