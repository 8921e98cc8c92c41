#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <vector>

#include "dap/nn/adamw.hpp"
#include "dap/nn/checkpoint.hpp"
#include "dap/nn/encoding.hpp"
#include "dap/nn/mlp.hpp"
#include "dap/nn/tape.hpp"
#include "dap/nn/tensor.hpp"
#include "dap/rng.hpp"

using namespace dap;
using namespace dap::nn;

using TensorD = TensorT<double>;
using TapeD = TapeT<double>;
using MlpD = MlpParamsT<double>;

namespace {

TensorD random_tensor(std::size_t r, std::size_t c, CounterRng& rng, double scale = 1.0) {
    TensorD t(r, c);
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

// Central finite differences on a scalar function of a set of f64 tensors,
// the independent oracle for every analytic gradient below.
void check_gradients(std::vector<TensorD>& leaves,
                     const std::function<double(const std::vector<TensorD>&)>& eval,
                     const std::vector<TensorD>& analytic, double h = 1e-3,
                     double tol = 1e-4) {
    REQUIRE(analytic.size() == leaves.size());
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        for (std::size_t k = 0; k < leaves[li].size(); ++k) {
            double orig = leaves[li].data[k];
            leaves[li].data[k] = orig + h;
            double up = eval(leaves);
            leaves[li].data[k] = orig - h;
            double down = eval(leaves);
            leaves[li].data[k] = orig;
            double fd = (up - down) / (2.0 * h);
            double got = analytic[li].data[k];
            double denom = std::max({std::abs(fd), std::abs(got), 1e-8});
            REQUIRE(std::abs(fd - got) / denom < tol);
        }
    }
}

}  // namespace

TEST_CASE("mlp with zero weights returns the bias for any input") {
    MlpD p;
    p.weights.push_back(TensorD(3, 2));
    TensorD b(1, 2);
    b.data = {0.7, -1.3};
    p.biases.push_back(b);
    CounterRng rng(1, 0);
    TensorD x = random_tensor(4, 3, rng);
    TensorD y = mlp_forward(p, x);
    for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(y.at(i, 0) == 0.7);
        REQUIRE(y.at(i, 1) == -1.3);
    }
}

TEST_CASE("identity-initialized linear layer is the identity map") {
    MlpD p;
    TensorD w(3, 3);
    for (int i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    p.weights.push_back(w);
    p.biases.push_back(TensorD(1, 3));
    CounterRng rng(2, 0);
    TensorD x = random_tensor(5, 3, rng);
    TensorD y = mlp_forward(p, x);
    for (std::size_t i = 0; i < x.size(); ++i)
        REQUIRE(y.data[i] == Catch::Approx(x.data[i]).margin(1e-12));
}

TEST_CASE("mlp matches an independent straight-line scalar evaluation") {
    CounterRng rng(3, 0);
    MlpD p = MlpD::init({4, 6, 2}, rng);
    for (auto& b : p.biases)
        for (auto& v : b.data) v = rng.normal() * 0.1;
    for (int trial = 0; trial < 5; ++trial) {
        TensorD x = random_tensor(1, 4, rng);
        TensorD y = mlp_forward(p, x);
        // Oracle: nested loops, no tensor machinery.
        std::vector<double> h(6, 0.0);
        for (int j = 0; j < 6; ++j) {
            double s = p.biases[0].data[j];
            for (int i = 0; i < 4; ++i) s += x.data[i] * p.weights[0].at(i, j);
            h[j] = s / (1.0 + std::exp(-s));  // SiLU
        }
        for (int j = 0; j < 2; ++j) {
            double s = p.biases[1].data[j];
            for (int i = 0; i < 6; ++i) s += h[i] * p.weights[1].at(i, j);
            REQUIRE(y.data[j] == Catch::Approx(s).margin(1e-6));
        }
    }
}

TEST_CASE("mlp shape mismatch error names both shapes") {
    CounterRng rng(4, 0);
    MlpD p = MlpD::init({4, 2}, rng);
    TensorD x(3, 5);
    REQUIRE_THROWS_WITH(mlp_forward(p, x),
                        Catch::Matchers::ContainsSubstring("(3x5)") &&
                            Catch::Matchers::ContainsSubstring("(4x2)"));
}

TEST_CASE("linear model MSE gradient equals the closed form") {
    // y_hat = w.x + b on one sample: dL/dw_i = 2*(y_hat - y)*x_i / 1.
    MlpD p;
    TensorD w(3, 1);
    w.data = {0.5, -0.2, 0.1};
    p.weights.push_back(w);
    TensorD b(1, 1);
    b.data = {0.3};
    p.biases.push_back(b);
    TensorD x(1, 3);
    x.data = {1.0, 2.0, -1.0};
    TensorD y(1, 1);
    y.data = {2.0};
    auto res = loss_and_grad(p, x, y, LossKind::MeanSquaredError);
    double y_hat = 0.5 * 1 + (-0.2) * 2 + 0.1 * (-1) + 0.3;
    REQUIRE(res.loss == Catch::Approx((y_hat - 2.0) * (y_hat - 2.0)).margin(1e-12));
    for (int i = 0; i < 3; ++i)
        REQUIRE(res.grads.weights[0].data[i] ==
                Catch::Approx(2.0 * (y_hat - 2.0) * x.data[i]).margin(1e-12));
    REQUIRE(res.grads.biases[0].data[0] == Catch::Approx(2.0 * (y_hat - 2.0)).margin(1e-12));
}

TEST_CASE("mlp gradients match central finite differences") {
    CounterRng rng(5, 0);
    MlpD p = MlpD::init({4, 8, 3}, rng);
    TensorD x = random_tensor(6, 4, rng);
    TensorD t = random_tensor(6, 3, rng);
    auto res = loss_and_grad(p, x, t, LossKind::MeanSquaredError);

    // Probe ten scattered parameters against the f64 finite-difference oracle.
    struct Probe { std::size_t layer, idx; bool bias; };
    std::vector<Probe> probes{{0, 0, false},  {0, 7, false},  {0, 13, false}, {0, 31, false},
                              {1, 0, false},  {1, 11, false}, {1, 23, false}, {0, 3, true},
                              {1, 0, true},   {1, 2, true}};
    const double h = 1e-3;
    for (const auto& pr : probes) {
        MlpD mod = p;
        auto& slot = pr.bias ? mod.biases[pr.layer].data[pr.idx]
                             : mod.weights[pr.layer].data[pr.idx];
        double orig = slot;
        slot = orig + h;
        double up = loss_and_grad(mod, x, t, LossKind::MeanSquaredError).loss;
        slot = orig - h;
        double down = loss_and_grad(mod, x, t, LossKind::MeanSquaredError).loss;
        double fd = (up - down) / (2 * h);
        double got = pr.bias ? res.grads.biases[pr.layer].data[pr.idx]
                             : res.grads.weights[pr.layer].data[pr.idx];
        double denom = std::max({std::abs(fd), std::abs(got), 1e-8});
        REQUIRE(std::abs(fd - got) / denom < 1e-4);
    }
}

TEST_CASE("softmax cross-entropy gradients match finite differences") {
    CounterRng rng(6, 0);
    MlpD p = MlpD::init({3, 5, 2}, rng);
    TensorD x = random_tensor(4, 3, rng);
    TensorD labels(4, 1);
    labels.data = {0, 1, 1, 0};
    auto res = loss_and_grad(p, x, labels, LossKind::SoftmaxCrossEntropy);
    REQUIRE(res.loss > 0.0);
    const double h = 1e-4;
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t k = 0; k < std::min<std::size_t>(6, p.weights[l].size()); ++k) {
            MlpD mod = p;
            double orig = mod.weights[l].data[k];
            mod.weights[l].data[k] = orig + h;
            double up = loss_and_grad(mod, x, labels, LossKind::SoftmaxCrossEntropy).loss;
            mod.weights[l].data[k] = orig - h;
            double down = loss_and_grad(mod, x, labels, LossKind::SoftmaxCrossEntropy).loss;
            double fd = (up - down) / (2 * h);
            double got = res.grads.weights[l].data[k];
            REQUIRE(std::abs(fd - got) < 1e-6 + 1e-4 * std::abs(fd));
        }
}

TEST_CASE("duplicating the batch leaves mean-loss gradients unchanged") {
    CounterRng rng(7, 0);
    MlpD p = MlpD::init({3, 6, 2}, rng);
    TensorD x = random_tensor(5, 3, rng);
    TensorD t = random_tensor(5, 2, rng);
    TensorD x2(10, 3), t2(10, 2);
    for (int rep = 0; rep < 2; ++rep) {
        for (std::size_t i = 0; i < x.size(); ++i) x2.data[rep * x.size() + i] = x.data[i];
        for (std::size_t i = 0; i < t.size(); ++i) t2.data[rep * t.size() + i] = t.data[i];
    }
    auto r1 = loss_and_grad(p, x, t, LossKind::MeanSquaredError);
    auto r2 = loss_and_grad(p, x2, t2, LossKind::MeanSquaredError);
    REQUIRE(r1.loss == Catch::Approx(r2.loss).margin(1e-9));
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t k = 0; k < p.weights[l].size(); ++k)
            REQUIRE(r1.grads.weights[l].data[k] ==
                    Catch::Approx(r2.grads.weights[l].data[k]).margin(1e-7));
}

TEST_CASE("divergent loss raises an error") {
    MlpD p;
    TensorD w(1, 1);
    w.data = {std::numeric_limits<double>::infinity()};
    p.weights.push_back(w);
    p.biases.push_back(TensorD(1, 1));
    TensorD x(1, 1);
    x.data = {1.0};
    TensorD t(1, 1);
    REQUIRE_THROWS_WITH(loss_and_grad(p, x, t, LossKind::MeanSquaredError),
                        Catch::Matchers::ContainsSubstring("divergence detected"));
}

TEST_CASE("composite encoder-style graph passes the finite-difference oracle") {
    // concat -> mlp -> grouped maxpool -> repeat -> concat -> mlp -> mse:
    // the same op chain the point encoders use, at small sizes.
    CounterRng rng(8, 0);
    const std::size_t groups = 3, per_group = 4, rows = groups * per_group;
    std::vector<TensorD> leaves;
    leaves.push_back(random_tensor(rows, 3, rng));           // coords
    leaves.push_back(random_tensor(rows, 2, rng));           // extra channel
    leaves.push_back(random_tensor(5, 6, rng, 0.5));         // enc weight
    leaves.push_back(random_tensor(1, 6, rng, 0.1));         // enc bias
    leaves.push_back(random_tensor(6 + 5, 4, rng, 0.5));     // head weight
    leaves.push_back(random_tensor(1, 4, rng, 0.1));         // head bias
    leaves.push_back(random_tensor(4, 6, rng, 0.5));         // embedding table
    TensorD target = random_tensor(rows, 4, rng);
    std::vector<std::size_t> task_ids{2, 0, 1};

    auto build = [&](TapeD& tape, const std::vector<TensorD>& L,
                     std::vector<TapeD::Id>* leaf_ids) {
        std::vector<TapeD::Id> ids;
        for (const auto& t : L) ids.push_back(tape.leaf(t));
        if (leaf_ids) *leaf_ids = ids;
        auto feat = tape.concat_cols({ids[0], ids[1]});
        auto enc = tape.silu(tape.add_rowvec(tape.matmul(feat, ids[2]), ids[3]));
        auto pooled = tape.maxpool_groups(enc, per_group);
        auto task = tape.gather_rows(ids[6], task_ids);
        // gathered embedding feeds the first group-feature slot via add
        auto mixed = tape.add(pooled, tape.scale(task, 0.5));
        auto global = tape.repeat_groups(mixed, per_group);
        auto head_in = tape.concat_cols({global, ids[0], ids[1]});
        auto out = tape.add_rowvec(tape.matmul(head_in, ids[4]), ids[5]);
        return tape.mse_loss(out, target);
    };

    TapeD tape;
    std::vector<TapeD::Id> leaf_ids;
    auto loss_id = build(tape, leaves, &leaf_ids);
    tape.backward(loss_id);
    std::vector<TensorD> analytic;
    for (auto id : leaf_ids) analytic.push_back(tape.grad(id));

    auto eval = [&](const std::vector<TensorD>& L) {
        TapeD t2;
        return double(t2.value(build(t2, L, nullptr)).data[0]);
    };
    check_gradients(leaves, eval, analytic, 1e-4, 2e-4);
}

TEST_CASE("maxpool gradient goes to the first argmax on ties") {
    TapeD tape;
    TensorD x(4, 1);
    x.data = {1.0, 3.0, 3.0, 2.0};
    auto id = tape.leaf(x);
    auto pooled = tape.maxpool_groups(id, 4);
    REQUIRE(tape.value(pooled).data[0] == 3.0);
    auto loss = tape.mean_all(pooled);
    tape.backward(loss);
    REQUIRE(tape.grad(id).data[0] == 0.0);
    REQUIRE(tape.grad(id).data[1] == 1.0);  // lowest-index maximum wins
    REQUIRE(tape.grad(id).data[2] == 0.0);
    REQUIRE(tape.grad(id).data[3] == 0.0);
}

TEST_CASE("adamw leaves parameters unchanged with zero gradient and no decay") {
    TensorT<float> p(2, 2);
    p.data = {1.f, -2.f, 3.f, 0.5f};
    TensorT<float> g(2, 2);
    AdamWStateT<float> st;
    st.lr = 0.1;
    auto before = p.data;
    adamw_step<float>({&p}, {&g}, st);
    REQUIRE(p.data == before);
    REQUIRE(st.step_count == 1);
}

TEST_CASE("adamw first-step hand oracle") {
    // w=1, g=0.5, lr=0.1, wd=0: bias-corrected m_hat=0.5, v_hat=0.25,
    // update = 0.5/(0.5+1e-8) ~ 1, so w' ~ 0.9.
    TensorT<float> p(1, 1);
    p.data = {1.0f};
    TensorT<float> g(1, 1);
    g.data = {0.5f};
    AdamWStateT<float> st;
    st.lr = 0.1;
    adamw_step<float>({&p}, {&g}, st);
    REQUIRE(double(p.data[0]) == Catch::Approx(0.9).margin(1e-6));
}

TEST_CASE("adamw weight decay is decoupled from the gradient") {
    TensorT<float> p(1, 1);
    p.data = {2.0f};
    TensorT<float> g(1, 1);  // zero gradient
    AdamWStateT<float> st;
    st.lr = 0.1;
    st.weight_decay = 0.05;
    adamw_step<float>({&p}, {&g}, st);
    REQUIRE(double(p.data[0]) == Catch::Approx(2.0 * (1.0 - 0.1 * 0.05)).margin(1e-7));
}

TEST_CASE("time embedding basics") {
    auto e = time_embed<double>(0.0, 4);
    REQUIRE(e.data[0] == 0.0);
    REQUIRE(e.data[1] == 1.0);
    REQUIRE(e.data[2] == 0.0);
    REQUIRE(e.data[3] == 1.0);

    CounterRng rng(10, 0);
    for (int i = 0; i < 1000; ++i) {
        auto v = time_embed<double>(rng.uniform(), 8);
        for (double x : v.data) {
            REQUIRE(x >= -1.0);
            REQUIRE(x <= 1.0);
        }
    }

    auto a = time_embed<double>(0.0, 8);
    auto b = time_embed<double>(0.5, 8);
    auto c = time_embed<double>(1.0, 8);
    auto l2 = [](const TensorD& u, const TensorD& v) {
        double s = 0;
        for (std::size_t i = 0; i < u.size(); ++i) s += (u.data[i] - v.data[i]) * (u.data[i] - v.data[i]);
        return std::sqrt(s);
    };
    REQUIRE(l2(a, b) > 0.1);
    REQUIRE(l2(b, c) > 0.1);
    REQUIRE(l2(a, c) > 0.1);

    REQUIRE_THROWS_AS(time_embed<double>(0.5, 3), std::invalid_argument);
    REQUIRE_THROWS_AS(time_embed<double>(0.5, 0), std::invalid_argument);
}

TEST_CASE("crc32 matches the standard check vector") {
    const char* s = "123456789";
    REQUIRE(crc32(reinterpret_cast<const std::uint8_t*>(s), 9) == 0xCBF43926u);
    REQUIRE(crc32(nullptr, 0) == 0u);
}

TEST_CASE("checkpoint round trip preserves names, shapes and bytes") {
    CounterRng rng(11, 0);
    Tensor a(3, 4), b(1, 7);
    for (auto& v : a.data) v = float(rng.normal());
    for (auto& v : b.data) v = float(rng.normal());
    NamedTensorRefs refs{{"afg.enc.w0", &a}, {"actor1.head.b", &b}};
    auto bytes = serialize_checkpoint(refs);
    auto bytes2 = serialize_checkpoint(refs);
    REQUIRE(bytes == bytes2);  // byte-stable serialization

    auto loaded = parse_checkpoint(bytes);
    REQUIRE(loaded.size() == 2);
    REQUIRE(loaded[0].first == "afg.enc.w0");
    REQUIRE(loaded[0].second.rows == 3);
    REQUIRE(loaded[0].second.cols == 4);
    REQUIRE(loaded[0].second.data == a.data);
    REQUIRE(loaded[1].first == "actor1.head.b");
    REQUIRE(loaded[1].second.data == b.data);

    auto tmp = std::filesystem::temp_directory_path() / "dap_ckpt_test.bin";
    save_checkpoint(tmp.string(), refs);
    auto from_disk = load_checkpoint(tmp.string());
    REQUIRE(from_disk.size() == 2);
    REQUIRE(from_disk[1].second.data == b.data);
    std::filesystem::remove(tmp);
}

TEST_CASE("checkpoint corruption and format errors are detected") {
    Tensor a(2, 2);
    a.data = {1.f, 2.f, 3.f, 4.f};
    auto bytes = serialize_checkpoint({{"w", &a}});

    auto corrupted = bytes;
    corrupted[10] ^= 0xFF;
    REQUIRE_THROWS_WITH(parse_checkpoint(corrupted),
                        Catch::Matchers::ContainsSubstring("CRC"));

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    // CRC is over the whole prefix, so a magic flip fails CRC first; patch it.
    std::uint32_t crc = crc32(bad_magic.data(), bad_magic.size() - 4);
    for (int i = 0; i < 4; ++i)
        bad_magic[bad_magic.size() - 4 + i] = std::uint8_t((crc >> (8 * i)) & 0xFF);
    REQUIRE_THROWS_WITH(parse_checkpoint(bad_magic),
                        Catch::Matchers::ContainsSubstring("magic"));

    std::vector<std::uint8_t> tiny{1, 2, 3};
    REQUIRE_THROWS_WITH(parse_checkpoint(tiny),
                        Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("restore_params enforces name and shape agreement") {
    Tensor a(2, 3);
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] = float(i);
    auto loaded = parse_checkpoint(serialize_checkpoint({{"m.w", &a}}));

    Tensor dst(2, 3);
    restore_params(loaded, {{"m.w", &dst}});
    REQUIRE(dst.data == a.data);

    Tensor wrong(3, 2);
    REQUIRE_THROWS_WITH(restore_params(loaded, {{"m.w", &wrong}}),
                        Catch::Matchers::ContainsSubstring("shape mismatch"));
    REQUIRE_THROWS_WITH(restore_params(loaded, {{"missing", &dst}}),
                        Catch::Matchers::ContainsSubstring("missing"));
}

TEST_CASE("training a small mlp on a fixed mapping is deterministic and converges") {
    auto run = [](uint64_t seed) {
        CounterRng rng(seed, 0);
        MlpParams p = MlpParams::init({2, 16, 1}, rng);
        AdamWState st;
        st.lr = 0.01;
        CounterRng data_rng(seed, 1);
        Tensor x(32, 2), y(32, 1);
        for (int i = 0; i < 32; ++i) {
            double a = data_rng.uniform(-1, 1), b = data_rng.uniform(-1, 1);
            x.at(i, 0) = float(a);
            x.at(i, 1) = float(b);
            y.at(i, 0) = float(a * b);  // target: product
        }
        double first = 0, last = 0;
        for (int step = 0; step < 400; ++step) {
            auto res = loss_and_grad(p, x, y, LossKind::MeanSquaredError);
            if (step == 0) first = res.loss;
            last = res.loss;
            std::vector<Tensor*> params;
            std::vector<const Tensor*> grads;
            for (std::size_t l = 0; l < p.weights.size(); ++l) {
                params.push_back(&p.weights[l]);
                grads.push_back(&res.grads.weights[l]);
                params.push_back(&p.biases[l]);
                grads.push_back(&res.grads.biases[l]);
            }
            adamw_step(params, grads, st);
        }
        std::vector<std::pair<std::string, const Tensor*>> refs;
        refs.emplace_back("w0", &p.weights[0]);
        refs.emplace_back("b0", &p.biases[0]);
        refs.emplace_back("w1", &p.weights[1]);
        refs.emplace_back("b1", &p.biases[1]);
        return std::make_pair(std::make_pair(first, last), serialize_checkpoint(refs));
    };
    auto [losses1, bytes1] = run(99);
    auto [losses2, bytes2] = run(99);
    REQUIRE(losses1.second < 0.05 * losses1.first);  // actually learns
    REQUIRE(bytes1 == bytes2);                       // bitwise deterministic
}
