#include <catch2/catch_amalgamated.hpp>

#include <bit>

#include "helpers.hpp"

using namespace sparsekit;
using Catch::Approx;

namespace {

double loss_at(const NetworkSpec& net, const ParamState& params, const Mask& mask, const Batch& batch) {
    return forward_loss(net, params, mask, batch).loss;
}

void zero_weights(ParamState& params) {
    for (auto& lp : params.layers) {
        std::fill(lp.weights.data.begin(), lp.weights.data.end(), 0.0);
        std::fill(lp.bias.begin(), lp.bias.end(), 0.0);
    }
}

bool bitwise_zero(double v) { return std::bit_cast<std::uint64_t>(v) == 0; }

} // namespace

TEST_CASE("initialization is deterministic and fan-in scaled", "[engine]") {
    const NetworkSpec net = testutil::grad_check_net();
    const ParamState a = init_params(net, 7);
    const ParamState b = init_params(net, 7);
    REQUIRE(a == b);
    const ParamState c = init_params(net, 8);
    REQUIRE(a.layers != c.layers);

    for (const auto& lp : a.layers)
        for (double bias : lp.bias) REQUIRE(bias == 0.0);

    // fc 100->100: weight variance should sit near 2/100.
    const NetworkSpec wide = parse_network("input 100\nclasses 100\nfc 100->100\n");
    double sum = 0.0, sumsq = 0.0;
    std::size_t n = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const ParamState p = init_params(wide, seed);
        for (double w : p.layers[0].weights.data) {
            sum += w;
            sumsq += w * w;
            ++n;
        }
    }
    const double mean = sum / static_cast<double>(n);
    const double var = sumsq / static_cast<double>(n) - mean * mean;
    CHECK(std::abs(mean) < 0.005);
    CHECK(var == Approx(0.02).epsilon(0.1));
}

TEST_CASE("all-zero weights give the uniform-softmax loss", "[engine]") {
    const NetworkSpec net = testutil::small_convnet();
    ParamState params = init_params(net, 1);
    zero_weights(params);
    const Mask ones = all_ones_mask(net);
    const Batch batch = testutil::random_batch(net, 30, 3);
    const LossResult res = forward_loss(net, params, ones, batch);
    CHECK(res.loss == Approx(std::log(10.0)).margin(1e-12));
    for (double z : res.logits.data) CHECK(z == 0.0);
}

TEST_CASE("masking weights equals pre-zeroing them", "[engine]") {
    const NetworkSpec net = testutil::grad_check_net();
    ParamState params = init_params(net, 3);
    const Mask mask = sample_mask(plan_erk(net, 0.4), net, 9, MaskMode::exact);
    const Batch batch = testutil::random_batch(net, 6, 4);

    ParamState zeroed = params;
    apply_mask(zeroed, mask);
    const Mask ones = all_ones_mask(net);
    REQUIRE(loss_at(net, params, mask, batch) == loss_at(net, zeroed, ones, batch));
}

TEST_CASE("cross-entropy agrees with a direct recomputation", "[engine]") {
    const NetworkSpec net = testutil::grad_check_net();
    const ParamState params = init_params(net, 5);
    const Mask ones = all_ones_mask(net);
    const Batch batch = testutil::random_batch(net, 7, 8);
    const LossResult res = forward_loss(net, params, ones, batch);

    const std::size_t C = 3, N = batch.size();
    double direct = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        double denom = 0.0;
        for (std::size_t c = 0; c < C; ++c) denom += std::exp(res.logits.data[i * C + c]);
        const double p = std::exp(res.logits.data[i * C + static_cast<std::size_t>(batch.labels[i])]) / denom;
        direct -= std::log(p);
    }
    direct /= static_cast<double>(N);
    CHECK(res.loss == Approx(direct).margin(1e-12));
}

TEST_CASE("weight and bias gradients match central differences", "[engine][oracle]") {
    const NetworkSpec net = testutil::grad_check_net();
    const Batch batch = testutil::random_batch(net, 5, 21);
    const double h = 1e-4;

    const auto check_against_fd = [&](const Mask& mask, std::uint64_t init_seed) {
        ParamState params = init_params(net, init_seed);
        apply_mask(params, mask);
        ParamState with_grads = params;
        backward(net, with_grads, mask, batch);

        for (std::size_t li = 0; li < net.layers.size(); ++li) {
            for (std::size_t i = 0; i < params.layers[li].weights.data.size(); ++i) {
                ParamState p = params;
                p.layers[li].weights.data[i] += h;
                const double fp = loss_at(net, p, mask, batch);
                p.layers[li].weights.data[i] -= 2 * h;
                const double fm = loss_at(net, p, mask, batch);
                const double fd = (fp - fm) / (2 * h);
                const double an = with_grads.layers[li].grad.data[i];
                if (!mask.layers[li].bits[i]) {
                    REQUIRE(an == 0.0);
                    REQUIRE(fd == 0.0);
                    continue;
                }
                REQUIRE(std::abs(fd - an) <= 1e-4 * std::max({std::abs(fd), std::abs(an), 1e-6}));
            }
            for (std::size_t i = 0; i < params.layers[li].bias.size(); ++i) {
                ParamState p = params;
                p.layers[li].bias[i] += h;
                const double fp = loss_at(net, p, mask, batch);
                p.layers[li].bias[i] -= 2 * h;
                const double fm = loss_at(net, p, mask, batch);
                const double fd = (fp - fm) / (2 * h);
                const double an = with_grads.layers[li].bias_grad[i];
                REQUIRE(std::abs(fd - an) <= 1e-4 * std::max({std::abs(fd), std::abs(an), 1e-6}));
            }
        }
    };

    check_against_fd(all_ones_mask(net), 11);
    check_against_fd(sample_mask(plan_erk(net, 0.4), net, 2, MaskMode::exact), 12);
}

TEST_CASE("input gradients match central differences", "[engine][oracle]") {
    const NetworkSpec net = testutil::grad_check_net();
    ParamState params = init_params(net, 13);
    const Mask mask = sample_mask(plan_erk(net, 0.3), net, 6, MaskMode::exact);
    apply_mask(params, mask);
    // Seed picked clear of relu kinks: a pre-activation within the probe
    // step of zero makes central differences straddle two linear pieces.
    Batch batch = testutil::random_batch(net, 3, 32);

    const Tensor g = input_gradient(net, params, mask, batch);
    REQUIRE(g.shape == batch.inputs.shape);
    double strongest = 0.0;
    for (double v : g.data) strongest = std::max(strongest, std::abs(v));
    REQUIRE(strongest > 1e-3); // a dead network would pass vacuously

    const double h = 1e-4;
    for (std::size_t i = 0; i < batch.inputs.data.size(); ++i) {
        Batch b = batch;
        b.inputs.data[i] += h;
        const double fp = loss_at(net, params, mask, b);
        b.inputs.data[i] -= 2 * h;
        const double fm = loss_at(net, params, mask, b);
        const double fd = (fp - fm) / (2 * h);
        REQUIRE(std::abs(fd - g.data[i]) <= 1e-4 * std::max({std::abs(fd), std::abs(g.data[i]), 1e-6}));
    }
}

TEST_CASE("zero-weight networks have zero input gradient", "[engine]") {
    const NetworkSpec net = testutil::small_convnet();
    ParamState params = init_params(net, 1);
    zero_weights(params);
    const Batch batch = testutil::random_batch(net, 4, 2);
    const Tensor g = input_gradient(net, params, all_ones_mask(net), batch);
    for (double v : g.data) CHECK(v == 0.0);
}

TEST_CASE("learning-rate schedule decays at each milestone", "[engine]") {
    TrainConfig cfg;
    cfg.epochs = 160;
    cfg.learning_rate = 0.1;
    cfg.lr_decay_factor = 10.0;
    cfg.decay_milestone_epochs = {80, 120};
    validate_config(cfg);

    CHECK(lr_at(cfg, 0) == 0.1);
    CHECK(lr_at(cfg, 79) == 0.1);
    CHECK(lr_at(cfg, 80) == 0.1 / 10.0);
    CHECK(lr_at(cfg, 100) == 0.1 / 10.0);
    CHECK(lr_at(cfg, 120) == 0.1 / 10.0 / 10.0);
    CHECK(lr_at(cfg, 130) == 0.1 / 10.0 / 10.0);
    CHECK(lr_at(cfg, 100) == Approx(0.01).margin(1e-15));
    CHECK(lr_at(cfg, 130) == Approx(0.001).margin(1e-15));
}

TEST_CASE("train config rejects out-of-range fields", "[engine]") {
    const auto broken = [](auto&& edit) {
        TrainConfig cfg;
        edit(cfg);
        return cfg;
    };
    CHECK_THROWS_AS(validate_config(broken([](TrainConfig& c) { c.epochs = 0; })), ValidationError);
    CHECK_THROWS_AS(validate_config(broken([](TrainConfig& c) { c.batch_size = 0; })), ValidationError);
    CHECK_THROWS_AS(validate_config(broken([](TrainConfig& c) { c.learning_rate = 0.0; })), ValidationError);
    CHECK_THROWS_AS(validate_config(broken([](TrainConfig& c) { c.momentum = 1.0; })), ValidationError);
    CHECK_THROWS_AS(validate_config(broken([](TrainConfig& c) { c.lr_decay_factor = 0.5; })), ValidationError);
    CHECK_THROWS_AS(validate_config(broken([](TrainConfig& c) { c.weight_decay = -1.0; })), ValidationError);
    CHECK_THROWS_AS(validate_config(broken([](TrainConfig& c) { c.decay_milestone_epochs = {40}; })),
                    ValidationError);
    CHECK_THROWS_AS(validate_config(broken([](TrainConfig& c) { c.decay_milestone_epochs = {30, 20}; })),
                    ValidationError);
    CHECK_NOTHROW(validate_config(TrainConfig{}));
}

TEST_CASE("a single sgd step matches the closed form", "[engine]") {
    const NetworkSpec net = parse_network("input 4\nclasses 3\nfc 4->3\n");
    ParamState params = init_params(net, 17);
    const Mask ones = all_ones_mask(net);
    const std::vector<double> w0 = params.layers[0].weights.data;

    SplitMix64 rng(5);
    for (double& g : params.layers[0].grad.data) g = rng.next_normal();
    const std::vector<double> g0 = params.layers[0].grad.data;

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    cfg.learning_rate = 0.1;
    cfg.decay_milestone_epochs = {};
    sgd_step(params, ones, cfg, 0);

    for (std::size_t i = 0; i < w0.size(); ++i)
        REQUIRE(params.layers[0].weights.data[i] == w0[i] - 0.1 * g0[i]);
    // Zero gradients and zero weight decay leave params untouched.
    std::fill(params.layers[0].grad.data.begin(), params.layers[0].grad.data.end(), 0.0);
    std::fill(params.layers[0].momentum.data.begin(), params.layers[0].momentum.data.end(), 0.0);
    const std::vector<double> w1 = params.layers[0].weights.data;
    sgd_step(params, ones, cfg, 0);
    REQUIRE(params.layers[0].weights.data == w1);
}

TEST_CASE("momentum and weight decay follow the update rule over steps", "[engine]") {
    const NetworkSpec net = parse_network("input 4\nclasses 3\nfc 4->3\n");
    ParamState params = init_params(net, 23);
    const Mask ones = all_ones_mask(net);

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.momentum = 0.9;
    cfg.weight_decay = 5e-4;
    cfg.learning_rate = 0.05;
    cfg.decay_milestone_epochs = {1};

    std::vector<double> w = params.layers[0].weights.data;
    std::vector<double> m(w.size(), 0.0);
    SplitMix64 rng(77);
    for (int step = 0; step < 3; ++step) {
        const int epoch = step < 2 ? 0 : 1;
        for (double& g : params.layers[0].grad.data) g = rng.next_normal();
        const std::vector<double> g0 = params.layers[0].grad.data;
        sgd_step(params, ones, cfg, epoch);
        const double lr = epoch >= 1 ? cfg.learning_rate / cfg.lr_decay_factor : cfg.learning_rate;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = g0[i] + cfg.weight_decay * w[i];
            m[i] = cfg.momentum * m[i] + g;
            w[i] -= lr * m[i];
            REQUIRE(params.layers[0].weights.data[i] == w[i]);
            REQUIRE(params.layers[0].momentum.data[i] == m[i]);
        }
    }
}

TEST_CASE("masked weights and momentum stay bitwise zero through training", "[engine]") {
    const NetworkSpec net = testutil::two_fc_net();
    const Mask mask = sample_mask(plan_er(net, 0.6), net, 4, MaskMode::exact);
    ParamState params = init_params(net, 6);
    apply_mask(params, mask);

    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.decay_milestone_epochs = {5};
    const Batch batch = testutil::random_batch(net, 16, 51);
    for (int step = 0; step < 120; ++step) {
        backward(net, params, mask, batch);
        sgd_step(params, mask, cfg, step / 12);
    }
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const auto& lp = params.layers[li];
        for (std::size_t i = 0; i < lp.weights.data.size(); ++i) {
            if (mask.layers[li].bits[i]) continue;
            REQUIRE(bitwise_zero(lp.weights.data[i]));
            REQUIRE(bitwise_zero(lp.momentum.data[i]));
            REQUIRE(bitwise_zero(lp.grad.data[i]));
        }
    }
}

TEST_CASE("masked training equals training the shrunken network", "[engine]") {
    // Kill hidden unit 4 of fc1 (its row, and the matching fc2 column);
    // training must then match the 4-hidden-unit network built from the
    // surviving weights, step for step.
    const NetworkSpec big = parse_network("input 6\nclasses 3\nfc1: fc 6->5\nfc2: fc 5->3\n");
    const NetworkSpec small = parse_network("input 6\nclasses 3\nfc1: fc 6->4\nfc2: fc 4->3\n");

    ParamState pb = init_params(big, 31);
    Mask mask = all_ones_mask(big);
    for (std::size_t j = 0; j < 6; ++j) mask.layers[0].bits[4 * 6 + j] = 0;
    for (std::size_t a = 0; a < 3; ++a) mask.layers[1].bits[a * 5 + 4] = 0;
    apply_mask(pb, mask);

    ParamState ps = init_params(small, 0);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 6; ++j) ps.layers[0].weights.data[r * 6 + j] = pb.layers[0].weights.data[r * 6 + j];
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t j = 0; j < 4; ++j) ps.layers[1].weights.data[a * 4 + j] = pb.layers[1].weights.data[a * 5 + j];
    const Mask ones_small = all_ones_mask(small);

    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.decay_milestone_epochs = {2};
    const NetworkSpec* nets[2] = {&big, &small};
    ParamState* states[2] = {&pb, &ps};
    const Mask* masks[2] = {&mask, &ones_small};

    SplitMix64 data_rng(99);
    for (int step = 0; step < 40; ++step) {
        Batch batch = testutil::random_batch(big, 8, data_rng.next_u64());
        double losses[2];
        for (int k = 0; k < 2; ++k) {
            losses[k] = backward(*nets[k], *states[k], *masks[k], batch);
            sgd_step(*states[k], *masks[k], cfg, step / 10);
        }
        REQUIRE(std::abs(losses[0] - losses[1]) <= 1e-10);
    }
}

TEST_CASE("training is bit-reproducible", "[engine]") {
    const NetworkSpec net = testutil::two_fc_net();
    const Mask mask = sample_mask(plan_erk(net, 0.5), net, 8, MaskMode::exact);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.decay_milestone_epochs = {1};

    const auto run = [&] {
        ParamState p = init_params(net, 14);
        apply_mask(p, mask);
        std::vector<double> losses;
        for (int step = 0; step < 25; ++step) {
            const Batch batch = testutil::random_batch(net, 8, static_cast<std::uint64_t>(step));
            losses.push_back(backward(net, p, mask, batch));
            sgd_step(p, mask, cfg, step / 13);
        }
        return std::pair{p, losses};
    };
    const auto [p1, l1] = run();
    const auto [p2, l2] = run();
    REQUIRE(p1 == p2);
    REQUIRE(l1 == l2);
}

TEST_CASE("hvp returns zero for a zero direction", "[engine]") {
    const NetworkSpec net = testutil::grad_check_net();
    ParamState params = init_params(net, 2);
    const Mask ones = all_ones_mask(net);
    const Batch batch = testutil::random_batch(net, 4, 5);
    const std::vector<double> v(flatten_weights(params).size(), 0.0);
    const std::vector<double> hv = hvp(net, params, ones, batch, v);
    for (double x : hv) CHECK(x == 0.0);
}

TEST_CASE("hvp matches the analytic softmax Hessian", "[engine][oracle]") {
    const NetworkSpec net = parse_network("input 6\nclasses 4\nfc 6->4\n");
    ParamState params = init_params(net, 19);
    const Mask ones = all_ones_mask(net);
    const Batch batch = testutil::random_batch(net, 12, 44);

    SplitMix64 rng(3);
    std::vector<double> v(24);
    for (double& x : v) x = rng.next_normal();

    ParamState before = params;
    const std::vector<double> fd = hvp(net, params, ones, batch, v);
    REQUIRE(params == before); // weights and grads restored

    const std::vector<double> exact = testutil::analytic_hv_single_fc(net, params, batch, v);
    REQUIRE(fd.size() == exact.size());
    double diff2 = 0.0, ref2 = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
        diff2 += (fd[i] - exact[i]) * (fd[i] - exact[i]);
        ref2 += exact[i] * exact[i];
    }
    REQUIRE(ref2 > 0.0);
    REQUIRE(std::sqrt(diff2) <= 1e-5 * std::sqrt(ref2));
}

TEST_CASE("hvp is symmetric as a bilinear form", "[engine][oracle]") {
    const NetworkSpec net = testutil::grad_check_net();
    ParamState params = init_params(net, 29);
    const Mask ones = all_ones_mask(net);
    const Batch batch = testutil::random_batch(net, 6, 61);

    const std::size_t n = flatten_weights(params).size();
    SplitMix64 rng(9);
    std::vector<double> u(n), v(n);
    for (double& x : u) x = rng.next_normal();
    for (double& x : v) x = rng.next_normal();

    const std::vector<double> hu = hvp(net, params, ones, batch, u);
    const std::vector<double> hv = hvp(net, params, ones, batch, v);
    double uhv = 0.0, vhu = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        uhv += u[i] * hv[i];
        vhu += v[i] * hu[i];
    }
    REQUIRE(std::abs(uhv - vhu) <= 1e-4 * std::max({std::abs(uhv), std::abs(vhu), 1e-6}));
}

TEST_CASE("batches are validated before any compute", "[engine]") {
    const NetworkSpec net = testutil::small_convnet();
    const ParamState params = init_params(net, 1);
    const Mask ones = all_ones_mask(net);

    Batch empty;
    empty.inputs.shape = {0, 36};
    CHECK_THROWS_AS(forward_loss(net, params, ones, empty), ValidationError);

    Batch bad_shape = testutil::random_batch(net, 3, 1);
    bad_shape.inputs.shape = {3, 35};
    bad_shape.inputs.data.resize(3 * 35);
    CHECK_THROWS_AS(forward_loss(net, params, ones, bad_shape), ValidationError);

    Batch bad_label = testutil::random_batch(net, 3, 1);
    bad_label.labels[2] = 10;
    try {
        forward_loss(net, params, ones, bad_label);
        FAIL("expected a label range error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("sample 2") != std::string::npos);
    }
}
