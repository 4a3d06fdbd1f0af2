#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "xsep/arch.hpp"
#include "xsep/optim.hpp"

using namespace xsep;

namespace {

OptimConfig imagenet_config() {
    OptimConfig c;
    c.kind = OptimKind::Sgd;
    c.momentum = 0.9;
    c.lr0 = 0.045;
    c.schedule = ScheduleKind::StepEveryEpochs;
    c.decay_factor = 0.94;
    c.decay_every = 2;
    return c;
}

OptimConfig jft_config() {
    OptimConfig c;
    c.kind = OptimKind::Rmsprop;
    c.momentum = 0.9;
    c.lr0 = 0.001;
    c.schedule = ScheduleKind::StepEverySamples;
    c.decay_factor = 0.9;
    c.decay_every = 3000000;
    return c;
}

Tensor4<double> scalar(double v) {
    Tensor4<double> t(1, 1, 1, 1);
    t[0] = v;
    return t;
}

}  // namespace

TEST_CASE("learning-rate schedule fixtures") {
    const OptimConfig imagenet = imagenet_config();
    CHECK(lr_at(imagenet, 0, 0) == 0.045);
    CHECK(lr_at(imagenet, 1, 500000) == 0.045);
    CHECK(lr_at(imagenet, 4, 0) == doctest::Approx(0.045 * 0.94 * 0.94).epsilon(1e-15));
    CHECK(lr_at(imagenet, 4, 0) == doctest::Approx(0.039762).epsilon(1e-9));

    const OptimConfig jft = jft_config();
    CHECK(lr_at(jft, 0, 0) == 0.001);
    CHECK(lr_at(jft, 100, 6000000) == doctest::Approx(0.001 * 0.9 * 0.9).epsilon(1e-15));
    CHECK(lr_at(jft, 100, 6000000) == doctest::Approx(0.00081).epsilon(1e-12));
}

TEST_CASE("schedule is pure and non-increasing") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        OptimConfig c = imagenet_config();
        c.lr0 = rng.uniform(1e-4, 1.0);
        c.decay_factor = rng.uniform(0.5, 1.0);
        c.decay_every = 1 + rng.next_below(5);
        double previous = c.lr0;
        for (std::uint64_t epoch = 0; epoch < 30; ++epoch) {
            const double lr = lr_at(c, epoch, 0);
            CHECK(lr == lr_at(c, epoch, 0));
            CHECK(lr <= previous + 1e-18);
            previous = lr;
        }
    }
}

TEST_CASE("sgd momentum single-step fixtures") {
    auto w = scalar(1.0), g = scalar(0.0), v = scalar(0.0);
    sgd_momentum_step(w, g, v, 0.1, 0.9, 0.0);
    CHECK(w[0] == 1.0);
    CHECK(v[0] == 0.0);

    w = scalar(1.0);
    g = scalar(0.5);
    v = scalar(0.0);
    sgd_momentum_step(w, g, v, 0.1, 0.9, 0.0);
    CHECK(v[0] == doctest::Approx(-0.05).epsilon(1e-15));
    CHECK(w[0] == doctest::Approx(0.95).epsilon(1e-15));

    // Decay-only step: w = 1 - 0.1 * 1e-5.
    w = scalar(1.0);
    g = scalar(0.0);
    v = scalar(0.0);
    sgd_momentum_step(w, g, v, 0.1, 0.9, 1e-5);
    CHECK(w[0] == doctest::Approx(0.999999).epsilon(1e-12));
}

TEST_CASE("rmsprop single-step and two-step fixtures") {
    auto w = scalar(1.0), g = scalar(0.0), v = scalar(0.0), s = scalar(0.0);
    rmsprop_step(w, g, v, s, 0.001, 0.0, 0.9, 1e-7, 0.0);
    CHECK(w[0] == 1.0);
    CHECK(s[0] == 0.0);

    w = scalar(1.0);
    g = scalar(1.0);
    v = scalar(0.0);
    s = scalar(0.0);
    rmsprop_step(w, g, v, s, 0.001, 0.0, 0.9, 1e-7, 0.0);
    CHECK(s[0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(w[0] == doctest::Approx(1.0 - 0.001 / std::sqrt(0.1 + 1e-7)).epsilon(1e-12));

    // Two steps with constant gradient against a hand-rolled recurrence.
    w = scalar(2.0);
    v = scalar(0.0);
    s = scalar(0.0);
    double ew = 2.0, ev = 0.0, es = 0.0;
    for (int step = 0; step < 2; ++step) {
        rmsprop_step(w, g, v, s, 0.01, 0.9, 0.9, 1e-7, 0.0);
        es = 0.9 * es + 0.1 * 1.0;
        ev = 0.9 * ev - 0.01 * 1.0 / std::sqrt(es + 1e-7);
        ew += ev;
    }
    CHECK(w[0] == doctest::Approx(ew).epsilon(1e-12));
    CHECK(s[0] == doctest::Approx(es).epsilon(1e-12));
}

TEST_CASE("polyak averaging fixtures") {
    auto shadow = scalar(0.0);
    const auto param = scalar(1.0);
    polyak_update(shadow, param, 0.9);
    polyak_update(shadow, param, 0.9);
    CHECK(shadow[0] == doctest::Approx(0.19).epsilon(1e-12));

    // Shadow initialized to the parameters stays put without updates.
    auto p2 = scalar(0.7);
    auto s2 = p2;
    polyak_update(s2, p2, 0.5);
    CHECK(s2[0] == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("polyak shadow converges geometrically to frozen parameters") {
    auto shadow = scalar(0.0);
    const auto param = scalar(1.0);
    double gap = 1.0;
    for (int step = 0; step < 20; ++step) {
        polyak_update(shadow, param, 0.999);
        const double new_gap = std::abs(shadow[0] - param[0]);
        CHECK(new_gap == doctest::Approx(gap * 0.999).epsilon(1e-9));
        gap = new_gap;
    }
}

TEST_CASE("a zero learning-rate step from fresh state changes nothing") {
    Rng rng(42);
    for (OptimKind kind : {OptimKind::Sgd, OptimKind::Rmsprop}) {
        OptimConfig config = kind == OptimKind::Sgd ? imagenet_config() : jft_config();
        config.weight_decay = rng.uniform(0.0, 0.1);
        config.polyak = false;

        ArchSpec spec = build_sepconv_vgg({8}, Shape3{3, 12, 12}, 4);
        Model<float> model(spec, 7);
        OptimState<float> state = OptimState<float>::init(config, model.params());
        std::vector<float> before;
        for (auto& p : model.params()) {
            if (!p.trainable) continue;
            for (std::size_t k = 0; k < p.grad->size(); ++k)
                (*p.grad)[k] = static_cast<float>(rng.uniform(-1.0, 1.0));
            before.insert(before.end(), p.value->data(), p.value->data() + p.value->size());
        }
        optimizer_step(config, model.params(), state, 0.0);
        std::size_t offset = 0;
        for (auto& p : model.params()) {
            if (!p.trainable) continue;
            for (std::size_t k = 0; k < p.value->size(); ++k)
                CHECK((*p.value)[k] == before[offset + k]);
            offset += p.value->size();
        }
    }
}

TEST_CASE("optimizer state mirrors parameter shapes") {
    const ArchSpec spec = build_xception(toy_xception_options());
    Model<float> model(spec, 11);
    for (OptimKind kind : {OptimKind::Sgd, OptimKind::Rmsprop}) {
        OptimConfig config;
        config.kind = kind;
        config.polyak = true;
        OptimState<float> state = OptimState<float>::init(config, model.params());
        std::size_t slot = 0;
        for (const auto& p : model.params()) {
            if (!p.trainable) continue;
            CHECK(state.velocity[slot].dims() == p.value->dims());
            if (kind == OptimKind::Rmsprop)
                CHECK(state.mean_square[slot].dims() == p.value->dims());
            CHECK(state.polyak_shadow[slot].dims() == p.value->dims());
            ++slot;
        }
        CHECK(state.velocity.size() == slot);
    }
}

TEST_CASE("polyak swap guard restores training weights") {
    const ArchSpec spec = build_sepconv_vgg({6}, Shape3{3, 10, 10}, 3);
    Model<float> model(spec, 13);
    OptimConfig config;
    config.polyak = true;
    OptimState<float> state = OptimState<float>::init(config, model.params());
    for (auto& shadow : state.polyak_shadow) shadow.fill(42.0f);

    const float live_value = (*model.params()[0].value)[0];
    {
        PolyakSwapGuard<float> guard(model.params(), state, true);
        CHECK((*model.params()[0].value)[0] == 42.0f);
    }
    CHECK((*model.params()[0].value)[0] == live_value);

    // Disabled polyak evaluates on live weights.
    {
        PolyakSwapGuard<float> guard(model.params(), state, false);
        CHECK((*model.params()[0].value)[0] == live_value);
    }
}

TEST_CASE("config validation rejects bad hyperparameters") {
    OptimConfig c = imagenet_config();
    c.lr0 = -1.0;
    CHECK_THROWS_AS(c.check(), ConfigError);
    c = imagenet_config();
    c.momentum = 1.0;
    CHECK_THROWS_AS(c.check(), ConfigError);
    c = imagenet_config();
    c.decay_factor = 0.0;
    CHECK_THROWS_AS(c.check(), ConfigError);
    c = imagenet_config();
    c.polyak = true;
    c.polyak_decay = 1.0;
    CHECK_THROWS_AS(c.check(), ConfigError);
}
