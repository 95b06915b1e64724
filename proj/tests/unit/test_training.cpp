#include <cmath>
#include <vector>

#include "cgce/errors.hpp"
#include "cgce/synthetic.hpp"
#include "cgce/training.hpp"
#include "doctest.h"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace cgce;
using namespace cgce::testing;

TEST_CASE("bce_loss") {
    CHECK(bce_loss(0.5, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(bce_loss(0.5, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(bce_loss(0.9, 1) == doctest::Approx(-std::log(0.9)).epsilon(1e-15));
    CHECK(bce_loss(0.9, 0) == doctest::Approx(-std::log(0.1)).epsilon(1e-13));
    // Saturated predictions are clamped.
    CHECK(std::isfinite(bce_loss(0.0, 1)));
    CHECK(std::isfinite(bce_loss(1.0, 0)));
    CHECK(bce_loss(0.0, 1) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("adam: first step on a unit gradient moves by -lr") {
    Matrix x(1, 1, {0.25});
    const Matrix g(1, 1, {1.0});
    Matrix* params[] = {&x};
    const Matrix* grads[] = {&g};
    const Matrix* cparams[] = {&x};
    AdamState state = make_adam_state(cparams);
    adam_step(params, grads, state, TrainConfig{});
    CHECK(x(0, 0) - 0.25 == doctest::Approx(-1e-4).epsilon(1e-6));
    CHECK(state.step == 1);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Rng rng(20);
    Matrix x = random_matrix(3, 4, rng);
    const Matrix before = x;
    const Matrix g(3, 4);
    Matrix* params[] = {&x};
    const Matrix* grads[] = {&g};
    const Matrix* cparams[] = {&x};
    AdamState state = make_adam_state(cparams);
    for (int i = 0; i < 3; ++i) adam_step(params, grads, state, TrainConfig{});
    CHECK(x == before);
}

TEST_CASE("adam: trajectory matches the reference implementation") {
    Rng rng(21);
    TrainConfig config;
    config.learning_rate = 1e-2;
    Matrix a = random_matrix(2, 3, rng);
    Matrix b = random_matrix(1, 4, rng);
    std::vector<double> flat(a.values().begin(), a.values().end());
    flat.insert(flat.end(), b.values().begin(), b.values().end());
    ReferenceAdam ref(flat.size(), config.learning_rate);

    Matrix* params[] = {&a, &b};
    const Matrix* cparams[] = {&a, &b};
    AdamState state = make_adam_state(cparams);
    for (int step = 0; step < 3; ++step) {
        const Matrix ga = random_matrix(2, 3, rng, 2.0);
        const Matrix gb = random_matrix(1, 4, rng, 2.0);
        const Matrix* grads[] = {&ga, &gb};
        adam_step(params, grads, state, config);
        std::vector<double> gflat(ga.values().begin(), ga.values().end());
        gflat.insert(gflat.end(), gb.values().begin(), gb.values().end());
        ref.step(flat, gflat);
    }
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.values()[i] - flat[i]) <= 1e-12);
    for (std::size_t i = 0; i < b.size(); ++i) CHECK(std::abs(b.values()[i] - flat[a.size() + i]) <= 1e-12);
}

TEST_CASE("adam: mismatched gradient shapes are rejected") {
    Matrix x(2, 2);
    const Matrix g(2, 3);
    Matrix* params[] = {&x};
    const Matrix* grads[] = {&g};
    const Matrix* cparams[] = {&x};
    AdamState state = make_adam_state(cparams);
    CHECK_THROWS_AS(adam_step(params, grads, state, TrainConfig{}), ShapeError);
}

TEST_CASE("train: default recipe") {
    const TrainConfig config;
    CHECK(config.epochs == 10);
    CHECK(config.learning_rate == 1e-4);
    CHECK(config.batch_size == 32);
    CHECK(config.beta1 == 0.9);
    CHECK(config.beta2 == 0.999);
    CHECK(config.epsilon == 1e-8);
}

TEST_CASE("train: deterministic per seed, loss decreases") {
    const auto c = synthetic::make_concept(synthetic::Options{}, 3, "tiny");
    const auto data = synthetic::make_pairs(c, 40, synthetic::Options{}, 3);
    TrainConfig config;
    config.seed = 5;
    config.epochs = 4;
    config.learning_rate = 1e-3;
    const Architecture arch{32, 16, 4};
    const TrainResult a = train(data, c.embedding, arch, config, "tiny");
    const TrainResult b = train(data, c.embedding, arch, config, "tiny");
    CHECK(a.params == b.params);
    CHECK(a.epoch_loss == b.epoch_loss);
    REQUIRE(a.epoch_loss.size() == 4);
    CHECK(a.epoch_loss.back() < a.epoch_loss.front());
    CHECK(a.params.concept_name == "tiny");

    config.seed = 6;
    CHECK(!(train(data, c.embedding, arch, config, "tiny").params == a.params));
}

TEST_CASE("train: partial last batch still updates") {
    const auto c = synthetic::make_concept(synthetic::Options{}, 4);
    const auto data = synthetic::make_pairs(c, 3, synthetic::Options{}, 4);  // 6 examples
    TrainConfig config;
    config.epochs = 1;
    config.batch_size = 4;
    const Architecture arch{32, 8, 2};
    const TrainResult r = train(data, c.embedding, arch, config);
    CHECK(!(r.params.weights == init_params(arch, config.seed).weights));
}

TEST_CASE("train: invalid inputs") {
    const auto c = synthetic::make_concept(synthetic::Options{}, 4);
    const Architecture arch{32, 8, 2};
    CHECK_THROWS_AS(train(std::vector<LabeledExample>{}, c.embedding, arch, TrainConfig{}), ConfigError);
    auto data = synthetic::make_pairs(c, 2, synthetic::Options{}, 4);
    TrainConfig bad;
    bad.batch_size = 0;
    CHECK_THROWS_AS(train(data, c.embedding, arch, bad), ConfigError);
    bad = TrainConfig{};
    bad.learning_rate = -1.0;
    CHECK_THROWS_AS(train(data, c.embedding, arch, bad), ConfigError);
    data[0].label = 2;
    CHECK_THROWS_AS(train(data, c.embedding, arch, TrainConfig{}), ValidationError);
}

TEST_CASE("evaluate: confusion counts and strict threshold") {
    Rng rng(22);
    ClassifierParams p = init_params({8, 4, 2}, 1);
    p.weights.mlp2_w = Matrix(4, 1);
    p.weights.mlp2_b = Matrix(1, 1);  // every probability is exactly 0.5
    const EmbeddingMatrix concept_emb(random_matrix(2, 8, rng));
    std::vector<LabeledExample> data;
    for (int i = 0; i < 4; ++i) {
        data.push_back({"e" + std::to_string(i), "", EmbeddingMatrix(random_matrix(3, 8, rng)), i % 2, {}, ""});
    }
    const Metrics at_half = evaluate(p, data, concept_emb, 0.5);
    CHECK(at_half.tn == 2);
    CHECK(at_half.fn == 2);
    CHECK(at_half.tp == 0);
    CHECK(at_half.fp == 0);
    CHECK(at_half.accuracy == 0.5);
    CHECK(at_half.true_positive_rate == 0.0);
    CHECK(at_half.false_positive_rate == 0.0);
    CHECK(at_half.loss == doctest::Approx(std::log(2.0)));

    const Metrics low = evaluate(p, data, concept_emb, 0.4);
    CHECK(low.tp == 2);
    CHECK(low.fp == 2);
    CHECK(low.false_positive_rate == 1.0);
    CHECK(low.total() == 4);

    CHECK_THROWS_AS(evaluate(p, data, concept_emb, 1.0), ConfigError);
    CHECK_THROWS_AS(evaluate(p, std::vector<LabeledExample>{}, concept_emb, 0.5), ConfigError);
}

TEST_CASE("synthetic benchmark: trained classifier separates a fresh draw") {
    const TrainedConcept& t = benchmark_concept();
    const auto held_out = synthetic::make_pairs(t.concept_def, 100, synthetic::Options{}, kBenchmarkSeed + 1000);
    const Metrics m = evaluate(t.params, held_out, t.concept_def.embedding, 0.5);
    CHECK(m.accuracy >= 0.99);
    CHECK(m.false_positive_rate <= 0.02);
}
