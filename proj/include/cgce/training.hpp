#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgce/classifier.hpp"

namespace cgce {

struct LabeledExample {
    std::string id;
    std::string text;
    EmbeddingMatrix embedding;
    int label = 0;  // 1 = prompt contains the concept
    std::optional<std::string> pair_id;
    std::string concept_name;
};

struct TrainConfig {
    std::size_t epochs = 10;
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
};

struct Metrics {
    double accuracy = 0.0;
    double true_positive_rate = 0.0;
    double false_positive_rate = 0.0;
    double loss = 0.0;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::size_t total() const noexcept { return tp + fp + tn + fn; }
};

// Binary cross-entropy. The prediction is clamped to [1e-12, 1 - 1e-12]
// before taking logs, so saturated sigmoids give a finite loss.
double bce_loss(double prediction, int label);

// First and second moments for a list of tensors, plus the step counter.
struct AdamState {
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;
    std::uint64_t step = 0;
};

AdamState make_adam_state(std::span<const Matrix* const> params);

// One bias-corrected Adam update applied in place to `params`.
void adam_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, AdamState& state,
               const TrainConfig& config);

void adam_step(ParamTensors& params, const ParamTensors& grads, AdamState& state, const TrainConfig& config);

struct TrainResult {
    ClassifierParams params;
    std::vector<double> epoch_loss;  // mean per-example BCE seen during each epoch
};

// Minibatch BCE + Adam. Shuffles once per epoch from `config.seed`, averages
// gradients over each batch and keeps the trailing partial batch.
TrainResult train(std::span<const LabeledExample> dataset, const EmbeddingMatrix& concept_emb,
                  const Architecture& arch, const TrainConfig& config, std::string concept_name = {});

// A prediction is positive iff probability > tau.
Metrics evaluate(const ClassifierParams& params, std::span<const LabeledExample> dataset,
                 const EmbeddingMatrix& concept_emb, double tau);

}  // namespace cgce
