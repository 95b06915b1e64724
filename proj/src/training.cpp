#include "cgce/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "cgce/errors.hpp"
#include "cgce/random.hpp"

namespace cgce {

namespace {

constexpr double kLogClamp = 1e-12;

void check_dataset(std::span<const LabeledExample> dataset, const EmbeddingMatrix& concept_emb, std::size_t d) {
    if (dataset.empty()) throw ConfigError("dataset is empty");
    if (concept_emb.dim() != d) {
        throw ShapeError("concept embedding width " + std::to_string(concept_emb.dim()) + " does not match d=" +
                         std::to_string(d));
    }
    for (const auto& ex : dataset) {
        if (ex.embedding.dim() != d) {
            throw ShapeError("example '" + ex.id + "' has width " + std::to_string(ex.embedding.dim()) +
                             ", expected " + std::to_string(d));
        }
        if (ex.label != 0 && ex.label != 1) {
            throw ValidationError("example '" + ex.id + "' has label " + std::to_string(ex.label));
        }
    }
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
}

double bce_loss(double prediction, int label) {
    const double p = std::clamp(prediction, kLogClamp, 1.0 - kLogClamp);
    return label == 1 ? -std::log(p) : -std::log(1.0 - p);
}

AdamState make_adam_state(std::span<const Matrix* const> params) {
    AdamState state;
    for (const Matrix* p : params) {
        state.first_moment.emplace_back(p->rows(), p->cols());
        state.second_moment.emplace_back(p->rows(), p->cols());
    }
    return state;
}

void adam_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, AdamState& state,
               const TrainConfig& config) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
        throw ShapeError("adam_step: parameter, gradient and state lists differ in length");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k]->values();
        const auto g = grads[k]->values();
        auto m = state.first_moment[k].values();
        auto v = state.second_moment[k].values();
        if (g.size() != p.size() || m.size() != p.size()) {
            throw ShapeError("adam_step: tensor " + std::to_string(k) + " shape mismatch");
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            p[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
        }
    }
}

void adam_step(ParamTensors& params, const ParamTensors& grads, AdamState& state, const TrainConfig& config) {
    const auto p = params.list();
    const auto g = grads.list();
    adam_step(std::span<Matrix* const>(p), std::span<const Matrix* const>(g), state, config);
}

TrainResult train(std::span<const LabeledExample> dataset, const EmbeddingMatrix& concept_emb, const Architecture& arch,
                  const TrainConfig& config, std::string concept_name) {
    arch.validate();
    config.validate();
    check_dataset(dataset, concept_emb, arch.d);

    TrainResult result;
    result.params = init_params(arch, config.seed, std::move(concept_name));
    const auto param_list = std::as_const(result.params.weights).list();
    AdamState state = make_adam_state(param_list);

    // Shuffle stream is separate from the initialisation stream.
    Rng shuffler(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffler.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            ParamTensors batch_grad = ParamTensors::zeros(arch);
            auto acc = batch_grad.list();
            for (std::size_t b = start; b < stop; ++b) {
                const auto& ex = dataset[order[b]];
                const ParamGradients g = param_gradients(result.params, ex.embedding, concept_emb, ex.label);
                epoch_loss += g.loss;
                const auto src = g.tensors.list();
                for (std::size_t k = 0; k < ParamTensors::kCount; ++k) axpy(*acc[k], 1.0, *src[k]);
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            for (Matrix* m : acc) {
                for (double& v : m->values()) v *= inv;
            }
            adam_step(result.params.weights, batch_grad, state, config);
        }
        result.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    return result;
}

Metrics evaluate(const ClassifierParams& params, std::span<const LabeledExample> dataset,
                 const EmbeddingMatrix& concept_emb, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1), got " + std::to_string(tau));
    check_dataset(dataset, concept_emb, params.arch.d);

    Metrics m;
    double loss = 0.0;
    for (const auto& ex : dataset) {
        const double p = forward(params, ex.embedding, concept_emb).probability;
        loss += bce_loss(p, ex.label);
        const bool flagged = p > tau;
        if (flagged && ex.label == 1) ++m.tp;
        else if (flagged) ++m.fp;
        else if (ex.label == 0) ++m.tn;
        else ++m.fn;
    }
    const auto total = static_cast<double>(m.total());
    m.loss = loss / total;
    m.accuracy = static_cast<double>(m.tp + m.tn) / total;
    m.true_positive_rate = (m.tp + m.fn) ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
    m.false_positive_rate = (m.fp + m.tn) ? static_cast<double>(m.fp) / static_cast<double>(m.fp + m.tn) : 0.0;
    return m;
}

}  // namespace cgce
