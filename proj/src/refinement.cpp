#include "cgce/refinement.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>

namespace cgce {

void RefinementConfig::validate() const {
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("step size eta must be positive, got " + std::to_string(eta));
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("threshold tau must lie in (0, 1), got " + std::to_string(tau));
    if (max_iters == 0) throw ConfigError("max_iters must be at least 1");
}

Detection detect(const ClassifierParams& params, const EmbeddingMatrix& prompt, const EmbeddingMatrix& concept_emb,
                 double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("threshold tau must lie in (0, 1), got " + std::to_string(tau));
    ForwardTrace trace = forward(params, prompt, concept_emb);
    return {trace.probability > tau, trace.probability, std::move(trace.importance)};
}

Matrix weight_rows(const Matrix& gradient, std::span<const double> importance) {
    if (importance.size() != gradient.rows()) {
        throw ShapeError("weight_rows: " + std::to_string(importance.size()) + " scores for gradient " +
                         gradient.shape_string());
    }
    Matrix out = gradient;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        for (double& v : out.row(i)) v *= importance[i];
    }
    return out;
}

namespace {

void check_guards(std::span<const ConceptGuard> guards, const EmbeddingMatrix& prompt) {
    if (guards.empty()) throw ConfigError("at least one classifier is required");
    for (const auto& g : guards) {
        if (g.params.arch.d != prompt.dim() || g.concept_emb.dim() != prompt.dim()) {
            throw ShapeError("classifier '" + g.params.concept_name + "' expects width " +
                             std::to_string(g.params.arch.d) + ", prompt has " + std::to_string(prompt.dim()) +
                             ", concept has " + std::to_string(g.concept_emb.dim()));
        }
    }
}

// Applies eps - eta * ||eps|| / ||direction|| * direction and fills the
// norm fields of `record`.
Matrix take_step(const Matrix& eps, const Matrix& direction, double direction_norm, double eta,
                 IterationRecord& record) {
    record.embedding_norm = frobenius_norm(eps);
    const double factor = eta * record.embedding_norm / direction_norm;
    Matrix next = eps;
    axpy(next, -factor, direction);
    Matrix delta = next;
    axpy(delta, -1.0, eps);
    record.delta_norm = frobenius_norm(delta);
    return next;
}

std::vector<double> probabilities_on(std::span<const ConceptGuard> guards, const Matrix& eps) {
    const EmbeddingMatrix e(eps);
    std::vector<double> out;
    out.reserve(guards.size());
    for (const auto& g : guards) out.push_back(forward(g.params, e, g.concept_emb).probability);
    return out;
}

bool any_above(std::span<const double> probs, double tau) {
    return std::any_of(probs.begin(), probs.end(), [tau](double p) { return p > tau; });
}

}  // namespace

RefinementResult refine_single(const ClassifierParams& params, const EmbeddingMatrix& prompt,
                               const EmbeddingMatrix& concept_emb, const RefinementConfig& config) {
    config.validate();
    RefinementResult result{prompt, 0, false, true, {}, {}};
    Matrix eps = prompt.values();

    std::size_t k = 0;
    double last_probability = 0.0;
    bool stopped_below = false;
    for (; k < config.max_iters; ++k) {
        auto step = forward_with_input_gradient(params, EmbeddingMatrix(eps), concept_emb);
        last_probability = step.trace.probability;
        if (!(last_probability > config.tau)) {
            stopped_below = true;
            break;
        }
        if (k == 0) result.flagged = true;

        IterationRecord record;
        record.k = k;
        record.detected_count = 1;
        Matrix g = config.use_importance_weighting ? weight_rows(step.gradient, step.trace.importance)
                                                   : std::move(step.gradient);
        const double g_norm = frobenius_norm(g);
        record.concepts.push_back({params.concept_name, last_probability, g_norm, true});
        record.embedding = eps;
        if (g_norm == 0.0) {
            result.refined = EmbeddingMatrix(eps);
            result.iterations_run = k;
            result.converged = false;
            result.final_probabilities = {last_probability};
            throw RefinementStall("refinement stalled at iteration " + std::to_string(k) +
                                      ": weighted gradient is zero while probability " +
                                      std::to_string(last_probability) + " > tau",
                                  std::move(result));
        }
        eps = take_step(eps, g, g_norm, config.eta, record);
        result.trace.push_back(std::move(record));
    }

    result.iterations_run = k;
    if (k == 0) {
        result.final_probabilities = {last_probability};
        return result;  // refined still holds the untouched input
    }
    result.refined = EmbeddingMatrix(std::move(eps));
    result.final_probabilities =
        stopped_below ? std::vector<double>{last_probability}
                      : std::vector<double>{forward(params, result.refined, concept_emb).probability};
    result.converged = !(result.final_probabilities[0] > config.tau);
    return result;
}

RefinementResult refine_multi(std::span<const ConceptGuard> guards, const EmbeddingMatrix& prompt,
                              const RefinementConfig& config) {
    config.validate();
    check_guards(guards, prompt);
    RefinementResult result{prompt, 0, false, true, {}, {}};
    Matrix eps = prompt.values();

    std::size_t k = 0;
    std::vector<double> last_probs;
    bool stopped_below = false;
    for (; k < config.max_iters; ++k) {
        const EmbeddingMatrix current(eps);
        IterationRecord record;
        record.k = k;
        Matrix aggregate(eps.rows(), eps.cols());
        last_probs.clear();
        bool stalled = false;
        for (const auto& guard : guards) {
            // Gradient work only for classifiers that fire.
            const ForwardTrace trace = forward(guard.params, current, guard.concept_emb);
            last_probs.push_back(trace.probability);
            ConceptStep cs{guard.params.concept_name, trace.probability, 0.0, false};
            if (trace.probability > config.tau) {
                cs.detected = true;
                ++record.detected_count;
                auto step = forward_with_input_gradient(guard.params, current, guard.concept_emb);
                const Matrix g = config.use_importance_weighting
                                     ? weight_rows(step.gradient, step.trace.importance)
                                     : std::move(step.gradient);
                cs.grad_norm = frobenius_norm(g);
                if (cs.grad_norm == 0.0) stalled = true;
                else axpy(aggregate, 1.0 / cs.grad_norm, g);
            }
            record.concepts.push_back(std::move(cs));
        }
        if (record.detected_count == 0) {
            stopped_below = true;
            break;
        }
        if (k == 0) result.flagged = true;
        record.embedding = eps;

        const double aggregate_norm = frobenius_norm(aggregate);
        if (stalled || aggregate_norm == 0.0) {
            result.refined = EmbeddingMatrix(eps);
            result.iterations_run = k;
            result.converged = false;
            result.final_probabilities = last_probs;
            throw RefinementStall("refinement stalled at iteration " + std::to_string(k) +
                                      (stalled ? ": a detecting classifier has a zero weighted gradient"
                                               : ": per-concept directions cancel exactly"),
                                  std::move(result));
        }
        eps = take_step(eps, aggregate, aggregate_norm, config.eta, record);
        result.trace.push_back(std::move(record));
    }

    result.iterations_run = k;
    if (k == 0) {
        result.final_probabilities = last_probs;
        return result;
    }
    result.refined = EmbeddingMatrix(std::move(eps));
    result.final_probabilities = stopped_below ? last_probs : probabilities_on(guards, result.refined.values());
    result.converged = !any_above(result.final_probabilities, config.tau);
    return result;
}

RefinementResult safeguard(std::span<const ConceptGuard> guards, const EmbeddingMatrix& prompt,
                           const RefinementConfig& config) {
    config.validate();
    check_guards(guards, prompt);
    if (guards.size() == 1) return refine_single(guards[0].params, prompt, guards[0].concept_emb, config);
    return refine_multi(guards, prompt, config);
}

namespace {

constexpr std::array<StepSizeEntry, 10> kStepSizes = {{
    {"van-gogh", "SD-v1.4", 0.15},
    {"church", "SD-v1.4", 0.50},
    {"nudity", "SD-v1.4", 1.00},
    {"nudity", "SD-v3", 1.00},
    {"nudity", "FLUX", 1.50},
    {"nudity", "Switti-AR", 2.00},
    {"nudity", "Infinity-2B", 0.50},
    {"nudity", "CogX-2B", 2.00},
    {"nudity", "CogX-5B", 2.00},
    {"nudity", "Hunyuan", 1.00},
}};

std::string normalize(std::string_view name) {
    std::string out;
    for (char ch : name) {
        if (ch == ' ' || ch == '_' || ch == '-') {
            if (!out.empty() && out.back() != '-') out.push_back('-');
        } else {
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    while (!out.empty() && out.back() == '-') out.pop_back();
    return out;
}

}  // namespace

std::span<const StepSizeEntry> step_size_table() { return kStepSizes; }

std::optional<double> default_step_size(std::string_view concept_name, std::string_view model) {
    const std::string c = normalize(concept_name);
    const std::string m = normalize(model);
    for (const auto& e : kStepSizes) {
        if (normalize(e.concept_name) == c && normalize(e.model) == m) return e.eta;
    }
    return std::nullopt;
}

}  // namespace cgce
