#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cgce/classifier.hpp"
#include "cgce/errors.hpp"

namespace cgce {

struct RefinementConfig {
    double eta = 1.0;        // step size, relative to the embedding norm
    double tau = 0.5;        // detection threshold, flagged iff probability > tau
    std::size_t max_iters = 50;
    bool use_importance_weighting = true;

    void validate() const;
};

// A trained classifier paired with the embedding of the concept it detects.
struct ConceptGuard {
    ClassifierParams params;
    EmbeddingMatrix concept_emb;
};

struct ConceptStep {
    std::string concept_id;
    double probability = 0.0;
    double grad_norm = 0.0;  // norm of the weighted gradient; 0 when not detected
    bool detected = false;
};

struct IterationRecord {
    std::size_t k = 0;
    Matrix embedding;  // the iterate the probabilities were measured on
    std::vector<ConceptStep> concepts;
    std::size_t detected_count = 0;
    double embedding_norm = 0.0;
    double delta_norm = 0.0;  // ||next - embedding||
};

struct RefinementResult {
    EmbeddingMatrix refined;
    std::size_t iterations_run = 0;
    bool flagged = false;    // some concept was detected on the input
    bool converged = true;   // no concept detected on the returned embedding
    std::vector<double> final_probabilities;
    std::vector<IterationRecord> trace;
};

// Thrown when a detecting classifier yields a zero weighted gradient, so the
// embedding cannot be moved. Carries everything computed up to that point.
class RefinementStall : public Error {
public:
    RefinementStall(const std::string& what, RefinementResult partial)
        : Error(what), partial_(std::move(partial)) {}

    const RefinementResult& partial() const noexcept { return partial_; }

private:
    RefinementResult partial_;
};

struct Detection {
    bool flagged = false;
    double probability = 0.0;
    std::vector<double> importance;
};

Detection detect(const ClassifierParams& params, const EmbeddingMatrix& prompt, const EmbeddingMatrix& concept_emb,
                 double tau);

// Scales row i of `gradient` by importance[i].
Matrix weight_rows(const Matrix& gradient, std::span<const double> importance);

// Single concept: eps <- eps - eta * ||eps|| / ||g|| * g with g = s (.) grad f,
// until the probability is no longer above tau or max_iters steps ran.
RefinementResult refine_single(const ClassifierParams& params, const EmbeddingMatrix& prompt,
                               const EmbeddingMatrix& concept_emb, const RefinementConfig& config);

// Several concepts at once: every detecting classifier contributes its unit
// weighted gradient to one aggregate direction G, and the embedding moves by
// eta * ||eps|| along -G / ||G||. Stops as soon as no classifier fires.
RefinementResult refine_multi(std::span<const ConceptGuard> guards, const EmbeddingMatrix& prompt,
                              const RefinementConfig& config);

// Detect, then refine if anything fired. Unflagged prompts come back
// unchanged with flagged = false. One guard uses refine_single.
RefinementResult safeguard(std::span<const ConceptGuard> guards, const EmbeddingMatrix& prompt,
                           const RefinementConfig& config);

struct StepSizeEntry {
    std::string_view concept_name;
    std::string_view model;
    double eta;
};

// Tuned step sizes per (concept, generative model).
std::span<const StepSizeEntry> step_size_table();

// Lookup with case-, space- and hyphen-insensitive names.
std::optional<double> default_step_size(std::string_view concept_name, std::string_view model = "SD-v1.4");

}  // namespace cgce
