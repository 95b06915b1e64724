#pragma once

#include <string>
#include <vector>

#include "cgce/refinement.hpp"
#include "cgce/synthetic.hpp"
#include "cgce/training.hpp"

namespace cgce::testing {

// The synthetic benchmark: d = 32, 200 pairs, default training recipe.
inline constexpr Architecture kBenchmarkArch{32, 128, 4};
inline constexpr std::uint64_t kBenchmarkSeed = 7;

struct TrainedConcept {
    synthetic::Concept concept_def;
    ClassifierParams params;
    std::vector<double> epoch_loss;

    ConceptGuard guard() const { return {params, concept_def.embedding}; }
};

inline TrainedConcept train_concept(const synthetic::Concept& c, std::uint64_t seed, std::size_t pairs = 200) {
    const auto data = synthetic::make_pairs(c, pairs, synthetic::Options{}, seed);
    TrainConfig config;
    config.seed = seed;
    TrainResult r = train(data, c.embedding, kBenchmarkArch, config, c.name);
    return {c, std::move(r.params), std::move(r.epoch_loss)};
}

// Trained once per test binary.
inline const TrainedConcept& benchmark_concept() {
    static const TrainedConcept trained = [] {
        const auto c = synthetic::make_concept(synthetic::Options{}, kBenchmarkSeed, "synthetic");
        return train_concept(c, kBenchmarkSeed);
    }();
    return trained;
}

// Three classifiers over mutually orthogonal trigger directions.
inline const std::vector<TrainedConcept>& three_concepts() {
    static const std::vector<TrainedConcept> trained = [] {
        std::vector<TrainedConcept> out;
        const auto concepts = synthetic::make_concepts(3, synthetic::Options{}, 31);
        for (std::size_t i = 0; i < concepts.size(); ++i) out.push_back(train_concept(concepts[i], 40 + i));
        return out;
    }();
    return trained;
}

}  // namespace cgce::testing
