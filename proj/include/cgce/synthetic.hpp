#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cgce/classifier.hpp"
#include "cgce/random.hpp"
#include "cgce/training.hpp"

namespace cgce::synthetic {

// Stand-in for text-encoder output. Every concept owns a unit "trigger"
// direction; its concept embedding carries that direction in token 0. A safe
// prompt is Gaussian noise tokens, its unsafe twin is the same prompt with one
// token replaced by a scaled trigger plus noise.
struct Options {
    std::size_t d = 32;
    std::size_t concept_tokens = 4;
    std::size_t min_prompt_tokens = 4;
    std::size_t max_prompt_tokens = 8;
    double noise = 0.5;          // std-dev of every background token coordinate
    double trigger_scale = 20.0;
};

struct Concept {
    std::string name;
    EmbeddingMatrix embedding;
    std::vector<double> direction;  // unit length
};

// `count` concepts with mutually orthogonal trigger directions (count <= d).
std::vector<Concept> make_concepts(std::size_t count, const Options& options, std::uint64_t seed);

Concept make_concept(const Options& options, std::uint64_t seed, std::string name = "synthetic");

// `pairs` minimal pairs, safe (label 0) then unsafe (label 1), sharing pair_id.
std::vector<LabeledExample> make_pairs(const Concept& target, std::size_t pairs, const Options& options,
                                       std::uint64_t seed);

// A noise prompt with the triggers of all `concepts` planted at distinct
// token positions.
EmbeddingMatrix make_prompt_with(const std::vector<const Concept*>& concepts, const Options& options, Rng& rng);

}  // namespace cgce::synthetic
