#include "cgce/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cgce/errors.hpp"

namespace cgce::synthetic {

namespace {

Matrix noise_tokens(std::size_t rows, std::size_t d, double sigma, Rng& rng) {
    Matrix m(rows, d);
    for (double& v : m.values()) v = sigma * rng.normal();
    return m;
}

void plant(Matrix& tokens, std::size_t row, const std::vector<double>& direction, const Options& o, Rng& rng) {
    for (std::size_t j = 0; j < tokens.cols(); ++j) {
        tokens(row, j) = o.trigger_scale * direction[j] + o.noise * rng.normal();
    }
}

void check(const Options& o) {
    if (o.d == 0 || o.concept_tokens == 0 || o.min_prompt_tokens == 0 || o.max_prompt_tokens < o.min_prompt_tokens) {
        throw ConfigError("invalid synthetic options");
    }
}

}  // namespace

std::vector<Concept> make_concepts(std::size_t count, const Options& options, std::uint64_t seed) {
    check(options);
    if (count > options.d) throw ConfigError("cannot make more orthogonal concepts than dimensions");
    Rng rng(seed);
    std::vector<std::vector<double>> basis;
    while (basis.size() < count) {
        std::vector<double> v(options.d);
        for (double& x : v) x = rng.normal();
        for (const auto& b : basis) {
            const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
            for (std::size_t j = 0; j < v.size(); ++j) v[j] -= dot * b[j];
        }
        const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (norm < 1e-6) continue;
        for (double& x : v) x /= norm;
        basis.push_back(std::move(v));
    }

    std::vector<Concept> out;
    for (std::size_t c = 0; c < count; ++c) {
        Matrix tokens = noise_tokens(options.concept_tokens, options.d, options.noise, rng);
        plant(tokens, 0, basis[c], options, rng);
        out.push_back({"concept-" + std::to_string(c), EmbeddingMatrix(std::move(tokens)), basis[c]});
    }
    return out;
}

Concept make_concept(const Options& options, std::uint64_t seed, std::string name) {
    Concept c = std::move(make_concepts(1, options, seed).front());
    c.name = std::move(name);
    return c;
}

std::vector<LabeledExample> make_pairs(const Concept& target, std::size_t pairs, const Options& options,
                                       std::uint64_t seed) {
    check(options);
    if (target.direction.size() != options.d) throw ShapeError("concept direction does not match options.d");
    Rng rng(seed);
    std::vector<LabeledExample> out;
    out.reserve(2 * pairs);
    const std::size_t span = options.max_prompt_tokens - options.min_prompt_tokens + 1;
    for (std::size_t p = 0; p < pairs; ++p) {
        const std::size_t n = options.min_prompt_tokens + static_cast<std::size_t>(rng.below(span));
        Matrix safe = noise_tokens(n, options.d, options.noise, rng);
        Matrix unsafe = safe;
        plant(unsafe, static_cast<std::size_t>(rng.below(n)), target.direction, options, rng);
        const std::string pair_id = target.name + "-" + std::to_string(p);
        out.push_back({pair_id + "-safe", "", EmbeddingMatrix(std::move(safe)), 0, pair_id, target.name});
        out.push_back({pair_id + "-unsafe", "", EmbeddingMatrix(std::move(unsafe)), 1, pair_id, target.name});
    }
    return out;
}

EmbeddingMatrix make_prompt_with(const std::vector<const Concept*>& concepts, const Options& options, Rng& rng) {
    check(options);
    const std::size_t span = options.max_prompt_tokens - options.min_prompt_tokens + 1;
    const std::size_t n =
        std::max(concepts.size(), options.min_prompt_tokens + static_cast<std::size_t>(rng.below(span)));
    Matrix tokens = noise_tokens(n, options.d, options.noise, rng);
    std::vector<std::size_t> slots(n);
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    rng.shuffle(slots);
    for (std::size_t c = 0; c < concepts.size(); ++c) plant(tokens, slots[c], concepts[c]->direction, options, rng);
    return EmbeddingMatrix(std::move(tokens));
}

}  // namespace cgce::synthetic
