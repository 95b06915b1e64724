#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cgce/matrix.hpp"

namespace cgce {

// Layer widths of a concept classifier.
struct Architecture {
    std::size_t d = 0;      // text-encoder embedding width
    std::size_t h = 0;      // internal width
    std::size_t heads = 4;  // attention heads, must divide h

    std::size_t head_dim() const noexcept { return h / heads; }

    // Throws ConfigError on zero widths or h % heads != 0.
    void validate() const;

    bool operator==(const Architecture&) const = default;
};

// Every trainable tensor. Biases are 1 x width row vectors. The same type
// carries gradients and optimizer moments.
struct ParamTensors {
    Matrix proj_w, proj_b;  // shared projection for prompt and concept, d x h
    Matrix q_w, q_b;
    Matrix k_w, k_b;
    Matrix v_w, v_b;
    Matrix out_w, out_b;
    Matrix mlp1_w, mlp1_b;  // h x h, ReLU
    Matrix mlp2_w, mlp2_b;  // h x 1, then sigmoid

    static constexpr std::size_t kCount = 14;

    // Fixed serialization order.
    static constexpr std::array<std::string_view, kCount> kNames = {
        "proj.weight", "proj.bias", "q.weight",    "q.bias",    "k.weight",    "k.bias",    "v.weight",
        "v.bias",      "out.weight", "out.bias",   "mlp1.weight", "mlp1.bias", "mlp2.weight", "mlp2.bias"};

    static ParamTensors zeros(const Architecture& arch);

    std::array<Matrix*, kCount> list() noexcept;
    std::array<const Matrix*, kCount> list() const noexcept;

    std::size_t scalar_count() const noexcept;

    bool operator==(const ParamTensors&) const = default;
};

struct ClassifierParams {
    Architecture arch;
    std::string concept_name;
    double default_tau = 0.5;
    ParamTensors weights;

    bool operator==(const ClassifierParams&) const = default;
};

// Token embeddings from a text encoder: n x d for a prompt, m x d for a concept.
class EmbeddingMatrix {
public:
    // Throws ShapeError when there are no tokens or no columns.
    explicit EmbeddingMatrix(Matrix values);

    const Matrix& values() const noexcept { return values_; }
    std::size_t tokens() const noexcept { return values_.rows(); }
    std::size_t dim() const noexcept { return values_.cols(); }

    bool operator==(const EmbeddingMatrix&) const = default;

private:
    Matrix values_;
};

struct ForwardTrace {
    std::vector<Matrix> attention;  // per head, n x m
    Matrix attention_mean;          // n x m, mean over heads
    std::vector<double> importance; // s_i = max_j attention_mean(i, j)
    std::vector<std::size_t> importance_argmax;  // lowest j attaining the max
    std::vector<double> alpha;      // softmax(importance)
    std::vector<double> aggregate;  // length h
    double logit = 0.0;
    double probability = 0.5;
};

// Closed form: (d*h + h) + 4(h^2 + h) + (h^2 + h) + (h + 1).
std::uint64_t count_params(std::uint64_t d, std::uint64_t h);

// Weights uniform in +-1/sqrt(fan_in), biases zero.
ClassifierParams init_params(const Architecture& arch, std::uint64_t seed, std::string concept_name = {});

ForwardTrace forward(const ClassifierParams& params, const EmbeddingMatrix& prompt, const EmbeddingMatrix& concept_emb);

// d(probability)/d(prompt), n x d.
Matrix input_gradient(const ClassifierParams& params, const EmbeddingMatrix& prompt, const EmbeddingMatrix& concept_emb);

// Forward pass plus d(probability)/d(prompt) from one evaluation.
struct InputGradientResult {
    ForwardTrace trace;
    Matrix gradient;
};
InputGradientResult forward_with_input_gradient(const ClassifierParams& params, const EmbeddingMatrix& prompt,
                                                const EmbeddingMatrix& concept_emb);

struct ParamGradients {
    ParamTensors tensors;  // d(BCE)/d(theta)
    double loss = 0.0;
    double probability = 0.0;
    double logit_gradient = 0.0;  // probability - label
};

// Gradients of binary cross-entropy against `label` (0 or 1).
ParamGradients param_gradients(const ClassifierParams& params, const EmbeddingMatrix& prompt,
                               const EmbeddingMatrix& concept_emb, int label);

}  // namespace cgce
