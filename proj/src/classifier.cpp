#include "cgce/classifier.hpp"

#include <algorithm>
#include <cmath>

#include "cgce/errors.hpp"
#include "cgce/random.hpp"
#include "cgce/training.hpp"

namespace cgce {

void Architecture::validate() const {
    if (d == 0 || h == 0 || heads == 0) {
        throw ConfigError("architecture widths must be positive (d=" + std::to_string(d) + ", h=" + std::to_string(h) +
                          ", heads=" + std::to_string(heads) + ")");
    }
    if (h % heads != 0) {
        throw ConfigError("hidden width " + std::to_string(h) + " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
}

ParamTensors ParamTensors::zeros(const Architecture& arch) {
    const auto d = arch.d;
    const auto h = arch.h;
    ParamTensors p;
    p.proj_w = Matrix(d, h);
    p.proj_b = Matrix(1, h);
    p.q_w = Matrix(h, h);
    p.q_b = Matrix(1, h);
    p.k_w = Matrix(h, h);
    p.k_b = Matrix(1, h);
    p.v_w = Matrix(h, h);
    p.v_b = Matrix(1, h);
    p.out_w = Matrix(h, h);
    p.out_b = Matrix(1, h);
    p.mlp1_w = Matrix(h, h);
    p.mlp1_b = Matrix(1, h);
    p.mlp2_w = Matrix(h, 1);
    p.mlp2_b = Matrix(1, 1);
    return p;
}

std::array<Matrix*, ParamTensors::kCount> ParamTensors::list() noexcept {
    return {&proj_w, &proj_b, &q_w, &q_b, &k_w, &k_b, &v_w, &v_b, &out_w, &out_b, &mlp1_w, &mlp1_b, &mlp2_w, &mlp2_b};
}

std::array<const Matrix*, ParamTensors::kCount> ParamTensors::list() const noexcept {
    return {&proj_w, &proj_b, &q_w, &q_b, &k_w, &k_b, &v_w, &v_b, &out_w, &out_b, &mlp1_w, &mlp1_b, &mlp2_w, &mlp2_b};
}

std::size_t ParamTensors::scalar_count() const noexcept {
    std::size_t total = 0;
    for (const Matrix* m : list()) total += m->size();
    return total;
}

EmbeddingMatrix::EmbeddingMatrix(Matrix values) : values_(std::move(values)) {
    if (values_.rows() == 0 || values_.cols() == 0) {
        throw ShapeError("embedding must have at least one token and one column, got " + values_.shape_string());
    }
}

std::uint64_t count_params(std::uint64_t d, std::uint64_t h) {
    return (d * h + h) + 4 * (h * h + h) + (h * h + h) + (h + 1);
}

ClassifierParams init_params(const Architecture& arch, std::uint64_t seed, std::string concept_name) {
    arch.validate();
    ClassifierParams params;
    params.arch = arch;
    params.concept_name = std::move(concept_name);
    params.weights = ParamTensors::zeros(arch);

    Rng rng(seed);
    auto fill = [&rng](Matrix& w) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
        for (double& v : w.values()) v = rng.uniform(-bound, bound);
    };
    auto& w = params.weights;
    for (Matrix* m : {&w.proj_w, &w.q_w, &w.k_w, &w.v_w, &w.out_w, &w.mlp1_w, &w.mlp2_w}) fill(*m);
    return params;
}

namespace {

// Intermediates kept for the reverse pass.
struct Cache {
    Matrix prompt_proj;   // P, n x h
    Matrix concept_proj;  // C, m x h
    Matrix q, k, v;       // n x h, m x h, m x h
    Matrix heads_out;     // concat_t A_t V_t, n x h
    Matrix attended;      // eps_att, n x h
    Matrix hidden_pre;    // 1 x h
    Matrix hidden;        // 1 x h
    ForwardTrace trace;
};

void check_inputs(const ClassifierParams& params, const EmbeddingMatrix& prompt, const EmbeddingMatrix& concept_emb) {
    if (prompt.dim() != params.arch.d || concept_emb.dim() != params.arch.d) {
        throw ShapeError("embedding width mismatch: classifier expects d=" + std::to_string(params.arch.d) +
                         ", prompt " + prompt.values().shape_string() + ", concept " +
                         concept_emb.values().shape_string());
    }
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = matmul(x, w);
    add_row_bias(y, b);
    return y;
}

Cache run_forward(const ClassifierParams& params, const EmbeddingMatrix& prompt, const EmbeddingMatrix& concept_emb) {
    check_inputs(params, prompt, concept_emb);
    const auto& w = params.weights;
    const std::size_t n = prompt.tokens();
    const std::size_t m = concept_emb.tokens();
    const std::size_t heads = params.arch.heads;
    const std::size_t dk = params.arch.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    Cache c;
    c.prompt_proj = affine(prompt.values(), w.proj_w, w.proj_b);
    c.concept_proj = affine(concept_emb.values(), w.proj_w, w.proj_b);
    c.q = affine(c.prompt_proj, w.q_w, w.q_b);
    c.k = affine(c.concept_proj, w.k_w, w.k_b);
    c.v = affine(c.concept_proj, w.v_w, w.v_b);

    auto& t = c.trace;
    t.attention.reserve(heads);
    t.attention_mean = Matrix(n, m);
    c.heads_out = Matrix(n, params.arch.h);
    for (std::size_t head = 0; head < heads; ++head) {
        const Matrix qh = column_slice(c.q, head * dk, dk);
        const Matrix kh = column_slice(c.k, head * dk, dk);
        const Matrix vh = column_slice(c.v, head * dk, dk);
        Matrix a = softmax_rows(scaled(matmul_nt(qh, kh), inv_sqrt_dk));
        set_column_slice(c.heads_out, head * dk, matmul(a, vh));
        axpy(t.attention_mean, 1.0 / static_cast<double>(heads), a);
        t.attention.push_back(std::move(a));
    }
    c.attended = affine(c.heads_out, w.out_w, w.out_b);

    t.importance.resize(n);
    t.importance_argmax.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = t.attention_mean.row(i);
        const auto it = std::max_element(row.begin(), row.end());  // first maximum
        t.importance[i] = *it;
        t.importance_argmax[i] = static_cast<std::size_t>(it - row.begin());
    }
    const Matrix alpha = softmax_rows(Matrix::row_vector(t.importance));
    t.alpha.assign(alpha.values().begin(), alpha.values().end());

    Matrix agg(1, params.arch.h);
    for (std::size_t i = 0; i < n; ++i) {
        const auto src = c.attended.row(i);
        auto dst = agg.row(0);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += t.alpha[i] * src[j];
    }
    t.aggregate.assign(agg.values().begin(), agg.values().end());

    c.hidden_pre = affine(agg, w.mlp1_w, w.mlp1_b);
    c.hidden = c.hidden_pre;
    for (double& v : c.hidden.values()) v = std::max(v, 0.0);
    t.logit = matmul(c.hidden, w.mlp2_w)(0, 0) + w.mlp2_b(0, 0);
    t.probability = sigmoid(t.logit);
    return c;
}

// Reverse pass from d(objective)/d(logit). Fills parameter gradients when
// `grads` is non-null and returns d(objective)/d(prompt).
Matrix run_backward(const ClassifierParams& params, const EmbeddingMatrix& prompt, const EmbeddingMatrix& concept_emb,
                    const Cache& c, double dlogit, ParamTensors* grads) {
    const auto& w = params.weights;
    const auto& t = c.trace;
    const std::size_t n = prompt.tokens();
    const std::size_t m = concept_emb.tokens();
    const std::size_t h = params.arch.h;
    const std::size_t heads = params.arch.heads;
    const std::size_t dk = params.arch.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    // Head: logit = relu(agg W1 + b1) W2 + b2.
    Matrix d_hidden = scaled(transpose(w.mlp2_w), dlogit);  // 1 x h
    for (std::size_t j = 0; j < h; ++j) {
        if (c.hidden_pre(0, j) <= 0.0) d_hidden(0, j) = 0.0;
    }
    const Matrix agg = Matrix::row_vector(t.aggregate);
    if (grads) {
        grads->mlp2_w = scaled(transpose(c.hidden), dlogit);
        grads->mlp2_b = Matrix(1, 1, {dlogit});
        grads->mlp1_w = matmul_tn(agg, d_hidden);
        grads->mlp1_b = d_hidden;
    }
    const Matrix d_agg = matmul_nt(d_hidden, w.mlp1_w);  // 1 x h

    // agg = sum_i alpha_i * attended_i.
    Matrix d_attended(n, h);
    std::vector<double> d_alpha(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = c.attended.row(i);
        auto dst = d_attended.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            dst[j] = t.alpha[i] * d_agg(0, j);
            dot += row[j] * d_agg(0, j);
        }
        d_alpha[i] = dot;
    }

    // alpha = softmax(s), s_i = mean_attention(i, argmax_i).
    double weighted = 0.0;
    for (std::size_t i = 0; i < n; ++i) weighted += t.alpha[i] * d_alpha[i];
    Matrix d_mean(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        d_mean(i, t.importance_argmax[i]) = t.alpha[i] * (d_alpha[i] - weighted);
    }

    // attended = heads_out Wo + bo.
    if (grads) {
        grads->out_w = matmul_tn(c.heads_out, d_attended);
        grads->out_b = column_sums(d_attended);
    }
    const Matrix d_heads_out = matmul_nt(d_attended, w.out_w);

    Matrix dq(n, h);
    Matrix dk_all(m, h);
    Matrix dv(m, h);
    const double head_share = 1.0 / static_cast<double>(heads);
    for (std::size_t head = 0; head < heads; ++head) {
        const Matrix& a = t.attention[head];
        const Matrix qh = column_slice(c.q, head * dk, dk);
        const Matrix kh = column_slice(c.k, head * dk, dk);
        const Matrix vh = column_slice(c.v, head * dk, dk);
        const Matrix d_out_h = column_slice(d_heads_out, head * dk, dk);

        // Two paths into A: the attended values and the importance scores.
        Matrix d_a = matmul_nt(d_out_h, vh);
        axpy(d_a, head_share, d_mean);
        add_column_slice(dv, head * dk, matmul_tn(a, d_out_h));

        // Row-wise softmax Jacobian.
        Matrix d_scores(n, m);
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += a(i, j) * d_a(i, j);
            for (std::size_t j = 0; j < m; ++j) d_scores(i, j) = a(i, j) * (d_a(i, j) - dot) * inv_sqrt_dk;
        }
        add_column_slice(dq, head * dk, matmul(d_scores, kh));
        add_column_slice(dk_all, head * dk, matmul_tn(d_scores, qh));
    }

    if (grads) {
        grads->q_w = matmul_tn(c.prompt_proj, dq);
        grads->q_b = column_sums(dq);
        grads->k_w = matmul_tn(c.concept_proj, dk_all);
        grads->k_b = column_sums(dk_all);
        grads->v_w = matmul_tn(c.concept_proj, dv);
        grads->v_b = column_sums(dv);
    }
    const Matrix d_prompt_proj = matmul_nt(dq, w.q_w);

    if (grads) {
        Matrix d_concept_proj = matmul_nt(dk_all, w.k_w);
        axpy(d_concept_proj, 1.0, matmul_nt(dv, w.v_w));
        grads->proj_w = matmul_tn(prompt.values(), d_prompt_proj);
        axpy(grads->proj_w, 1.0, matmul_tn(concept_emb.values(), d_concept_proj));
        grads->proj_b = column_sums(d_prompt_proj);
        axpy(grads->proj_b, 1.0, column_sums(d_concept_proj));
    }
    return matmul_nt(d_prompt_proj, w.proj_w);
}

}  // namespace

ForwardTrace forward(const ClassifierParams& params, const EmbeddingMatrix& prompt, const EmbeddingMatrix& concept_emb) {
    return run_forward(params, prompt, concept_emb).trace;
}

InputGradientResult forward_with_input_gradient(const ClassifierParams& params, const EmbeddingMatrix& prompt,
                                                const EmbeddingMatrix& concept_emb) {
    Cache c = run_forward(params, prompt, concept_emb);
    const double p = c.trace.probability;
    Matrix grad = run_backward(params, prompt, concept_emb, c, p * (1.0 - p), nullptr);
    return {std::move(c.trace), std::move(grad)};
}

Matrix input_gradient(const ClassifierParams& params, const EmbeddingMatrix& prompt, const EmbeddingMatrix& concept_emb) {
    return forward_with_input_gradient(params, prompt, concept_emb).gradient;
}

ParamGradients param_gradients(const ClassifierParams& params, const EmbeddingMatrix& prompt,
                               const EmbeddingMatrix& concept_emb, int label) {
    if (label != 0 && label != 1) throw ValidationError("label must be 0 or 1, got " + std::to_string(label));
    const Cache c = run_forward(params, prompt, concept_emb);
    ParamGradients out;
    out.probability = c.trace.probability;
    out.loss = bce_loss(out.probability, label);
    out.logit_gradient = out.probability - static_cast<double>(label);
    out.tensors = ParamTensors::zeros(params.arch);
    run_backward(params, prompt, concept_emb, c, out.logit_gradient, &out.tensors);
    return out;
}

}  // namespace cgce
