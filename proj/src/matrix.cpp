#include "cgce/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "cgce/errors.hpp"

namespace cgce {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) {
            throw ConfigError("non-finite matrix entry at flat index " + std::to_string(i));
        }
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

std::string Matrix::shape_string() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + a.shape_string() + " x " + b.shape_string());
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto dst = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const auto src = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: row counts differ, " + a.shape_string() + "^T x " + b.shape_string());
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const auto arow = a.row(k);
        const auto brow = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            auto dst = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aki * brow[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: column counts differ, " + a.shape_string() + " x " + b.shape_string() + "^T");
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto arow = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const auto brow = b.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
            out(i, j) = acc;
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
    return out;
}

Matrix softmax_rows(const Matrix& m) {
    if (m.empty()) throw ShapeError("softmax_rows: empty matrix " + m.shape_string());
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto src = m.row(i);
        auto dst = out.row(i);
        const double peak = *std::max_element(src.begin(), src.end());
        double total = 0.0;
        for (std::size_t j = 0; j < src.size(); ++j) {
            dst[j] = std::exp(src[j] - peak);
            total += dst[j];
        }
        for (double& v : dst) v /= total;
    }
    return out;
}

double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double frobenius_norm(const Matrix& m) {
    // Scaled accumulation so huge or tiny entries do not overflow/underflow.
    double scale = 0.0;
    for (double v : m.values()) scale = std::max(scale, std::abs(v));
    if (scale == 0.0) return 0.0;
    double acc = 0.0;
    for (double v : m.values()) {
        const double r = v / scale;
        acc += r * r;
    }
    return scale * std::sqrt(acc);
}

void add_row_bias(Matrix& m, const Matrix& bias) {
    if (bias.rows() != 1 || bias.cols() != m.cols()) {
        throw ShapeError("add_row_bias: bias " + bias.shape_string() + " does not fit " + m.shape_string());
    }
    const auto b = bias.row(0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
    }
}

Matrix column_sums(const Matrix& m) {
    Matrix out(1, m.cols());
    auto dst = out.row(0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto r = m.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) dst[j] += r[j];
    }
    return out;
}

void axpy(Matrix& a, double scale, const Matrix& b) {
    require_same_shape(a, b, "axpy");
    auto dst = a.values();
    const auto src = b.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

Matrix scaled(const Matrix& m, double factor) {
    Matrix out = m;
    for (double& v : out.values()) v *= factor;
    return out;
}

Matrix column_slice(const Matrix& m, std::size_t first, std::size_t count) {
    if (first + count > m.cols()) {
        throw ShapeError("column_slice: columns [" + std::to_string(first) + ", " + std::to_string(first + count) +
                         ") out of range for " + m.shape_string());
    }
    Matrix out(m.rows(), count);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, first + j);
    return out;
}

void set_column_slice(Matrix& m, std::size_t first, const Matrix& block) {
    if (block.rows() != m.rows() || first + block.cols() > m.cols()) {
        throw ShapeError("set_column_slice: block " + block.shape_string() + " does not fit " + m.shape_string());
    }
    for (std::size_t i = 0; i < block.rows(); ++i)
        for (std::size_t j = 0; j < block.cols(); ++j) m(i, first + j) = block(i, j);
}

void add_column_slice(Matrix& m, std::size_t first, const Matrix& block) {
    if (block.rows() != m.rows() || first + block.cols() > m.cols()) {
        throw ShapeError("add_column_slice: block " + block.shape_string() + " does not fit " + m.shape_string());
    }
    for (std::size_t i = 0; i < block.rows(); ++i)
        for (std::size_t j = 0; j < block.cols(); ++j) m(i, first + j) += block(i, j);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    const auto x = a.values();
    const auto y = b.values();
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
    return worst;
}

}  // namespace cgce
