#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cgce {

// Dense row-major matrix of doubles. All arithmetic in the library runs on
// this type; files hold binary32 and are widened on load.
class Matrix {
public:
    Matrix() = default;

    // Zero-filled rows x cols.
    Matrix(std::size_t rows, std::size_t cols);

    // Takes ownership of row-major `data`. Throws ShapeError if the length is
    // wrong and ConfigError if any entry is NaN or infinite.
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix row_vector(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    std::string shape_string() const;

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);

// a^T * b without materialising the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// a * b^T without materialising the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);

// Row-wise softmax with max subtraction. Throws ShapeError on an empty matrix.
Matrix softmax_rows(const Matrix& m);

double sigmoid(double x) noexcept;

double frobenius_norm(const Matrix& m);

// Adds a 1 x cols bias to every row, in place.
void add_row_bias(Matrix& m, const Matrix& bias);

// Column sums as a 1 x cols matrix.
Matrix column_sums(const Matrix& m);

// a += scale * b (shapes must match).
void axpy(Matrix& a, double scale, const Matrix& b);

Matrix scaled(const Matrix& m, double factor);

// Columns [first, first + count) as a new matrix.
Matrix column_slice(const Matrix& m, std::size_t first, std::size_t count);

// Writes `block` into columns starting at `first`.
void set_column_slice(Matrix& m, std::size_t first, const Matrix& block);

// Adds `block` into columns starting at `first`.
void add_column_slice(Matrix& m, std::size_t first, const Matrix& block);

// Largest |a - b| over all entries; ShapeError if shapes differ.
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace cgce
