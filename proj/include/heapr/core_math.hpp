#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "heapr/errors.hpp"

namespace heapr {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    Vector column(std::size_t c) const;

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    Matrix transposed() const;

    // Copies with the listed rows / columns removed; indices must be sorted and unique.
    Matrix without_rows(const std::vector<std::size_t>& sorted_rows) const;
    Matrix without_cols(const std::vector<std::size_t>& sorted_cols) const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);

// y = A x
Vector matvec(const Matrix& a, std::span<const double> x);
// y = A^T x
Vector matvec_transposed(const Matrix& a, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

double sigmoid(double x) noexcept;
double silu(double x) noexcept;
double silu_grad(double x) noexcept;

Vector silu(std::span<const double> x);
Vector silu_grad(std::span<const double> x);

// Max-subtracted softmax. Entries equal to -inf map to exactly 0.
Vector softmax(std::span<const double> z);

// k largest entries in descending order; ties go to the lower index.
std::vector<std::pair<std::size_t, double>> topk(std::span<const double> z, std::size_t k);

// G + g g^T, upper triangle computed then mirrored so the result is exactly symmetric.
Matrix outer_accumulate(Matrix g_acc, std::span<const double> g);
// In-place variant used on hot paths.
void outer_accumulate_inplace(Matrix& g_acc, std::span<const double> g, double weight = 1.0);

// 1/2 e^T G e
double quad_form(const Matrix& g, std::span<const double> e);

// Solves A x = b by Gaussian elimination with partial pivoting. Returns false when a
// pivot falls below `pivot_tol` times the largest absolute entry of A.
bool solve_linear(Matrix a, Vector b, Vector& x, double pivot_tol = 1e-12);

bool all_finite(std::span<const double> v) noexcept;

}  // namespace heapr
