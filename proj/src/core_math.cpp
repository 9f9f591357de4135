#include "heapr/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace heapr {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(rows_, cols_));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Vector Matrix::column(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix Matrix::without_rows(const std::vector<std::size_t>& sorted_rows) const {
    Matrix out(rows_ - sorted_rows.size(), cols_);
    std::size_t dst = 0, k = 0;
    for (std::size_t r = 0; r < rows_; ++r) {
        if (k < sorted_rows.size() && sorted_rows[k] == r) {
            ++k;
            continue;
        }
        std::copy(row(r).begin(), row(r).end(), out.row(dst).begin());
        ++dst;
    }
    return out;
}

Matrix Matrix::without_cols(const std::vector<std::size_t>& sorted_cols) const {
    Matrix out(rows_, cols_ - sorted_cols.size());
    for (std::size_t r = 0; r < rows_; ++r) {
        std::size_t dst = 0, k = 0;
        for (std::size_t c = 0; c < cols_; ++c) {
            if (k < sorted_cols.size() && sorted_cols[k] == c) {
                ++k;
                continue;
            }
            out(r, dst++) = (*this)(r, c);
        }
    }
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                             shape_str(b.rows(), b.cols()));
    }
    Matrix c(a.rows(), b.cols());
    // i-k-j order; each output entry accumulates in increasing k.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
        }
    }
    return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) {
        throw DimensionError("matvec: " + shape_str(a.rows(), a.cols()) + " * " +
                             std::to_string(x.size()));
    }
    Vector y(a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x);
    return y;
}

Vector matvec_transposed(const Matrix& a, std::span<const double> x) {
    if (a.rows() != x.size()) {
        throw DimensionError("matvec_transposed: " + shape_str(a.rows(), a.cols()) + "^T * " +
                             std::to_string(x.size()));
    }
    Vector y(a.cols(), 0.0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double xr = x[r];
        auto arow = a.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) y[c] += arow[c] * xr;
    }
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionError("dot: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) {
    double s = 0.0;
    for (double v : a) s += v * v;
    return std::sqrt(s);
}

double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double silu(double x) noexcept { return x * sigmoid(x); }

double silu_grad(double x) noexcept {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

Vector silu(std::span<const double> x) {
    Vector y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = silu(x[i]);
    return y;
}

Vector silu_grad(std::span<const double> x) {
    Vector y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = silu_grad(x[i]);
    return y;
}

Vector softmax(std::span<const double> z) {
    Vector p(z.size(), 0.0);
    if (z.empty()) return p;
    const double m = *std::max_element(z.begin(), z.end());
    if (m == -std::numeric_limits<double>::infinity()) {
        throw ArgumentError("softmax: every logit is -inf");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::isinf(z[i]) ? 0.0 : std::exp(z[i] - m);
        s += p[i];
    }
    for (double& v : p) v /= s;
    return p;
}

std::vector<std::pair<std::size_t, double>> topk(std::span<const double> z, std::size_t k) {
    if (k < 1 || k > z.size()) {
        throw ArgumentError("topk: k=" + std::to_string(k) + " outside [1, " +
                            std::to_string(z.size()) + "]");
    }
    std::vector<std::size_t> idx(z.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (z[a] != z[b]) return z[a] > z[b];
                          return a < b;
                      });
    std::vector<std::pair<std::size_t, double>> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.emplace_back(idx[i], z[idx[i]]);
    return out;
}

void outer_accumulate_inplace(Matrix& g_acc, std::span<const double> g, double weight) {
    if (g_acc.rows() != g_acc.cols() || g_acc.rows() != g.size()) {
        throw DimensionError("outer_accumulate: " + shape_str(g_acc.rows(), g_acc.cols()) +
                             " with vector of length " + std::to_string(g.size()));
    }
    const std::size_t n = g.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double gi = weight * g[i];
        auto r = g_acc.row(i);
        for (std::size_t j = i; j < n; ++j) r[j] += gi * g[j];
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) g_acc(j, i) = g_acc(i, j);
}

Matrix outer_accumulate(Matrix g_acc, std::span<const double> g) {
    outer_accumulate_inplace(g_acc, g);
    return g_acc;
}

double quad_form(const Matrix& g, std::span<const double> e) {
    if (g.rows() != g.cols() || g.rows() != e.size()) {
        throw DimensionError("quad_form: " + shape_str(g.rows(), g.cols()) +
                             " with vector of length " + std::to_string(e.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) s += e[i] * dot(g.row(i), e);
    return 0.5 * s;
}

bool solve_linear(Matrix a, Vector b, Vector& x, double pivot_tol) {
    const std::size_t n = a.rows();
    if (a.cols() != n || b.size() != n) {
        throw DimensionError("solve_linear: " + shape_str(a.rows(), a.cols()) +
                             " with rhs of length " + std::to_string(b.size()));
    }
    double scale = 0.0;
    for (double v : a.data()) scale = std::max(scale, std::abs(v));
    if (scale == 0.0) return n == 0;

    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
        if (std::abs(a(piv, col)) <= pivot_tol * scale) return false;
        if (piv != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a(piv, c), a(col, c));
            std::swap(b[piv], b[col]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a(r, col) / a(col, col);
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) a(r, c) -= f * a(col, c);
            b[r] -= f * b[col];
        }
    }
    x.assign(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t c = i + 1; c < n; ++c) s -= a(i, c) * x[c];
        x[i] = s / a(i, i);
    }
    return true;
}

bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace heapr
