#pragma once
// Polynomial least squares for regression-based Monte Carlo.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "pmc/error.hpp"
#include "pmc/model.hpp"

namespace pmc {

/// Total-degree monomials in standardized state coordinates. Coordinates
/// with zero sample variance are dropped, so a fixed starting point leaves
/// only the intercept.
class PolynomialBasis {
public:
    PolynomialBasis() = default;

    /// xs: samples in rows (n x D).
    PolynomialBasis(const Mat& xs, int degree) : degree_(degree) {
        if (degree < 1) throw ConfigError("regression basis degree must be at least 1");
        const Eigen::Index n = xs.rows();
        mean_ = xs.colwise().mean().transpose();
        scale_ = Vec::Ones(xs.cols());
        for (Eigen::Index c = 0; c < xs.cols(); ++c) {
            const double var = (xs.col(c).array() - mean_[c]).square().sum() / std::max<Eigen::Index>(1, n - 1);
            if (var > 1e-24 * (1.0 + mean_[c] * mean_[c])) {
                active_.push_back(static_cast<int>(c));
                scale_[c] = std::sqrt(var);
            }
        }
        std::vector<int> cur;
        build(0, degree, cur);
    }

    int size() const { return static_cast<int>(terms_.size()); }

    void features(const Eigen::Ref<const Vec>& x, double* out) const {
        std::vector<double> z(active_.size());
        for (std::size_t c = 0; c < active_.size(); ++c)
            z[c] = (x[active_[c]] - mean_[active_[c]]) / scale_[active_[c]];
        for (std::size_t t = 0; t < terms_.size(); ++t) {
            double v = 1.0;
            for (int c : terms_[t]) v *= z[static_cast<std::size_t>(c)];
            out[t] = v;
        }
    }

    Mat design(const Mat& xs) const {
        Mat phi(xs.rows(), size());
        std::vector<double> row(static_cast<std::size_t>(size()));
        for (Eigen::Index r = 0; r < xs.rows(); ++r) {
            features(xs.row(r).transpose(), row.data());
            for (int c = 0; c < size(); ++c) phi(r, c) = row[static_cast<std::size_t>(c)];
        }
        return phi;
    }

private:
    // Monomials as sorted multisets of active-coordinate indices.
    void build(int start, int left, std::vector<int>& cur) {
        terms_.push_back(cur);
        if (left == 0) return;
        for (int c = start; c < static_cast<int>(active_.size()); ++c) {
            cur.push_back(c);
            build(c, left - 1, cur);
            cur.pop_back();
        }
    }

    int degree_ = 1;
    Vec mean_, scale_;
    std::vector<int> active_;
    std::vector<std::vector<int>> terms_;
};

struct LeastSquares {
    Mat coef;  // features x targets
    Vec r2;    // per target
};

/// Ridge-regularized least squares (Gram + ridge I) for several targets at once.
inline LeastSquares least_squares(const Mat& phi, const Mat& y, double ridge = 1e-8) {
    const Eigen::Index p = phi.cols();
    if (phi.rows() < p)
        throw SolverError("rank-deficient regression: " + std::to_string(phi.rows()) + " samples for " +
                          std::to_string(p) + " features; use a smaller basis or more paths");
    Mat gram = phi.transpose() * phi;
    Eigen::LDLT<Mat> ldlt(gram + ridge * Mat::Identity(p, p));
    const Vec d = ldlt.vectorD();
    if (ldlt.info() != Eigen::Success || !(d.minCoeff() > 1e-13 * d.maxCoeff()))
        throw SolverError("rank-deficient regression (pivot ratio " + std::to_string(d.minCoeff() / d.maxCoeff()) +
                          "); use a smaller basis or more paths");
    LeastSquares out;
    out.coef = ldlt.solve(phi.transpose() * y);
    const Mat fit = phi * out.coef;
    out.r2.resize(y.cols());
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
        const double mean = y.col(c).mean();
        const double tss = (y.col(c).array() - mean).square().sum();
        const double rss = (y.col(c) - fit.col(c)).squaredNorm();
        out.r2[c] = tss > 0.0 ? 1.0 - rss / tss : 1.0;
    }
    return out;
}

} // namespace pmc
