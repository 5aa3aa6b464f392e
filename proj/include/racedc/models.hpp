#ifndef RACEDC_MODELS_HPP
#define RACEDC_MODELS_HPP

#include "racedc/core.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <vector>

namespace racedc {

/// A regression function f(x, beta) evaluated row-wise over a design matrix,
/// with its Jacobian in beta (one row per observation).
template <typename F>
concept RegressionFunction = requires(const F& f, const Matrix& X, const Vector& beta) {
    { f.values(X, beta) } -> std::convertible_to<Vector>;
    { f.jacobian(X, beta) } -> std::convertible_to<Matrix>;
};

struct LinearFunction {
    Vector values(const Matrix& X, const Vector& beta) const { return X * beta; }
    Matrix jacobian(const Matrix& X, const Vector&) const { return X; }
};

/// f(x, beta) = (x'beta + shift)^2
struct ShiftedSquareFunction {
    double shift = 2.0;

    Vector values(const Matrix& X, const Vector& beta) const
    {
        return ((X * beta).array() + shift).square().matrix();
    }

    Matrix jacobian(const Matrix& X, const Vector& beta) const
    {
        const Vector scale = 2.0 * ((X * beta).array() + shift).matrix();
        return scale.asDiagonal() * X;
    }

    /// Consistent starting value for zero-mean Gaussian designs: there
    /// E[x (x'beta)^2] = 0, so the least squares slope of y on (1, x)
    /// estimates 2 * shift * beta.
    Vector moment_start(const Matrix& X, const Vector& y) const
    {
        Matrix Z(X.rows(), X.cols() + 1);
        Z << Matrix::Ones(X.rows(), 1), X;
        const Vector coef = Z.colPivHouseholderQr().solve(y);
        return coef.tail(X.cols()) / (2.0 * shift);
    }

    /// Spectral start for zero-mean Gaussian designs: E[y xx'] - E[y] S = 2 S beta beta' S
    /// with S = E[xx'], so the leading eigenpair of the whitened left side gives beta up to sign.
    Vector spectral_start(const Matrix& X, const Vector& y) const
    {
        const double m = static_cast<double>(X.rows());
        const Matrix S = X.transpose() * X / m;
        const Matrix T = X.transpose() * y.asDiagonal() * X / m - (y.sum() / m) * S;
        Eigen::LLT<Matrix> llt(S);
        if (llt.info() != Eigen::Success)
            return Vector::Zero(X.cols());
        const Matrix L = llt.matrixL();
        // L^{-1} T L^{-T} = 2 (L' beta)(L' beta)'
        const Matrix W = L.triangularView<Eigen::Lower>().solve(
            L.triangularView<Eigen::Lower>().solve(T).transpose());
        Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (W + W.transpose()));
        const Eigen::Index top = X.cols() - 1;
        const double lambda = std::max(es.eigenvalues()(top), 0.0);
        const Vector u = es.eigenvectors().col(top) * std::sqrt(lambda / 2.0);
        return L.transpose().triangularView<Eigen::Upper>().solve(u);
    }

    /// Multistart set for local least squares: the moment start and the two
    /// signs of the spectral start, the moment start's mirror and rescalings, the origin.
    std::vector<Vector> starting_values(const Matrix& X, const Vector& y) const
    {
        const Vector s = moment_start(X, y);
        const Vector v = spectral_start(X, y);
        return {s, v, -v, Vector::Zero(X.cols()), -s, 2.0 * s, 0.5 * s};
    }
};

static_assert(RegressionFunction<LinearFunction>);
static_assert(RegressionFunction<ShiftedSquareFunction>);

} // namespace racedc

#endif
