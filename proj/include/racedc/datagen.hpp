#ifndef RACEDC_DATAGEN_HPP
#define RACEDC_DATAGEN_HPP

#include "racedc/core.hpp"
#include "racedc/models.hpp"
#include "racedc/rng.hpp"

#include <cstdint>
#include <vector>

namespace racedc {

enum class CovarianceKind { ar1, equicorrelated };

struct CovarianceSpec {
    CovarianceKind kind = CovarianceKind::ar1;
    double rho = 0.5;
};

/// identical: every batch centred at zero; batch_means: batch j centred at mu_j ~ N(0, I).
enum class MeanMode { identical, batch_means };

struct LinearModelSpec {
    Vector beta;
    double noise_var = 1.0;
    CovarianceSpec cov;
    MeanMode mean_mode = MeanMode::identical;
};

struct NonlinearModelSpec {
    Vector beta;
    double noise_var = 1.0;
    CovarianceSpec cov;
    ShiftedSquareFunction f;
};

inline Matrix gen_covariance(const CovarianceSpec& spec, int p)
{
    if (p < 1)
        throw ConfigError("gen_covariance: p must be >= 1");
    if (!(spec.rho >= 0.0 && spec.rho < 1.0))
        throw ConfigError("gen_covariance: rho must lie in [0, 1), got " + std::to_string(spec.rho));
    Matrix sigma(p, p);
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < p; ++j) {
            if (i == j)
                sigma(i, j) = 1.0;
            else if (spec.kind == CovarianceKind::ar1)
                sigma(i, j) = std::pow(spec.rho, std::abs(i - j));
            else
                sigma(i, j) = spec.rho;
        }
    }
    return sigma;
}

namespace detail {

inline void check_batch_args(int N, int m, double noise_var, Eigen::Index p)
{
    if (N < 1)
        throw ConfigError("batch generation: N must be >= 1");
    if (m < 1)
        throw ConfigError("batch generation: m must be >= 1");
    if (!(noise_var >= 0.0))
        throw ConfigError("batch generation: noise_var must be nonnegative");
    if (p < 1)
        throw ConfigError("batch generation: beta must be nonempty");
}

inline Matrix cholesky_factor(const CovarianceSpec& cov, int p)
{
    Eigen::LLT<Matrix> llt(gen_covariance(cov, p));
    if (llt.info() != Eigen::Success)
        throw ConfigError("batch generation: covariance is not positive definite");
    return llt.matrixL();
}

/// Rows N(mu, L L') from the batch's own substream.
inline Matrix draw_design(const Matrix& chol, const Vector& mu, int m, NormalStream& normals)
{
    const Eigen::Index p = chol.rows();
    Matrix Z(m, p);
    for (int i = 0; i < m; ++i)
        for (Eigen::Index k = 0; k < p; ++k)
            Z(i, k) = normals();
    Matrix X = Z * chol.transpose();
    X.rowwise() += mu.transpose();
    return X;
}

inline Vector batch_mean(std::uint64_t seed, int batch_id, Eigen::Index p, MeanMode mode)
{
    if (mode == MeanMode::identical)
        return Vector::Zero(p);
    NormalStream normals(derive_key(seed, Stream::batch_mean, {static_cast<std::uint64_t>(batch_id)}));
    Vector mu(p);
    for (Eigen::Index k = 0; k < p; ++k)
        mu(k) = normals();
    return mu;
}

template <RegressionFunction F>
DataBatch make_batch(const F& f, const Vector& beta, double noise_var, const Matrix& chol,
                     const Vector& mu, int m, std::uint64_t seed, int batch_id)
{
    NormalStream normals(derive_key(seed, Stream::batch_data, {static_cast<std::uint64_t>(batch_id)}));
    DataBatch b;
    b.batch_id = batch_id;
    b.X = draw_design(chol, mu, m, normals);
    b.y = f.values(b.X, beta);
    if (noise_var > 0.0) {
        const double sd = std::sqrt(noise_var);
        for (int i = 0; i < m; ++i)
            b.y(i) += sd * normals();
    }
    return b;
}

} // namespace detail

/// One linear batch; identical to the batch_id-th element of gen_linear_batches.
inline DataBatch gen_linear_batch(const LinearModelSpec& spec, int m, std::uint64_t seed, int batch_id)
{
    const auto p = static_cast<int>(spec.beta.size());
    detail::check_batch_args(1, m, spec.noise_var, p);
    const Matrix chol = detail::cholesky_factor(spec.cov, p);
    const Vector mu = detail::batch_mean(seed, batch_id, p, spec.mean_mode);
    return detail::make_batch(LinearFunction{}, spec.beta, spec.noise_var, chol, mu, m, seed, batch_id);
}

inline std::vector<DataBatch> gen_linear_batches(const LinearModelSpec& spec, int N, int m,
                                                 std::uint64_t seed)
{
    const auto p = static_cast<int>(spec.beta.size());
    detail::check_batch_args(N, m, spec.noise_var, p);
    const Matrix chol = detail::cholesky_factor(spec.cov, p);
    std::vector<DataBatch> out;
    out.reserve(N);
    for (int j = 0; j < N; ++j) {
        const Vector mu = detail::batch_mean(seed, j, p, spec.mean_mode);
        out.push_back(detail::make_batch(LinearFunction{}, spec.beta, spec.noise_var, chol, mu, m, seed, j));
    }
    return out;
}

inline DataBatch gen_nonlinear_batch(const NonlinearModelSpec& spec, int m, std::uint64_t seed,
                                     int batch_id)
{
    const auto p = static_cast<int>(spec.beta.size());
    detail::check_batch_args(1, m, spec.noise_var, p);
    const Matrix chol = detail::cholesky_factor(spec.cov, p);
    return detail::make_batch(spec.f, spec.beta, spec.noise_var, chol, Vector::Zero(p), m, seed, batch_id);
}

inline std::vector<DataBatch> gen_nonlinear_batches(const NonlinearModelSpec& spec, int N, int m,
                                                    std::uint64_t seed)
{
    const auto p = static_cast<int>(spec.beta.size());
    detail::check_batch_args(N, m, spec.noise_var, p);
    const Matrix chol = detail::cholesky_factor(spec.cov, p);
    std::vector<DataBatch> out;
    out.reserve(N);
    for (int j = 0; j < N; ++j)
        out.push_back(detail::make_batch(spec.f, spec.beta, spec.noise_var, chol, Vector::Zero(p), m, seed, j));
    return out;
}

} // namespace racedc

#endif
