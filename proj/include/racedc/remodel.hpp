#ifndef RACEDC_REMODEL_HPP
#define RACEDC_REMODEL_HPP

// Residual adjustment of local fits and construction of the projected
// observations (z_j, U_j, w_j) that the coordinator regresses on.

#include "racedc/core.hpp"
#include "racedc/local_estimators.hpp"
#include "racedc/models.hpp"
#include "racedc/rng.hpp"

#include <cstdint>
#include <optional>

namespace racedc {

enum class ProjectionDistribution { gaussian_invp, unit_sphere };

/// How the R projection draws are combined. `average` solves once per draw and
/// averages the R estimates; `stacked` is an experimental variant that solves a
/// single weighted least squares over all N*R records.
enum class ProjectionCombine { average, stacked };

struct ProjectionSpec {
    ProjectionDistribution distribution = ProjectionDistribution::gaussian_invp;
    int R = 50;
    std::uint64_t seed = 0;
    ProjectionCombine combine = ProjectionCombine::average;

    void validate() const
    {
        if (R < 1)
            throw ConfigError("ProjectionSpec: R must be >= 1");
    }
};

enum class WeightMode { ridge_sigma, unit };

/// Which approximate inverse of the local Gram matrix drives the adjustment.
enum class AdjustmentKind { ridge, exact_inverse };

struct AdjustmentSpec {
    double k1 = 0.1;
    double k2 = 0.1;
    WeightMode weight_mode = WeightMode::ridge_sigma;
    AdjustmentKind matrix = AdjustmentKind::ridge;

    void validate() const
    {
        if (!(k1 > 0.0) || !(k2 > 0.0))
            throw ConfigError("AdjustmentSpec: k1 and k2 must be positive");
    }
};

struct ProjectedRecord {
    double z = 0.0;
    Vector U;
    double w = 1.0;
    int batch_id = 0;
    int draw_id = 0;
};

/// (gram + k1 I)^{-1}
inline Matrix ridge_inverse(const Matrix& gram, double k1)
{
    if (!(k1 > 0.0))
        throw ConfigError("ridge_inverse: k1 must be positive");
    if (gram.rows() != gram.cols())
        throw ConfigError("ridge_inverse: gram must be square");
    Matrix a = gram;
    a.diagonal().array() += k1;
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success)
        throw SingularSystemError("ridge_inverse: gram + k1 I is not positive definite", spd_condition(a));
    return llt.solve(Matrix::Identity(a.rows(), a.cols()));
}

inline Matrix adjustment_matrix(const Matrix& gram, const AdjustmentSpec& spec)
{
    if (spec.matrix == AdjustmentKind::exact_inverse)
        return spd_inverse(gram, "adjustment_matrix (exact Gram inverse)");
    return ridge_inverse(gram, spec.k1);
}

/// beta_hat + (1/m) M X'(y - X beta_hat)
inline Vector residual_adjust(const DataBatch& batch, const Vector& beta_hat, const Matrix& M)
{
    if (beta_hat.size() != batch.cols() || M.rows() != batch.cols() || M.cols() != batch.cols())
        throw ConfigError("residual_adjust: dimension mismatch");
    const Vector score = batch.X.transpose() * (batch.y - batch.X * beta_hat);
    return beta_hat + M * score / static_cast<double>(batch.rows());
}

/// Projection direction for (batch, draw); a pure function of (seed, batch_id, draw_id).
inline Vector draw_projection(int p, const ProjectionSpec& spec, int batch_id, int draw_id)
{
    if (p < 1)
        throw ConfigError("draw_projection: p must be >= 1");
    NormalStream normals(derive_key(spec.seed, Stream::projection,
                                    {static_cast<std::uint64_t>(batch_id), static_cast<std::uint64_t>(draw_id)}));
    Vector eta(p);
    for (int k = 0; k < p; ++k)
        eta(k) = normals();
    if (spec.distribution == ProjectionDistribution::unit_sphere)
        return eta / eta.norm();
    return eta / std::sqrt(static_cast<double>(p));
}

// ---------------------------------------------------------------------------
// Linear models

/// Everything a worker ships about its batch for the linear remodelling:
/// O(p^2) scalars, never a row of X.
struct LinearSummary {
    int batch_id = 0;
    Eigen::Index rows = 0;
    Matrix gram;        // X'X/m
    Vector beta_hat;    // local biased estimate
    Vector adjustment;  // beta_RA - beta_hat = (1/m) M X'(y - X beta_hat)
};

inline LinearSummary summarize_linear(const DataBatch& batch, const LocalFit& fit, const AdjustmentSpec& spec)
{
    spec.validate();
    LinearSummary s;
    s.batch_id = batch.batch_id;
    s.rows = batch.rows();
    s.gram = fit.gram.size() ? fit.gram : scaled_gram(batch.X);
    s.beta_hat = fit.beta_hat;
    const Matrix M = adjustment_matrix(s.gram, spec);
    s.adjustment = residual_adjust(batch, fit.beta_hat, M) - fit.beta_hat;
    return s;
}

/// Coordinator-side cache of the per-batch matrices that every projection draw reuses.
class PreparedSummary {
public:
    PreparedSummary(const LinearSummary& summary, const AdjustmentSpec& spec,
                    const std::optional<Matrix>& explicit_m = std::nullopt)
        : batch_id_(summary.batch_id), beta_hat_(summary.beta_hat), adjustment_(summary.adjustment),
          weight_mode_(spec.weight_mode)
    {
        const Matrix M = explicit_m ? *explicit_m : adjustment_matrix(summary.gram, spec);
        covariate_map_ = summary.gram * M.transpose();
        Matrix inflated = summary.gram;
        inflated.diagonal().array() += spec.k2;
        sigma_map_ = M * inflated * M.transpose();
    }

    /// eta' M (gram + k2 I) M' eta
    double sigma2(const Vector& eta) const { return eta.dot(sigma_map_ * eta); }

    ProjectedRecord project(const Vector& eta, int draw_id) const
    {
        if (!eta.allFinite())
            throw ConfigError("project_linear: projection has non-finite entries");
        ProjectedRecord rec;
        rec.batch_id = batch_id_;
        rec.draw_id = draw_id;
        rec.U = covariate_map_ * eta;
        rec.z = eta.dot(adjustment_) + rec.U.dot(beta_hat_);
        if (weight_mode_ == WeightMode::ridge_sigma) {
            const double s2 = sigma2(eta);
            if (!(s2 > 0.0) || !std::isfinite(s2))
                throw Error("project_linear: nonpositive projected variance for batch " +
                            std::to_string(rec.batch_id));
            rec.w = 1.0 / s2;
        } else {
            rec.w = 1.0;
        }
        return rec;
    }

private:
    int batch_id_;
    Vector beta_hat_;
    Vector adjustment_;
    WeightMode weight_mode_;
    Matrix covariate_map_; // gram * M'
    Matrix sigma_map_;     // M (gram + k2 I) M'
};

inline ProjectedRecord project_linear(const LinearSummary& summary, const AdjustmentSpec& spec, const Vector& eta,
                                      int draw_id = 0, const std::optional<Matrix>& explicit_m = std::nullopt)
{
    return PreparedSummary(summary, spec, explicit_m).project(eta, draw_id);
}

inline ProjectedRecord project_linear(const DataBatch& batch, const LocalFit& fit, const AdjustmentSpec& spec,
                                      const Vector& eta, int draw_id = 0)
{
    const LinearSummary s = summarize_linear(batch, fit, spec);
    return project_linear(s, spec, eta, draw_id);
}

// ---------------------------------------------------------------------------
// Nonlinear models

/// H = (fdot'fdot/m + k1 I)^{-1} fdot' evaluated at the local estimate; p x m.
template <RegressionFunction F>
Matrix build_H(const DataBatch& batch, const LocalFit& fit, const F& f, double k1)
{
    const Matrix J = f.jacobian(batch.X, fit.beta_hat);
    const Matrix info = scaled_gram(J);
    return ridge_inverse(info, k1) * J.transpose();
}

/// beta_hat + (1/m) H (y - f(X, beta_hat))
template <RegressionFunction F>
Vector residual_adjust_nonlinear(const DataBatch& batch, const LocalFit& fit, const Matrix& H, const F& f)
{
    if (H.rows() != fit.beta_hat.size() || H.cols() != batch.rows())
        throw ConfigError("residual_adjust_nonlinear: H has wrong shape");
    return fit.beta_hat + H * (batch.y - f.values(batch.X, fit.beta_hat)) / static_cast<double>(batch.rows());
}

/// Fixed per-batch quantities of the nonlinear remodelling.
struct NonlinearSummary {
    int batch_id = 0;
    Eigen::Index rows = 0;
    Vector response; // beta_RA - beta_hat + (1/m) H f(X, beta_hat); z = eta' response
    Matrix spread;   // (1/m) H H'; sigma^2 = eta' spread eta
};

/// Per-iteration quantities at the current global iterate beta.
struct NonlinearEvaluation {
    int batch_id = 0;
    Vector hf; // (1/m) H f(X, beta)
    Matrix hj; // (1/m) H fdot(X, beta)
};

template <RegressionFunction F>
NonlinearSummary summarize_nonlinear(const DataBatch& batch, const LocalFit& fit, const Matrix& H, const F& f)
{
    const double m = static_cast<double>(batch.rows());
    NonlinearSummary s;
    s.batch_id = batch.batch_id;
    s.rows = batch.rows();
    const Vector ra = residual_adjust_nonlinear(batch, fit, H, f);
    s.response = ra - fit.beta_hat + H * f.values(batch.X, fit.beta_hat) / m;
    s.spread = H * H.transpose() / m;
    return s;
}

template <RegressionFunction F>
NonlinearEvaluation evaluate_compressed(const DataBatch& batch, const Matrix& H, const F& f, const Vector& beta)
{
    const double m = static_cast<double>(batch.rows());
    NonlinearEvaluation e;
    e.batch_id = batch.batch_id;
    e.hf = H * f.values(batch.X, beta) / m;
    e.hj = H * f.jacobian(batch.X, beta) / m;
    return e;
}

struct NonlinearRecord {
    double z = 0.0;
    double w = 1.0;
    int batch_id = 0;
    int draw_id = 0;
};

inline NonlinearRecord project_nonlinear(const NonlinearSummary& s, const Vector& eta, int draw_id = 0)
{
    NonlinearRecord rec;
    rec.batch_id = s.batch_id;
    rec.draw_id = draw_id;
    rec.z = eta.dot(s.response);
    const double s2 = eta.dot(s.spread * eta);
    if (!(s2 > 0.0) || !std::isfinite(s2))
        throw Error("project_nonlinear: nonpositive projected variance for batch " + std::to_string(s.batch_id));
    rec.w = 1.0 / s2;
    return rec;
}

template <RegressionFunction F>
NonlinearRecord project_nonlinear(const DataBatch& batch, const LocalFit& fit, const Matrix& H, const F& f,
                                  const Vector& eta, int draw_id = 0)
{
    if (eta.size() != H.rows())
        throw ConfigError("project_nonlinear: dimension mismatch");
    return project_nonlinear(summarize_nonlinear(batch, fit, H, f), eta, draw_id);
}

} // namespace racedc

#endif
