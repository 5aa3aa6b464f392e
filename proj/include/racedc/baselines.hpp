#ifndef RACEDC_BASELINES_HPP
#define RACEDC_BASELINES_HPP

// Competing divide-and-combine estimators and the pooled-data benchmark.
// Everything except the full_* functions consumes per-batch summaries only.

#include "racedc/core.hpp"
#include "racedc/local_estimators.hpp"
#include "racedc/remodel.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace racedc {

enum class BaselineMethod { AV, DC_lasso, DC_ridge, DC_pce, AEE, Full };

inline std::string to_string(BaselineMethod m)
{
    switch (m) {
    case BaselineMethod::AV: return "AV";
    case BaselineMethod::DC_lasso: return "DC_lasso";
    case BaselineMethod::DC_ridge: return "DC_ridge";
    case BaselineMethod::DC_pce: return "DC_pce";
    case BaselineMethod::AEE: return "AEE";
    case BaselineMethod::Full: return "Full";
    }
    return "unknown";
}

struct BaselineResult {
    Vector beta;
    BaselineMethod method = BaselineMethod::AV;
    /// Worker-to-coordinator exchanges the method needs.
    int rounds = 1;
};

/// (1/N) sum of the given estimates.
inline BaselineResult simple_average(std::span<const Vector> estimates)
{
    if (estimates.empty())
        throw ConfigError("simple_average: no estimates");
    CompensatedSum<Vector> sum(estimates.front().size(), 1);
    for (const auto& e : estimates) {
        if (e.size() != estimates.front().size())
            throw ConfigError("simple_average: estimates differ in dimension");
        sum.add(e);
    }
    return {sum.value() / static_cast<double>(estimates.size()), BaselineMethod::AV, 1};
}

namespace detail {

/// (sum A_j)^{-1} sum A_j b_j
inline Vector weighted_combination(std::span<const Matrix> weights, std::span<const Vector> estimates,
                                   const std::string& what)
{
    if (weights.empty() || weights.size() != estimates.size())
        throw ConfigError(what + ": need one weight matrix per estimate");
    const Eigen::Index p = estimates.front().size();
    CompensatedSum<Matrix> lhs(p, p);
    CompensatedSum<Vector> rhs(p, 1);
    for (std::size_t j = 0; j < weights.size(); ++j) {
        lhs.add(weights[j]);
        rhs.add(weights[j] * estimates[j]);
    }
    return solve_spd(lhs.value(), rhs.value(), what + " (aggregated weight matrix)");
}

} // namespace detail

/// (sum X_j'X_j/m)^{-1} sum (X_j'X_j/m) beta_j
inline BaselineResult dc_lasso(std::span<const LocalFit> fits)
{
    std::vector<Matrix> weights;
    std::vector<Vector> estimates;
    for (const auto& f : fits) {
        weights.push_back(f.gram);
        estimates.push_back(f.beta_hat);
    }
    return {detail::weighted_combination(weights, estimates, "dc_lasso"), BaselineMethod::DC_lasso, 1};
}

/// Lin-Xi combination with A_j = X_j'X_j + s_j I.
inline BaselineResult dc_ridge(std::span<const LocalFit> fits)
{
    std::vector<Matrix> weights;
    std::vector<Vector> estimates;
    for (const auto& f : fits) {
        const auto it = f.tuning.find("s");
        if (it == f.tuning.end())
            throw ConfigError("dc_ridge: fit carries no ridge value");
        Matrix A = static_cast<double>(f.rows) * f.gram;
        A.diagonal().array() += it->second;
        weights.push_back(std::move(A));
        estimates.push_back(f.beta_hat);
    }
    return {detail::weighted_combination(weights, estimates, "dc_ridge"), BaselineMethod::DC_ridge, 1};
}

// ---------------------------------------------------------------------------
// Two-round principal component protocol

/// Round 1 worker message: X_j'X_j.
inline Matrix pce_gram_summary(const DataBatch& batch) { return batch.X.transpose() * batch.X; }

/// Coordinator: leading r eigenvectors of the aggregated X'X.
inline Matrix pce_broadcast_basis(std::span<const Matrix> gram_sums, int r)
{
    if (gram_sums.empty())
        throw ConfigError("pce_broadcast_basis: no summaries");
    CompensatedSum<Matrix> total(gram_sums.front().rows(), gram_sums.front().cols());
    for (const auto& g : gram_sums)
        total.add(g);
    return leading_eigenvectors(total.value(), r);
}

struct PceScoreSummary {
    int batch_id = 0;
    Matrix ZtZ;
    Vector Zty;
};

/// Round 2 worker message: Z'Z and Z'y with Z = X P.
inline PceScoreSummary pce_score_summary(const DataBatch& batch, const Matrix& basis)
{
    const Matrix Z = batch.X * basis;
    return {batch.batch_id, Z.transpose() * Z, Z.transpose() * batch.y};
}

inline BaselineResult dc_pce_combine(const Matrix& basis, std::span<const PceScoreSummary> parts)
{
    if (parts.empty())
        throw ConfigError("dc_pce: no summaries");
    const Eigen::Index r = basis.cols();
    CompensatedSum<Matrix> lhs(r, r);
    CompensatedSum<Vector> rhs(r, 1);
    for (const auto& s : parts) {
        lhs.add(s.ZtZ);
        rhs.add(s.Zty);
    }
    const Vector scores = solve_spd(lhs.value(), rhs.value(), "dc_pce (aggregated Z'Z)");
    return {basis * scores, BaselineMethod::DC_pce, 2};
}

inline BaselineResult dc_pce(std::span<const DataBatch> batches, int r)
{
    if (batches.empty())
        throw ConfigError("dc_pce: no batches");
    if (r < 1 || r > batches.front().cols())
        throw ConfigError("dc_pce: rank must lie in [1, p]");
    std::vector<Matrix> grams;
    for (const auto& b : batches)
        grams.push_back(pce_gram_summary(b));
    const Matrix basis = pce_broadcast_basis(grams, r);
    std::vector<PceScoreSummary> parts;
    for (const auto& b : batches)
        parts.push_back(pce_score_summary(b, basis));
    return dc_pce_combine(basis, parts);
}

// ---------------------------------------------------------------------------
// Simple average of residual-adjusted fits

/// Worker side: beta_hat + (1/m) M X'(y - X beta_hat) with M = (X'X/m + k1 I)^{-1}.
inline Vector debiased_fit(const DataBatch& batch, const LocalFit& fit, double k1)
{
    const Matrix gram = fit.gram.size() ? fit.gram : scaled_gram(batch.X);
    return residual_adjust(batch, fit.beta_hat, ridge_inverse(gram, k1));
}

inline BaselineResult simple_average_adjusted(std::span<const DataBatch> batches, std::span<const LocalFit> fits,
                                              double k1)
{
    if (batches.size() != fits.size())
        throw ConfigError("simple_average_adjusted: batches and fits differ in count");
    std::vector<Vector> adjusted;
    adjusted.reserve(batches.size());
    for (std::size_t j = 0; j < batches.size(); ++j)
        adjusted.push_back(debiased_fit(batches[j], fits[j], k1));
    BaselineResult out = simple_average(adjusted);
    if (!fits.empty() && fits.front().method == FitMethod::pce)
        out.rounds = 2;
    return out;
}

inline BaselineResult simple_average_ridge(std::span<const DataBatch> batches, std::span<const LocalFit> fits,
                                           double k1)
{
    return simple_average_adjusted(batches, fits, k1);
}

/// PCE fits are expected to carry the round-1 broadcast basis.
inline BaselineResult simple_average_pce(std::span<const DataBatch> batches, std::span<const LocalFit> fits,
                                         double k1)
{
    BaselineResult out = simple_average_adjusted(batches, fits, k1);
    out.rounds = 2;
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinear

/// Aggregated estimating equations: (sum A_j)^{-1} sum A_j beta_j with
/// A_j = fdot'fdot at the local estimate.
inline BaselineResult aee_nonlinear(std::span<const LocalFit> fits)
{
    std::vector<Matrix> weights;
    std::vector<Vector> estimates;
    for (const auto& f : fits) {
        weights.push_back(static_cast<double>(f.rows) * f.gram);
        estimates.push_back(f.beta_hat);
    }
    return {detail::weighted_combination(weights, estimates, "aee_nonlinear"), BaselineMethod::AEE, 1};
}

// ---------------------------------------------------------------------------
// Pooled benchmark (outside the protocol: sees all raw rows)

/// Configured local estimator on the pooled data; residual-adjusted with
/// M = (X'X/n + k1 I)^{-1} when `adjust_k1` is set.
inline BaselineResult full_oracle(std::span<const DataBatch> batches, const LocalFitConfig& cfg,
                                  std::optional<double> adjust_k1)
{
    const DataBatch all = pool(batches);
    const LocalFit fit = fit_local(all, cfg);
    BaselineResult out{fit.beta_hat, BaselineMethod::Full, 1};
    if (adjust_k1)
        out.beta = debiased_fit(all, fit, *adjust_k1);
    return out;
}

template <RegressionFunction F>
BaselineResult full_nonlinear(std::span<const DataBatch> batches, const F& f, const Vector& init,
                              const NlsOptions& opts = {})
{
    const DataBatch all = pool(batches);
    return {nls_fit(all, f, init, opts).beta_hat, BaselineMethod::Full, 1};
}

} // namespace racedc

#endif
