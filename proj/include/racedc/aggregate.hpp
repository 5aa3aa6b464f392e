#ifndef RACEDC_AGGREGATE_HPP
#define RACEDC_AGGREGATE_HPP

#include "racedc/core.hpp"
#include "racedc/local_estimators.hpp"
#include "racedc/remodel.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace racedc {

struct GlobalEstimate {
    Vector beta;
    std::string method = "race";
    int R_used = 1;
    /// Outer iterations of the nonlinear solver; 0 for closed-form solves.
    int iterations = 0;
    double condition_number = 1.0;
    bool jittered = false;
    int skipped_draws = 0;
};

/// Weighted least squares over projected records:
/// (sum w U U')^{-1} sum w U z.
inline GlobalEstimate gral_solve(std::span<const ProjectedRecord> records, bool allow_jitter = false)
{
    if (records.empty())
        throw ConfigError("gral_solve: no records");
    const Eigen::Index p = records.front().U.size();
    if (static_cast<Eigen::Index>(records.size()) < p)
        throw SingularSystemError("gral_solve: fewer records than parameters; the aggregated matrix "
                                  "sum w U U' cannot be positive definite",
                                  std::numeric_limits<double>::infinity());
    CompensatedSum<Matrix> lhs(p, p);
    CompensatedSum<Vector> rhs(p, 1);
    for (const auto& rec : records) {
        if (rec.U.size() != p)
            throw ConfigError("gral_solve: records disagree on dimension");
        lhs.add(rec.w * rec.U * rec.U.transpose());
        rhs.add(rec.w * rec.z * rec.U);
    }
    Matrix A = lhs.value();
    const Vector b = rhs.value();

    GlobalEstimate out;
    out.method = "gral";
    out.condition_number = spd_condition(A);
    if (!(out.condition_number <= kConditionCeiling)) {
        if (!allow_jitter)
            throw SingularSystemError("gral_solve: positive-definiteness condition violated, sum w U U' has "
                                      "condition number " + std::to_string(out.condition_number),
                                      out.condition_number);
        A.diagonal().array() += 1e-10 * A.trace() / static_cast<double>(p);
        out.jittered = true;
        out.condition_number = spd_condition(A);
    }
    out.beta = solve_spd(A, b, "gral_solve");
    return out;
}

enum class ThresholdMode { none, hard, soft };

inline GlobalEstimate threshold(const GlobalEstimate& est, double t, ThresholdMode mode)
{
    if (!(t >= 0.0))
        throw ConfigError("threshold: t must be nonnegative");
    GlobalEstimate out = est;
    for (Eigen::Index k = 0; k < out.beta.size(); ++k) {
        const double v = est.beta(k);
        if (mode == ThresholdMode::hard)
            out.beta(k) = std::abs(v) > t ? v : 0.0;
        else if (mode == ThresholdMode::soft)
            out.beta(k) = v > 0.0 ? std::max(v - t, 0.0) : -std::max(-v - t, 0.0);
    }
    return out;
}

/// sqrt(log p / n)
inline double default_threshold(int p, long n) { return std::sqrt(std::log(static_cast<double>(p)) / static_cast<double>(n)); }

/// Fraction of projection draws allowed to fail the positive-definiteness check.
inline constexpr double kMaxSkippedDrawFraction = 0.1;

/// Coordinator side of the linear race-DC: works only on shipped summaries.
inline GlobalEstimate race_linear(std::span<const LinearSummary> summaries, const AdjustmentSpec& adj,
                                  const ProjectionSpec& proj)
{
    adj.validate();
    proj.validate();
    if (summaries.empty())
        throw ConfigError("race_linear: no batches");
    const auto p = static_cast<int>(summaries.front().gram.rows());

    std::vector<PreparedSummary> prepared;
    prepared.reserve(summaries.size());
    for (const auto& s : summaries)
        prepared.emplace_back(s, adj);

    auto records_for_draw = [&](int r, std::vector<ProjectedRecord>& out) {
        for (std::size_t j = 0; j < prepared.size(); ++j)
            out.push_back(prepared[j].project(draw_projection(p, proj, summaries[j].batch_id, r), r));
    };

    GlobalEstimate out;
    out.method = "race";
    if (proj.combine == ProjectionCombine::stacked) {
        std::vector<ProjectedRecord> records;
        records.reserve(summaries.size() * proj.R);
        for (int r = 0; r < proj.R; ++r)
            records_for_draw(r, records);
        GlobalEstimate g = gral_solve(records);
        out.beta = g.beta;
        out.condition_number = g.condition_number;
        out.R_used = proj.R;
        out.method = "race_stacked";
        return out;
    }

    CompensatedSum<Vector> total(p, 1);
    double worst_condition = 1.0;
    int used = 0;
    int skipped = 0;
    std::vector<ProjectedRecord> records;
    records.reserve(summaries.size());
    for (int r = 0; r < proj.R; ++r) {
        records.clear();
        records_for_draw(r, records);
        try {
            GlobalEstimate g = gral_solve(records);
            total.add(g.beta);
            worst_condition = std::max(worst_condition, g.condition_number);
            ++used;
        } catch (const SingularSystemError&) {
            ++skipped;
        }
    }
    if (used == 0 || skipped > kMaxSkippedDrawFraction * proj.R)
        throw SingularSystemError("race_linear: positive-definiteness condition failed for " + std::to_string(skipped) +
                                      " of " + std::to_string(proj.R) + " projection draws",
                                  std::numeric_limits<double>::infinity());
    out.beta = total.value() / static_cast<double>(used);
    out.R_used = used;
    out.skipped_draws = skipped;
    out.condition_number = worst_condition;
    return out;
}

inline GlobalEstimate race_linear(std::span<const DataBatch> batches, std::span<const LocalFit> fits,
                                  const AdjustmentSpec& adj, const ProjectionSpec& proj)
{
    if (batches.size() != fits.size())
        throw ConfigError("race_linear: batches and fits differ in count");
    std::vector<LinearSummary> summaries;
    summaries.reserve(batches.size());
    for (std::size_t j = 0; j < batches.size(); ++j)
        summaries.push_back(summarize_linear(batches[j], fits[j], adj));
    return race_linear(summaries, adj, proj);
}

// ---------------------------------------------------------------------------
// Nonlinear race-DC

struct NonlinearSolveOptions {
    /// Stop when every component of the update is below this.
    double tol = 1e-4;
    int max_outer = 25;
    int max_halvings = 10;
};

/// Returns the compressed evaluations (one per batch, in summary order) at a global iterate.
using NonlinearEvaluator = std::function<std::vector<NonlinearEvaluation>(const Vector& beta)>;

namespace detail {

struct NonlinearDesign {
    int p = 0;
    int R = 0;
    std::vector<std::vector<Vector>> eta; // [draw][batch]
    std::vector<std::vector<double>> z;
    std::vector<std::vector<double>> w;
};

inline NonlinearDesign nonlinear_design(std::span<const NonlinearSummary> summaries, const ProjectionSpec& proj)
{
    NonlinearDesign d;
    d.p = static_cast<int>(summaries.front().response.size());
    d.R = proj.R;
    d.eta.resize(proj.R);
    d.z.resize(proj.R);
    d.w.resize(proj.R);
    for (int r = 0; r < proj.R; ++r) {
        for (const auto& s : summaries) {
            const Vector eta = draw_projection(d.p, proj, s.batch_id, r);
            const NonlinearRecord rec = project_nonlinear(s, eta, r);
            d.eta[r].push_back(eta);
            d.z[r].push_back(rec.z);
            d.w[r].push_back(rec.w);
        }
    }
    return d;
}

struct NonlinearSystem {
    double objective = 0.0;
    Matrix A;
    Vector g;
};

/// Linearization of sum_r sum_j w (z - eta' hf)^2 at the evaluation point.
inline NonlinearSystem nonlinear_system(const NonlinearDesign& d, std::span<const NonlinearEvaluation> evals)
{
    CompensatedScalar q;
    CompensatedSum<Matrix> A(d.p, d.p);
    CompensatedSum<Vector> g(d.p, 1);
    for (int r = 0; r < d.R; ++r) {
        for (std::size_t j = 0; j < evals.size(); ++j) {
            const Vector& eta = d.eta[r][j];
            const double resid = d.z[r][j] - eta.dot(evals[j].hf);
            const Vector W = evals[j].hj.transpose() * eta;
            const double w = d.w[r][j];
            q.add(w * resid * resid);
            A.add(w * W * W.transpose());
            g.add(w * resid * W);
        }
    }
    return {q.value(), A.value(), g.value()};
}

inline void check_evaluations(std::span<const NonlinearSummary> summaries, std::span<const NonlinearEvaluation> evals)
{
    if (evals.size() != summaries.size())
        throw ConfigError("race_nonlinear: evaluator returned the wrong number of batches");
    for (std::size_t j = 0; j < evals.size(); ++j)
        if (evals[j].batch_id != summaries[j].batch_id)
            throw ConfigError("race_nonlinear: evaluations out of batch order");
}

} // namespace detail

/// Coordinator side of the iterative nonlinear race-DC. Each call to `evaluate`
/// is one exchange of compressed data with the workers. Projections are drawn
/// once and reused at every iteration; all N*R records enter one objective.
inline GlobalEstimate race_nonlinear(std::span<const NonlinearSummary> summaries, const NonlinearEvaluator& evaluate,
                                     const ProjectionSpec& proj, const Vector& init, const NonlinearSolveOptions& opts)
{
    proj.validate();
    if (summaries.empty())
        throw ConfigError("race_nonlinear: no batches");
    if (!(opts.tol > 0.0) || opts.max_outer < 1)
        throw ConfigError("race_nonlinear: tol must be positive and max_outer >= 1");
    if (!init.allFinite() || init.size() != summaries.front().response.size())
        throw ConfigError("race_nonlinear: initial value must be finite with dimension p");

    const detail::NonlinearDesign design = detail::nonlinear_design(summaries, proj);

    Vector beta = init;
    Vector prev_beta;
    double prev_objective = 0.0;
    bool have_prev = false;
    int halvings = 0;
    double last_step = std::numeric_limits<double>::infinity();

    for (int round = 1; round <= opts.max_outer; ++round) {
        const auto evals = evaluate(beta);
        detail::check_evaluations(summaries, evals);
        const auto sys = detail::nonlinear_system(design, evals);

        if (have_prev && sys.objective > prev_objective * (1.0 + 1e-12) && halvings < opts.max_halvings) {
            beta = prev_beta + 0.5 * (beta - prev_beta);
            ++halvings;
            continue;
        }
        halvings = 0;

        double cond = 0.0;
        Vector step;
        try {
            step = solve_spd(sys.A, sys.g, "race_nonlinear", &cond);
        } catch (const SingularSystemError& e) {
            throw SingularSystemError(
                "race_nonlinear: positive-definiteness condition on sum w W W' violated at iteration " +
                    std::to_string(round),
                e.condition());
        }
        last_step = step.cwiseAbs().maxCoeff();
        if (last_step < opts.tol) {
            GlobalEstimate out;
            out.method = "race";
            out.beta = beta + step;
            out.iterations = round;
            out.R_used = proj.R;
            out.condition_number = cond;
            return out;
        }
        prev_beta = beta;
        prev_objective = sys.objective;
        have_prev = true;
        beta += step;
    }
    throw ConvergenceError("race_nonlinear: no convergence within " + std::to_string(opts.max_outer) +
                               " outer iterations (last step " + std::to_string(last_step) + ")",
                           last_step);
}

/// In-process driver: builds H_j and the compressed quantities directly from the batches.
template <RegressionFunction F>
GlobalEstimate race_nonlinear(std::span<const DataBatch> batches, std::span<const LocalFit> fits, const F& f,
                              const AdjustmentSpec& adj, const ProjectionSpec& proj,
                              const std::optional<Vector>& init = std::nullopt, const NonlinearSolveOptions& opts = {})
{
    if (batches.size() != fits.size() || batches.empty())
        throw ConfigError("race_nonlinear: batches and fits must be nonempty and equal in count");
    std::vector<Matrix> H;
    std::vector<NonlinearSummary> summaries;
    for (std::size_t j = 0; j < batches.size(); ++j) {
        H.push_back(build_H(batches[j], fits[j], f, adj.k1));
        summaries.push_back(summarize_nonlinear(batches[j], fits[j], H.back(), f));
    }
    NonlinearEvaluator evaluate = [&](const Vector& beta) {
        std::vector<NonlinearEvaluation> out;
        out.reserve(batches.size());
        for (std::size_t j = 0; j < batches.size(); ++j)
            out.push_back(evaluate_compressed(batches[j], H[j], f, beta));
        return out;
    };
    return race_nonlinear(summaries, evaluate, proj, init.value_or(fits.front().beta_hat), opts);
}

/// Norm of the averaged estimating equation (1/NR) sum w W (z - eta' hf) at the
/// point where `evals` were computed.
inline double solver_residual_check(std::span<const NonlinearSummary> summaries,
                                    std::span<const NonlinearEvaluation> evals, const ProjectionSpec& proj)
{
    detail::check_evaluations(summaries, evals);
    const auto design = detail::nonlinear_design(summaries, proj);
    const auto sys = detail::nonlinear_system(design, evals);
    return sys.g.norm() / static_cast<double>(summaries.size() * static_cast<std::size_t>(proj.R));
}

template <RegressionFunction F>
double solver_residual_check(const Vector& beta, std::span<const DataBatch> batches, std::span<const LocalFit> fits,
                             const F& f, const AdjustmentSpec& adj, const ProjectionSpec& proj)
{
    std::vector<NonlinearSummary> summaries;
    std::vector<NonlinearEvaluation> evals;
    for (std::size_t j = 0; j < batches.size(); ++j) {
        const Matrix H = build_H(batches[j], fits[j], f, adj.k1);
        summaries.push_back(summarize_nonlinear(batches[j], fits[j], H, f));
        evals.push_back(evaluate_compressed(batches[j], H, f, beta));
    }
    return solver_residual_check(summaries, evals, proj);
}

} // namespace racedc

#endif
