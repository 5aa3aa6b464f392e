#ifndef RACEDC_EXPERIMENT_HPP
#define RACEDC_EXPERIMENT_HPP

// Monte Carlo replication harness for the four simulation designs: per-rep
// data generation, every applicable estimator, and bias/MSE reduction.

#include "racedc/aggregate.hpp"
#include "racedc/baselines.hpp"
#include "racedc/core.hpp"
#include "racedc/datagen.hpp"
#include "racedc/local_estimators.hpp"
#include "racedc/protocol.hpp"
#include "racedc/remodel.hpp"
#include "racedc/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace racedc {

enum class ExperimentKind { lasso, ridge, pce, nonlinear };

inline std::string to_string(ExperimentKind k)
{
    switch (k) {
    case ExperimentKind::lasso: return "lasso";
    case ExperimentKind::ridge: return "ridge";
    case ExperimentKind::pce: return "pce";
    case ExperimentKind::nonlinear: return "nonlinear";
    }
    return "unknown";
}

inline ExperimentKind parse_experiment(const std::string& s)
{
    if (s == "lasso") return ExperimentKind::lasso;
    if (s == "ridge") return ExperimentKind::ridge;
    if (s == "pce") return ExperimentKind::pce;
    if (s == "nonlinear") return ExperimentKind::nonlinear;
    throw ConfigError("unknown experiment '" + s + "'");
}

class ExcessiveFailureError : public Error {
public:
    using Error::Error;
};

inline constexpr double kMaxFailureFraction = 0.2;

struct ExperimentConfig {
    ExperimentKind experiment = ExperimentKind::lasso;
    int n = 2000;
    std::vector<int> N_list{50};
    int reps = 100;
    int R = 50;
    double k1 = 0.1;
    double k2 = 0.1;
    std::uint64_t seed = 1;
    MeanMode mean_mode = MeanMode::identical;
    RidgeRule tuning = RidgeRule::hk;
    int pce_rank = 4;
    /// Thresholded race variants reported in the lasso experiment.
    std::vector<ThresholdMode> threshold_modes{ThresholdMode::hard, ThresholdMode::soft};
    /// Threshold level; defaults to sqrt(log p / n).
    std::optional<double> threshold;
    WeightMode weight_mode = WeightMode::ridge_sigma;
    ProjectionCombine combine = ProjectionCombine::average;
    /// Keep only the first p_truncate coefficients of the built-in truth.
    std::optional<int> p_truncate;
    std::optional<double> noise_var;
    /// Replace the design's local estimator (e.g. ridge fits in the lasso design).
    std::optional<LocalEstimator> estimator;
    /// Restrict to these method names; empty means all applicable.
    std::vector<std::string> methods;
    NonlinearSolveOptions solve;
    unsigned threads = 0;
    /// Append the protocol trace of replication 0 (one session per method and N).
    std::string trace_path;
    std::string output_dir;

    void validate() const
    {
        if (reps < 1)
            throw ConfigError("reps must be >= 1");
        if (n < 1)
            throw ConfigError("n must be >= 1");
        if (N_list.empty())
            throw ConfigError("at least one batch count is required");
        for (int N : N_list) {
            if (N < 1)
                throw ConfigError("batch counts must be >= 1");
            if (n % N != 0)
                throw ConfigError("n = " + std::to_string(n) + " is not divisible by N = " + std::to_string(N));
        }
        if (R < 1)
            throw ConfigError("projections must be >= 1");
        if (!(k1 > 0.0) || !(k2 > 0.0))
            throw ConfigError("k1 and k2 must be positive");
        if (pce_rank < 1)
            throw ConfigError("pce rank must be >= 1");
        if (p_truncate && *p_truncate < 1)
            throw ConfigError("p truncation must be >= 1");
        if (noise_var && !(*noise_var >= 0.0))
            throw ConfigError("noise variance must be nonnegative");
        if (experiment == ExperimentKind::nonlinear && mean_mode != MeanMode::identical)
            throw ConfigError("the nonlinear design has identically distributed batches only");
        if (!(solve.tol > 0.0) || solve.max_outer < 1)
            throw ConfigError("solver tolerance must be positive and max_outer >= 1");
    }

    /// n = 10000, 500 replications, R = 200, N in {50, 100, 200, 400}.
    void apply_paper_scale()
    {
        n = 10000;
        reps = 500;
        R = 200;
        N_list = {50, 100, 200, 400};
    }
};

/// Built-in designs.
struct Design {
    Vector beta;
    double noise_var = 1.0;
    CovarianceSpec cov;
    LocalEstimator estimator = LocalEstimator::lasso;
};

inline Design builtin_design(ExperimentKind k)
{
    Design d;
    switch (k) {
    case ExperimentKind::lasso:
        d.beta = Vector::Zero(30);
        d.beta.head(5) << 3.0, 2.0, 1.0, 0.5, -2.0;
        d.noise_var = 4.0;
        d.cov = {CovarianceKind::ar1, 0.5};
        d.estimator = LocalEstimator::lasso;
        break;
    case ExperimentKind::ridge:
        d.beta = Vector(6);
        d.beta << 2.0, 1.5, 1.0, 0.5, -2.0, 0.0;
        d.noise_var = 4.0;
        d.cov = {CovarianceKind::equicorrelated, 0.95};
        d.estimator = LocalEstimator::ridge;
        break;
    case ExperimentKind::pce:
        d.beta = Vector(6);
        d.beta << 3.0, 2.0, 1.0, -1.0, -2.0, 0.0;
        d.noise_var = 0.25;
        d.cov = {CovarianceKind::equicorrelated, 0.9};
        d.estimator = LocalEstimator::pce;
        break;
    case ExperimentKind::nonlinear:
        d.beta = Vector(4);
        d.beta << 2.0, 1.0, -2.0, 0.0;
        d.noise_var = 1.0;
        d.cov = {CovarianceKind::ar1, 0.5};
        d.estimator = LocalEstimator::ols;
        break;
    }
    return d;
}

inline Design resolved_design(const ExperimentConfig& cfg)
{
    Design d = builtin_design(cfg.experiment);
    if (cfg.p_truncate) {
        if (*cfg.p_truncate > d.beta.size())
            throw ConfigError("p truncation exceeds the design dimension");
        d.beta = Vector(d.beta.head(*cfg.p_truncate));
    }
    if (cfg.noise_var)
        d.noise_var = *cfg.noise_var;
    if (cfg.estimator) {
        if (cfg.experiment == ExperimentKind::nonlinear)
            throw ConfigError("the nonlinear design uses least squares local fits only");
        d.estimator = *cfg.estimator;
    }
    return d;
}

inline std::vector<std::string> experiment_methods(const ExperimentConfig& cfg)
{
    std::vector<std::string> all;
    switch (cfg.experiment) {
    case ExperimentKind::lasso:
        all = {"race"};
        for (auto m : cfg.threshold_modes) {
            if (m == ThresholdMode::hard) all.push_back("race_ht");
            if (m == ThresholdMode::soft) all.push_back("race_st");
        }
        all.insert(all.end(), {"AV", "DC_lasso", "Full"});
        break;
    case ExperimentKind::ridge: all = {"race", "AV", "DC_ridge", "Full"}; break;
    case ExperimentKind::pce: all = {"race", "AV", "DC_pce", "Full"}; break;
    case ExperimentKind::nonlinear: all = {"race", "AV", "AEE", "Full"}; break;
    }
    if (cfg.methods.empty())
        return all;
    for (const auto& m : cfg.methods)
        if (std::find(all.begin(), all.end(), m) == all.end())
            throw ConfigError("method '" + m + "' does not apply to the " + to_string(cfg.experiment) + " experiment");
    std::vector<std::string> out;
    for (const auto& m : all)
        if (std::find(cfg.methods.begin(), cfg.methods.end(), m) != cfg.methods.end())
            out.push_back(m);
    return out;
}

/// Estimates of every method in one replication; nullopt marks a failure.
struct RepOutcome {
    std::map<std::string, std::optional<Vector>> estimates;
    std::optional<int> iterations;
    std::vector<TraceEntry> trace;
};

struct MetricCell {
    std::string method;
    int N = 0;
    int component = 0; // 1-based
    double bias = 0.0;
    double mse = 0.0;
    double mc_stderr = 0.0;
};

struct MethodSummary {
    std::string method;
    int N = 0;
    int successes = 0;
    int failures = 0;
    double mean_iterations = 0.0;
    double median_iterations = 0.0;
};

struct MetricsReport {
    std::string experiment;
    Vector beta_true;
    std::vector<MetricCell> cells;
    std::vector<MethodSummary> methods;
    /// Per-rep errors (estimate - truth) of the successful reps, keyed by (method, N).
    std::map<std::pair<std::string, int>, std::vector<Vector>> errors;
    /// Outer iterations of the successful race fits, in replication order, keyed by N.
    std::map<int, std::vector<int>> race_iterations;

    const MethodSummary& summary(const std::string& method, int N) const
    {
        for (const auto& s : methods)
            if (s.method == method && s.N == N)
                return s;
        throw Error("no summary for " + method + " at N = " + std::to_string(N));
    }

    /// Sum over components of the per-component MSE.
    double summed_mse(const std::string& method, int N) const
    {
        double total = 0.0;
        bool found = false;
        for (const auto& c : cells)
            if (c.method == method && c.N == N) {
                total += c.mse;
                found = true;
            }
        if (!found)
            throw Error("no cells for " + method + " at N = " + std::to_string(N));
        return total;
    }
};

namespace detail {

inline std::uint64_t rep_key(std::uint64_t seed, int rep, int N)
{
    return derive_key(seed, Stream::replication, {static_cast<std::uint64_t>(rep), static_cast<std::uint64_t>(N)});
}

template <typename Fn>
void record(RepOutcome& out, const std::string& name, const std::vector<std::string>& wanted, Fn&& fn)
{
    if (std::find(wanted.begin(), wanted.end(), name) == wanted.end())
        return;
    try {
        out.estimates[name] = fn();
    } catch (const Error&) {
        out.estimates[name] = std::nullopt;
    }
}

inline bool wants(const std::vector<std::string>& wanted, const std::string& name)
{
    return std::find(wanted.begin(), wanted.end(), name) != wanted.end();
}

inline RepOutcome run_linear_rep(const ExperimentConfig& cfg, const Design& d, const std::vector<std::string>& wanted,
                                 int N, int rep, bool with_trace)
{
    const std::uint64_t key = rep_key(cfg.seed, rep, N);
    const LinearModelSpec spec{d.beta, d.noise_var, d.cov, cfg.mean_mode};
    const auto batches = gen_linear_batches(spec, N, cfg.n / N, key);
    const auto p = static_cast<int>(d.beta.size());

    LocalFitConfig local;
    local.estimator = d.estimator;
    local.ridge_rule = cfg.tuning;
    local.pce_rank = cfg.pce_rank;
    local.seed = key;
    const AdjustmentSpec adj{cfg.k1, cfg.k2, cfg.weight_mode, AdjustmentKind::ridge};
    ProjectionSpec proj;
    proj.R = cfg.R;
    proj.seed = key;
    proj.combine = cfg.combine;

    RepOutcome out;
    std::optional<std::vector<LocalFit>> fits;
    try {
        std::vector<LocalFit> f;
        f.reserve(batches.size());
        for (const auto& b : batches)
            f.push_back(fit_local(b, local));
        fits = std::move(f);
    } catch (const Error&) {
    }
    auto need_fits = [&]() -> const std::vector<LocalFit>& {
        if (!fits)
            throw Error("local fits failed");
        return *fits;
    };

    std::optional<GlobalEstimate> race;
    if (wants(wanted, "race") || wants(wanted, "race_ht") || wants(wanted, "race_st")) {
        try {
            race = race_linear(batches, need_fits(), adj, proj);
        } catch (const Error&) {
        }
    }
    auto need_race = [&]() -> const GlobalEstimate& {
        if (!race)
            throw Error("race failed");
        return *race;
    };
    const double t = cfg.threshold.value_or(default_threshold(p, cfg.n));

    record(out, "race", wanted, [&] { return need_race().beta; });
    record(out, "race_ht", wanted, [&] { return threshold(need_race(), t, ThresholdMode::hard).beta; });
    record(out, "race_st", wanted, [&] { return threshold(need_race(), t, ThresholdMode::soft).beta; });
    record(out, "AV", wanted, [&] {
        if (d.estimator == LocalEstimator::pce) {
            std::vector<Matrix> grams;
            for (const auto& b : batches)
                grams.push_back(pce_gram_summary(b));
            const Matrix basis = pce_broadcast_basis(grams, cfg.pce_rank);
            std::vector<LocalFit> shared;
            for (const auto& b : batches)
                shared.push_back(fit_local(b, local, &basis));
            return simple_average_pce(batches, shared, cfg.k1).beta;
        }
        return simple_average_adjusted(batches, need_fits(), cfg.k1).beta;
    });
    record(out, "DC_lasso", wanted, [&] { return dc_lasso(need_fits()).beta; });
    record(out, "DC_ridge", wanted, [&] { return dc_ridge(need_fits()).beta; });
    record(out, "DC_pce", wanted, [&] { return dc_pce(batches, cfg.pce_rank).beta; });
    record(out, "Full", wanted, [&] { return full_oracle(batches, local, cfg.k1).beta; });

    if (with_trace) {
        LinearSessionConfig sc{local, adj, proj};
        const std::pair<const char*, SessionMethod> plans[] = {{"race", SessionMethod::race},
                                                               {"AV", SessionMethod::AV},
                                                               {"DC_lasso", SessionMethod::DC_lasso},
                                                               {"DC_ridge", SessionMethod::DC_ridge},
                                                               {"DC_pce", SessionMethod::DC_pce}};
        for (const auto& [name, method] : plans) {
            if (!wants(wanted, name))
                continue;
            try {
                const auto session = run_linear_session(batches, method, sc);
                out.trace.insert(out.trace.end(), session.trace.begin(), session.trace.end());
            } catch (const FirewallViolation&) {
                throw;
            } catch (const Error&) {
            }
        }
    }
    return out;
}

inline RepOutcome run_nonlinear_rep(const ExperimentConfig& cfg, const Design& d,
                                    const std::vector<std::string>& wanted, int N, int rep, bool with_trace)
{
    const std::uint64_t key = rep_key(cfg.seed, rep, N);
    const NonlinearModelSpec spec{d.beta, d.noise_var, d.cov, ShiftedSquareFunction{}};
    const auto batches = gen_nonlinear_batches(spec, N, cfg.n / N, key);
    const ShiftedSquareFunction f = spec.f;
    auto starts = [&f](const DataBatch& b) { return f.starting_values(b.X, b.y); };
    const AdjustmentSpec adj{cfg.k1, cfg.k2, WeightMode::ridge_sigma, AdjustmentKind::ridge};
    ProjectionSpec proj;
    proj.R = cfg.R;
    proj.seed = key;

    RepOutcome out;
    std::optional<std::vector<LocalFit>> fits;
    try {
        std::vector<LocalFit> fs;
        for (const auto& b : batches)
            fs.push_back(nls_fit_multistart(b, f, starts(b)));
        fits = std::move(fs);
    } catch (const Error&) {
    }
    auto need_fits = [&]() -> const std::vector<LocalFit>& {
        if (!fits)
            throw Error("local fits failed");
        return *fits;
    };

    record(out, "race", wanted, [&] {
        const GlobalEstimate g = race_nonlinear(batches, need_fits(), f, adj, proj, std::nullopt, cfg.solve);
        out.iterations = g.iterations;
        return g.beta;
    });
    record(out, "AV", wanted, [&] {
        const auto& fs = need_fits();
        std::vector<Vector> adjusted;
        for (std::size_t j = 0; j < batches.size(); ++j)
            adjusted.push_back(residual_adjust_nonlinear(batches[j], fs[j], build_H(batches[j], fs[j], f, cfg.k1), f));
        return simple_average(adjusted).beta;
    });
    record(out, "AEE", wanted, [&] { return aee_nonlinear(need_fits()).beta; });
    record(out, "Full", wanted, [&] {
        const DataBatch all = pool(batches);
        return nls_fit_multistart(all, f, starts(all)).beta_hat;
    });

    if (with_trace && wants(wanted, "race")) {
        NonlinearSessionConfig sc;
        sc.adj = adj;
        sc.proj = proj;
        sc.solve = cfg.solve;
        sc.local_starts = starts;
        try {
            out.trace = run_nonlinear_session(batches, f, sc).trace;
        } catch (const FirewallViolation&) {
            throw;
        } catch (const Error&) {
        }
    }
    return out;
}

/// Run body(i) for i in [0, count) on `threads` workers; each index writes only its own slot.
template <typename Body>
void parallel_for(int count, unsigned threads, Body&& body)
{
    if (threads == 0)
        threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max(count, 1)));
    if (threads <= 1) {
        for (int i = 0; i < count; ++i)
            body(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (int i = next++; i < count; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error)
                        error = std::current_exception();
                }
            }
        });
    for (auto& th : pool)
        th.join();
    if (error)
        std::rethrow_exception(error);
}

} // namespace detail

/// Reduce stored per-rep errors to per-component bias, MSE and Monte Carlo standard error.
inline std::vector<MetricCell> reduce_errors(const std::string& method, int N, const std::vector<Vector>& errors,
                                             Eigen::Index p)
{
    std::vector<MetricCell> cells;
    const auto k = static_cast<double>(errors.size());
    for (Eigen::Index c = 0; c < p; ++c) {
        MetricCell cell{method, N, static_cast<int>(c + 1), 0.0, 0.0, 0.0};
        if (!errors.empty()) {
            CompensatedScalar sum, sq;
            for (const auto& e : errors) {
                sum.add(e(c));
                sq.add(e(c) * e(c));
            }
            cell.bias = sum.value() / k;
            cell.mse = sq.value() / k;
            if (errors.size() > 1) {
                CompensatedScalar dev;
                for (const auto& e : errors)
                    dev.add((e(c) - cell.bias) * (e(c) - cell.bias));
                cell.mc_stderr = std::sqrt(dev.value() / (k - 1.0) / k);
            }
        }
        cells.push_back(cell);
    }
    return cells;
}

/// Full replication study. Throws ExcessiveFailureError (after reducing) when
/// any method fails in more than 20% of replications; the partial report is
/// available through `partial` in that case.
inline MetricsReport run_experiment(const ExperimentConfig& cfg, MetricsReport* partial = nullptr)
{
    cfg.validate();
    const Design d = resolved_design(cfg);
    const auto wanted = experiment_methods(cfg);

    MetricsReport report;
    report.experiment = to_string(cfg.experiment);
    report.beta_true = d.beta;
    std::vector<TraceEntry> trace;
    std::string failure_message;

    for (int N : cfg.N_list) {
        std::vector<RepOutcome> outcomes(static_cast<std::size_t>(cfg.reps));
        detail::parallel_for(cfg.reps, cfg.threads, [&](int rep) {
            const bool with_trace = rep == 0 && !cfg.trace_path.empty();
            outcomes[static_cast<std::size_t>(rep)] =
                cfg.experiment == ExperimentKind::nonlinear
                    ? detail::run_nonlinear_rep(cfg, d, wanted, N, rep, with_trace)
                    : detail::run_linear_rep(cfg, d, wanted, N, rep, with_trace);
        });
        trace.insert(trace.end(), outcomes.front().trace.begin(), outcomes.front().trace.end());

        for (const auto& method : wanted) {
            MethodSummary s{method, N, 0, 0, 0.0, 0.0};
            std::vector<Vector>& errs = report.errors[{method, N}];
            std::vector<int> iters;
            for (const auto& o : outcomes) {
                const auto it = o.estimates.find(method);
                if (it == o.estimates.end() || !it->second) {
                    ++s.failures;
                    continue;
                }
                ++s.successes;
                errs.push_back(*it->second - d.beta);
                if (method == "race" && o.iterations)
                    iters.push_back(*o.iterations);
            }
            if (method == "race")
                report.race_iterations[N] = iters;
            if (!iters.empty()) {
                double total = 0.0;
                for (int i : iters)
                    total += i;
                s.mean_iterations = total / static_cast<double>(iters.size());
                std::sort(iters.begin(), iters.end());
                const std::size_t h = iters.size() / 2;
                s.median_iterations = iters.size() % 2 ? iters[h] : 0.5 * (iters[h - 1] + iters[h]);
            }
            if (s.failures > kMaxFailureFraction * cfg.reps && failure_message.empty())
                failure_message = method + " failed in " + std::to_string(s.failures) + " of " +
                                  std::to_string(cfg.reps) + " replications at N = " + std::to_string(N);
            report.methods.push_back(s);
            const auto cells = reduce_errors(method, N, errs, d.beta.size());
            report.cells.insert(report.cells.end(), cells.begin(), cells.end());
        }
    }

    if (!cfg.trace_path.empty())
        write_trace(trace, cfg.trace_path);
    if (!failure_message.empty()) {
        if (partial)
            *partial = report;
        throw ExcessiveFailureError("excessive failures: " + failure_message);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Output

inline std::string format_real(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<MetricCell> sorted_cells(const MetricsReport& report)
{
    auto cells = report.cells;
    std::sort(cells.begin(), cells.end(), [](const MetricCell& a, const MetricCell& b) {
        return std::tie(a.method, a.N, a.component) < std::tie(b.method, b.N, b.component);
    });
    return cells;
}

inline void emit_csv(const MetricsReport& report, std::ostream& os)
{
    os << "experiment,method,N,component_index,bias,mse,mc_stderr\n";
    for (const auto& c : sorted_cells(report))
        os << report.experiment << ',' << c.method << ',' << c.N << ',' << c.component << ',' << format_real(c.bias)
           << ',' << format_real(c.mse) << ',' << format_real(c.mc_stderr) << '\n';
}

/// Long format: one row per (method, N, component, metric).
inline void emit_plotdata(const MetricsReport& report, std::ostream& os)
{
    os << "experiment,method,N,component_index,metric,value\n";
    for (const auto& c : sorted_cells(report)) {
        const std::string prefix =
            report.experiment + ',' + c.method + ',' + std::to_string(c.N) + ',' + std::to_string(c.component) + ',';
        os << prefix << "bias," << format_real(c.bias) << '\n';
        os << prefix << "mse," << format_real(c.mse) << '\n';
    }
}

namespace detail {

template <typename Emit>
void write_file(const std::string& path, Emit&& emit)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error("cannot open " + path + " for writing");
    emit(os);
    os.flush();
    if (!os)
        throw Error("write to " + path + " failed");
}

} // namespace detail

inline void emit_csv(const MetricsReport& report, const std::string& path)
{
    detail::write_file(path, [&](std::ostream& os) { emit_csv(report, os); });
}

inline void emit_plotdata(const MetricsReport& report, const std::string& path)
{
    detail::write_file(path, [&](std::ostream& os) { emit_plotdata(report, os); });
}

} // namespace racedc

#endif
