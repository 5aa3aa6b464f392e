// racedc run: replicate one of the simulation designs and write metrics.csv,
// plotdata.csv and (optionally) a protocol trace.
//
// Exit codes: 0 success, 1 configuration error, 2 excessive method failures,
// 3 any other runtime error.

#include "racedc.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

namespace {

void print_summary(const racedc::MetricsReport& report)
{
    std::printf("%-10s %6s %8s %8s %14s %10s %10s\n", "method", "N", "ok", "failed", "summed_mse", "mean_it",
                "median_it");
    for (const auto& s : report.methods) {
        double mse = 0.0;
        try {
            mse = report.summed_mse(s.method, s.N);
        } catch (const racedc::Error&) {
        }
        std::printf("%-10s %6d %8d %8d %14.6g %10.3g %10.3g\n", s.method.c_str(), s.N, s.successes, s.failures, mse,
                    s.mean_iterations, s.median_iterations);
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"race-DC divide-and-combine estimation: simulation harness"};
    app.require_subcommand(1);
    CLI::App* run = app.add_subcommand("run", "run a replication study");

    racedc::ExperimentConfig cfg;
    std::string experiment = "lasso";
    std::string mean_mode = "iid";
    std::string tuning = "hk";
    std::string out_dir = ".";
    std::string trace_path;
    bool paper_scale = false;
    bool stacked = false;
    bool unit_weights = false;

    run->add_option("--experiment", experiment, "lasso | ridge | pce | nonlinear")
        ->check(CLI::IsMember({"lasso", "ridge", "pce", "nonlinear"}));
    run->add_option("--n", cfg.n, "total sample size");
    run->add_option("--batches", cfg.N_list, "batch counts, e.g. --batches 20,80")->delimiter(',');
    run->add_option("--reps", cfg.reps, "replications");
    run->add_option("--projections", cfg.R, "projection draws per batch");
    run->add_option("--k1", cfg.k1, "ridge parameter of the adjustment inverse");
    run->add_option("--k2", cfg.k2, "ridge parameter of the projected variance");
    run->add_option("--seed", cfg.seed, "root seed");
    run->add_option("--mean-mode", mean_mode, "iid | noniid")->check(CLI::IsMember({"iid", "noniid"}));
    run->add_option("--tuning", tuning, "ridge value rule: hk | cv")->check(CLI::IsMember({"hk", "cv"}));
    run->add_option("--pce-rank", cfg.pce_rank, "principal components kept");
    run->add_option("--threads", cfg.threads, "worker threads (0 = all cores)");
    run->add_option("--out", out_dir, "output directory");
    run->add_flag("--paper-scale", paper_scale, "n=10000, reps=500, R=200, N in {50,100,200,400}");
    run->add_option("--protocol-trace", trace_path, "write the NDJSON message trace of replication 0 here");
    run->add_flag("--stacked-projections", stacked, "one weighted solve over all projection draws");
    run->add_flag("--unit-weights", unit_weights, "unit record weights instead of inverse projected variance");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        cfg.experiment = racedc::parse_experiment(experiment);
        if (paper_scale)
            cfg.apply_paper_scale();
        cfg.mean_mode = mean_mode == "noniid" ? racedc::MeanMode::batch_means : racedc::MeanMode::identical;
        cfg.tuning = tuning == "cv" ? racedc::RidgeRule::cv : racedc::RidgeRule::hk;
        cfg.combine = stacked ? racedc::ProjectionCombine::stacked : racedc::ProjectionCombine::average;
        cfg.weight_mode = unit_weights ? racedc::WeightMode::unit : racedc::WeightMode::ridge_sigma;
        cfg.output_dir = out_dir;
        cfg.validate();

        std::filesystem::create_directories(out_dir);
        if (!trace_path.empty()) {
            std::filesystem::remove(trace_path);
            cfg.trace_path = trace_path;
        }

        racedc::MetricsReport report;
        int code = 0;
        try {
            report = racedc::run_experiment(cfg, &report);
        } catch (const racedc::ExcessiveFailureError& e) {
            std::cerr << "racedc: " << e.what() << '\n';
            code = 2;
        }
        const std::filesystem::path dir(out_dir);
        racedc::emit_csv(report, (dir / "metrics.csv").string());
        racedc::emit_plotdata(report, (dir / "plotdata.csv").string());
        print_summary(report);
        return code;
    } catch (const racedc::ConfigError& e) {
        std::cerr << "racedc: configuration error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "racedc: " << e.what() << '\n';
        return 3;
    }
}
