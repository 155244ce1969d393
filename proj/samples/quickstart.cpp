// Runs the whole pipeline in-process for a handful of ablation cells on one
// seed and prints the query metrics. Optional argument: a run config JSON
// whose sections override the defaults (bench.cells / bench.seeds included).

#include "cags/config.hpp"

#include <cstdio>
#include <fstream>

int main(int argc, char** argv) {
    using namespace cags;
    RunConfig cfg;
    cfg.train.iterations = 500;
    cfg.bench_seeds = {0};
    cfg.bench_cells = {
        {"per-mask", 0.3, 2, LossVariant::per_mask},
        {"per-mask+cohesion", 0.3, 2, LossVariant::per_mask_cohesion},
        {"clean", 0.0, 2, LossVariant::per_mask},
    };
    if (argc > 1) {
        std::ifstream in(argv[1]);
        if (!in) {
            std::fprintf(stderr, "cannot open %s\n", argv[1]);
            return 2;
        }
        try {
            cfg = parse_run_config(nlohmann::json::parse(in));
        } catch (const std::exception& e) {
            std::fprintf(stderr, "%s\n", e.what());
            return 3;
        }
    }

    const BenchmarkConfig bench = cfg.benchmark();
    std::printf("%-22s %5s %7s %7s %8s %6s %9s\n", "cell", "seed", "mIoU", "mAcc", "clusters", "noise", "loss");
    for (const auto& cell : bench.cells)
        for (const auto seed : bench.seeds) {
            const CellRun r = run_cell(bench, cell, seed);
            std::printf("%-22s %5llu %7.3f %7.3f %8d %6.2f %9.3f\n", r.cell.c_str(),
                        static_cast<unsigned long long>(r.seed), r.miou, r.macc25, r.num_clusters, r.noise_fraction,
                        r.final_loss);
        }
    return 0;
}
