#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "fedkd/config.hpp"
#include "fedkd/federation.hpp"

namespace fedkd {

struct RunResult {
    nlohmann::json summary;
    std::filesystem::path out_dir;
};

// Builds the dataset, shards and client states from the config, drives
// total_rounds protocol rounds, and writes metrics.jsonl, summary.json,
// config.echo and (optionally) checkpoints and sigma snapshots into the
// output directory.
RunResult run_experiment(const ExperimentConfig& config);

// Deterministic per-purpose seed streams derived from the config seed.
// Exposed so tests can rebuild the exact datasets and models of a run.
namespace seed_stream {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kSplit = 2;
inline constexpr std::uint64_t kPartition = 3;
inline constexpr std::uint64_t kStudentInit = 4;
inline constexpr std::uint64_t kSampler = 5;
inline constexpr std::uint64_t kTeacherInit = 100; // + client id
inline constexpr std::uint64_t kClientBatch = 200; // + client id
} // namespace seed_stream

struct SweepRow {
    double value = 0.0;
    double accuracy = 0.0;
    std::size_t total_bytes = 0;
};

// One run per value of `param` (t_start, t_end or n_clients); each run goes
// to its own subdirectory and the aggregated table lands in
// sweep_<param>.csv. The reported accuracy belongs to the inference model
// (mean over teachers when present, otherwise the shared model).
std::vector<SweepRow> sweep(const ExperimentConfig& base, const std::string& param,
                            const std::vector<double>& values, bool parallel = false);

// Reads sigmas.jsonl from a recorded run and writes energy_curves.csv
// (round, parameter, index, cumulative energy fraction) and
// required_rank.csv (round, parameter, rank needed at T = 0.95).
void report_singular_energy(const std::filesystem::path& run_dir);

} // namespace fedkd
