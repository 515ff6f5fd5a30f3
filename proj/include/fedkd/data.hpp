#pragma once

#include <filesystem>
#include <vector>

#include "fedkd/matrix.hpp"
#include "fedkd/rng.hpp"

namespace fedkd {

// One labelled sequence: a seq_len x input_dim feature matrix and a class
// index in [0, num_classes).
struct Sample {
    Matrix features;
    int label = 0;
};

struct ClientShard {
    int client_id = 0;
    std::vector<Sample> samples;
};

struct SyntheticSpec {
    int num_samples = 0;
    int num_classes = 2;
    int seq_len = 4;
    int input_dim = 8;
    double noise = 0.0;
};

// Class-conditional Gaussian sequences: one anchor matrix per class, samples
// are anchor + noise * N(0,1). Classes are balanced within +/-1 and the
// sample order is shuffled. noise=0 makes the classes exactly separable by
// nearest anchor.
std::vector<Sample> gen_synthetic(const SyntheticSpec& spec, Rng& rng);

// Random IID split into n_clients disjoint shards whose sizes differ by at
// most one.
std::vector<ClientShard> partition(const std::vector<Sample>& samples, int n_clients, Rng& rng);

// Label-skewed split: per-class client proportions drawn from a symmetric
// Dirichlet(alpha). Shard sizes are uneven on purpose.
std::vector<ClientShard> partition_dirichlet(const std::vector<Sample>& samples, int n_clients,
                                             double alpha, Rng& rng);

// CSV schema: header "label,f0,f1,...", one sample per row, feature count
// must equal seq_len * input_dim (row-major reshape).
std::vector<Sample> load_csv(const std::filesystem::path& path, int seq_len, int input_dim);

void save_csv(const std::filesystem::path& path, const std::vector<Sample>& samples);

// Deterministic shuffled holdout: returns {train, eval} with
// round(fraction * n) samples in eval.
std::pair<std::vector<Sample>, std::vector<Sample>> split_train_eval(const std::vector<Sample>& samples,
                                                                     double eval_fraction, Rng& rng);

} // namespace fedkd
