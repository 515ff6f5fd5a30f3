#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "fedkd/nn.hpp"

namespace fedkd {

// Training protocol variants. The fedkd_* modes are ablations that zero
// exactly one ingredient; the fedavg_* modes train a single shared model
// with plain task loss and uncompressed payloads.
enum class Mode {
    Fedkd,
    FedkdNoAdaptive, // adaptive loss weighting off (denominators fixed to 1)
    FedkdNoHidden,   // hidden-state/attention alignment off
    FedkdNoDistill,  // mutual distillation (KL terms) off
    FedavgFull,      // shared model uses the teacher architecture, raw gradients
    FedavgStudentOnly,
};

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& text);

bool mode_uses_teacher(Mode mode);
bool mode_uses_compression(Mode mode);

// Flat experiment configuration. Accepted as "key = value" text (one pair
// per line, '#' comments) or as a flat JSON object with the same keys; env
// vars FEDKD_<KEY> (dots and dashes mapped to underscores, upper-cased)
// override any key.
struct ExperimentConfig {
    std::uint64_t seed = 42;
    int n_clients = 4;
    int total_rounds = 100;
    Mode mode = Mode::Fedkd;
    std::string codec = "identity";
    int batch_size = 16;
    int local_steps = 1;
    double client_fraction = 1.0;
    std::string optimizer = "sgd"; // teacher-side: sgd | adam
    double eta_t = 0.1;
    double eta_s = 0.1;
    double t_start = 0.95;
    double t_end = 0.98;

    int teacher_layers = 4;
    int teacher_hidden_dim = 32;
    int teacher_heads = 4;
    int student_layers = 2;
    int student_hidden_dim = 32;
    int student_heads = 4;

    std::string data_kind = "synthetic"; // synthetic | csv
    int data_samples = 2000;
    int data_classes = 4;
    int data_seq_len = 8;
    int data_input_dim = 16;
    double data_noise = 0.3;
    std::string data_csv_path;
    std::string data_partition = "iid"; // iid | dirichlet
    double data_dirichlet_alpha = 0.5;

    double eval_fraction = 0.2;
    int eval_every = 0; // 0 = evaluate only at the end
    bool record_sigmas = false;
    bool save_models = true;
    std::string output_dir = "fedkd_out";

    ModelConfig teacher_config() const;
    ModelConfig student_config() const;
    void validate() const;

    bool operator==(const ExperimentConfig&) const = default;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path, bool apply_env = true);
void apply_env_overrides(ExperimentConfig& config);

// Canonical "key = value" form, keys sorted; parsing it back is a fixed
// point.
std::string serialize_config(const ExperimentConfig& config);
nlohmann::json config_to_json(const ExperimentConfig& config);

} // namespace fedkd
