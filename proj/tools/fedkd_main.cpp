// fedkd command line: config-driven experiment runner with ablation modes,
// threshold sweeps and singular-value energy reports.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedkd/errors.hpp"
#include "fedkd/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::vector<double> parse_values(const std::string& csv) {
    std::vector<double> values;
    std::stringstream ss(csv);
    std::string token;
    while (std::getline(ss, token, ',')) {
        if (token.empty()) {
            continue;
        }
        std::size_t consumed = 0;
        values.push_back(std::stod(token, &consumed));
        if (consumed != token.size()) {
            throw fedkd::ConfigError("bad sweep value '" + token + "'");
        }
    }
    if (values.empty()) {
        throw fedkd::ConfigError("--values is empty");
    }
    return values;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"FedKD federated-learning simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_override;
    std::string sweep_param;
    std::string sweep_values;
    std::string run_dir;
    bool parallel = false;

    CLI::App* run_cmd = app.add_subcommand("run", "Run one experiment from a config file");
    run_cmd->add_option("--config", config_path, "Config file (key=value or JSON)")->required();
    run_cmd->add_option("--out", out_override, "Override the output directory");

    CLI::App* sweep_cmd = app.add_subcommand("sweep", "Run one experiment per parameter value");
    sweep_cmd->add_option("--config", config_path, "Config file (key=value or JSON)")->required();
    sweep_cmd->add_option("--param", sweep_param, "t_start, t_end or n_clients")->required();
    sweep_cmd->add_option("--values", sweep_values, "Comma-separated values")->required();
    sweep_cmd->add_option("--out", out_override, "Override the output directory");
    sweep_cmd->add_flag("--parallel", parallel, "Run the sweep points concurrently");

    CLI::App* energy_cmd = app.add_subcommand("report-energy", "Summarize recorded singular-value spectra");
    energy_cmd->add_option("--run", run_dir, "Output directory of a run with record.sigmas = true")
        ->required();

    std::string checkpoint_path;
    CLI::App* inspect_cmd = app.add_subcommand("inspect", "List the contents of a parameter checkpoint");
    inspect_cmd->add_option("--checkpoint", checkpoint_path, "A .fkdp file written by run")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (run_cmd->parsed()) {
            fedkd::ExperimentConfig config = fedkd::load_config(config_path);
            if (!out_override.empty()) {
                config.output_dir = out_override;
            }
            fedkd::RunResult result = fedkd::run_experiment(config);
            std::cout << "run complete: " << (result.out_dir / "summary.json").string() << "\n";
            const auto& final_section = result.summary.at("final");
            std::cout << "student accuracy: " << final_section.at("student").at("accuracy").get<double>()
                      << "\n";
            if (final_section.contains("teacher_accuracy_mean")) {
                std::cout << "teacher accuracy (mean): "
                          << final_section.at("teacher_accuracy_mean").get<double>() << "\n";
            }
        } else if (sweep_cmd->parsed()) {
            fedkd::ExperimentConfig config = fedkd::load_config(config_path);
            if (!out_override.empty()) {
                config.output_dir = out_override;
            }
            const std::vector<fedkd::SweepRow> rows =
                fedkd::sweep(config, sweep_param, parse_values(sweep_values), parallel);
            std::cout << "value,accuracy,total_bytes\n";
            for (const fedkd::SweepRow& row : rows) {
                std::cout << nlohmann::json(row.value).dump() << ","
                          << nlohmann::json(row.accuracy).dump() << "," << row.total_bytes << "\n";
            }
        } else if (energy_cmd->parsed()) {
            fedkd::report_singular_energy(run_dir);
            std::cout << "wrote energy_curves.csv and required_rank.csv in " << run_dir << "\n";
        } else if (inspect_cmd->parsed()) {
            const fedkd::ParamSet params = fedkd::load_params(checkpoint_path);
            const auto& c = params.config();
            std::cout << "layers=" << c.num_layers << " hidden=" << c.hidden_dim
                      << " heads=" << c.num_heads << " input=" << c.input_dim
                      << " classes=" << c.num_classes << " seq_len=" << c.seq_len << "\n";
            for (const auto& [name, m] : params.values()) {
                std::cout << name << " " << m.rows() << "x" << m.cols() << " |.|=" << m.norm() << "\n";
            }
            std::cout << "total parameters: " << params.parameter_count() << "\n";
        }
    } catch (const fedkd::NumericError& e) {
        std::cerr << "numeric divergence: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const fedkd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const fedkd::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const fedkd::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
