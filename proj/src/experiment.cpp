#include "fedkd/experiment.hpp"

#include <cmath>
#include <fstream>
#include <future>
#include <sstream>

#include "fedkd/errors.hpp"

namespace fedkd {

namespace {

nlohmann::json breakdown_json(const LossBreakdown& b, bool with_teacher) {
    nlohmann::json j;
    j["task_student"] = b.task_student;
    j["distill_student"] = b.distill_student;
    j["hidden"] = b.hidden;
    j["total_student"] = b.total_student;
    if (with_teacher) {
        j["task_teacher"] = b.task_teacher;
        j["distill_teacher"] = b.distill_teacher;
        j["total_teacher"] = b.total_teacher;
    }
    return j;
}

nlohmann::json eval_json(const EvalReport& report) {
    nlohmann::json j;
    j["accuracy"] = report.accuracy;
    j["total"] = report.total;
    nlohmann::json per_class = nlohmann::json::array();
    for (const ClassMetrics& m : report.per_class) {
        per_class.push_back({{"precision", m.precision},
                             {"recall", m.recall},
                             {"f1", m.f1},
                             {"support", m.support}});
    }
    j["per_class"] = per_class;
    return j;
}

std::vector<Sample> build_dataset(const ExperimentConfig& config, Rng& data_rng) {
    if (config.data_kind == "csv") {
        return load_csv(config.data_csv_path, config.data_seq_len, config.data_input_dim);
    }
    SyntheticSpec spec;
    spec.num_samples = config.data_samples;
    spec.num_classes = config.data_classes;
    spec.seq_len = config.data_seq_len;
    spec.input_dim = config.data_input_dim;
    spec.noise = config.data_noise;
    return gen_synthetic(spec, data_rng);
}

struct PreparedRun {
    std::vector<Sample> eval_set;
    Federation federation;
};

Federation build_federation(const ExperimentConfig& config, std::vector<ClientShard> shards) {
    const Rng root(config.seed);
    const bool with_teacher = mode_uses_teacher(config.mode);

    // In the fedavg baselines the "shared model" slot holds a single model
    // of the configured architecture: the full teacher net for fedavg_full,
    // the student net for fedavg_student_only.
    ModelConfig shared_config =
        config.mode == Mode::FedavgFull ? config.teacher_config() : config.student_config();

    Rng student_rng = root.derive(seed_stream::kStudentInit);
    const ParamSet shared_init = init_model(shared_config, student_rng);

    std::vector<ClientState> clients;
    clients.reserve(shards.size());
    for (ClientShard& shard : shards) {
        ClientState state;
        state.client_id = shard.client_id;
        state.student = shared_init;
        state.shard = std::move(shard.samples);
        state.batch_rng = root.derive(seed_stream::kClientBatch + static_cast<std::uint64_t>(shard.client_id));
        if (with_teacher) {
            Rng teacher_rng =
                root.derive(seed_stream::kTeacherInit + static_cast<std::uint64_t>(shard.client_id));
            state.teacher = init_model(config.teacher_config(), teacher_rng);
            state.w_h = init_projection(config.teacher_hidden_dim, config.student_hidden_dim);
            state.layer_map = uniform_layer_map(config.student_layers, config.teacher_layers);
        }
        clients.push_back(std::move(state));
    }

    FedOptions options;
    options.eta_teacher = config.eta_t;
    options.eta_student = config.eta_s;
    options.schedule = ThresholdSchedule{config.t_start, config.t_end, config.total_rounds};
    options.distill.mutual_distillation = config.mode != Mode::FedkdNoDistill;
    options.distill.hidden_alignment = config.mode != Mode::FedkdNoHidden;
    options.distill.adaptive_weighting = config.mode != Mode::FedkdNoAdaptive;
    options.use_teacher = with_teacher;
    options.compress = mode_uses_compression(config.mode);
    options.optimizer = config.optimizer;
    options.batch_size = config.batch_size;
    options.local_steps = config.local_steps;
    options.client_fraction = config.client_fraction;
    options.sampler_seed = root.derive(seed_stream::kSampler).seed();
    options.record_sigmas = config.record_sigmas;

    return Federation(std::move(options), std::move(clients), make_codec(config.codec));
}

PreparedRun prepare_run(const ExperimentConfig& config) {
    config.validate();
    const Rng root(config.seed);

    Rng data_rng = root.derive(seed_stream::kData);
    std::vector<Sample> dataset = build_dataset(config, data_rng);

    Rng split_rng = root.derive(seed_stream::kSplit);
    auto [train_set, eval_set] = split_train_eval(dataset, config.eval_fraction, split_rng);
    if (eval_set.empty()) {
        throw ConfigError("eval split is empty; increase eval.fraction or the dataset size");
    }

    Rng partition_rng = root.derive(seed_stream::kPartition);
    std::vector<ClientShard> shards =
        config.data_partition == "dirichlet"
            ? partition_dirichlet(train_set, config.n_clients, config.data_dirichlet_alpha, partition_rng)
            : partition(train_set, config.n_clients, partition_rng);
    for (const ClientShard& shard : shards) {
        if (shard.samples.empty()) {
            throw ConfigError("client " + std::to_string(shard.client_id) +
                              " received an empty shard; use more samples or fewer clients");
        }
    }

    return PreparedRun{std::move(eval_set), build_federation(config, std::move(shards))};
}

} // namespace

RunResult run_experiment(const ExperimentConfig& config) {
    PreparedRun run = prepare_run(config);
    Federation& fed = run.federation;
    const bool with_teacher = fed.options().use_teacher;
    const int n = config.n_clients;

    const std::filesystem::path out_dir(config.output_dir);
    std::filesystem::create_directories(out_dir);
    std::ofstream metrics_out(out_dir / "metrics.jsonl");
    if (!metrics_out) {
        throw IoError("cannot write metrics to " + (out_dir / "metrics.jsonl").string());
    }
    std::ofstream sigma_out;
    if (config.record_sigmas) {
        sigma_out.open(out_dir / "sigmas.jsonl");
        if (!sigma_out) {
            throw IoError("cannot write sigma snapshots");
        }
    }
    {
        std::ofstream echo(out_dir / "config.echo");
        echo << serialize_config(config);
    }

    std::size_t raw_payload_bytes = 0;
    std::size_t encoded_payload_bytes = 0;
    std::map<std::string, std::vector<int>> broadcast_rank_history;

    for (int round = 0; round < config.total_rounds; ++round) {
        RoundMetrics rm = fed.run_round();

        const bool eval_now = config.eval_every > 0 && (round + 1) % config.eval_every == 0;
        FederationEval eval;
        if (eval_now) {
            eval = evaluate(fed, run.eval_set);
        }

        LossBreakdown student_mean;
        int participants = 0;
        std::size_t upload_total = 0;
        std::size_t download_total = 0;
        for (const RoundClientMetrics& cm : rm.clients) {
            upload_total += cm.upload_bytes;
            download_total += cm.download_bytes;
            if (!cm.participated) {
                continue;
            }
            ++participants;
            student_mean.task_student += cm.losses.task_student;
            student_mean.distill_student += cm.losses.distill_student;
            student_mean.hidden += cm.losses.hidden;
            student_mean.total_student += cm.losses.total_student;
            raw_payload_bytes += cm.upload_size.raw_bytes;
            encoded_payload_bytes += cm.upload_size.encoded_bytes;
        }
        raw_payload_bytes += rm.broadcast_size.raw_bytes;
        encoded_payload_bytes += rm.broadcast_size.encoded_bytes;
        if (participants > 0) {
            const double inv = 1.0 / participants;
            student_mean.task_student *= inv;
            student_mean.distill_student *= inv;
            student_mean.hidden *= inv;
            student_mean.total_student *= inv;
        }

        if (with_teacher) {
            for (const RoundClientMetrics& cm : rm.clients) {
                if (!cm.participated) {
                    continue;
                }
                nlohmann::json line;
                line["round"] = round;
                line["model"] = "teacher_" + std::to_string(cm.client_id);
                line["threshold"] = rm.threshold;
                line["losses"] = breakdown_json(cm.losses, true);
                line["upload_bytes"] = cm.upload_bytes;
                line["download_bytes"] = cm.download_bytes;
                line["k_values"] = cm.upload_ranks;
                if (eval_now) {
                    line["accuracy"] = eval.teachers.at(static_cast<std::size_t>(cm.client_id)).accuracy;
                }
                metrics_out << line.dump() << "\n";
            }
        }
        {
            nlohmann::json line;
            line["round"] = round;
            line["model"] = "student";
            line["threshold"] = rm.threshold;
            line["losses"] = breakdown_json(student_mean, false);
            line["upload_bytes"] = upload_total;
            line["download_bytes"] = download_total;
            line["k_values"] = rm.broadcast_ranks;
            if (eval_now) {
                line["accuracy"] = eval.student.accuracy;
            }
            metrics_out << line.dump() << "\n";
        }

        for (const auto& [name, rank] : rm.broadcast_ranks) {
            broadcast_rank_history[name].push_back(rank);
        }
        if (config.record_sigmas) {
            for (const auto& [name, sigma] : rm.aggregate_sigmas) {
                nlohmann::json line;
                line["round"] = round;
                line["param"] = name;
                std::vector<double> values(sigma.data(), sigma.data() + sigma.size());
                line["sigma"] = values;
                sigma_out << line.dump() << "\n";
            }
        }
    }

    const FederationEval final_eval = evaluate(fed, run.eval_set);

    nlohmann::json summary;
    summary["config"] = config_to_json(config);
    summary["rounds"] = config.total_rounds;
    summary["mode"] = to_string(config.mode);

    nlohmann::json final_section;
    final_section["student"] = eval_json(final_eval.student);
    if (with_teacher) {
        nlohmann::json teachers = nlohmann::json::array();
        double mean_acc = 0.0;
        for (const EvalReport& report : final_eval.teachers) {
            teachers.push_back(eval_json(report));
            mean_acc += report.accuracy;
        }
        final_section["teachers"] = teachers;
        final_section["teacher_accuracy_mean"] = mean_acc / static_cast<double>(final_eval.teachers.size());
    }
    summary["final"] = final_section;

    const CommLedger& ledger = fed.ledger();
    nlohmann::json comm;
    std::vector<std::size_t> upload_per_client;
    std::vector<std::size_t> download_per_client;
    for (int c = 0; c < n; ++c) {
        upload_per_client.push_back(ledger.total_upload(c));
        download_per_client.push_back(ledger.total_download(c));
    }
    comm["per_client_upload_bytes"] = upload_per_client;
    comm["per_client_download_bytes"] = download_per_client;
    comm["total_upload_bytes"] = ledger.grand_total_upload();
    comm["total_download_bytes"] = ledger.grand_total_download();
    comm["total_bytes"] = ledger.grand_total_upload() + ledger.grand_total_download();
    comm["raw_payload_bytes"] = raw_payload_bytes;
    comm["encoded_payload_bytes"] = encoded_payload_bytes;
    comm["rho"] = encoded_payload_bytes > 0
                      ? static_cast<double>(raw_payload_bytes) / static_cast<double>(encoded_payload_bytes)
                      : 1.0;

    // Cost of moving the full teacher-architecture gradient instead, per
    // client per round, both directions: the fedavg_full reference.
    {
        Rng probe_rng(0);
        const ParamSet probe = init_model(config.teacher_config(), probe_rng);
        GradSet zero_grads = zeros_like(probe);
        Envelope env;
        env.codec = config.codec;
        env.payload = encode_payload(factorize_raw(zero_grads));
        const std::size_t full_message = encode_envelope(env).size();
        const std::size_t reference_per_client =
            2 * full_message * static_cast<std::size_t>(config.total_rounds);
        comm["reference_full_bytes_per_client"] = reference_per_client;
        double mean_client_total = 0.0;
        for (int c = 0; c < n; ++c) {
            mean_client_total += static_cast<double>(upload_per_client[static_cast<std::size_t>(c)] +
                                                     download_per_client[static_cast<std::size_t>(c)]);
        }
        mean_client_total /= static_cast<double>(n);
        comm["per_client_total_mean"] = mean_client_total;
        comm["saving_vs_full_reference"] =
            mean_client_total > 0.0 ? static_cast<double>(reference_per_client) / mean_client_total : 0.0;
    }
    summary["communication"] = comm;

    nlohmann::json k_stats;
    for (const auto& [name, ranks] : broadcast_rank_history) {
        int lo = ranks.front();
        int hi = ranks.front();
        double mean = 0.0;
        for (int r : ranks) {
            lo = std::min(lo, r);
            hi = std::max(hi, r);
            mean += r;
        }
        mean /= static_cast<double>(ranks.size());
        k_stats[name] = {{"min", lo}, {"max", hi}, {"mean", mean}};
    }
    summary["k_stats"] = k_stats;

    {
        std::ofstream summary_out(out_dir / "summary.json");
        if (!summary_out) {
            throw IoError("cannot write summary.json");
        }
        summary_out << summary.dump(2) << "\n";
    }

    if (config.save_models) {
        save_params(fed.clients().front().student, out_dir / "student.fkdp");
        if (with_teacher) {
            for (const ClientState& client : fed.clients()) {
                save_params(*client.teacher,
                            out_dir / ("teacher_" + std::to_string(client.client_id) + ".fkdp"));
            }
        }
    }

    return RunResult{std::move(summary), out_dir};
}

std::vector<SweepRow> sweep(const ExperimentConfig& base, const std::string& param,
                            const std::vector<double>& values, bool parallel) {
    if (param != "t_start" && param != "t_end" && param != "n_clients") {
        throw ConfigError("sweep parameter must be t_start, t_end or n_clients");
    }
    if (values.empty()) {
        throw ConfigError("sweep needs at least one value");
    }

    auto run_one = [&](double value) -> SweepRow {
        ExperimentConfig config = base;
        if (param == "t_start") {
            config.t_start = value;
        } else if (param == "t_end") {
            config.t_end = value;
        } else {
            const int n = static_cast<int>(value);
            if (static_cast<double>(n) != value || n < 1) {
                throw ConfigError("n_clients sweep values must be positive integers");
            }
            config.n_clients = n;
        }
        std::ostringstream tag;
        tag << param << "_" << value;
        config.output_dir = (std::filesystem::path(base.output_dir) / tag.str()).string();
        RunResult result = run_experiment(config);

        SweepRow row;
        row.value = value;
        const auto& final_section = result.summary.at("final");
        row.accuracy = final_section.contains("teacher_accuracy_mean")
                           ? final_section.at("teacher_accuracy_mean").get<double>()
                           : final_section.at("student").at("accuracy").get<double>();
        row.total_bytes = result.summary.at("communication").at("total_bytes").get<std::size_t>();
        return row;
    };

    std::vector<SweepRow> rows(values.size());
    if (parallel) {
        std::vector<std::future<SweepRow>> futures;
        futures.reserve(values.size());
        for (double value : values) {
            futures.push_back(std::async(std::launch::async, run_one, value));
        }
        for (std::size_t i = 0; i < futures.size(); ++i) {
            rows[i] = futures[i].get();
        }
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) {
            rows[i] = run_one(values[i]);
        }
    }

    std::filesystem::create_directories(base.output_dir);
    const std::filesystem::path table_path =
        std::filesystem::path(base.output_dir) / ("sweep_" + param + ".csv");
    std::ofstream out(table_path);
    if (!out) {
        throw IoError("cannot write " + table_path.string());
    }
    out << "value,accuracy,total_bytes\n";
    for (const SweepRow& row : rows) {
        // Shortest text that parses back exactly, same as the config format.
        out << nlohmann::json(row.value).dump() << "," << nlohmann::json(row.accuracy).dump() << ","
            << row.total_bytes << "\n";
    }
    return rows;
}

void report_singular_energy(const std::filesystem::path& run_dir) {
    const std::filesystem::path snapshot_path = run_dir / "sigmas.jsonl";
    std::ifstream in(snapshot_path);
    if (!in) {
        throw IoError("no sigma snapshots at " + snapshot_path.string() +
                      " (run with record.sigmas = true)");
    }

    std::ofstream energy_out(run_dir / "energy_curves.csv");
    std::ofstream rank_out(run_dir / "required_rank.csv");
    if (!energy_out || !rank_out) {
        throw IoError("cannot write energy report");
    }
    energy_out << "round,parameter,index,cumulative_energy\n";
    rank_out << "round,parameter,k_at_t95\n";

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw ParseError("sigmas.jsonl line " + std::to_string(line_no) + ": bad JSON");
        }
        const int round = j.at("round").get<int>();
        const std::string param = j.at("param").get<std::string>();
        const std::vector<double> sigma = j.at("sigma").get<std::vector<double>>();
        if (sigma.empty()) {
            continue;
        }
        double total = 0.0;
        for (double s : sigma) {
            total += s * s;
        }
        double cum = 0.0;
        for (std::size_t i = 0; i < sigma.size(); ++i) {
            cum += sigma[i] * sigma[i];
            energy_out << round << "," << param << "," << i << ","
                       << nlohmann::json(total > 0.0 ? cum / total : 1.0).dump() << "\n";
        }
        Vector sv = Eigen::Map<const Vector>(sigma.data(), static_cast<Eigen::Index>(sigma.size()));
        rank_out << round << "," << param << "," << select_rank(sv, 0.95) << "\n";
    }
}

} // namespace fedkd
