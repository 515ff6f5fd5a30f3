#include "fedkd/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <variant>
#include <vector>

#include "fedkd/errors.hpp"

namespace fedkd {

namespace {

using FieldPtr = std::variant<std::uint64_t ExperimentConfig::*, int ExperimentConfig::*,
                              double ExperimentConfig::*, bool ExperimentConfig::*,
                              std::string ExperimentConfig::*, Mode ExperimentConfig::*>;

struct FieldDesc {
    const char* key;
    FieldPtr ptr;
};

// Sorted by key; serialization emits them in this order.
const std::vector<FieldDesc>& fields() {
    static const std::vector<FieldDesc> table = {
        {"batch_size", &ExperimentConfig::batch_size},
        {"client_fraction", &ExperimentConfig::client_fraction},
        {"codec", &ExperimentConfig::codec},
        {"data.classes", &ExperimentConfig::data_classes},
        {"data.csv_path", &ExperimentConfig::data_csv_path},
        {"data.dirichlet_alpha", &ExperimentConfig::data_dirichlet_alpha},
        {"data.input_dim", &ExperimentConfig::data_input_dim},
        {"data.kind", &ExperimentConfig::data_kind},
        {"data.noise", &ExperimentConfig::data_noise},
        {"data.partition", &ExperimentConfig::data_partition},
        {"data.samples", &ExperimentConfig::data_samples},
        {"data.seq_len", &ExperimentConfig::data_seq_len},
        {"eta_s", &ExperimentConfig::eta_s},
        {"eta_t", &ExperimentConfig::eta_t},
        {"eval.every", &ExperimentConfig::eval_every},
        {"eval.fraction", &ExperimentConfig::eval_fraction},
        {"local_steps", &ExperimentConfig::local_steps},
        {"mode", &ExperimentConfig::mode},
        {"n_clients", &ExperimentConfig::n_clients},
        {"optimizer", &ExperimentConfig::optimizer},
        {"output.dir", &ExperimentConfig::output_dir},
        {"record.sigmas", &ExperimentConfig::record_sigmas},
        {"save.models", &ExperimentConfig::save_models},
        {"seed", &ExperimentConfig::seed},
        {"student.heads", &ExperimentConfig::student_heads},
        {"student.hidden_dim", &ExperimentConfig::student_hidden_dim},
        {"student.layers", &ExperimentConfig::student_layers},
        {"t_end", &ExperimentConfig::t_end},
        {"t_start", &ExperimentConfig::t_start},
        {"teacher.heads", &ExperimentConfig::teacher_heads},
        {"teacher.hidden_dim", &ExperimentConfig::teacher_hidden_dim},
        {"teacher.layers", &ExperimentConfig::teacher_layers},
        {"total_rounds", &ExperimentConfig::total_rounds},
    };
    return table;
}

std::string trim(const std::string& s) {
    std::size_t begin = 0;
    std::size_t end = s.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(s[begin]))) {
        ++begin;
    }
    while (end > begin && std::isspace(static_cast<unsigned char>(s[end - 1]))) {
        --end;
    }
    return s.substr(begin, end - begin);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* begin = value.data();
    const char* end = begin + value.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc{} || ptr != end) {
        throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
    }
    return out;
}

void set_field(ExperimentConfig& config, const FieldDesc& desc, const std::string& raw) {
    const std::string value = trim(raw);
    const std::string key = desc.key;
    std::visit(
        [&](auto member) {
            using T = std::remove_cvref_t<decltype(config.*member)>;
            if constexpr (std::is_same_v<T, std::uint64_t> || std::is_same_v<T, int>) {
                config.*member = parse_number<T>(key, value);
            } else if constexpr (std::is_same_v<T, double>) {
                config.*member = parse_number<double>(key, value);
            } else if constexpr (std::is_same_v<T, bool>) {
                if (value == "true") {
                    config.*member = true;
                } else if (value == "false") {
                    config.*member = false;
                } else {
                    throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
                }
            } else if constexpr (std::is_same_v<T, Mode>) {
                config.*member = mode_from_string(value);
            } else {
                config.*member = value;
            }
        },
        desc.ptr);
}

std::string get_field(const ExperimentConfig& config, const FieldDesc& desc) {
    return std::visit(
        [&](auto member) -> std::string {
            using T = std::remove_cvref_t<decltype(config.*member)>;
            if constexpr (std::is_same_v<T, bool>) {
                return (config.*member) ? "true" : "false";
            } else if constexpr (std::is_same_v<T, Mode>) {
                return to_string(config.*member);
            } else if constexpr (std::is_same_v<T, std::string>) {
                return config.*member;
            } else {
                // nlohmann prints the shortest text that parses back to the
                // same value, which keeps serialize/parse a fixed point.
                return nlohmann::json(config.*member).dump();
            }
        },
        desc.ptr);
}

const FieldDesc& find_field(const std::string& key) {
    for (const FieldDesc& desc : fields()) {
        if (key == desc.key) {
            return desc;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
    ExperimentConfig config;
    for (const auto& [key, value] : pairs) {
        set_field(config, find_field(key), value);
    }
    return config;
}

std::string env_name(const std::string& key) {
    std::string name = "FEDKD_";
    for (char c : key) {
        if (c == '.' || c == '-') {
            name.push_back('_');
        } else {
            name.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
        }
    }
    return name;
}

} // namespace

std::string to_string(Mode mode) {
    switch (mode) {
    case Mode::Fedkd:
        return "fedkd";
    case Mode::FedkdNoAdaptive:
        return "fedkd_no_adaptive";
    case Mode::FedkdNoHidden:
        return "fedkd_no_hidden";
    case Mode::FedkdNoDistill:
        return "fedkd_no_distill";
    case Mode::FedavgFull:
        return "fedavg_full";
    case Mode::FedavgStudentOnly:
        return "fedavg_student_only";
    }
    throw ConfigError("unhandled mode");
}

Mode mode_from_string(const std::string& text) {
    if (text == "fedkd") return Mode::Fedkd;
    if (text == "fedkd_no_adaptive") return Mode::FedkdNoAdaptive;
    if (text == "fedkd_no_hidden") return Mode::FedkdNoHidden;
    if (text == "fedkd_no_distill") return Mode::FedkdNoDistill;
    if (text == "fedavg_full") return Mode::FedavgFull;
    if (text == "fedavg_student_only") return Mode::FedavgStudentOnly;
    throw ConfigError("unknown mode '" + text + "'");
}

bool mode_uses_teacher(Mode mode) {
    return mode == Mode::Fedkd || mode == Mode::FedkdNoAdaptive || mode == Mode::FedkdNoHidden ||
           mode == Mode::FedkdNoDistill;
}

bool mode_uses_compression(Mode mode) {
    return mode_uses_teacher(mode);
}

ModelConfig ExperimentConfig::teacher_config() const {
    ModelConfig c;
    c.num_layers = teacher_layers;
    c.hidden_dim = teacher_hidden_dim;
    c.num_heads = teacher_heads;
    c.input_dim = data_input_dim;
    c.num_classes = data_classes;
    c.seq_len = data_seq_len;
    return c;
}

ModelConfig ExperimentConfig::student_config() const {
    ModelConfig c;
    c.num_layers = student_layers;
    c.hidden_dim = student_hidden_dim;
    c.num_heads = student_heads;
    c.input_dim = data_input_dim;
    c.num_classes = data_classes;
    c.seq_len = data_seq_len;
    return c;
}

void ExperimentConfig::validate() const {
    if (n_clients < 1) {
        throw ConfigError("n_clients must be >= 1");
    }
    if (total_rounds < 1) {
        throw ConfigError("total_rounds must be >= 1");
    }
    if (batch_size < 1 || local_steps < 1) {
        throw ConfigError("batch_size and local_steps must be >= 1");
    }
    if (eta_t <= 0.0 || eta_s <= 0.0) {
        throw ConfigError("learning rates must be > 0");
    }
    if (t_start <= 0.0 || t_start > 1.0 || t_end <= 0.0 || t_end > 1.0) {
        throw ConfigError("thresholds must be in (0, 1]");
    }
    if (client_fraction <= 0.0 || client_fraction > 1.0) {
        throw ConfigError("client_fraction must be in (0, 1]");
    }
    if (optimizer != "sgd" && optimizer != "adam") {
        throw ConfigError("optimizer must be sgd or adam");
    }
    if (data_kind != "synthetic" && data_kind != "csv") {
        throw ConfigError("data.kind must be synthetic or csv");
    }
    if (data_kind == "csv" && data_csv_path.empty()) {
        throw ConfigError("data.kind=csv needs data.csv_path");
    }
    if (data_partition != "iid" && data_partition != "dirichlet") {
        throw ConfigError("data.partition must be iid or dirichlet");
    }
    if (eval_fraction <= 0.0 || eval_fraction >= 1.0) {
        throw ConfigError("eval.fraction must be in (0, 1)");
    }
    if (eval_every < 0) {
        throw ConfigError("eval.every must be >= 0");
    }
    student_config().validate();
    if (mode_uses_teacher(mode)) {
        teacher_config().validate();
        if (student_layers > teacher_layers) {
            throw ConfigError("student must not be deeper than the teacher");
        }
        if (mode != Mode::FedkdNoHidden && student_heads != teacher_heads) {
            throw ConfigError("attention alignment needs matching head counts");
        }
    }
    for (const FieldDesc& desc : fields()) {
        if (std::holds_alternative<std::string ExperimentConfig::*>(desc.ptr)) {
            const auto member = std::get<std::string ExperimentConfig::*>(desc.ptr);
            if ((this->*member).find('\n') != std::string::npos) {
                throw ConfigError(std::string("config key '") + desc.key + "' contains a newline");
            }
        }
    }
}

ExperimentConfig parse_config_text(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> pairs;

    const std::string trimmed = trim(text);
    if (!trimmed.empty() && trimmed.front() == '{') {
        nlohmann::json j = nlohmann::json::parse(trimmed, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw ConfigError("config JSON is malformed or not an object");
        }
        for (const auto& [key, value] : j.items()) {
            std::string as_text;
            if (value.is_string()) {
                as_text = value.get<std::string>();
            } else if (value.is_boolean()) {
                as_text = value.get<bool>() ? "true" : "false";
            } else if (value.is_number()) {
                as_text = value.dump();
            } else {
                throw ConfigError("config key '" + key + "' has unsupported JSON type");
            }
            pairs.emplace_back(key, as_text);
        }
    } else {
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const std::string stripped = trim(line);
            if (stripped.empty() || stripped.front() == '#') {
                continue;
            }
            const std::size_t eq = stripped.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
            }
            pairs.emplace_back(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
        }
    }

    std::map<std::string, int> seen;
    for (const auto& [key, value] : pairs) {
        if (++seen[key] > 1) {
            throw ConfigError("duplicate config key '" + key + "'");
        }
    }
    return from_pairs(pairs);
}

ExperimentConfig load_config(const std::filesystem::path& path, bool apply_env) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    ExperimentConfig config = parse_config_text(buffer.str());
    if (apply_env) {
        apply_env_overrides(config);
    }
    return config;
}

void apply_env_overrides(ExperimentConfig& config) {
    for (const FieldDesc& desc : fields()) {
        if (const char* value = std::getenv(env_name(desc.key).c_str())) {
            set_field(config, desc, value);
        }
    }
}

std::string serialize_config(const ExperimentConfig& config) {
    std::string out;
    for (const FieldDesc& desc : fields()) {
        out += desc.key;
        out += " = ";
        out += get_field(config, desc);
        out += "\n";
    }
    return out;
}

nlohmann::json config_to_json(const ExperimentConfig& config) {
    nlohmann::json j = nlohmann::json::object();
    for (const FieldDesc& desc : fields()) {
        std::visit(
            [&](auto member) {
                using T = std::remove_cvref_t<decltype(config.*member)>;
                if constexpr (std::is_same_v<T, Mode>) {
                    j[desc.key] = to_string(config.*member);
                } else {
                    j[desc.key] = config.*member;
                }
            },
            desc.ptr);
    }
    return j;
}

} // namespace fedkd
