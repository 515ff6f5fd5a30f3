#include "fedkd/federation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "fedkd/errors.hpp"

namespace fedkd {

namespace {

bool breakdown_finite(const LossBreakdown& b) {
    return std::isfinite(b.total_teacher) && std::isfinite(b.total_student) && std::isfinite(b.hidden);
}

bool exactly_equal(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

void check_student_consistency(const std::vector<ClientState>& clients) {
    for (std::size_t i = 1; i < clients.size(); ++i) {
        if (!(clients[i].student.config() == clients[0].student.config())) {
            throw ProtocolError("clients disagree on shared model geometry");
        }
        for (const auto& [name, value] : clients[0].student.values()) {
            if (!clients[i].student.has(name) || !exactly_equal(clients[i].student.at(name), value)) {
                throw ProtocolError("clients start with different shared model parameters");
            }
        }
    }
}

} // namespace

std::vector<std::byte> IdentityCodec::encode(std::span<const std::byte> bytes) const {
    return {bytes.begin(), bytes.end()};
}

std::vector<std::byte> IdentityCodec::decode(std::span<const std::byte> bytes) const {
    return {bytes.begin(), bytes.end()};
}

namespace {

std::vector<std::byte> xor_keystream(std::span<const std::byte> bytes) {
    std::vector<std::byte> out(bytes.begin(), bytes.end());
    std::uint64_t x = 0x5DEECE66DC0FFEE5ULL;
    std::size_t i = 0;
    while (i < out.size()) {
        x += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        z = z ^ (z >> 31);
        for (int b = 0; b < 8 && i < out.size(); ++b, ++i) {
            out[i] ^= static_cast<std::byte>((z >> (8 * b)) & 0xFF);
        }
    }
    return out;
}

} // namespace

std::vector<std::byte> XorMaskCodec::encode(std::span<const std::byte> bytes) const {
    return xor_keystream(bytes);
}

std::vector<std::byte> XorMaskCodec::decode(std::span<const std::byte> bytes) const {
    return xor_keystream(bytes);
}

std::unique_ptr<Codec> make_codec(const std::string& name) {
    if (name == "identity") {
        return std::make_unique<IdentityCodec>();
    }
    if (name == "xormask") {
        return std::make_unique<XorMaskCodec>();
    }
    throw ConfigError("unknown codec '" + name + "'");
}

std::vector<std::byte> encode_envelope(const Envelope& envelope) {
    std::vector<std::byte> out;
    out.reserve(4 + 4 + 1 + 2 + envelope.codec.size() + envelope.payload.size());
    auto push_u32 = [&out](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
        }
    };
    push_u32(envelope.round);
    push_u32(envelope.sender);
    out.push_back(static_cast<std::byte>(envelope.direction));
    const std::uint16_t len = static_cast<std::uint16_t>(envelope.codec.size());
    out.push_back(static_cast<std::byte>(len & 0xFF));
    out.push_back(static_cast<std::byte>(len >> 8));
    for (char c : envelope.codec) {
        out.push_back(static_cast<std::byte>(c));
    }
    out.insert(out.end(), envelope.payload.begin(), envelope.payload.end());
    return out;
}

Envelope decode_envelope(std::span<const std::byte> bytes) {
    if (bytes.size() < 4 + 4 + 1 + 2) {
        throw ProtocolError("envelope truncated");
    }
    std::size_t pos = 0;
    auto read_u32 = [&bytes, &pos]() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
        }
        return v;
    };
    Envelope e;
    e.round = read_u32();
    e.sender = read_u32();
    const std::uint8_t dir = static_cast<std::uint8_t>(bytes[pos++]);
    if (dir > 1) {
        throw ProtocolError("envelope has unknown direction");
    }
    e.direction = static_cast<Direction>(dir);
    const std::uint16_t codec_len =
        static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes[pos]) |
                                   (static_cast<std::uint8_t>(bytes[pos + 1]) << 8));
    pos += 2;
    if (pos + codec_len > bytes.size()) {
        throw ProtocolError("envelope codec name truncated");
    }
    e.codec.resize(codec_len);
    std::memcpy(e.codec.data(), bytes.data() + pos, codec_len);
    pos += codec_len;
    e.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    return e;
}

void CommLedger::begin_round(int n_clients) {
    rounds_.emplace_back(static_cast<std::size_t>(n_clients));
}

void CommLedger::record_upload(int client, std::size_t bytes) {
    rounds_.back().at(static_cast<std::size_t>(client)).upload_bytes += bytes;
    cumulative_upload_ += bytes;
}

void CommLedger::record_download(int client, std::size_t bytes) {
    rounds_.back().at(static_cast<std::size_t>(client)).download_bytes += bytes;
    cumulative_download_ += bytes;
}

std::size_t CommLedger::total_upload(int client) const {
    std::size_t total = 0;
    for (const auto& round : rounds_) {
        total += round.at(static_cast<std::size_t>(client)).upload_bytes;
    }
    return total;
}

std::size_t CommLedger::total_download(int client) const {
    std::size_t total = 0;
    for (const auto& round : rounds_) {
        total += round.at(static_cast<std::size_t>(client)).download_bytes;
    }
    return total;
}

GradSet aggregate(const std::vector<GradSet>& grads) {
    if (grads.empty()) {
        throw ProtocolError("aggregate: no gradients");
    }
    GradSet sum = grads[0];
    for (std::size_t i = 1; i < grads.size(); ++i) {
        if (grads[i].size() != sum.size()) {
            throw ShapeError("aggregate: gradient name sets differ");
        }
        for (const auto& [name, g] : grads[i]) {
            auto it = sum.find(name);
            if (it == sum.end()) {
                throw ShapeError("aggregate: unexpected parameter '" + name + "'");
            }
            require_same_shape(it->second, g, "aggregate: '" + name + "'");
            it->second += g;
        }
    }
    return sum;
}

Federation::Federation(FedOptions options, std::vector<ClientState> clients, std::unique_ptr<Codec> codec)
    : options_(std::move(options)),
      clients_(std::move(clients)),
      codec_(std::move(codec)),
      sampler_rng_(options_.sampler_seed) {
    if (clients_.empty()) {
        throw ConfigError("federation needs at least one client");
    }
    if (options_.batch_size < 1 || options_.local_steps < 1) {
        throw ConfigError("batch_size and local_steps must be >= 1");
    }
    if (options_.client_fraction <= 0.0 || options_.client_fraction > 1.0) {
        throw ConfigError("client_fraction must be in (0, 1]");
    }
    options_.schedule.validate();
    if (options_.use_teacher) {
        for (const ClientState& c : clients_) {
            if (!c.teacher.has_value()) {
                throw ConfigError("client " + std::to_string(c.client_id) + " has no teacher model");
            }
        }
    }
    for (const ClientState& c : clients_) {
        if (c.shard.empty()) {
            throw ConfigError("client " + std::to_string(c.client_id) + " has an empty shard");
        }
    }
    check_student_consistency(clients_);

    // The codec contract is decode(encode(x)) == x; probe it once up front.
    const std::vector<std::byte> probe = {std::byte{0x00}, std::byte{0xFF}, std::byte{0x42},
                                          std::byte{0x19}, std::byte{0x77}};
    if (codec_->decode(codec_->encode(probe)) != probe) {
        throw ProtocolError("codec '" + codec_->name() + "' fails its round-trip contract");
    }
}

std::span<const Sample> Federation::next_batch(ClientState& client) {
    const std::size_t shard_size = client.shard.size();
    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(options_.batch_size), shard_size);
    if (client.batch_order.size() != shard_size) {
        client.batch_order.resize(shard_size);
        std::iota(client.batch_order.begin(), client.batch_order.end(), 0);
        client.batch_rng.shuffle(client.batch_order);
        client.batch_cursor = 0;
    }
    if (client.batch_cursor + batch > shard_size) {
        client.batch_rng.shuffle(client.batch_order);
        client.batch_cursor = 0;
    }
    batch_buffer_.clear();
    batch_buffer_.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        batch_buffer_.push_back(client.shard[client.batch_order[client.batch_cursor + i]]);
    }
    client.batch_cursor += batch;
    return batch_buffer_;
}

RoundMetrics Federation::run_round() {
    const int n = static_cast<int>(clients_.size());
    const double threshold =
        threshold_at(options_.schedule, std::min(round_, options_.schedule.total_rounds));

    RoundMetrics metrics;
    metrics.round = round_;
    metrics.threshold = threshold;
    metrics.clients.resize(clients_.size());
    ledger_.begin_round(n);

    // Client sampling hook; full participation by default.
    std::vector<bool> participates(clients_.size(), true);
    int participants = n;
    if (options_.client_fraction < 1.0) {
        participants = std::max(1, static_cast<int>(std::llround(options_.client_fraction * n)));
        std::vector<std::size_t> ids(clients_.size());
        std::iota(ids.begin(), ids.end(), 0);
        sampler_rng_.shuffle(ids);
        participates.assign(clients_.size(), false);
        for (int i = 0; i < participants; ++i) {
            participates[ids[static_cast<std::size_t>(i)]] = true;
        }
    }

    // Phase 1-3: local gradients, immediate teacher update, factorize,
    // encode, upload.
    std::vector<GradSet> received;
    received.reserve(static_cast<std::size_t>(participants));
    for (std::size_t ci = 0; ci < clients_.size(); ++ci) {
        ClientState& client = clients_[ci];
        RoundClientMetrics& cm = metrics.clients[ci];
        cm.client_id = client.client_id;
        cm.participated = participates[ci];
        if (!participates[ci]) {
            continue;
        }

        GradSet student_grads;
        if (options_.use_teacher) {
            GradSet accumulated;
            for (int step = 0; step < options_.local_steps; ++step) {
                const auto batch = next_batch(client);
                LocalGradients lg = local_gradients(*client.teacher, client.student, client.w_h,
                                                    client.layer_map, batch, options_.distill);
                if (!breakdown_finite(lg.losses)) {
                    throw NumericError("non-finite loss on client " + std::to_string(client.client_id) +
                                       " at round " + std::to_string(round_));
                }
                if (options_.optimizer == "adam") {
                    if (!client.adam.has_value()) {
                        client.adam.emplace();
                    }
                    apply_adam(*client.teacher, lg.teacher, options_.eta_teacher, *client.adam);
                } else {
                    apply_sgd(*client.teacher, lg.teacher, options_.eta_teacher);
                }
                client.w_h -= options_.eta_teacher * lg.w_h;

                const double inv_steps = 1.0 / static_cast<double>(options_.local_steps);
                if (accumulated.empty()) {
                    accumulated = std::move(lg.student);
                    for (auto& [name, g] : accumulated) {
                        g *= inv_steps;
                    }
                } else {
                    for (auto& [name, g] : lg.student) {
                        accumulated[name] += inv_steps * g;
                    }
                }
                cm.losses.task_teacher += inv_steps * lg.losses.task_teacher;
                cm.losses.task_student += inv_steps * lg.losses.task_student;
                cm.losses.distill_teacher += inv_steps * lg.losses.distill_teacher;
                cm.losses.distill_student += inv_steps * lg.losses.distill_student;
                cm.losses.hidden += inv_steps * lg.losses.hidden;
                cm.losses.total_teacher += inv_steps * lg.losses.total_teacher;
                cm.losses.total_student += inv_steps * lg.losses.total_student;
            }
            student_grads = std::move(accumulated);
        } else {
            const auto batch = next_batch(client);
            TaskGradients tg = task_gradients(client.student, batch);
            if (!std::isfinite(tg.loss)) {
                throw NumericError("non-finite loss on client " + std::to_string(client.client_id) +
                                   " at round " + std::to_string(round_));
            }
            student_grads = std::move(tg.grads);
            cm.losses.task_student = tg.loss;
            cm.losses.total_student = tg.loss;
        }

        FactorizedGradient fg = options_.compress ? factorize(student_grads, threshold)
                                                  : factorize_raw(student_grads);
        for (const FactorizedEntry& e : fg.entries) {
            cm.upload_ranks[e.name] = e.rank();
        }
        cm.upload_size = measure(fg);

        Envelope up;
        up.round = static_cast<std::uint32_t>(round_);
        up.sender = static_cast<std::uint32_t>(client.client_id);
        up.direction = Direction::Upload;
        up.codec = codec_->name();
        up.payload = codec_->encode(encode_payload(fg));
        std::vector<std::byte> message = encode_envelope(up);
        cm.upload_bytes = message.size();
        ledger_.record_upload(static_cast<int>(ci), message.size());
        if (options_.capture_messages) {
            captured_.push_back(message);
        }

        // Server side of the upload: decode, decrypt, reconstruct.
        Envelope received_env = decode_envelope(message);
        if (received_env.round != static_cast<std::uint32_t>(round_) ||
            received_env.direction != Direction::Upload) {
            throw ProtocolError("upload envelope does not match current round");
        }
        received.push_back(reconstruct(decode_payload(codec_->decode(received_env.payload))));
    }

    // Phase 4-6: aggregate, re-factorize, broadcast.
    GradSet global = aggregate(received);
    if (options_.record_sigmas) {
        for (const auto& [name, g] : global) {
            if (std::min(g.rows(), g.cols()) >= 2) {
                metrics.aggregate_sigmas[name] = svd(g).sigma;
            }
        }
    }
    FactorizedGradient fg_global =
        options_.compress ? factorize(global, threshold) : factorize_raw(global);
    for (const FactorizedEntry& e : fg_global.entries) {
        metrics.broadcast_ranks[e.name] = e.rank();
    }
    metrics.broadcast_size = measure(fg_global);

    Envelope down;
    down.round = static_cast<std::uint32_t>(round_);
    down.sender = kServerSender;
    down.direction = Direction::Download;
    down.codec = codec_->name();
    down.payload = codec_->encode(encode_payload(fg_global));
    std::vector<std::byte> broadcast = encode_envelope(down);
    metrics.broadcast_bytes = broadcast.size();
    if (options_.capture_messages) {
        captured_.push_back(broadcast);
    }

    // Phase 7: every client (participant or not) downloads the broadcast and
    // applies the same update, keeping local student copies bit-identical.
    const double lr = options_.eta_student / static_cast<double>(participants);
    for (std::size_t ci = 0; ci < clients_.size(); ++ci) {
        ClientState& client = clients_[ci];
        Envelope env = decode_envelope(broadcast);
        if (env.round != static_cast<std::uint32_t>(round_) || env.direction != Direction::Download ||
            env.sender != kServerSender) {
            throw ProtocolError("broadcast envelope does not match current round");
        }
        GradSet update = reconstruct(decode_payload(codec_->decode(env.payload)));
        apply_sgd(client.student, update, lr);
        metrics.clients[ci].download_bytes = broadcast.size();
        ledger_.record_download(static_cast<int>(ci), broadcast.size());
    }

    ++round_;
    return metrics;
}

EvalReport evaluate_model(const ParamSet& params, std::span<const Sample> eval_set) {
    if (eval_set.empty()) {
        throw ConfigError("evaluate: empty eval set");
    }
    const int num_classes = params.config().num_classes;
    std::vector<std::vector<int>> confusion(static_cast<std::size_t>(num_classes),
                                            std::vector<int>(static_cast<std::size_t>(num_classes), 0));
    EvalReport report;
    report.total = static_cast<int>(eval_set.size());
    report.predictions.reserve(eval_set.size());
    int correct = 0;
    for (const Sample& sample : eval_set) {
        const ForwardTrace trace = forward(params, sample.features);
        Eigen::Index arg = 0;
        trace.probs.maxCoeff(&arg);
        const int pred = static_cast<int>(arg);
        report.predictions.push_back(pred);
        if (sample.label < 0 || sample.label >= num_classes) {
            throw ConfigError("evaluate: label outside model classes");
        }
        confusion[static_cast<std::size_t>(sample.label)][static_cast<std::size_t>(pred)] += 1;
        if (pred == sample.label) {
            ++correct;
        }
    }
    report.accuracy = static_cast<double>(correct) / static_cast<double>(eval_set.size());
    report.per_class.resize(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) {
        int tp = confusion[c][c];
        int fn = 0;
        int fp = 0;
        for (int other = 0; other < num_classes; ++other) {
            if (other != c) {
                fn += confusion[c][other];
                fp += confusion[other][c];
            }
        }
        ClassMetrics& m = report.per_class[static_cast<std::size_t>(c)];
        m.support = tp + fn;
        m.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        m.recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
                                              : 0.0;
    }
    return report;
}

FederationEval evaluate(const Federation& federation, std::span<const Sample> eval_set) {
    FederationEval out;
    if (federation.options().use_teacher) {
        out.teachers.reserve(federation.clients().size());
        for (const ClientState& client : federation.clients()) {
            out.teachers.push_back(evaluate_model(*client.teacher, eval_set));
        }
    }
    out.student = evaluate_model(federation.clients().front().student, eval_set);
    return out;
}

} // namespace fedkd
