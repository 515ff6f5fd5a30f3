#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedkd/compress.hpp"
#include "fedkd/data.hpp"
#include "fedkd/distill.hpp"
#include "fedkd/matrix.hpp"
#include "fedkd/nn.hpp"

namespace fedkd {

// Payload transform applied at every client/server boundary. Stands in for
// the protocol's encrypt/decrypt steps; decode(encode(x)) must reproduce x
// bit-exactly.
class Codec {
public:
    virtual ~Codec() = default;
    virtual std::string name() const = 0;
    virtual std::vector<std::byte> encode(std::span<const std::byte> bytes) const = 0;
    virtual std::vector<std::byte> decode(std::span<const std::byte> bytes) const = 0;
};

// Pass-through default.
class IdentityCodec final : public Codec {
public:
    std::string name() const override { return "identity"; }
    std::vector<std::byte> encode(std::span<const std::byte> bytes) const override;
    std::vector<std::byte> decode(std::span<const std::byte> bytes) const override;
};

// Keystream XOR mask. An obfuscation placeholder exercising the codec hooks,
// not cryptography.
class XorMaskCodec final : public Codec {
public:
    std::string name() const override { return "xormask"; }
    std::vector<std::byte> encode(std::span<const std::byte> bytes) const override;
    std::vector<std::byte> decode(std::span<const std::byte> bytes) const override;
};

std::unique_ptr<Codec> make_codec(const std::string& name);

enum class Direction : std::uint8_t { Upload = 0, Download = 1 };

// Sender id reserved for the server in message envelopes.
inline constexpr std::uint32_t kServerSender = 0xFFFFFFFFu;

// Envelope wire layout, little-endian: round u32, sender u32, direction u8,
// codec_len u16, codec name, payload to end of message.
struct Envelope {
    std::uint32_t round = 0;
    std::uint32_t sender = 0;
    Direction direction = Direction::Upload;
    std::string codec;
    std::vector<std::byte> payload;
};

std::vector<std::byte> encode_envelope(const Envelope& envelope);
Envelope decode_envelope(std::span<const std::byte> bytes);

// Per-client state: the big local teacher, the local copy of the shared
// student, the client's projection matrix, its data shard and batch stream.
struct ClientState {
    int client_id = 0;
    std::optional<ParamSet> teacher;
    ParamSet student;
    Matrix w_h;
    LayerMap layer_map;
    std::vector<Sample> shard;
    Rng batch_rng{0};
    std::optional<AdamState> adam;

    // epoch-shuffled batch iteration
    std::vector<std::size_t> batch_order;
    std::size_t batch_cursor = 0;
};

struct CommRecord {
    std::size_t upload_bytes = 0;
    std::size_t download_bytes = 0;
};

// Byte-exact per-round, per-client communication accounting. Every recorded
// count is the length of a fully serialized message.
class CommLedger {
public:
    void begin_round(int n_clients);
    void record_upload(int client, std::size_t bytes);
    void record_download(int client, std::size_t bytes);

    const std::vector<std::vector<CommRecord>>& rounds() const { return rounds_; }
    std::size_t total_upload(int client) const;
    std::size_t total_download(int client) const;
    std::size_t grand_total_upload() const { return cumulative_upload_; }
    std::size_t grand_total_download() const { return cumulative_download_; }

private:
    std::vector<std::vector<CommRecord>> rounds_;
    std::size_t cumulative_upload_ = 0;
    std::size_t cumulative_download_ = 0;
};

struct FedOptions {
    double eta_teacher = 0.1;
    double eta_student = 0.1;
    ThresholdSchedule schedule;
    DistillOptions distill;
    bool use_teacher = true; // false: plain task loss on the shared model
    bool compress = true;    // false: raw payloads (baseline modes)
    std::string optimizer = "sgd"; // teacher-side; the student step is always SGD
    int batch_size = 16;
    int local_steps = 1;
    double client_fraction = 1.0;
    std::uint64_t sampler_seed = 0; // drives client sampling when fraction < 1
    bool capture_messages = false;
    bool record_sigmas = false;
};

struct RoundClientMetrics {
    int client_id = 0;
    bool participated = true;
    LossBreakdown losses;
    std::size_t upload_bytes = 0;
    std::size_t download_bytes = 0;
    std::map<std::string, int> upload_ranks; // 0 = raw entry
    SizeReport upload_size;
};

struct RoundMetrics {
    int round = 0;
    double threshold = 1.0;
    std::vector<RoundClientMetrics> clients;
    std::map<std::string, int> broadcast_ranks;
    std::size_t broadcast_bytes = 0;
    SizeReport broadcast_size;
    std::map<std::string, Vector> aggregate_sigmas; // filled when record_sigmas
};

// Elementwise sum; division by the client count happens client-side.
GradSet aggregate(const std::vector<GradSet>& grads);

// The synchronous round protocol. All cross-boundary data moves through
// serialized messages, so byte accounting and codec behavior are real.
class Federation {
public:
    Federation(FedOptions options, std::vector<ClientState> clients, std::unique_ptr<Codec> codec);

    RoundMetrics run_round();

    int round() const { return round_; }
    const FedOptions& options() const { return options_; }
    const std::vector<ClientState>& clients() const { return clients_; }
    std::vector<ClientState>& clients_mut() { return clients_; }
    const CommLedger& ledger() const { return ledger_; }
    const std::vector<std::vector<std::byte>>& captured_messages() const { return captured_; }

private:
    std::span<const Sample> next_batch(ClientState& client);

    FedOptions options_;
    std::vector<ClientState> clients_;
    std::unique_ptr<Codec> codec_;
    CommLedger ledger_;
    std::vector<std::vector<std::byte>> captured_;
    Rng sampler_rng_{0};
    int round_ = 0;
    std::vector<Sample> batch_buffer_;
};

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    int support = 0;
};

struct EvalReport {
    double accuracy = 0.0;
    std::vector<ClassMetrics> per_class;
    int total = 0;
    std::vector<int> predictions; // argmax class per sample, input order
};

EvalReport evaluate_model(const ParamSet& params, std::span<const Sample> eval_set);

struct FederationEval {
    std::vector<EvalReport> teachers; // empty when the run has no teachers
    EvalReport student;
};

FederationEval evaluate(const Federation& federation, std::span<const Sample> eval_set);

} // namespace fedkd
