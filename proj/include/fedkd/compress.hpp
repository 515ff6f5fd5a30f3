#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedkd/matrix.hpp"
#include "fedkd/numerics.hpp"

namespace fedkd {

// Linear energy-threshold schedule over rounds: T(0) = t_start,
// T(total_rounds) = t_end.
struct ThresholdSchedule {
    double t_start = 0.95;
    double t_end = 0.98;
    int total_rounds = 1;

    void validate() const;
};

double threshold_at(const ThresholdSchedule& schedule, int round);

// Minimal K whose retained energy fraction sum(sigma[0..K)^2) / sum(sigma^2)
// strictly exceeds the threshold; Q when no K does (threshold = 1), 1 for an
// all-zero spectrum.
int select_rank(const Vector& sigma, double threshold);

// One parameter's wire entry: either truncated SVD factors or the raw
// matrix when factorization would not shrink the payload.
struct FactorizedEntry {
    std::string name;
    int orig_rows = 0;
    int orig_cols = 0;
    bool factorized = false;
    Matrix u;     // orig_rows x k
    Vector sigma; // k
    Matrix v;     // k x orig_cols
    Matrix raw;   // set when !factorized

    int rank() const { return factorized ? static_cast<int>(sigma.size()) : 0; }
    std::size_t payload_floats() const;
};

struct FactorizedGradient {
    std::vector<FactorizedEntry> entries; // sorted by name
};

struct SizeReport {
    std::size_t raw_bytes = 0;
    std::size_t encoded_bytes = 0;
    double ratio = 0.0; // raw / encoded
};

// Per-parameter truncated SVD at the given energy threshold. An entry is
// factorized only when min(P,Q) >= 2, the matrix is not all-zero, and the
// size condition P*K + K^2 + K*Q < P*Q holds; otherwise it is copied raw.
// Sigma is transmitted as K diagonal values.
FactorizedGradient factorize(const GradSet& grads, double threshold);

// Raw copy of every entry (baseline modes that skip compression).
FactorizedGradient factorize_raw(const GradSet& grads);

GradSet reconstruct(const FactorizedGradient& fg);

// Exact byte accounting under the wire format; encoded_bytes matches
// encode_payload(fg).size() without serializing anything.
SizeReport measure(const FactorizedGradient& fg);

// Wire format, little-endian:
//   header: magic "FKDG", version u16, entry_count u32
//   entry:  name_len u16, name utf-8, kind u8 (0 raw, 1 factorized),
//           P u32, Q u32, K u32 (0 if raw), payload f64
// Raw payload is P*Q values; factorized payload is U (P*K), sigma (K),
// V (K*Q), all row-major.
std::vector<std::byte> encode_payload(const FactorizedGradient& fg);
FactorizedGradient decode_payload(std::span<const std::byte> bytes);

std::size_t encoded_size(const FactorizedGradient& fg);
std::size_t raw_encoded_size(const GradSet& grads);

} // namespace fedkd
