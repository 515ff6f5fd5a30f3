#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fedkd/matrix.hpp"
#include "fedkd/rng.hpp"

namespace fedkd {

// Encoder geometry. The input is already a seq_len x input_dim feature
// matrix (no token embedding). Each layer is single-block self-attention
// followed by a two-layer feed-forward, both with residual connection and
// layer norm; the head mean-pools over positions and applies a linear map.
struct ModelConfig {
    int num_layers = 2;
    int hidden_dim = 16;
    int num_heads = 2;
    int input_dim = 8;
    int num_classes = 2;
    int seq_len = 4;

    int head_dim() const { return hidden_dim / num_heads; }
    int ffn_dim() const { return 4 * hidden_dim; }

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Named parameter collection for one model. The name set is fixed at
// construction; gradients use the identical names and shapes. Bias and
// layer-norm vectors are stored as n x 1 matrices.
class ParamSet {
public:
    ParamSet() = default;
    ParamSet(ModelConfig config, GradSet values);

    const ModelConfig& config() const { return config_; }
    const GradSet& values() const { return values_; }

    const Matrix& at(const std::string& name) const;
    Matrix& at(const std::string& name);
    bool has(const std::string& name) const { return values_.count(name) != 0; }

    std::size_t parameter_count() const;

private:
    ModelConfig config_;
    GradSet values_;
};

struct LayerNormCache {
    Matrix normalized; // (x - mean) / std, per row
    Vector inv_std;    // one per row
};

struct LayerCache {
    Matrix input;        // layer input, seq x hidden
    Matrix q, k, v;      // seq x hidden, heads side by side
    Matrix concat_heads; // attention output before the output projection
    Matrix resid1;       // input + attention output (pre-LN1)
    LayerNormCache ln1;
    Matrix post_ln1;     // LN1 output, feed-forward input
    Matrix ffn_pre;      // pre-activation, seq x ffn_dim
    Matrix ffn_act;      // gelu(ffn_pre)
    Matrix resid2;       // post_ln1 + ffn output (pre-LN2)
    LayerNormCache ln2;
};

struct ForwardCache {
    Matrix input;
    std::vector<LayerCache> layers;
    Vector pooled; // mean over positions of the last hidden state
};

// Per-layer hidden states and attention heatmaps plus the output
// distribution. `attentions[l]` stacks the per-head softmax maps row-wise:
// rows [h*seq_len, (h+1)*seq_len) belong to head h.
struct ForwardTrace {
    std::vector<Matrix> hidden_states; // seq_len x hidden_dim per layer
    std::vector<Matrix> attentions;    // num_heads*seq_len x seq_len per layer
    Vector logits;
    Vector probs;
    std::shared_ptr<const ForwardCache> cache; // intermediates for backward()
};

// Upstream gradients injected into backward(). Empty members mean zero.
struct LossGradBundle {
    Vector d_probs;
    std::vector<Matrix> d_hidden;
    std::vector<Matrix> d_attn;
};

// Scaled uniform init (bound 1/sqrt(fan_in)) for weights, zeros for biases,
// ones/zeros for layer-norm gain/shift.
ParamSet init_model(const ModelConfig& config, Rng& rng);

ForwardTrace forward(const ParamSet& params, const Matrix& input);

// Exact analytic gradients of the loss described by `bundle`, composed of
// contributions through probs, hidden states and attention heatmaps.
GradSet backward(const ParamSet& params, const Matrix& input, const ForwardTrace& trace,
                 const LossGradBundle& bundle);

GradSet zeros_like(const ParamSet& params);

void apply_sgd(ParamSet& params, const GradSet& grads, double lr);

// Teacher-side optimizer state (the student update is always plain SGD).
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step = 0;
    GradSet m;
    GradSet v;
};

void apply_adam(ParamSet& params, const GradSet& grads, double lr, AdamState& state);

// Flat binary checkpoint: magic "FKDP", version, record count, then
// (name_len u16, name, rows u32, cols u32, row-major f64 payload) records,
// all little-endian. The model geometry rides along as a reserved record.
void save_params(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_params(const std::filesystem::path& path);

} // namespace fedkd
