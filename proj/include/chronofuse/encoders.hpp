#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chronofuse/temporal.hpp"
#include "chronofuse/tensor.hpp"
#include "chronofuse/transformer.hpp"

namespace chronofuse {

class Rng;
class ParamRegistry;

struct EncoderConfig {
    std::size_t d_in = 64;      // input feature dim at the mel-rate grid
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 4;
    std::uint64_t chunk_s = 30;  // self-attention window, seconds

    void validate() const;  // throws ConfigError
};

// Which parameters stay trainable in each pipeline stage.
enum class FreezeMode { stage1, stage2_audio, stage2_visual, stage3 };

// Strided conv embedding (100 -> 50 Hz) + sinusoidal positions + pre-norm
// transformer layers + final LayerNorm + average pool (50 -> 25 Hz). Output
// token count for an integer-second duration d is exactly 25*d.
class EncoderStack {
public:
    EncoderStack(const EncoderConfig& cfg, Rng& rng);

    // Differentiable core on mel-rate tokens x [T, d_in], T >= 4.
    Tensor forward_tokens(const Tensor& x, bool attention_identity = false) const;

    // Staged forward for cached training: embed + layers [0, upto), then
    // layers [from, L) + final LayerNorm + pool. forward_tokens(x) ==
    // forward_upper(forward_lower(x, k), k) for every split point k.
    Tensor forward_lower(const Tensor& x, std::size_t upto_layer) const;
    Tensor forward_upper(const Tensor& h, std::size_t from_layer, bool attention_identity = false) const;

    // Inference wrapper: 100 Hz in (contract error otherwise), 25 Hz out,
    // origin preserved; runs without building an autodiff graph.
    FeatureSequence encode(const FeatureSequence& seq, bool attention_identity = false) const;

    void register_params(ParamRegistry& reg, const std::string& prefix) const;
    void apply_freeze(FreezeMode mode);

    // Overwrites this stack's transformer-layer values with src's (the
    // Stage I transplant); conv, positions, and final LayerNorm keep their
    // fresh initialization.
    void adopt_layer_values(const std::vector<TransformerLayer>& src);

    const EncoderConfig& config() const { return cfg_; }
    std::vector<TransformerLayer>& layers() { return layers_; }
    const std::vector<TransformerLayer>& layers() const { return layers_; }

private:
    EncoderConfig cfg_;
    Tensor conv_w;  // [2, d_in, d_model], stride 2
    Tensor conv_b;
    std::vector<TransformerLayer> layers_;
    Tensor ln_post_gain, ln_post_bias;
};

// Linear head mapping encoder tokens to the shared embedding space.
struct ProjectionHead {
    Tensor w;  // [d_model, d_proj]
    Tensor b;  // [d_proj]

    static ProjectionHead init(std::size_t d_model, std::size_t d_proj, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

}  // namespace chronofuse
