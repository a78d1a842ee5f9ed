#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chronofuse/tensor.hpp"

namespace chronofuse {

class Rng;
class ParamRegistry;

// Attention variants: full bidirectional (encoders), causal (the fusion
// decoder), and identity (a test-only mode where every token attends to
// itself, exposing the receptive field of the purely local ops).
enum class AttnMode { full, causal, identity };

// Fixed sin|cos positional table: columns [0, d/2) hold sines, [d/2, d)
// cosines, Whisper-style log-spaced frequencies. Constant (no gradient).
// offset shifts the position index of row 0.
Tensor sinusoidal_positions(std::size_t T, std::size_t d, std::size_t offset = 0);

// One pre-norm encoder/decoder block: x + MHSA(LN(x)) then x + FFN(LN(x)).
struct TransformerLayer {
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;

    static TransformerLayer init(std::size_t d_model, std::size_t n_heads, std::size_t ffn_mult, Rng& rng);
    Tensor forward(const Tensor& x, AttnMode mode) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
    std::vector<Tensor*> param_ptrs();
    std::vector<const Tensor*> param_ptrs() const;
    // Copies parameter values (shapes must match); gradient flags untouched.
    void copy_values_from(const TransformerLayer& src);
};

// Scaled-dot-product multi-head self-attention over x [T, d_model].
Tensor multihead_attention(const Tensor& x, const TransformerLayer& layer, AttnMode mode);

// Head-split attention over precomputed q/k/v rows followed by the output
// projection. identity mode reads only v. Lets callers that modify the
// q/k/v maps (adapters) share the exact head arithmetic.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads, const Tensor& wo,
                      const Tensor& bo, AttnMode mode);

}  // namespace chronofuse
