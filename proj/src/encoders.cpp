#include "chronofuse/encoders.hpp"

#include <cmath>

#include "chronofuse/errors.hpp"
#include "chronofuse/optim.hpp"
#include "chronofuse/rng.hpp"

namespace chronofuse {

namespace {

// Applies layers [from, to) within independent attention windows of
// chunk_tokens, Whisper-style; token positions stay global because the
// positional table is added before chunking.
Tensor run_layers(const std::vector<TransformerLayer>& layers, std::size_t from, std::size_t to, const Tensor& h,
                  std::size_t chunk_tokens, bool identity) {
    if (from > to || to > layers.size()) throw ContractError("invalid transformer layer range");
    if (from == to) return h;
    const AttnMode mode = identity ? AttnMode::identity : AttnMode::full;
    const std::size_t T = h.rows();
    if (T <= chunk_tokens) {
        Tensor cur = h;
        for (std::size_t i = from; i < to; ++i) cur = layers[i].forward(cur, mode);
        return cur;
    }
    std::vector<Tensor> outs;
    for (std::size_t start = 0; start < T; start += chunk_tokens) {
        Tensor cur = slice_rows(h, start, std::min(T, start + chunk_tokens));
        for (std::size_t i = from; i < to; ++i) cur = layers[i].forward(cur, mode);
        outs.push_back(std::move(cur));
    }
    return concat_rows(outs);
}

std::size_t chunk_tokens_for(std::uint64_t chunk_s) {
    return static_cast<std::size_t>(chunk_s * (kPostEmbedRate.num / kPostEmbedRate.den));
}

}  // namespace

void EncoderConfig::validate() const {
    if (d_in == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || ffn_mult == 0 || chunk_s == 0)
        throw ConfigError("encoder dimensions must be positive");
    if (d_model % 2 != 0) throw ConfigError("d_model must be even (sin|cos positional halves)");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
}

EncoderStack::EncoderStack(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    conv_w = Tensor::randn({2, cfg_.d_in, cfg_.d_model}, rng, 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.d_in)),
                           true);
    conv_b = Tensor::zeros({cfg_.d_model}, true);
    layers_.reserve(cfg_.n_layers);
    for (std::size_t i = 0; i < cfg_.n_layers; ++i)
        layers_.push_back(TransformerLayer::init(cfg_.d_model, cfg_.n_heads, cfg_.ffn_mult, rng));
    ln_post_gain = Tensor::from({cfg_.d_model}, std::vector<double>(cfg_.d_model, 1.0), true);
    ln_post_bias = Tensor::zeros({cfg_.d_model}, true);
}

Tensor EncoderStack::forward_lower(const Tensor& x, std::size_t upto_layer) const {
    if (x.rank() != 2 || x.cols() != cfg_.d_in)
        throw ShapeError("encoder expects [T, " + std::to_string(cfg_.d_in) + "] mel-rate input");
    if (x.rows() < 4) throw DataError("encoder input needs at least 4 frames");
    Tensor y = conv1d_strided(x, conv_w, 2);
    y = gelu(add_rowvec(y, conv_b));
    y = add(y, sinusoidal_positions(y.rows(), cfg_.d_model));
    return run_layers(layers_, 0, upto_layer, y, chunk_tokens_for(cfg_.chunk_s), false);
}

Tensor EncoderStack::forward_upper(const Tensor& h, std::size_t from_layer, bool attention_identity) const {
    if (h.rank() != 2 || h.cols() != cfg_.d_model)
        throw ShapeError("encoder upper stage expects [T, " + std::to_string(cfg_.d_model) + "] tokens");
    const Tensor out = run_layers(layers_, from_layer, layers_.size(), h, chunk_tokens_for(cfg_.chunk_s),
                                  attention_identity);
    return avgpool1d(layernorm_rows(out, ln_post_gain, ln_post_bias), 2);
}

Tensor EncoderStack::forward_tokens(const Tensor& x, bool attention_identity) const {
    if (x.rank() != 2 || x.cols() != cfg_.d_in)
        throw ShapeError("encoder expects [T, " + std::to_string(cfg_.d_in) + "] mel-rate input");
    if (x.rows() < 4) throw DataError("encoder input needs at least 4 frames");
    Tensor y = conv1d_strided(x, conv_w, 2);
    y = gelu(add_rowvec(y, conv_b));
    y = add(y, sinusoidal_positions(y.rows(), cfg_.d_model));
    y = run_layers(layers_, 0, layers_.size(), y, chunk_tokens_for(cfg_.chunk_s), attention_identity);
    return avgpool1d(layernorm_rows(y, ln_post_gain, ln_post_bias), 2);
}

FeatureSequence EncoderStack::encode(const FeatureSequence& seq, bool attention_identity) const {
    if (seq.rate != kMelRate)
        throw ContractError("encode expects the " + kMelRate.str() + " Hz grid, got " + seq.rate.str());
    if (seq.dim != cfg_.d_in)
        throw ShapeError("encode input dim " + std::to_string(seq.dim) + " != " + std::to_string(cfg_.d_in));
    if (seq.frame_count() < 4) throw DataError("encode input needs at least 4 frames");
    NoGradGuard guard;
    const Tensor x = Tensor::from({seq.frame_count(), seq.dim}, seq.frames);
    const Tensor out = forward_tokens(x, attention_identity);
    FeatureSequence r;
    r.rate = kEncoderOutRate;
    r.dim = cfg_.d_model;
    r.origin_s = seq.origin_s;
    r.frames.assign(out.data(), out.data() + out.size());
    return r;
}

void EncoderStack::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + "conv.w", conv_w);
    reg.add(prefix + "conv.b", conv_b);
    for (std::size_t i = 0; i < layers_.size(); ++i)
        layers_[i].register_params(reg, prefix + "layers." + std::to_string(i) + ".");
    reg.add(prefix + "ln_post.gain", ln_post_gain);
    reg.add(prefix + "ln_post.bias", ln_post_bias);
}

void EncoderStack::apply_freeze(FreezeMode mode) {
    auto set_layer = [](TransformerLayer& l, bool on) {
        for (Tensor* t : l.param_ptrs()) t->set_requires_grad(on);
    };
    auto set_all = [&](bool on) {
        conv_w.set_requires_grad(on);
        conv_b.set_requires_grad(on);
        for (auto& l : layers_) set_layer(l, on);
        ln_post_gain.set_requires_grad(on);
        ln_post_bias.set_requires_grad(on);
    };
    switch (mode) {
        case FreezeMode::stage1:
            set_all(true);
            break;
        case FreezeMode::stage2_audio:
        case FreezeMode::stage3:
            set_all(false);
            break;
        case FreezeMode::stage2_visual: {
            set_all(true);
            conv_w.set_requires_grad(false);
            conv_b.set_requires_grad(false);
            const std::size_t lower = layers_.size() / 2;
            for (std::size_t i = 0; i < lower; ++i) set_layer(layers_[i], false);
            break;
        }
    }
}

void EncoderStack::adopt_layer_values(const std::vector<TransformerLayer>& src) {
    if (src.size() != layers_.size()) throw ShapeError("transplant layer count mismatch");
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].copy_values_from(src[i]);
}

ProjectionHead ProjectionHead::init(std::size_t d_model, std::size_t d_proj, Rng& rng) {
    if (d_model == 0 || d_proj == 0) throw ConfigError("projection dims must be positive");
    ProjectionHead p;
    p.w = Tensor::randn({d_model, d_proj}, rng, 1.0 / std::sqrt(static_cast<double>(d_model)), true);
    p.b = Tensor::zeros({d_proj}, true);
    return p;
}

Tensor ProjectionHead::forward(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }

void ProjectionHead::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + "w", w);
    reg.add(prefix + "b", b);
}

}  // namespace chronofuse
