#include "chronofuse/transformer.hpp"

#include <cmath>
#include <cstring>

#include "chronofuse/errors.hpp"
#include "chronofuse/optim.hpp"
#include "chronofuse/rng.hpp"

namespace chronofuse {

Tensor sinusoidal_positions(std::size_t T, std::size_t d, std::size_t offset) {
    if (d < 2 || d % 2 != 0) throw ContractError("positional encoding needs an even width >= 2");
    const std::size_t half = d / 2;
    const double log_increment = half > 1 ? std::log(10000.0) / static_cast<double>(half - 1) : 0.0;
    std::vector<double> pe(T * d);
    for (std::size_t t = 0; t < T; ++t) {
        const auto pos = static_cast<double>(t + offset);
        for (std::size_t i = 0; i < half; ++i) {
            const double angle = pos * std::exp(-log_increment * static_cast<double>(i));
            pe[t * d + i] = std::sin(angle);
            pe[t * d + half + i] = std::cos(angle);
        }
    }
    return Tensor::from({T, d}, std::move(pe));
}

TransformerLayer TransformerLayer::init(std::size_t d_model, std::size_t n_heads, std::size_t ffn_mult, Rng& rng) {
    if (d_model == 0 || n_heads == 0 || ffn_mult == 0) throw ConfigError("transformer dimensions must be positive");
    if (d_model % n_heads != 0) throw ContractError("d_model must be divisible by n_heads");
    TransformerLayer l;
    l.d_model = d_model;
    l.n_heads = n_heads;
    const std::size_t d_ff = ffn_mult * d_model;
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(d_model));
    auto ones = [](std::size_t n) { return Tensor::from({n}, std::vector<double>(n, 1.0), true); };
    auto zeros = [](std::size_t n) { return Tensor::zeros({n}, true); };
    l.ln1_gain = ones(d_model);
    l.ln1_bias = zeros(d_model);
    l.wq = Tensor::randn({d_model, d_model}, rng, attn_std, true);
    l.bq = zeros(d_model);
    l.wk = Tensor::randn({d_model, d_model}, rng, attn_std, true);
    l.bk = zeros(d_model);
    l.wv = Tensor::randn({d_model, d_model}, rng, attn_std, true);
    l.bv = zeros(d_model);
    l.wo = Tensor::randn({d_model, d_model}, rng, attn_std, true);
    l.bo = zeros(d_model);
    l.ln2_gain = ones(d_model);
    l.ln2_bias = zeros(d_model);
    l.ffn_w1 = Tensor::randn({d_model, d_ff}, rng, attn_std, true);
    l.ffn_b1 = zeros(d_ff);
    l.ffn_w2 = Tensor::randn({d_ff, d_model}, rng, 1.0 / std::sqrt(static_cast<double>(d_ff)), true);
    l.ffn_b2 = zeros(d_model);
    return l;
}

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads, const Tensor& wo,
                      const Tensor& bo, AttnMode mode) {
    if (mode == AttnMode::identity)  // every token attends only to itself: A = I
        return add_rowvec(matmul(v, wo), bo);
    if (n_heads == 0 || v.rank() != 2 || v.cols() % n_heads != 0)
        throw ShapeError("attention width must divide evenly into heads");

    const std::size_t dh = v.cols() / n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        const Tensor attn = mode == AttnMode::causal ? softmax_rows_causal(scores) : softmax_rows(scores);
        head_outs.push_back(matmul(attn, vh));
    }
    return add_rowvec(matmul(concat_cols(head_outs), wo), bo);
}

Tensor multihead_attention(const Tensor& x, const TransformerLayer& layer, AttnMode mode) {
    const Tensor v = add_rowvec(matmul(x, layer.wv), layer.bv);
    if (mode == AttnMode::identity) return attention_core(v, v, v, layer.n_heads, layer.wo, layer.bo, mode);

    const Tensor q = add_rowvec(matmul(x, layer.wq), layer.bq);
    const Tensor k = add_rowvec(matmul(x, layer.wk), layer.bk);
    return attention_core(q, k, v, layer.n_heads, layer.wo, layer.bo, mode);
}

Tensor TransformerLayer::forward(const Tensor& x, AttnMode mode) const {
    if (x.rank() != 2 || x.cols() != d_model)
        throw ShapeError("transformer layer expects [T, " + std::to_string(d_model) + "] input");
    const Tensor attn_in = layernorm_rows(x, ln1_gain, ln1_bias);
    const Tensor h = add(x, multihead_attention(attn_in, *this, mode));
    const Tensor ffn_in = layernorm_rows(h, ln2_gain, ln2_bias);
    const Tensor mid = gelu(add_rowvec(matmul(ffn_in, ffn_w1), ffn_b1));
    return add(h, add_rowvec(matmul(mid, ffn_w2), ffn_b2));
}

void TransformerLayer::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + "ln1.gain", ln1_gain);
    reg.add(prefix + "ln1.bias", ln1_bias);
    reg.add(prefix + "attn.wq", wq);
    reg.add(prefix + "attn.bq", bq);
    reg.add(prefix + "attn.wk", wk);
    reg.add(prefix + "attn.bk", bk);
    reg.add(prefix + "attn.wv", wv);
    reg.add(prefix + "attn.bv", bv);
    reg.add(prefix + "attn.wo", wo);
    reg.add(prefix + "attn.bo", bo);
    reg.add(prefix + "ln2.gain", ln2_gain);
    reg.add(prefix + "ln2.bias", ln2_bias);
    reg.add(prefix + "ffn.w1", ffn_w1);
    reg.add(prefix + "ffn.b1", ffn_b1);
    reg.add(prefix + "ffn.w2", ffn_w2);
    reg.add(prefix + "ffn.b2", ffn_b2);
}

std::vector<Tensor*> TransformerLayer::param_ptrs() {
    return {&ln1_gain, &ln1_bias, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
            &ln2_gain, &ln2_bias, &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2};
}

std::vector<const Tensor*> TransformerLayer::param_ptrs() const {
    return {&ln1_gain, &ln1_bias, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
            &ln2_gain, &ln2_bias, &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2};
}

void TransformerLayer::copy_values_from(const TransformerLayer& src) {
    const auto dst_ps = param_ptrs();
    const auto src_ps = src.param_ptrs();
    for (std::size_t i = 0; i < dst_ps.size(); ++i) {
        if (dst_ps[i]->shape() != src_ps[i]->shape()) throw ShapeError("transplanted layer shapes do not match");
        std::memcpy(dst_ps[i]->data(), src_ps[i]->data(), dst_ps[i]->size() * sizeof(double));
    }
}

}  // namespace chronofuse
