#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "chronofuse/checkpoint.hpp"
#include "chronofuse/encoders.hpp"
#include "chronofuse/errors.hpp"
#include "chronofuse/optim.hpp"
#include "chronofuse/rng.hpp"
#include "chronofuse/temporal.hpp"
#include "chronofuse/tensor.hpp"
#include "chronofuse/transformer.hpp"
#include "gradcheck.hpp"

using namespace chronofuse;

namespace {

EncoderConfig small_config() {
    EncoderConfig cfg;
    cfg.d_in = 4;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    cfg.chunk_s = 4;  // several chunks even on short inputs
    return cfg;
}

FeatureSequence random_mel(std::uint64_t duration_s, std::size_t dim, Rng& rng) {
    FeatureSequence seq;
    seq.rate = kMelRate;
    seq.dim = dim;
    seq.frames.resize(duration_s * 100 * dim);
    for (auto& v : seq.frames) v = rng.normal();
    return seq;
}

// Closed-form scalar count of one transformer layer: four d x d attention
// maps with biases, two LayerNorms, and the two FFN maps with biases.
std::size_t layer_scalars(std::size_t d, std::size_t ffn_mult) {
    const std::size_t d_ff = ffn_mult * d;
    return 4 * (d * d + d) + 2 * (2 * d) + (d * d_ff + d_ff) + (d_ff * d + d);
}

}  // namespace

TEST_SUITE("encoders") {

TEST_CASE("10 s of mel input yields 250 output tokens at 25 Hz") {
    Rng rng(42);
    const EncoderConfig cfg = small_config();
    const EncoderStack stack(cfg, rng);
    const FeatureSequence in = random_mel(10, cfg.d_in, rng);
    REQUIRE(in.frame_count() == 1000);
    const FeatureSequence out = stack.encode(in);
    CHECK(out.frame_count() == 250);
    CHECK(out.rate == kEncoderOutRate);
    CHECK(out.dim == cfg.d_model);
    CHECK(out.frame_count() == token_count_for(10, TokenStage::encoder_out));
}

TEST_CASE("audio and visual paths stay aligned across random durations") {
    Rng rng(43);
    EncoderConfig audio_cfg = small_config();
    EncoderConfig visual_cfg = small_config();
    visual_cfg.d_in = 3;
    const EncoderStack audio_stack(audio_cfg, rng);
    const EncoderStack visual_stack(visual_cfg, rng);

    for (std::uint64_t d : {1, 2, 5, 9}) {
        const FeatureSequence mel = random_mel(d, audio_cfg.d_in, rng);

        FeatureSequence visual;
        visual.rate = kVisualRate;
        visual.dim = visual_cfg.d_in;
        visual.frames.resize(d * 30 * visual.dim);
        for (auto& v : visual.frames) v = rng.normal();

        const FeatureSequence audio_out = audio_stack.encode(mel);
        const FeatureSequence visual_out = visual_stack.encode(resample_linear(visual, kMelRate));
        CHECK(audio_out.frame_count() == 25 * d);
        CHECK(visual_out.frame_count() == 25 * d);
        const AlignmentReport rep = check_alignment(audio_out, visual_out);
        CHECK_MESSAGE(rep.ok, rep.message);
    }
}

TEST_CASE("encode rejects wrong rates and too-short inputs") {
    Rng rng(44);
    const EncoderStack stack(small_config(), rng);

    FeatureSequence wrong_rate;
    wrong_rate.rate = kVisualRate;
    wrong_rate.dim = 4;
    wrong_rate.frames.assign(30 * 4, 0.0);
    CHECK_THROWS_AS(stack.encode(wrong_rate), ContractError);

    FeatureSequence tiny;
    tiny.rate = kMelRate;
    tiny.dim = 4;
    tiny.frames.assign(3 * 4, 0.0);
    CHECK_THROWS_AS(stack.encode(tiny), DataError);

    FeatureSequence wrong_dim;
    wrong_dim.rate = kMelRate;
    wrong_dim.dim = 5;
    wrong_dim.frames.assign(100 * 5, 0.0);
    CHECK_THROWS_AS(stack.encode(wrong_dim), ShapeError);
}

TEST_CASE("shuffling input frames changes the output") {
    Rng rng(45);
    const EncoderStack stack(small_config(), rng);
    const FeatureSequence in = random_mel(1, 4, rng);

    FeatureSequence shuffled = in;
    std::vector<std::size_t> order(shuffled.frame_count());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t t = 0; t < order.size(); ++t)
        std::copy_n(in.row(order[t]), in.dim, shuffled.row(t));

    const FeatureSequence a = stack.encode(in);
    const FeatureSequence b = stack.encode(shuffled);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < a.frames.size(); ++i) max_diff = std::max(max_diff, std::abs(a.frames[i] - b.frames[i]));
    CHECK(max_diff > 1e-6);
}

TEST_CASE("zero weights and biases produce exactly zero output") {
    Rng rng(46);
    EncoderStack stack(small_config(), rng);
    ParamRegistry reg;
    stack.register_params(reg, "enc.");
    for (const auto& name : reg.names()) {
        Tensor t = reg.at(name);
        std::fill(t.data(), t.data() + t.size(), 0.0);
    }
    const FeatureSequence out = stack.encode(random_mel(1, 4, rng));
    for (double v : out.frames) CHECK(v == 0.0);
}

TEST_CASE("identity attention bounds the receptive field to four input frames per token") {
    Rng rng(47);
    const EncoderStack stack(small_config(), rng);
    const std::size_t T = 64, k = 32;

    Tensor a = Tensor::randn({T, 4}, rng, 1.0);
    Tensor b = Tensor::from({T, 4}, std::vector<double>(a.data(), a.data() + a.size()));
    for (std::size_t t = k; t < T; ++t)
        for (std::size_t j = 0; j < 4; ++j) b.data()[t * 4 + j] += 1.0 + static_cast<double>(j);

    NoGradGuard guard;
    const Tensor ya = stack.forward_tokens(a, /*attention_identity=*/true);
    const Tensor yb = stack.forward_tokens(b, /*attention_identity=*/true);
    REQUIRE(ya.rows() == T / 4);

    // Output token t pools conv tokens 2t,2t+1, which read frames 4t..4t+3:
    // tokens before k/4 never see the perturbed frames.
    for (std::size_t t = 0; t < k / 4; ++t)
        for (std::size_t j = 0; j < ya.cols(); ++j) CHECK(ya.data()[t * ya.cols() + j] == yb.data()[t * ya.cols() + j]);
    double tail_diff = 0.0;
    for (std::size_t i = (k / 4) * ya.cols(); i < ya.size(); ++i)
        tail_diff = std::max(tail_diff, std::abs(ya.data()[i] - yb.data()[i]));
    CHECK(tail_diff > 1e-9);

    // With full attention the perturbation leaks everywhere.
    const Tensor fa = stack.forward_tokens(a);
    const Tensor fb = stack.forward_tokens(b);
    double head_diff = 0.0;
    for (std::size_t i = 0; i < (k / 4) * fa.cols(); ++i)
        head_diff = std::max(head_diff, std::abs(fa.data()[i] - fb.data()[i]));
    CHECK(head_diff > 1e-9);
}

TEST_CASE("staged forward equals the single-pass forward at every split point") {
    Rng rng(48);
    const EncoderConfig cfg = small_config();
    const EncoderStack stack(cfg, rng);
    const Tensor x = Tensor::randn({600, cfg.d_in}, rng, 1.0);  // spans two chunks

    NoGradGuard guard;
    const Tensor whole = stack.forward_tokens(x);
    for (std::size_t split = 0; split <= cfg.n_layers; ++split) {
        const Tensor lower = stack.forward_lower(x, split);
        const Tensor again = stack.forward_upper(lower, split);
        REQUIRE(again.shape() == whole.shape());
        for (std::size_t i = 0; i < whole.size(); ++i) CHECK(again.data()[i] == whole.data()[i]);
    }
}

TEST_CASE("freeze modes partition the parameter set as specified") {
    Rng rng(49);
    EncoderConfig cfg;
    cfg.d_in = 4;
    cfg.d_model = 16;
    cfg.n_layers = 4;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    EncoderStack stack(cfg, rng);
    ParamRegistry reg;
    stack.register_params(reg, "enc.");

    const std::size_t per_layer = layer_scalars(cfg.d_model, cfg.ffn_mult);
    const std::size_t conv = 2 * cfg.d_in * cfg.d_model + cfg.d_model;
    const std::size_t ln_post = 2 * cfg.d_model;
    REQUIRE(reg.scalar_count(false) == conv + 4 * per_layer + ln_post);

    stack.apply_freeze(FreezeMode::stage2_audio);
    CHECK(reg.scalar_count(true) == 0);

    stack.apply_freeze(FreezeMode::stage3);
    CHECK(reg.scalar_count(true) == 0);

    stack.apply_freeze(FreezeMode::stage2_visual);
    CHECK(reg.scalar_count(true) == 2 * per_layer + ln_post);  // layers 2,3 + final LN
    CHECK(!reg.at("enc.conv.w").requires_grad());
    CHECK(!reg.at("enc.layers.0.attn.wq").requires_grad());
    CHECK(!reg.at("enc.layers.1.ffn.w1").requires_grad());
    CHECK(reg.at("enc.layers.2.attn.wq").requires_grad());
    CHECK(reg.at("enc.layers.3.ffn.w2").requires_grad());
    CHECK(reg.at("enc.ln_post.gain").requires_grad());

    stack.apply_freeze(FreezeMode::stage1);
    CHECK(reg.scalar_count(true) == reg.scalar_count(false));
}

TEST_CASE("a training step leaves frozen parameters byte-identical") {
    Rng rng(50);
    EncoderStack stack(small_config(), rng);
    ParamRegistry reg;
    stack.register_params(reg, "enc.");
    stack.apply_freeze(FreezeMode::stage2_visual);

    std::vector<std::vector<double>> frozen_before;
    std::vector<std::string> frozen_names;
    for (const auto& name : reg.names()) {
        const Tensor t = reg.at(name);
        if (!t.requires_grad()) {
            frozen_names.push_back(name);
            frozen_before.emplace_back(t.data(), t.data() + t.size());
        }
    }
    REQUIRE(!frozen_names.empty());

    const Tensor x = Tensor::randn({40, 4}, rng, 1.0);
    const Tensor loss = sum(stack.forward_tokens(x));
    backward(loss);
    auto trainable = reg.trainable();
    REQUIRE(!trainable.empty());
    AdamW opt(trainable, {});
    opt.step(1e-3);

    for (std::size_t i = 0; i < frozen_names.size(); ++i) {
        const Tensor t = reg.at(frozen_names[i]);
        CHECK(std::memcmp(t.data(), frozen_before[i].data(), t.size() * sizeof(double)) == 0);
    }
    // And at least one trainable parameter moved.
    bool moved = false;
    for (const auto& t : trainable)
        for (std::size_t i = 0; i < t.size() && !moved; ++i) moved = t.grad()[i] != 0.0;
    CHECK(moved);
}

TEST_CASE("checkpoint round trip restores identical encodings") {
    namespace fs = std::filesystem;
    Rng rng_a(51);
    EncoderStack a(small_config(), rng_a);
    ParamRegistry reg_a;
    a.register_params(reg_a, "audio_encoder.");
    CHECK(reg_a.names().front() == "audio_encoder.conv.w");
    CHECK(reg_a.names().back() == "audio_encoder.ln_post.bias");

    const fs::path path = fs::temp_directory_path() / "chronofuse_encoder_ckpt.cfck";
    save_checkpoint(path.string(), reg_a);

    Rng rng_b(52);  // different init, then overwritten by the checkpoint
    EncoderStack b(small_config(), rng_b);
    ParamRegistry reg_b;
    b.register_params(reg_b, "audio_encoder.");
    load_into_registry(path.string(), reg_b);
    fs::remove(path);

    Rng data_rng(53);
    const FeatureSequence in = random_mel(2, 4, data_rng);
    const FeatureSequence ya = a.encode(in);
    const FeatureSequence yb = b.encode(in);
    REQUIRE(ya.frames.size() == yb.frames.size());
    for (std::size_t i = 0; i < ya.frames.size(); ++i) CHECK(ya.frames[i] == yb.frames[i]);
}

TEST_CASE("same seed builds identical stacks") {
    Rng rng_a(54), rng_b(54), data_rng(55);
    const EncoderStack a(small_config(), rng_a);
    const EncoderStack b(small_config(), rng_b);
    const FeatureSequence in = random_mel(1, 4, data_rng);
    const FeatureSequence ya = a.encode(in);
    const FeatureSequence yb = b.encode(in);
    for (std::size_t i = 0; i < ya.frames.size(); ++i) CHECK(ya.frames[i] == yb.frames[i]);
}

TEST_CASE("layer transplant copies values") {
    Rng rng_a(56), rng_b(57);
    std::vector<TransformerLayer> src;
    for (int i = 0; i < 2; ++i) src.push_back(TransformerLayer::init(16, 2, 2, rng_a));
    EncoderStack stack(small_config(), rng_b);
    REQUIRE(stack.layers()[0].wq.data()[0] != src[0].wq.data()[0]);
    stack.adopt_layer_values(src);
    CHECK(stack.layers()[0].wq.data()[0] == src[0].wq.data()[0]);
    CHECK(stack.layers()[1].ffn_w2.data()[5] == src[1].ffn_w2.data()[5]);

    std::vector<TransformerLayer> wrong_count;
    wrong_count.push_back(TransformerLayer::init(16, 2, 2, rng_a));
    CHECK_THROWS_AS(stack.adopt_layer_values(wrong_count), ShapeError);
}

TEST_CASE("positional table has the sin|cos layout") {
    const Tensor pe = sinusoidal_positions(4, 8);
    for (std::size_t i = 0; i < 4; ++i) CHECK(pe.data()[i] == 0.0);                   // sin(0)
    for (std::size_t i = 4; i < 8; ++i) CHECK(pe.data()[i] == 1.0);                   // cos(0)
    CHECK(pe.data()[1 * 8 + 0] == doctest::Approx(std::sin(1.0)).epsilon(1e-12));     // first frequency is 1
    CHECK(pe.data()[2 * 8 + 4] == doctest::Approx(std::cos(2.0)).epsilon(1e-12));
    CHECK(sinusoidal_positions(3, 8, 5).data()[0] == doctest::Approx(std::sin(5.0)).epsilon(1e-12));
    CHECK_THROWS_AS(sinusoidal_positions(4, 7), ContractError);
}

TEST_CASE("gradients through a whole encoder match finite differences") {
    Rng rng(59);
    EncoderConfig cfg;
    cfg.d_in = 3;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    EncoderStack stack(cfg, rng);
    ParamRegistry reg;
    stack.register_params(reg, "enc.");

    Tensor x = Tensor::randn({8, cfg.d_in}, rng, 1.0, true);
    const Tensor weights = Tensor::randn({2, cfg.d_model}, rng, 1.0);

    std::vector<Tensor> leaves = reg.trainable();
    leaves.push_back(x);
    const double err = max_grad_rel_error(leaves, [&] { return sum(mul(stack.forward_tokens(x), weights)); });
    CHECK(err < 1e-4);
}

TEST_CASE("gradients through causal and identity attention match finite differences") {
    Rng rng(60);
    TransformerLayer layer = TransformerLayer::init(8, 2, 2, rng);
    Tensor x = Tensor::randn({5, 8}, rng, 1.0, true);
    const Tensor weights = Tensor::randn({5, 8}, rng, 1.0);

    ParamRegistry reg;
    layer.register_params(reg, "layer.");
    for (AttnMode mode : {AttnMode::causal, AttnMode::identity}) {
        std::vector<Tensor> leaves = reg.trainable();
        leaves.push_back(x);
        const double err = max_grad_rel_error(leaves, [&] { return sum(mul(layer.forward(x, mode), weights)); });
        CHECK(err < 1e-4);
    }
}

TEST_CASE("projection head is affine and commutes with the row mean") {
    Rng rng(58);
    const ProjectionHead proj = ProjectionHead::init(16, 8, rng);
    const Tensor x = Tensor::randn({10, 16}, rng, 1.0);
    NoGradGuard guard;
    const Tensor projected = proj.forward(x);
    REQUIRE(projected.rows() == 10);
    REQUIRE(projected.cols() == 8);

    const Tensor mean_first = mean_rows(x);
    const Tensor mean_as_row = Tensor::from({1, 16}, std::vector<double>(mean_first.data(), mean_first.data() + 16));
    const Tensor proj_of_mean = proj.forward(mean_as_row);
    const Tensor mean_of_proj = mean_rows(projected);
    for (std::size_t j = 0; j < 8; ++j)
        CHECK(proj_of_mean.data()[j] == doctest::Approx(mean_of_proj.data()[j]).epsilon(1e-12));
}

}  // TEST_SUITE
