#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "chronofuse/errors.hpp"
#include "chronofuse/rng.hpp"
#include "chronofuse/temporal.hpp"
#include "chronofuse/tensor.hpp"

using namespace chronofuse;

namespace {

FeatureSequence make_seq(FrameRate rate, std::size_t frames, std::size_t dim, double fill) {
    FeatureSequence s;
    s.rate = rate;
    s.dim = dim;
    s.frames.assign(frames * dim, fill);
    return s;
}

std::filesystem::path temp_file(const char* tag) {
    return std::filesystem::temp_directory_path() / (std::string("chronofuse_temporal_") + tag + ".mmfs");
}

}  // namespace

TEST_SUITE_BEGIN("temporal");

TEST_CASE("frame rates reduce to lowest terms and reject zero") {
    FrameRate r(60, 2);
    CHECK(r.num == 30);
    CHECK(r.den == 1);
    CHECK(r == kVisualRate);
    CHECK_THROWS_AS(FrameRate(0, 1), ContractError);
    CHECK_THROWS_AS(FrameRate(1, 0), ContractError);
}

TEST_CASE("resampling 3 seconds of 30 Hz to 100 Hz yields 300 frames") {
    FeatureSequence s = make_seq(kVisualRate, 90, 2, 1.0);
    FeatureSequence out = resample_linear(s, kMelRate);
    CHECK(out.frame_count() == 300);
    CHECK(out.rate == kMelRate);
    CHECK(out.dim == 2);
}

TEST_CASE("resampling a constant sequence preserves the constant") {
    FeatureSequence s = make_seq(kVisualRate, 45, 3, -2.75);
    FeatureSequence out = resample_linear(s, kMelRate);
    for (const double v : out.frames) CHECK(v == -2.75);
}

TEST_CASE("two frames at 1 Hz resampled to 4 Hz interpolate then clamp") {
    FeatureSequence s;
    s.rate = FrameRate(1, 1);
    s.dim = 1;
    s.frames = {0.0, 10.0};
    FeatureSequence out = resample_linear(s, FrameRate(4, 1));
    // count = round(2 * 4/1) = 8; positions t/4 give the interpolated head
    // values and everything past the final source frame clamps to it
    REQUIRE(out.frame_count() == 8);
    CHECK(out.frames[0] == 0.0);
    CHECK(out.frames[1] == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(out.frames[2] == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(out.frames[3] == doctest::Approx(7.5).epsilon(1e-12));
    for (std::size_t t = 4; t < 8; ++t) CHECK(out.frames[t] == 10.0);
}

TEST_CASE("resampling rejects empty and single-frame inputs") {
    FeatureSequence empty = make_seq(kVisualRate, 0, 2, 0.0);
    CHECK_THROWS_AS(resample_linear(empty, kMelRate), DataError);
    FeatureSequence one = make_seq(kVisualRate, 1, 2, 0.0);
    CHECK_THROWS_AS(resample_linear(one, kMelRate), DataError);
    // same-rate single frame passes through
    CHECK(resample_linear(one, kVisualRate).frame_count() == 1);
}

TEST_CASE("resampling preserves duration within one output frame") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t t_in = 2 + rng.uniform_int(0, 400);
        FeatureSequence s = make_seq(kVisualRate, t_in, 1, 0.0);
        FeatureSequence out = resample_linear(s, kMelRate);
        const double din = static_cast<double>(t_in) / 30.0;
        const double dout = static_cast<double>(out.frame_count()) / 100.0;
        CHECK(std::abs(dout - din) <= 1.0 / 100.0 + 1e-12);
    }
}

TEST_CASE("resampling reproduces a linear ramp at interpolated positions") {
    FeatureSequence s;
    s.rate = kVisualRate;
    s.dim = 1;
    const std::size_t t_in = 60;
    for (std::size_t i = 0; i < t_in; ++i) s.frames.push_back(3.0 + 0.5 * static_cast<double>(i));
    FeatureSequence out = resample_linear(s, kMelRate);
    for (std::size_t t = 0; t < out.frame_count(); ++t) {
        const double p = static_cast<double>(t) * 30.0 / 100.0;
        const double expect = p >= static_cast<double>(t_in - 1)
                                  ? s.frames.back()  // endpoint clamp
                                  : 3.0 + 0.5 * p;
        CHECK(out.frames[t] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("token counts for the 100 to 50 to 25 Hz chain") {
    CHECK(token_count_for(120, TokenStage::mel) == 12000);
    CHECK(token_count_for(120, TokenStage::encoder_out) == 3000);
    CHECK(token_count_for(1, TokenStage::post_embed) == 50);
    CHECK_THROWS_AS(token_count_for(0, TokenStage::mel), ContractError);
}

TEST_CASE("audio and visual reduction paths agree on token counts for integer seconds") {
    Tensor conv_k = Tensor::from({2, 1, 1}, {0.5, 0.5});
    auto reduce = [&](std::size_t t100) {
        Tensor x = Tensor::from({t100, 1}, std::vector<double>(t100, 1.0));
        Tensor c = conv1d_strided(x, conv_k, 2);
        Tensor p = avgpool1d(c, 2);
        return p.rows();
    };
    for (const std::uint64_t d : {1ull, 2ull, 3ull, 7ull, 120ull}) {
        const std::size_t audio_tokens = reduce(100 * d);
        FeatureSequence vis = make_seq(kVisualRate, 30 * d, 1, 0.0);
        FeatureSequence vis100 = resample_linear(vis, kMelRate);
        REQUIRE(vis100.frame_count() == 100 * d);
        const std::size_t visual_tokens = reduce(vis100.frame_count());
        CHECK(audio_tokens == 25 * d);
        CHECK(visual_tokens == 25 * d);
        CHECK(audio_tokens == token_count_for(d, TokenStage::encoder_out));
    }
}

TEST_CASE("alignment check passes on matching streams and reports mismatches") {
    FeatureSequence a = make_seq(kEncoderOutRate, 3000, 4, 0.0);
    FeatureSequence v = make_seq(kEncoderOutRate, 3000, 4, 0.0);
    CHECK(check_alignment(a, v).ok);

    FeatureSequence v_short = make_seq(kEncoderOutRate, 2999, 4, 0.0);
    const auto count_report = check_alignment(a, v_short);
    CHECK_FALSE(count_report.ok);
    CHECK(count_report.message.find("3000") != std::string::npos);
    CHECK(count_report.message.find("2999") != std::string::npos);

    FeatureSequence v_off = make_seq(kEncoderOutRate, 3000, 4, 0.0);
    v_off.origin_s = 1;
    const auto origin_report = check_alignment(a, v_off);
    CHECK_FALSE(origin_report.ok);
    CHECK(origin_report.message.find("origin") != std::string::npos);

    FeatureSequence wrong_rate = make_seq(kMelRate, 3000, 4, 0.0);
    CHECK_THROWS_AS(check_alignment(a, wrong_rate), ContractError);
}

TEST_CASE("feature file round trip preserves structure and f32-exact values") {
    FeatureSequence s;
    s.rate = kVisualRate;
    s.dim = 3;
    Rng rng(32);
    for (int i = 0; i < 90; ++i) s.frames.push_back(std::round(rng.normal() * 1024.0) / 1024.0);
    const auto path = temp_file("roundtrip");
    save_features(path.string(), s);
    FeatureSequence r = load_features(path.string());
    CHECK(r.rate == s.rate);
    CHECK(r.dim == s.dim);
    REQUIRE(r.frame_count() == s.frame_count());
    for (std::size_t i = 0; i < s.frames.size(); ++i) CHECK(r.frames[i] == s.frames[i]);

    // second save of the loaded sequence is byte-identical
    const auto path2 = temp_file("roundtrip2");
    save_features(path2.string(), r);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("feature file loader rejects bad magic and truncation") {
    const auto path = temp_file("bad");
    {
        std::ofstream os(path, std::ios::binary);
        os.write("WHAT", 4);
    }
    CHECK_THROWS_AS(load_features(path.string()), DataError);

    FeatureSequence s = make_seq(kMelRate, 10, 2, 1.0);
    save_features(path.string(), s);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
    CHECK_THROWS_AS(load_features(path.string()), DataError);
    CHECK_THROWS_AS(load_features("/nonexistent/feat.mmfs"), DataError);
    std::filesystem::remove(path);
}

TEST_SUITE_END();
