#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace chronofuse {

// Exact rational frame rate (frames per second = num/den). Kept rational so
// frame-count conversions between modality grids never accumulate float
// drift.
struct FrameRate {
    std::uint64_t num = 1;
    std::uint64_t den = 1;

    FrameRate() = default;
    FrameRate(std::uint64_t n, std::uint64_t d);

    double hz() const { return static_cast<double>(num) / static_cast<double>(den); }
    bool operator==(const FrameRate& o) const { return num == o.num && den == o.den; }
    bool operator!=(const FrameRate& o) const { return !(*this == o); }
    std::string str() const;
};

inline const FrameRate kMelRate{100, 1};         // 10 ms mel frames
inline const FrameRate kVisualRate{30, 1};       // 30 fps visual features
inline const FrameRate kPostEmbedRate{50, 1};    // 20 ms per token after conv embed
inline const FrameRate kEncoderOutRate{25, 1};   // 40 ms per token at encoder output

// A rate-stamped time series of fixed-dimension feature vectors, row-major.
// origin_s records where the slice starts inside its source dialogue.
struct FeatureSequence {
    FrameRate rate;
    std::size_t dim = 0;
    std::vector<double> frames;  // frame_count x dim
    std::uint64_t origin_s = 0;

    std::size_t frame_count() const { return dim == 0 ? 0 : frames.size() / dim; }
    double duration_s() const { return static_cast<double>(frame_count()) / rate.hz(); }
    double* row(std::size_t t) { return frames.data() + t * dim; }
    const double* row(std::size_t t) const { return frames.data() + t * dim; }
    void validate() const;  // throws DataError on structural problems
};

// Linear resampling onto a new rate. Output frame count is
// round(T * target/source) computed in exact integer arithmetic; output
// frame t reads source position t * source/target with endpoint clamping.
FeatureSequence resample_linear(const FeatureSequence& seq, FrameRate target);

enum class TokenStage { mel, post_embed, encoder_out };

// Token counts for an integer-second duration at each point of the
// 100 Hz -> 50 Hz -> 25 Hz reduction chain.
std::uint64_t token_count_for(std::uint64_t duration_s, TokenStage stage);

struct AlignmentReport {
    bool ok = false;
    std::string message;
};

// Both sequences must sit on the encoder-out grid; reports count/origin
// mismatches instead of throwing (rate violations are contract errors).
AlignmentReport check_alignment(const FeatureSequence& audio_out, const FeatureSequence& visual_out);

// MMFS feature file I/O. Layout, little-endian: magic "MMFS", u32 version,
// u64 rate numerator, u64 rate denominator, u32 dim, u64 frame count, then
// frame-major f32 values. Values are stored in 32-bit and promoted to
// doubles on load.
inline constexpr std::uint32_t kFeatureFileVersion = 1;

void save_features(const std::string& path, const FeatureSequence& seq);
FeatureSequence load_features(const std::string& path);

}  // namespace chronofuse
