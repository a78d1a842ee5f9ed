#include "chronofuse/temporal.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "chronofuse/errors.hpp"

static_assert(std::endian::native == std::endian::little, "MMFS I/O assumes a little-endian host");
static_assert(sizeof(float) == 4, "MMFS stores IEEE-754 binary32 values");

namespace chronofuse {

FrameRate::FrameRate(std::uint64_t n, std::uint64_t d) : num(n), den(d) {
    if (num == 0 || den == 0) throw ContractError("frame rate must be positive");
    const auto g = std::gcd(num, den);
    num /= g;
    den /= g;
}

std::string FrameRate::str() const {
    std::ostringstream os;
    os << num;
    if (den != 1) os << "/" << den;
    os << " Hz";
    return os.str();
}

void FeatureSequence::validate() const {
    if (dim == 0) throw DataError("feature sequence has zero dimension");
    if (frames.size() % dim != 0)
        throw DataError("feature buffer length " + std::to_string(frames.size()) + " is not a multiple of dim " +
                        std::to_string(dim));
}

FeatureSequence resample_linear(const FeatureSequence& seq, FrameRate target) {
    seq.validate();
    const std::size_t t_in = seq.frame_count();
    if (t_in == 0) throw DataError("cannot resample an empty feature sequence");
    if (seq.rate == target) return seq;
    if (t_in < 2) throw DataError("resampling to a different rate requires at least 2 frames");

    // T_out = round(T_in * target/source), round half up, exact arithmetic.
    const std::uint64_t n = static_cast<std::uint64_t>(t_in) * target.num * seq.rate.den;
    const std::uint64_t d = seq.rate.num * target.den;
    const std::uint64_t t_out = (2 * n + d) / (2 * d);

    FeatureSequence out;
    out.rate = target;
    out.dim = seq.dim;
    out.origin_s = seq.origin_s;
    out.frames.resize(static_cast<std::size_t>(t_out) * seq.dim);
    // Source position of output frame t is t * source/target; split into an
    // integer index and a fractional part without touching floats.
    const std::uint64_t pos_num = seq.rate.num * target.den;
    const std::uint64_t pos_den = target.num * seq.rate.den;
    for (std::uint64_t t = 0; t < t_out; ++t) {
        const std::uint64_t p = t * pos_num;
        std::uint64_t i0 = p / pos_den;
        double frac = static_cast<double>(p % pos_den) / static_cast<double>(pos_den);
        if (i0 >= t_in - 1) {  // endpoint clamp
            i0 = t_in - 1;
            frac = 0.0;
        }
        const double* a = seq.row(i0);
        const double* b = seq.row(frac > 0.0 ? i0 + 1 : i0);
        double* o = out.row(t);
        for (std::size_t j = 0; j < seq.dim; ++j) o[j] = (1.0 - frac) * a[j] + frac * b[j];
    }
    return out;
}

std::uint64_t token_count_for(std::uint64_t duration_s, TokenStage stage) {
    if (duration_s == 0) throw ContractError("token_count_for requires a positive duration");
    switch (stage) {
        case TokenStage::mel:
            return duration_s * 100;
        case TokenStage::post_embed:
            return duration_s * 50;
        case TokenStage::encoder_out:
            return duration_s * 25;
    }
    throw ContractError("unknown token stage");
}

AlignmentReport check_alignment(const FeatureSequence& audio_out, const FeatureSequence& visual_out) {
    if (audio_out.rate != kEncoderOutRate || visual_out.rate != kEncoderOutRate)
        throw ContractError("alignment check requires both streams at " + kEncoderOutRate.str());
    AlignmentReport r;
    const std::size_t ca = audio_out.frame_count(), cv = visual_out.frame_count();
    if (ca != cv) {
        r.ok = false;
        r.message = "token counts differ: audio " + std::to_string(ca) + " vs visual " + std::to_string(cv);
        return r;
    }
    if (audio_out.origin_s != visual_out.origin_s) {
        r.ok = false;
        r.message = "origins differ: audio starts at " + std::to_string(audio_out.origin_s) + " s, visual at " +
                    std::to_string(visual_out.origin_s) + " s";
        return r;
    }
    r.ok = true;
    r.message = "aligned: " + std::to_string(ca) + " tokens from " + std::to_string(audio_out.origin_s) + " s";
    return r;
}

namespace {

constexpr char kMagic[4] = {'M', 'M', 'F', 'S'};

template <typename T>
void put(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("truncated feature file: " + path);
    return v;
}

}  // namespace

void save_features(const std::string& path, const FeatureSequence& seq) {
    seq.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open feature file for writing: " + path);
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kFeatureFileVersion);
    put<std::uint64_t>(os, seq.rate.num);
    put<std::uint64_t>(os, seq.rate.den);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(seq.dim));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(seq.frame_count()));
    std::vector<float> buf(seq.frames.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(seq.frames[i]);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    os.flush();
    if (!os) throw DataError("failed while writing feature file: " + path);
}

FeatureSequence load_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open feature file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw DataError("not an MMFS feature file: " + path);
    const auto version = get<std::uint32_t>(is, path);
    if (version != kFeatureFileVersion)
        throw DataError("unsupported feature file version " + std::to_string(version) + ": " + path);
    FeatureSequence seq;
    const auto num = get<std::uint64_t>(is, path);
    const auto den = get<std::uint64_t>(is, path);
    seq.rate = FrameRate(num, den);
    seq.dim = get<std::uint32_t>(is, path);
    if (seq.dim == 0) throw DataError("feature file declares zero dimension: " + path);
    const auto count = get<std::uint64_t>(is, path);
    std::vector<float> buf(static_cast<std::size_t>(count) * seq.dim);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw DataError("truncated feature file: " + path);
    seq.frames.resize(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) seq.frames[i] = static_cast<double>(buf[i]);
    return seq;
}

}  // namespace chronofuse
