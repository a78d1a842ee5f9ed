#include "chronofuse/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "chronofuse/errors.hpp"
#include "chronofuse/rng.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace chronofuse {

namespace {

// Generation constants. The planted class signals act only inside
// participant-speech seconds; interviewer speech is class-neutral.
constexpr std::size_t kLatentDim = 8;         // shared slow process driving both modalities
constexpr double kAudioNoise = 0.15;
constexpr double kVisualNoise = 0.15;
constexpr double kMarkerBackgroundRatio = 0.3;  // marker rate in control turns, as a fraction of p_text
constexpr std::size_t kBaseVocab = 150;
constexpr std::size_t kMarkerVocab = 8;
constexpr std::uint64_t kWordsPerSecond = 2;
constexpr std::int64_t kInterviewerMin = 2, kInterviewerMax = 8;
constexpr std::int64_t kParticipantMin = 4, kParticipantMax = 20;

std::string word(std::size_t idx) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "w%03zu", idx);
    return buf;
}

std::string marker(std::size_t idx) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "m%zu", idx);
    return buf;
}

std::string utterance_text(Rng& rng, std::uint64_t dur_s, bool depressed_participant, double p_text) {
    const std::uint64_t n = std::max<std::uint64_t>(1, dur_s * kWordsPerSecond);
    const double marker_p = depressed_participant ? p_text : p_text * kMarkerBackgroundRatio;
    std::string out;
    for (std::uint64_t i = 0; i < n; ++i) {
        if (!out.empty()) out += ' ';
        if (rng.uniform() < marker_p)
            out += marker(static_cast<std::size_t>(rng.uniform_int(0, kMarkerVocab - 1)));
        else
            out += word(static_cast<std::size_t>(rng.uniform_int(0, kBaseVocab - 1)));
    }
    return out;
}

std::vector<double> random_map(Rng& rng, std::size_t rows, std::size_t cols) {
    std::vector<double> m(rows * cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    for (auto& v : m) v = rng.normal() * scale;
    return m;
}

struct DialoguePlan {
    std::uint64_t duration_s = 0;
    std::vector<Utterance> utterances;
    std::vector<bool> participant_second;  // per-second speaker map
};

DialoguePlan plan_turns(Rng& rng, const GenConfig& cfg, bool depressed) {
    const auto target = static_cast<std::uint64_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.min_duration_s), static_cast<std::int64_t>(cfg.max_duration_s)));
    DialoguePlan plan;
    std::uint64_t t = 0;
    // Alternating interviewer/participant turns until the target length is
    // covered; the final participant turn is clamped so the total never falls
    // short of the target (and overshoots it by at most a few seconds).
    while (t < target) {
        const auto ilen = static_cast<std::uint64_t>(rng.uniform_int(kInterviewerMin, kInterviewerMax));
        auto plen = static_cast<std::uint64_t>(rng.uniform_int(kParticipantMin, kParticipantMax));
        if (t + ilen + plen > target)
            plen = std::max<std::uint64_t>(kParticipantMin,
                                           target > t + ilen ? target - t - ilen : 0);
        Utterance iu;
        iu.speaker = Speaker::interviewer;
        iu.start_s = static_cast<double>(t);
        iu.end_s = static_cast<double>(t + ilen);
        iu.text = utterance_text(rng, ilen, false, 0.0);
        Utterance pu;
        pu.speaker = Speaker::participant;
        pu.start_s = static_cast<double>(t + ilen);
        pu.end_s = static_cast<double>(t + ilen + plen);
        pu.text = utterance_text(rng, plen, depressed, cfg.p_text);
        plan.utterances.push_back(std::move(iu));
        plan.utterances.push_back(std::move(pu));
        t += ilen + plen;
    }
    plan.duration_s = t;
    plan.participant_second.assign(t, false);
    for (const auto& u : plan.utterances) {
        if (u.speaker != Speaker::participant) continue;
        for (auto s = static_cast<std::uint64_t>(u.start_s); s < static_cast<std::uint64_t>(u.end_s); ++s)
            plan.participant_second[s] = true;
    }
    return plan;
}

// Piecewise-linear latent with one knot per second; both modality streams
// read the same path so audio-visual pairs are identifiable downstream.
std::vector<double> sample_latent_knots(Rng& rng, std::uint64_t duration_s) {
    std::vector<double> knots((duration_s + 1) * kLatentDim);
    for (auto& v : knots) v = rng.normal();
    return knots;
}

// Renders one modality stream at its native rate. Depressed participant
// seconds are damped: for audio only the latent-driven modulation shrinks
// (flattened temporal dynamics over an unchanged noise floor); for visual the
// whole frame is scaled (reduced overall variance). damp_noise selects the
// second behaviour.
FeatureSequence render_stream(Rng& rng, const DialoguePlan& plan, const std::vector<double>& knots,
                              const std::vector<double>& mix, std::size_t dim, FrameRate rate, bool depressed,
                              double signal, double noise_sd, bool damp_noise) {
    FeatureSequence seq;
    seq.rate = rate;
    seq.dim = dim;
    const auto frames = plan.duration_s * rate.num / rate.den;
    seq.frames.resize(frames * dim);
    const auto per_second = rate.num / rate.den;
    std::vector<double> latent(kLatentDim);
    for (std::uint64_t f = 0; f < frames; ++f) {
        const std::uint64_t sec = f / per_second;
        const double frac = static_cast<double>(f % per_second) / static_cast<double>(per_second);
        const double* k0 = knots.data() + sec * kLatentDim;
        const double* k1 = k0 + kLatentDim;
        for (std::size_t j = 0; j < kLatentDim; ++j) latent[j] = (1.0 - frac) * k0[j] + frac * k1[j];
        const bool damped = depressed && plan.participant_second[sec];
        const double amp = damped ? 1.0 - 0.5 * signal : 1.0;
        const double noise_amp = damp_noise ? amp * noise_sd : noise_sd;
        double* row = seq.row(f);
        for (std::size_t d = 0; d < dim; ++d) {
            const double* mrow = mix.data() + d * kLatentDim;
            double acc = 0.0;
            for (std::size_t j = 0; j < kLatentDim; ++j) acc += mrow[j] * latent[j];
            row[d] = amp * acc + noise_amp * rng.normal();
        }
    }
    return seq;
}

std::vector<bool> assign_labels(Rng rng, std::size_t total, std::size_t positives) {
    std::vector<bool> labels(total, false);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(positives), true);
    // Fisher-Yates over a bool vector (std::vector<bool> proxies break swap)
    for (std::size_t i = total - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)));
        const bool tmp = labels[i];
        labels[i] = labels[j];
        labels[j] = tmp;
    }
    return labels;
}

CorpusSplit generate_split(const GenConfig& cfg, const Rng& root, std::uint64_t split_idx, const std::string& name,
                           const char* prefix, std::size_t total, std::size_t positives,
                           const std::vector<double>& mix_a, const std::vector<double>& mix_v,
                           const std::string& out_dir) {
    CorpusSplit split;
    split.name = name;
    const auto labels = assign_labels(root.derive("labels", split_idx), total, positives);
    for (std::size_t i = 0; i < total; ++i) {
        Rng dr = root.derive("dlg", split_idx, i);
        Dialogue d;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%s%03zu", prefix, i);
        d.id = idbuf;
        d.depressed = labels[i];
        DialoguePlan plan = plan_turns(dr, cfg, d.depressed);
        d.duration_s = plan.duration_s;
        d.utterances = std::move(plan.utterances);
        const auto knots = sample_latent_knots(dr, d.duration_s);
        FeatureSequence audio = render_stream(dr, plan, knots, mix_a, cfg.d_a, kMelRate, d.depressed,
                                              cfg.audio_signal, kAudioNoise, /*damp_noise=*/false);
        FeatureSequence visual = render_stream(dr, plan, knots, mix_v, cfg.d_v, kVisualRate, d.depressed,
                                               cfg.visual_signal, kVisualNoise, /*damp_noise=*/true);
        d.audio_path = "features/" + d.id + ".audio.mmfs";
        d.visual_path = "features/" + d.id + ".visual.mmfs";
        save_features(out_dir + "/" + d.audio_path, audio);
        save_features(out_dir + "/" + d.visual_path, visual);
        split.dialogues.push_back(std::move(d));
    }
    return split;
}

ordered_json utterance_to_json(const Utterance& u) {
    ordered_json j;
    j["speaker"] = speaker_name(u.speaker);
    j["start_s"] = u.start_s;
    j["end_s"] = u.end_s;
    j["text"] = u.text;
    return j;
}

Utterance utterance_from_json(const ordered_json& j, const std::string& dialogue_id) {
    for (const auto& key : {"speaker", "start_s", "end_s", "text"})
        if (!j.contains(key))
            throw DataError("dialogue " + dialogue_id + ": utterance missing key '" + std::string(key) + "'");
    Utterance u;
    u.speaker = speaker_from(j.at("speaker").get<std::string>());
    u.start_s = j.at("start_s").get<double>();
    u.end_s = j.at("end_s").get<double>();
    u.text = j.at("text").get<std::string>();
    return u;
}

void validate_dialogue(const Dialogue& d) {
    if (d.utterances.empty()) throw DataError("dialogue " + d.id + ": no utterances");
    double prev_end = 0.0;
    for (const auto& u : d.utterances) {
        if (!(u.start_s < u.end_s))
            throw DataError("dialogue " + d.id + ": utterance with end_s <= start_s at " + std::to_string(u.start_s));
        if (u.start_s < prev_end - 1e-9)
            throw DataError("dialogue " + d.id + ": overlapping or out-of-order utterances at " +
                            std::to_string(u.start_s));
        prev_end = u.end_s;
    }
    if (prev_end > static_cast<double>(d.duration_s) + 1e-9)
        throw DataError("dialogue " + d.id + ": last utterance ends after duration_s");
}

void validate_features(const Dialogue& d, const std::string& dir) {
    for (const auto& [path, rate] : {std::pair{d.audio_path, kMelRate}, std::pair{d.visual_path, kVisualRate}}) {
        const fs::path full = fs::path(dir) / path;
        if (!fs::exists(full)) throw DataError("dialogue " + d.id + ": missing feature file " + full.string());
        const FeatureSequence seq = load_features(full.string());
        if (seq.rate != rate)
            throw DataError("dialogue " + d.id + ": feature file " + path + " has rate " + seq.rate.str() +
                            ", expected " + rate.str());
        const auto expect = d.duration_s * rate.num / rate.den;
        const auto got = seq.frame_count();
        const auto diff = got > expect ? got - expect : expect - got;
        if (diff > 1)
            throw DataError("dialogue " + d.id + ": feature file " + path + " holds " + std::to_string(got) +
                            " frames, expected " + std::to_string(expect));
    }
}

void save_split(const CorpusSplit& split, const std::string& dir) {
    std::ofstream os(fs::path(dir) / (split.name + ".jsonl"), std::ios::trunc);
    if (!os) throw DataError("cannot write manifest for split " + split.name);
    for (const auto& d : split.dialogues) {
        ordered_json j;
        j["id"] = d.id;
        j["label"] = d.depressed ? "depressed" : "control";
        j["duration_s"] = d.duration_s;
        j["utterances"] = ordered_json::array();
        for (const auto& u : d.utterances) j["utterances"].push_back(utterance_to_json(u));
        j["audio_path"] = d.audio_path;
        j["visual_path"] = d.visual_path;
        os << j.dump() << "\n";
    }
    if (!os) throw DataError("failed while writing manifest for split " + split.name);
}

CorpusSplit load_split(const std::string& name, const std::string& dir) {
    const fs::path path = fs::path(dir) / (name + ".jsonl");
    std::ifstream is(path);
    if (!is) throw DataError("missing corpus manifest: " + path.string());
    CorpusSplit split;
    split.name = name;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("manifest " + path.string() + " line " + std::to_string(lineno) + ": " + e.what());
        }
        Dialogue d;
        for (const auto& key : {"id", "label", "duration_s", "utterances", "audio_path", "visual_path"})
            if (!j.contains(key))
                throw DataError("manifest " + path.string() + " line " + std::to_string(lineno) + ": missing key '" +
                                std::string(key) + "'");
        d.id = j.at("id").get<std::string>();
        const auto label = j.at("label").get<std::string>();
        if (label != "depressed" && label != "control")
            throw DataError("dialogue " + d.id + ": unknown label '" + label + "'");
        d.depressed = label == "depressed";
        d.duration_s = j.at("duration_s").get<std::uint64_t>();
        for (const auto& ju : j.at("utterances")) d.utterances.push_back(utterance_from_json(ju, d.id));
        d.audio_path = j.at("audio_path").get<std::string>();
        d.visual_path = j.at("visual_path").get<std::string>();
        validate_dialogue(d);
        validate_features(d, dir);
        split.dialogues.push_back(std::move(d));
    }
    return split;
}

}  // namespace

const std::string& speaker_name(Speaker s) {
    static const std::string interviewer = "interviewer", participant = "participant";
    return s == Speaker::interviewer ? interviewer : participant;
}

Speaker speaker_from(const std::string& name) {
    if (name == "interviewer") return Speaker::interviewer;
    if (name == "participant") return Speaker::participant;
    throw DataError("unknown speaker '" + name + "'");
}

std::size_t CorpusSplit::depressed_count() const {
    std::size_t n = 0;
    for (const auto& d : dialogues) n += d.depressed ? 1 : 0;
    return n;
}

void GenConfig::validate() const {
    if (train_total == 0 || dev_total == 0 || test_total == 0)
        throw ConfigError("corpus split sizes must be positive");
    if (train_depressed == 0 || train_depressed >= train_total || dev_depressed == 0 ||
        dev_depressed >= dev_total || test_depressed == 0 || test_depressed >= test_total)
        throw ConfigError("each split needs at least one dialogue of each class");
    if (d_a == 0 || d_v == 0) throw ConfigError("feature dimensions must be positive");
    if (min_duration_s < static_cast<std::uint64_t>(kInterviewerMin + kParticipantMin))
        throw ConfigError("min_duration_s must allow at least one interviewer/participant turn pair");
    if (min_duration_s > max_duration_s) throw ConfigError("min_duration_s must not exceed max_duration_s");
    if (audio_signal < 0.0 || audio_signal > 2.0 || visual_signal < 0.0 || visual_signal > 2.0)
        throw ConfigError("signal strengths must lie in [0, 2]");
    if (p_text < 0.0 || p_text > 1.0) throw ConfigError("p_text must lie in [0, 1]");
}

Corpus generate_corpus(const GenConfig& cfg, std::uint64_t seed, const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(fs::path(out_dir) / "features");
    const Rng root = Rng(seed).derive("corpus");
    Rng maps = root.derive("maps");
    const auto mix_a = random_map(maps, cfg.d_a, kLatentDim);
    const auto mix_v = random_map(maps, cfg.d_v, kLatentDim);

    Corpus corpus;
    corpus.train = generate_split(cfg, root, 0, "train", "tr", cfg.train_total, cfg.train_depressed, mix_a, mix_v,
                                  out_dir);
    corpus.dev = generate_split(cfg, root, 1, "dev", "dv", cfg.dev_total, cfg.dev_depressed, mix_a, mix_v, out_dir);
    corpus.test =
        generate_split(cfg, root, 2, "test", "te", cfg.test_total, cfg.test_depressed, mix_a, mix_v, out_dir);
    save_corpus(corpus, out_dir);
    return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
    fs::create_directories(dir);
    save_split(corpus.train, dir);
    save_split(corpus.dev, dir);
    save_split(corpus.test, dir);
}

Corpus load_corpus(const std::string& dir) {
    Corpus corpus;
    corpus.train = load_split("train", dir);
    corpus.dev = load_split("dev", dir);
    corpus.test = load_split("test", dir);
    return corpus;
}

FeatureSequence load_dialogue_audio(const Dialogue& d, const std::string& corpus_dir) {
    return load_features((fs::path(corpus_dir) / d.audio_path).string());
}

FeatureSequence load_dialogue_visual(const Dialogue& d, const std::string& corpus_dir) {
    return load_features((fs::path(corpus_dir) / d.visual_path).string());
}

}  // namespace chronofuse
