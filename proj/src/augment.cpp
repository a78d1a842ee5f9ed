#include "chronofuse/augment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "chronofuse/errors.hpp"
#include "chronofuse/rng.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace chronofuse {

namespace {

constexpr int kRetryCap = 20;

// Copies frames [first, last) of seq, restamping the origin.
FeatureSequence slice_frames(const FeatureSequence& seq, std::uint64_t first, std::uint64_t last,
                             std::uint64_t origin_s) {
    FeatureSequence out;
    out.rate = seq.rate;
    out.dim = seq.dim;
    out.origin_s = origin_s;
    out.frames.assign(seq.frames.begin() + static_cast<std::ptrdiff_t>(first * seq.dim),
                      seq.frames.begin() + static_cast<std::ptrdiff_t>(last * seq.dim));
    return out;
}

// Drops the frames covered by [span_start, span_end) second intervals,
// expanding each interval outward to whole frames at seq's rate.
FeatureSequence drop_spans(const FeatureSequence& seq, const std::vector<std::pair<double, double>>& spans,
                           double slice_origin) {
    const double hz = seq.rate.hz();
    std::vector<bool> keep(seq.frame_count(), true);
    for (const auto& [a, b] : spans) {
        const auto first = static_cast<std::uint64_t>(std::floor((a - slice_origin) * hz));
        const auto last = std::min<std::uint64_t>(seq.frame_count(),
                                                  static_cast<std::uint64_t>(std::ceil((b - slice_origin) * hz)));
        for (std::uint64_t f = first; f < last; ++f) keep[f] = false;
    }
    FeatureSequence out;
    out.rate = seq.rate;
    out.dim = seq.dim;
    out.origin_s = seq.origin_s;
    for (std::size_t f = 0; f < keep.size(); ++f)
        if (keep[f]) out.frames.insert(out.frames.end(), seq.row(f), seq.row(f) + seq.dim);
    return out;
}

ordered_json meta_to_json(const SubDialogueMeta& m) {
    ordered_json j;
    j["source_id"] = m.source_id;
    j["start_s"] = m.start_s;
    j["end_s"] = m.end_s;
    j["label"] = m.depressed ? "depressed" : "control";
    j["transcript"] = ordered_json::array();
    for (const auto& u : m.transcript) {
        ordered_json ju;
        ju["speaker"] = speaker_name(u.speaker);
        ju["start_s"] = u.start_s;
        ju["end_s"] = u.end_s;
        ju["text"] = u.text;
        j["transcript"].push_back(std::move(ju));
    }
    j["audio_path"] = m.audio_path;
    j["visual_path"] = m.visual_path;
    j["rng_stream"] = m.rng_stream;
    return j;
}

void validate_meta(const SubDialogueMeta& m) {
    if (m.transcript.empty()) throw DataError("subdialogue " + m.rng_stream + ": empty transcript");
    if (m.transcript.front().speaker != Speaker::interviewer)
        throw DataError("subdialogue " + m.rng_stream + ": transcript must open with the interviewer");
    if (m.transcript.back().speaker != Speaker::participant)
        throw DataError("subdialogue " + m.rng_stream + ": transcript must close with the participant");
    if (m.start_s >= m.end_s) throw DataError("subdialogue " + m.rng_stream + ": empty time range");
}

}  // namespace

void AugConfig::validate() const {
    if (m_plus == 0) throw ConfigError("m_plus must be positive");
    if (d_min_s == 0) throw ConfigError("d_min_s must be positive");
    if (d_min_s >= d_max_s) throw ConfigError("d_min_s must be smaller than d_max_s");
}

std::size_t plan_counts(std::size_t n_plus, std::size_t n_minus, std::size_t m_plus, bool literal_m_minus) {
    if (n_plus == 0 || n_minus == 0 || m_plus == 0)
        throw ContractError("plan_counts requires positive dialogue and sample counts");
    const double m = static_cast<double>(m_plus);
    const double ratio = literal_m_minus ? static_cast<double>(n_minus) / static_cast<double>(n_plus)
                                         : static_cast<double>(n_plus) / static_cast<double>(n_minus);
    return static_cast<std::size_t>(std::llround(m * ratio));
}

std::optional<WindowBounds> window_bounds(const Dialogue& dialogue, double raw_start, double d) {
    const auto start_s = static_cast<std::uint64_t>(std::floor(raw_start));

    // End candidates: ends of participant responses lying fully after the
    // chosen start; pick the one closest to start + d (ties -> earlier).
    const double target_end = static_cast<double>(start_s) + d;
    double best_end = -1.0, best_dist = 0.0;
    for (const auto& u : dialogue.utterances) {
        if (u.speaker != Speaker::participant || u.start_s < raw_start) continue;
        const double dist = std::abs(u.end_s - target_end);
        if (best_end < 0.0 || dist < best_dist) {
            best_end = u.end_s;
            best_dist = dist;
        }
    }
    if (best_end < 0.0) return std::nullopt;

    WindowBounds bounds;
    bounds.start_s = start_s;
    bounds.end_s =
        std::min<std::uint64_t>(static_cast<std::uint64_t>(std::ceil(best_end)), dialogue.duration_s);
    bounds.raw_start_s = raw_start;
    bounds.raw_end_s = best_end;
    return bounds;
}

std::optional<SubDialogue> build_subdialogue(const Dialogue& dialogue, const FeatureSequence& audio,
                                             const FeatureSequence& visual, double raw_start, double d,
                                             bool remove_interviewer) {
    if (audio.rate != kMelRate || visual.rate != kVisualRate)
        throw ContractError("build_subdialogue expects native-rate feature streams");
    const auto bounds = window_bounds(dialogue, raw_start, d);
    if (!bounds) return std::nullopt;

    SubDialogue sub;
    sub.source_id = dialogue.id;
    sub.start_s = bounds->start_s;
    sub.end_s = bounds->end_s;
    sub.depressed = dialogue.depressed;
    for (const auto& u : dialogue.utterances)
        if (u.start_s >= raw_start && u.end_s <= bounds->raw_end_s) sub.transcript.push_back(u);
    if (sub.transcript.empty() || sub.transcript.front().speaker != Speaker::interviewer ||
        sub.transcript.back().speaker != Speaker::participant)
        return std::nullopt;

    const auto a_ps = audio.rate.num / audio.rate.den;
    const auto v_ps = visual.rate.num / visual.rate.den;
    sub.audio = slice_frames(audio, sub.start_s * a_ps,
                             std::min<std::uint64_t>(sub.end_s * a_ps, audio.frame_count()), sub.start_s);
    sub.visual = slice_frames(visual, sub.start_s * v_ps,
                              std::min<std::uint64_t>(sub.end_s * v_ps, visual.frame_count()), sub.start_s);
    if (remove_interviewer) {
        try {
            remove_interviewer_segments(sub);
        } catch (const DataError&) {
            return std::nullopt;  // degenerate window
        }
    }
    return sub;
}

std::optional<SubDialogue> sample_subdialogue(const Dialogue& dialogue, const FeatureSequence& audio,
                                              const FeatureSequence& visual, const AugConfig& cfg, Rng& rng) {
    cfg.validate();
    if (audio.rate != kMelRate || visual.rate != kVisualRate)
        throw ContractError("sample_subdialogue expects native-rate feature streams");
    const double D = static_cast<double>(dialogue.duration_s);
    if (dialogue.duration_s < cfg.d_min_s) return std::nullopt;  // too short for any draw

    for (int attempt = 0; attempt < kRetryCap; ++attempt) {
        const double d = rng.uniform(static_cast<double>(cfg.d_min_s), static_cast<double>(cfg.d_max_s));

        // Candidate starts: interviewer utterance starts with the sampled
        // length still fitting, i.e. within [0, D - d].
        std::vector<double> starts;
        for (const auto& u : dialogue.utterances)
            if (u.speaker == Speaker::interviewer && u.start_s <= D - d) starts.push_back(u.start_s);
        if (starts.empty()) continue;
        const double raw_start = starts[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(starts.size()) - 1))];

        auto sub = build_subdialogue(dialogue, audio, visual, raw_start, d, cfg.remove_interviewer);
        if (sub) return sub;  // degenerate draws fall through to a retry
    }
    return std::nullopt;
}

void remove_interviewer_segments(SubDialogue& sub) {
    std::vector<std::pair<double, double>> spans;
    for (const auto& u : sub.transcript) {
        if (u.speaker != Speaker::interviewer) continue;
        const double a = std::max(u.start_s, static_cast<double>(sub.start_s));
        const double b = std::min(u.end_s, static_cast<double>(sub.end_s));
        if (a < b) spans.emplace_back(a, b);
    }
    FeatureSequence audio = drop_spans(sub.audio, spans, static_cast<double>(sub.start_s));
    FeatureSequence visual = drop_spans(sub.visual, spans, static_cast<double>(sub.start_s));
    if (audio.frame_count() == 0 || visual.frame_count() == 0)
        throw DataError("subdialogue " + sub.source_id + " [" + std::to_string(sub.start_s) + "," +
                        std::to_string(sub.end_s) + "]: no participant frames after interviewer removal");
    sub.audio = std::move(audio);
    sub.visual = std::move(visual);
}

AugmentResult augment_split(const CorpusSplit& split, const std::string& corpus_dir, const AugConfig& cfg,
                            std::uint64_t seed, const std::string& out_dir) {
    cfg.validate();
    const std::size_t n_plus = split.depressed_count();
    const std::size_t n_minus = split.dialogues.size() - n_plus;
    if (n_plus == 0 || n_minus == 0)
        throw DataError("split " + split.name + " needs both classes to plan augmentation counts");
    const std::size_t m_minus = plan_counts(n_plus, n_minus, cfg.m_plus, cfg.literal_m_minus);

    fs::create_directories(fs::path(out_dir) / "features");
    const Rng root(seed);
    AugmentResult result;
    for (const auto& dialogue : split.dialogues) {
        const std::size_t want = dialogue.depressed ? cfg.m_plus : m_minus;
        result.requested += want;
        const FeatureSequence audio = load_dialogue_audio(dialogue, corpus_dir);
        const FeatureSequence visual = load_dialogue_visual(dialogue, corpus_dir);
        for (std::size_t k = 0; k < want; ++k) {
            Rng sr = root.derive(dialogue.id, k);
            auto sub = sample_subdialogue(dialogue, audio, visual, cfg, sr);
            const std::string stream = dialogue.id + ":" + std::to_string(k);
            if (!sub) {
                ++result.skipped;
                result.warnings.push_back("skipped sample " + stream + ": no feasible subdialogue");
                continue;
            }
            SubDialogueMeta meta;
            meta.source_id = sub->source_id;
            meta.start_s = sub->start_s;
            meta.end_s = sub->end_s;
            meta.depressed = sub->depressed;
            meta.transcript = std::move(sub->transcript);
            meta.rng_stream = stream;
            const std::string stem = "features/" + dialogue.id + "-" + std::to_string(k);
            meta.audio_path = stem + ".audio.mmfs";
            meta.visual_path = stem + ".visual.mmfs";
            save_features((fs::path(out_dir) / meta.audio_path).string(), sub->audio);
            save_features((fs::path(out_dir) / meta.visual_path).string(), sub->visual);
            result.subdialogues.push_back(std::move(meta));
        }
    }
    if (result.skipped * 10 > result.requested)
        throw DataError("augmentation skipped " + std::to_string(result.skipped) + " of " +
                        std::to_string(result.requested) + " requested samples (>10%)");
    save_subdialogues(result.subdialogues, (fs::path(out_dir) / "subdialogues.jsonl").string());
    return result;
}

void save_subdialogues(const std::vector<SubDialogueMeta>& subs, const std::string& manifest_path) {
    std::ofstream os(manifest_path, std::ios::trunc);
    if (!os) throw DataError("cannot write subdialogue manifest: " + manifest_path);
    for (const auto& m : subs) os << meta_to_json(m).dump() << "\n";
    if (!os) throw DataError("failed while writing subdialogue manifest: " + manifest_path);
}

std::vector<SubDialogueMeta> load_subdialogues(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw DataError("missing subdialogue manifest: " + manifest_path);
    std::vector<SubDialogueMeta> subs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("manifest " + manifest_path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        SubDialogueMeta m;
        for (const auto& key :
             {"source_id", "start_s", "end_s", "label", "transcript", "audio_path", "visual_path", "rng_stream"})
            if (!j.contains(key))
                throw DataError("manifest " + manifest_path + " line " + std::to_string(lineno) + ": missing key '" +
                                std::string(key) + "'");
        m.source_id = j.at("source_id").get<std::string>();
        m.start_s = j.at("start_s").get<std::uint64_t>();
        m.end_s = j.at("end_s").get<std::uint64_t>();
        const auto label = j.at("label").get<std::string>();
        if (label != "depressed" && label != "control")
            throw DataError("subdialogue " + m.source_id + ": unknown label '" + label + "'");
        m.depressed = label == "depressed";
        for (const auto& ju : j.at("transcript")) {
            Utterance u;
            u.speaker = speaker_from(ju.at("speaker").get<std::string>());
            u.start_s = ju.at("start_s").get<double>();
            u.end_s = ju.at("end_s").get<double>();
            u.text = ju.at("text").get<std::string>();
            m.transcript.push_back(std::move(u));
        }
        m.audio_path = j.at("audio_path").get<std::string>();
        m.visual_path = j.at("visual_path").get<std::string>();
        m.rng_stream = j.at("rng_stream").get<std::string>();
        validate_meta(m);
        subs.push_back(std::move(m));
    }
    return subs;
}

FeatureSequence load_sub_audio(const SubDialogueMeta& sub, const std::string& dir) {
    return load_features((fs::path(dir) / sub.audio_path).string());
}

FeatureSequence load_sub_visual(const SubDialogueMeta& sub, const std::string& dir) {
    return load_features((fs::path(dir) / sub.visual_path).string());
}

}  // namespace chronofuse
