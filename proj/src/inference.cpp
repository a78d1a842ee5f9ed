#include "chronofuse/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <utility>

#include <json.hpp>

#include "chronofuse/errors.hpp"

using ordered_json = nlohmann::ordered_json;

namespace chronofuse {

void InferenceConfig::validate() const {
    if (scales_s.empty()) throw ConfigError("inference needs at least one window scale");
    if (scales_s.size() % 2 == 0)
        throw ConfigError("the scale count must be odd so the cross-scale vote cannot tie");
    for (const std::uint64_t s : scales_s)
        if (s == 0) throw ConfigError("window scales must be positive seconds");
    std::vector<std::uint64_t> sorted = scales_s;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ConfigError("window scales must be distinct");
    if (windows_per_scale == 0) throw ConfigError("windows_per_scale must be positive");
}

std::vector<std::uint64_t> raw_window_starts(std::uint64_t duration_s, std::uint64_t scale_s, std::size_t count) {
    if (duration_s <= scale_s) throw ContractError("raw_window_starts needs a conversation longer than the scale");
    if (count == 0) throw ContractError("raw_window_starts needs a positive window count");
    if (count == 1) return {0};
    const double span = static_cast<double>(duration_s - scale_s);
    std::vector<std::uint64_t> starts(count);
    for (std::size_t i = 0; i < count; ++i)
        starts[i] = static_cast<std::uint64_t>(
            std::llround(static_cast<double>(i) * span / static_cast<double>(count - 1)));
    return starts;
}

namespace {

WindowPlan whole_conversation_plan(const Dialogue& dialogue, std::uint64_t scale_s, std::size_t count) {
    PlannedWindow w;
    w.start_s = 0;
    w.end_s = dialogue.duration_s;
    w.raw_start_s = 0.0;
    w.raw_end_s = static_cast<double>(dialogue.duration_s);
    w.whole = true;
    WindowPlan plan;
    plan.scale_s = scale_s;
    plan.requested = count;
    plan.windows = {w};
    return plan;
}

}  // namespace

WindowPlan plan_windows(const Dialogue& dialogue, std::uint64_t scale_s, std::size_t count) {
    if (dialogue.duration_s < 1) throw DataError("dialogue " + dialogue.id + " has no duration to plan windows in");
    if (scale_s == 0) throw ConfigError("window scales must be positive seconds");
    if (count == 0) throw ConfigError("windows_per_scale must be positive");

    const std::uint64_t D = dialogue.duration_s;
    if (D <= scale_s) return whole_conversation_plan(dialogue, scale_s, count);

    // Anchors: interviewer utterances leaving room for a full window, the
    // same candidate rule augmentation draws from.
    std::vector<const Utterance*> anchors;
    for (const Utterance& u : dialogue.utterances)
        if (u.speaker == Speaker::interviewer && u.start_s <= static_cast<double>(D - scale_s))
            anchors.push_back(&u);
    if (anchors.empty()) return whole_conversation_plan(dialogue, scale_s, count);

    // Snap each raw start to the nearest anchor second; ties -> the earlier
    // utterance. Dedup by anchor: two raw starts snapping together are one
    // window.
    std::vector<const Utterance*> chosen;
    for (const std::uint64_t raw : raw_window_starts(D, scale_s, count)) {
        const Utterance* best = nullptr;
        double best_dist = 0.0;
        for (const Utterance* u : anchors) {
            const double dist = std::abs(std::floor(u->start_s) - static_cast<double>(raw));
            if (!best || dist < best_dist) {
                best = u;
                best_dist = dist;
            }
        }
        if (std::find(chosen.begin(), chosen.end(), best) == chosen.end()) chosen.push_back(best);
    }
    std::sort(chosen.begin(), chosen.end(),
              [](const Utterance* a, const Utterance* b) { return a->start_s < b->start_s; });

    WindowPlan plan;
    plan.scale_s = scale_s;
    plan.requested = count;
    for (const Utterance* u : chosen) {
        const auto bounds = window_bounds(dialogue, u->start_s, static_cast<double>(scale_s));
        if (!bounds) continue;  // no participant response follows this anchor
        PlannedWindow w;
        w.start_s = bounds->start_s;
        w.end_s = bounds->end_s;
        w.raw_start_s = bounds->raw_start_s;
        w.raw_end_s = bounds->raw_end_s;
        plan.windows.push_back(w);
    }
    if (plan.windows.empty()) return whole_conversation_plan(dialogue, scale_s, count);
    return plan;
}

bool aggregate_scale(const std::vector<bool>& decisions) {
    if (decisions.empty()) throw ContractError("cannot aggregate zero window decisions");
    const auto positives =
        static_cast<std::size_t>(std::count(decisions.begin(), decisions.end(), true));
    return 2 * positives >= decisions.size();
}

bool vote_scales(const std::vector<bool>& per_scale) {
    if (per_scale.empty()) throw ContractError("cannot vote over zero scales");
    if (per_scale.size() % 2 == 0)
        throw ConfigError("cross-scale voting needs an odd scale count; got " +
                          std::to_string(per_scale.size()));
    const auto positives =
        static_cast<std::size_t>(std::count(per_scale.begin(), per_scale.end(), true));
    return 2 * positives > per_scale.size();
}

Metrics evaluate(const std::vector<bool>& predictions, const std::vector<bool>& labels) {
    if (predictions.size() != labels.size())
        throw ContractError("predictions and labels must align one-to-one: " +
                            std::to_string(predictions.size()) + " vs " + std::to_string(labels.size()));
    Metrics m;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] && labels[i]) ++m.tp;
        else if (predictions[i] && !labels[i]) ++m.fp;
        else if (!predictions[i] && labels[i]) ++m.fn;
        else ++m.tn;
    }
    if (m.tp + m.fp > 0) m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
    else m.zero_division = true;
    if (m.tp + m.fn > 0) m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    else m.zero_division = true;
    if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    else m.zero_division = true;
    return m;
}

ConversationPrediction run_inference(const Dialogue& dialogue, const FeatureSequence& audio,
                                     const FeatureSequence& visual, const EncoderStack& audio_enc,
                                     const EncoderStack& visual_enc, const FusionModel& model,
                                     const InferenceConfig& cfg) {
    cfg.validate();
    if (audio.rate != kMelRate || visual.rate != kVisualRate)
        throw ContractError("run_inference expects native-rate feature streams");

    ConversationPrediction pred;
    pred.id = dialogue.id;
    pred.label = dialogue.depressed;

    // Windows are fully determined by their raw anchor boundaries, so
    // identical windows appearing at several scales are classified once.
    // Whole-conversation windows share the (-1, D) key; anchors are never
    // negative.
    std::map<std::pair<double, double>, SegmentDecision> cache;

    std::vector<bool> per_scale;
    for (const std::uint64_t scale : cfg.scales_s) {
        const WindowPlan plan = plan_windows(dialogue, scale, cfg.windows_per_scale);
        ScaleResult res;
        res.scale_s = scale;
        std::vector<bool> decisions;
        for (const PlannedWindow& w : plan.windows) {
            const std::pair<double, double> key =
                w.whole ? std::pair<double, double>{-1.0, static_cast<double>(dialogue.duration_s)}
                        : std::pair<double, double>{w.raw_start_s, w.raw_end_s};
            SegmentDecision dec;
            const auto hit = cache.find(key);
            if (hit != cache.end()) {
                dec = hit->second;
            } else {
                std::optional<SubDialogue> sub;
                if (w.whole) {
                    SubDialogue whole;
                    whole.source_id = dialogue.id;
                    whole.start_s = 0;
                    whole.end_s = dialogue.duration_s;
                    whole.depressed = dialogue.depressed;
                    whole.transcript = dialogue.utterances;
                    whole.audio = audio;
                    whole.visual = visual;
                    if (cfg.remove_interviewer) {
                        try {
                            remove_interviewer_segments(whole);
                            sub = std::move(whole);
                        } catch (const DataError&) {
                        }
                    } else {
                        sub = std::move(whole);
                    }
                } else {
                    sub = build_subdialogue(dialogue, audio, visual, w.raw_start_s,
                                            static_cast<double>(scale), cfg.remove_interviewer);
                }
                if (!sub) {
                    ++res.n_failed;
                    continue;
                }
                try {
                    dec = classify_segment(audio_enc, visual_enc, model, *sub, cfg.mode);
                } catch (const DataError&) {
                    ++res.n_failed;
                    continue;
                }
                cache.emplace(key, dec);
            }
            res.logits.push_back(dec.logit);
            if (dec.positive) ++res.positives;
            decisions.push_back(dec.positive);
        }
        if (decisions.empty())
            throw DataError("conversation " + dialogue.id + ": every window at scale " +
                            std::to_string(scale) + "s failed");
        res.decision = aggregate_scale(decisions);
        per_scale.push_back(res.decision);
        pred.scales.push_back(std::move(res));
    }
    pred.final_positive = vote_scales(per_scale);
    return pred;
}

namespace {

const char* class_name(bool positive) { return positive ? "depressed" : "control"; }

}  // namespace

std::string prediction_report(const ConversationPrediction& pred) {
    ordered_json j;
    j["id"] = pred.id;
    j["per_scale"] = ordered_json::array();
    for (const ScaleResult& s : pred.scales) {
        ordered_json js;
        js["scale_s"] = s.scale_s;
        js["n_windows"] = s.logits.size();
        js["positives"] = s.positives;
        js["decision"] = class_name(s.decision);
        j["per_scale"].push_back(std::move(js));
    }
    j["final"] = class_name(pred.final_positive);
    j["label"] = class_name(pred.label);
    return j.dump();
}

std::string metrics_report(const Metrics& metrics, std::size_t conversations) {
    ordered_json j;
    j["conversations"] = conversations;
    j["tp"] = metrics.tp;
    j["fp"] = metrics.fp;
    j["fn"] = metrics.fn;
    j["tn"] = metrics.tn;
    j["precision"] = metrics.precision;
    j["recall"] = metrics.recall;
    j["f1"] = metrics.f1;
    j["zero_division"] = metrics.zero_division;
    return j.dump(2) + "\n";
}

}  // namespace chronofuse
