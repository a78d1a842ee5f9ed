#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chronofuse/augment.hpp"
#include "chronofuse/corpus.hpp"
#include "chronofuse/encoders.hpp"
#include "chronofuse/fusion.hpp"

namespace chronofuse {

// Conversation-level inference knobs. The scale set must stay odd-sized so
// the cross-scale vote can never tie.
struct InferenceConfig {
    std::vector<std::uint64_t> scales_s{30, 75, 120};
    std::size_t windows_per_scale = 200;
    bool remove_interviewer = true;  // must match the augmentation setting used in training
    ModalityMode mode = ModalityMode::text_audio_visual;

    void validate() const;  // throws ConfigError
};

// Evenly spread window starts before boundary snapping:
// round(i * (D - scale) / (count - 1)) for i = 0..count-1; a single
// requested window starts at zero. Requires duration > scale and count >= 1.
std::vector<std::uint64_t> raw_window_starts(std::uint64_t duration_s, std::uint64_t scale_s, std::size_t count);

// One planned window. Snapped windows carry the interviewer utterance start
// they anchor to and the participant utterance end that closes them;
// whole-conversation windows span [0, D] verbatim.
struct PlannedWindow {
    std::uint64_t start_s = 0;
    std::uint64_t end_s = 0;
    double raw_start_s = 0.0;
    double raw_end_s = 0.0;
    bool whole = false;
};

struct WindowPlan {
    std::uint64_t scale_s = 0;
    std::size_t requested = 0;
    std::vector<PlannedWindow> windows;  // ascending by anchor, deduplicated
};

// Plans the windows for one scale. Conversations no longer than the scale
// get the single whole-conversation window; otherwise each raw start is
// snapped to the nearest feasible interviewer-utterance anchor (ties -> the
// earlier utterance), closed by the participant-end rule, and deduplicated
// by anchor. Falls back to the whole-conversation window when no anchor
// leaves room for a full window.
WindowPlan plan_windows(const Dialogue& dialogue, std::uint64_t scale_s, std::size_t count);

// Majority over one scale's window decisions; ties go to the positive
// class (screening favors recall). Empty input is a contract violation.
bool aggregate_scale(const std::vector<bool>& decisions);

// Strict majority across the per-scale decisions; the odd scale count
// (enforced at configuration time) rules out ties.
bool vote_scales(const std::vector<bool>& per_scale);

// Positive-class detection metrics.
struct Metrics {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    bool zero_division = false;  // some ratio had an empty denominator and was zeroed
};

// Confusion counts and F1 on the positive (depressed) class.
Metrics evaluate(const std::vector<bool>& predictions, const std::vector<bool>& labels);

struct ScaleResult {
    std::uint64_t scale_s = 0;
    std::vector<double> logits;  // one per classified window
    std::size_t n_failed = 0;    // windows excluded as degenerate
    std::size_t positives = 0;
    bool decision = false;
};

struct ConversationPrediction {
    std::string id;
    bool label = false;
    std::vector<ScaleResult> scales;
    bool final_positive = false;
};

// Classifies every planned window at every scale and votes across scales.
// Degenerate windows are excluded and counted; a scale whose windows all
// fail is a data error. Deterministic for a fixed model and conversation.
ConversationPrediction run_inference(const Dialogue& dialogue, const FeatureSequence& audio,
                                     const FeatureSequence& visual, const EncoderStack& audio_enc,
                                     const EncoderStack& visual_enc, const FusionModel& model,
                                     const InferenceConfig& cfg);

// One-line JSON report for a conversation, and the corpus-level metrics
// document. Both are byte-stable for fixed inputs.
std::string prediction_report(const ConversationPrediction& pred);
std::string metrics_report(const Metrics& metrics, std::size_t conversations);

}  // namespace chronofuse
