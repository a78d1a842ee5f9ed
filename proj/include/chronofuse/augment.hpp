#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "chronofuse/corpus.hpp"
#include "chronofuse/temporal.hpp"

namespace chronofuse {

class Rng;

// Timestamp-synchronized subdialogue augmentation knobs.
struct AugConfig {
    std::size_t m_plus = 1000;         // subdialogues per depressed dialogue
    std::uint64_t d_min_s = 30;        // sampled-length range, seconds
    std::uint64_t d_max_s = 120;
    bool remove_interviewer = true;    // drop interviewer frames, keep transcripts
    // The augmentation algorithm's balancing formula is stated as
    // M- = N-/N+ * M+, which inflates rather than balances the negative
    // class. Off (default) uses the balancing direction M- = round(M+ N+/N-);
    // on reproduces the stated formula verbatim.
    bool literal_m_minus = false;

    void validate() const;  // throws ConfigError
};

// Negative-class subdialogue count for n_plus/n_minus dialogues at m_plus
// samples per positive. All arguments must be positive.
std::size_t plan_counts(std::size_t n_plus, std::size_t n_minus, std::size_t m_plus, bool literal_m_minus = false);

// One augmented sample: integer-second boundaries, the transcript of both
// speakers, and feature slices (participant-only when remove_interviewer).
struct SubDialogue {
    std::string source_id;
    std::uint64_t start_s = 0;
    std::uint64_t end_s = 0;
    bool depressed = false;
    std::vector<Utterance> transcript;  // absolute source-dialogue timestamps
    FeatureSequence audio;
    FeatureSequence visual;
    std::string rng_stream;  // "<dialogue id>:<sample index>"
};

// Integer window boundaries under the augmentation rules: start = the
// anchoring interviewer utterance start floored to a whole second; end =
// the participant utterance end nearest start + d (ties -> the earlier
// utterance), ceiled and clamped to the dialogue length. nullopt when no
// participant utterance begins at or after raw_start.
struct WindowBounds {
    std::uint64_t start_s = 0;
    std::uint64_t end_s = 0;
    double raw_start_s = 0.0;  // the anchoring interviewer utterance start
    double raw_end_s = 0.0;    // the closing participant utterance end
};
std::optional<WindowBounds> window_bounds(const Dialogue& dialogue, double raw_start, double d);

// Deterministically realizes the window anchored at the interviewer
// utterance starting at raw_start with target length d seconds: transcript
// = utterances lying fully inside [raw_start, raw_end]; features sliced to
// the integer bounds; interviewer frames optionally removed. nullopt when
// the window has no valid bounds, its transcript does not open with the
// interviewer and close with the participant, or interviewer removal
// would leave zero feature frames.
std::optional<SubDialogue> build_subdialogue(const Dialogue& dialogue, const FeatureSequence& audio,
                                             const FeatureSequence& visual, double raw_start, double d,
                                             bool remove_interviewer);

// Draws one subdialogue: length d ~ U(d_min, d_max); start = a uniformly
// chosen interviewer utterance start in [0, D-d]; the window itself comes
// from build_subdialogue. Infeasible draws (no interviewer start fits, or
// the window is degenerate) are retried up to a cap; returns nullopt when
// the cap is exhausted or the dialogue is shorter than d_min.
std::optional<SubDialogue> sample_subdialogue(const Dialogue& dialogue, const FeatureSequence& audio,
                                              const FeatureSequence& visual, const AugConfig& cfg, Rng& rng);

// Deletes feature frames inside the transcript's interviewer spans (expanded
// outward to whole frames at each stream's native rate) and concatenates the
// remainder. Transcript untouched. Throws DataError if nothing remains.
void remove_interviewer_segments(SubDialogue& sub);

// Manifest-level view of a stored subdialogue (features stay on disk).
struct SubDialogueMeta {
    std::string source_id;
    std::uint64_t start_s = 0;
    std::uint64_t end_s = 0;
    bool depressed = false;
    std::vector<Utterance> transcript;
    std::string audio_path;   // relative to the manifest directory
    std::string visual_path;
    std::string rng_stream;
};

struct AugmentResult {
    std::vector<SubDialogueMeta> subdialogues;
    std::size_t requested = 0;
    std::size_t skipped = 0;
    std::vector<std::string> warnings;  // one per skipped sample
};

// Augments a whole split: m_plus samples per depressed dialogue and
// plan_counts(...) per control dialogue, deterministic in (cfg, seed)
// regardless of scheduling (each sample owns the stream derived from
// (seed, dialogue id, sample index)). Feature slices are written under
// out_dir/features and the manifest to out_dir/subdialogues.jsonl.
// Throws DataError when more than 10% of requested samples are skipped.
AugmentResult augment_split(const CorpusSplit& split, const std::string& corpus_dir, const AugConfig& cfg,
                            std::uint64_t seed, const std::string& out_dir);

// Manifest I/O (JSON-lines, one subdialogue per line).
void save_subdialogues(const std::vector<SubDialogueMeta>& subs, const std::string& manifest_path);
std::vector<SubDialogueMeta> load_subdialogues(const std::string& manifest_path);

// Resolves a stored subdialogue's feature streams against the directory
// holding its manifest.
FeatureSequence load_sub_audio(const SubDialogueMeta& sub, const std::string& dir);
FeatureSequence load_sub_visual(const SubDialogueMeta& sub, const std::string& dir);

}  // namespace chronofuse
