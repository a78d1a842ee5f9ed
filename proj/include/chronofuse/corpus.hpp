#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chronofuse/temporal.hpp"

namespace chronofuse {

class Rng;

enum class Speaker { interviewer, participant };

const std::string& speaker_name(Speaker s);
Speaker speaker_from(const std::string& name);

struct Utterance {
    Speaker speaker = Speaker::interviewer;
    double start_s = 0.0;
    double end_s = 0.0;
    std::string text;
};

struct Dialogue {
    std::string id;
    bool depressed = false;
    std::uint64_t duration_s = 0;
    std::vector<Utterance> utterances;
    std::string audio_path;   // relative to the manifest directory
    std::string visual_path;  // relative to the manifest directory
};

struct CorpusSplit {
    std::string name;
    std::vector<Dialogue> dialogues;

    std::size_t depressed_count() const;
};

struct Corpus {
    CorpusSplit train, dev, test;
};

// Synthetic-corpus generation knobs. Split counts default to the DAIC-WoZ
// proportions the pipeline is normally evaluated against; durations and
// signal strengths are free parameters.
struct GenConfig {
    std::size_t train_total = 107, train_depressed = 30;
    std::size_t dev_total = 35, dev_depressed = 12;
    std::size_t test_total = 47, test_depressed = 14;
    std::size_t d_a = 64;  // audio feature dim (mel-rate stream)
    std::size_t d_v = 32;  // visual feature dim
    std::uint64_t min_duration_s = 60;
    std::uint64_t max_duration_s = 150;
    // Strengths of the three planted class signals; 0 removes a signal
    // entirely (class-conditional distributions become identical).
    double audio_signal = 1.0;   // participant-segment modulation damping
    double visual_signal = 1.0;  // participant-segment variance damping
    double p_text = 0.35;        // marker-token rate in depressed participant turns

    void validate() const;  // throws ConfigError
};

// Generates all three splits under out_dir: feature files in
// out_dir/features plus one JSON-lines manifest per split. Fully
// deterministic in (config, seed) regardless of scheduling.
Corpus generate_corpus(const GenConfig& cfg, std::uint64_t seed, const std::string& out_dir);

// Manifest I/O. save_corpus writes {train,dev,test}.jsonl into dir;
// load_corpus reads them back and validates structure plus the referenced
// feature files (existence, rate, and duration agreement).
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

// Resolves a dialogue's feature streams against the corpus directory.
FeatureSequence load_dialogue_audio(const Dialogue& d, const std::string& corpus_dir);
FeatureSequence load_dialogue_visual(const Dialogue& d, const std::string& corpus_dir);

}  // namespace chronofuse
