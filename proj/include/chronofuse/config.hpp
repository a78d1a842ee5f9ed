#pragma once

#include <cstdint>
#include <string>

#include "chronofuse/align.hpp"
#include "chronofuse/augment.hpp"
#include "chronofuse/corpus.hpp"
#include "chronofuse/encoders.hpp"
#include "chronofuse/fusion.hpp"
#include "chronofuse/inference.hpp"
#include "chronofuse/mae.hpp"

namespace chronofuse {

// Stage I section: optimizer knobs plus the geometry shared by the masked
// autoencoders and the encoder stacks they are transplanted into.
struct Stage1Section {
    Stage1Config train;
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t decoder_layers = 2;
    std::uint64_t chunk_s = 30;
};

struct Stage2Section {
    AlignConfig train;
    std::size_t d_proj = 64;  // shared audio-visual embedding width
};

struct Stage3Section {
    Stage3Config train;
    FusionConfig model;
};

// The whole pipeline's configuration: one JSON document with six sections.
// Every key has a default; published training hyperparameters keep their
// published values.
struct RunConfig {
    GenConfig corpus;
    AugConfig augment;
    Stage1Section stage1;
    Stage2Section stage2;
    Stage3Section stage3;
    InferenceConfig inference;

    EncoderConfig encoder_config(std::size_t d_in) const;
    MaeConfig mae_config(std::size_t d_in) const;
    void validate() const;  // throws ConfigError
};

// The defaults document (exactly what an empty config resolves to).
std::string default_config_text();

// Strict parse: unknown sections or keys are rejected, types are checked,
// and anything omitted keeps its default. The inverse serializes every key
// in canonical order, so parse(serialize(cfg)) == cfg and serializing a
// parsed document reproduces the resolved document byte for byte.
RunConfig parse_run_config(const std::string& json_text);
std::string serialize_run_config(const RunConfig& cfg);

// Reads a config file (DataError when unreadable) and parses it strictly.
RunConfig load_run_config(const std::string& path);

// Applies one dotted override, e.g. "stage1.lr=1e-4" or
// "inference.scales_s=[30,75,120]". The value is parsed as a JSON literal
// and falls back to a plain string; the key must already exist.
std::string apply_override(const std::string& json_text, const std::string& dotted);

// Applies a named preset on top of a document. "paper" keeps the published
// values (no-op); "desk" shrinks the corpus, model, and schedules so the
// full pipeline runs in minutes.
std::string apply_preset(const std::string& json_text, const std::string& preset);

}  // namespace chronofuse
