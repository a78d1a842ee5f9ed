#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "chronofuse/augment.hpp"
#include "chronofuse/encoders.hpp"
#include "chronofuse/rng.hpp"
#include "chronofuse/tensor.hpp"
#include "chronofuse/transformer.hpp"

namespace chronofuse {

class ParamRegistry;

// ---------------------------------------------------------------------------
// Tokenizer: whitespace splitting into a small frequency-ranked vocabulary.

// Splits on runs of ASCII whitespace; never returns empty tokens.
std::vector<std::string> whitespace_tokens(const std::string& text);

// Concatenates utterance texts in transcript order, single-space separated.
std::string transcript_text(const std::vector<Utterance>& transcript);

struct Vocab {
    // words[0] is the out-of-vocabulary bucket; the rest are training-split
    // words ranked by descending frequency (ties broken lexicographically).
    std::vector<std::string> words;
    std::unordered_map<std::string, std::size_t> index;  // word -> id, OOV excluded

    // Builds from raw texts, keeping at most max_size entries including the
    // OOV bucket. Deterministic for a given input ordering-insensitive.
    static Vocab build(const std::vector<std::string>& texts, std::size_t max_size = 512);

    std::vector<std::size_t> encode(const std::string& text) const;
    std::size_t size() const { return words.size(); }
};

void save_vocab(const std::string& path, const Vocab& vocab);
Vocab load_vocab(const std::string& path);

// ---------------------------------------------------------------------------
// Low-rank adapters.

// Additive low-rank delta for a frozen base weight w [d_in, d_out]:
// y = x w + (alpha/rank) * (x a) b. b starts at zero so the initial delta
// vanishes; the base weight is never written.
struct LoraAdapter {
    Tensor a;  // [d_in, rank]
    Tensor b;  // [rank, d_out]
    std::size_t rank = 0;
    double alpha = 0.0;

    static LoraAdapter init(std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha, Rng& rng);
    Tensor delta(const Tensor& x) const;
};

Tensor lora_forward(const Tensor& w, const LoraAdapter& adapter, const Tensor& x);

// ---------------------------------------------------------------------------
// Fusion + classifier.

enum class ModalityMode { text_only, text_audio, text_audio_visual };

ModalityMode modality_from_string(const std::string& name);  // "t" | "ta" | "tav"
std::string to_string(ModalityMode mode);

struct FusionConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t vocab_size = 512;  // cap including the OOV bucket
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;

    void validate() const;  // throws ConfigError
};

// Element-wise audio-visual fusion followed by the shared projection:
// proj(a + v) per timestep. Mismatched shapes are an error, never truncated.
Tensor fuse(const Tensor& audio_emb, const Tensor& visual_emb, const Tensor& proj_w, const Tensor& proj_b);

// One pre-norm causal block with low-rank deltas on the query/value maps
// (skipped when enabled is false; the disabled path is bit-identical to
// TransformerLayer::forward).
Tensor fusion_layer_forward(const TransformerLayer& layer, const LoraAdapter& q_adapter,
                            const LoraAdapter& v_adapter, bool adapters_enabled, const Tensor& x);

// Small causal sequence classifier over [AV][SEP][text][CLS]: token + fused
// audio-visual embeddings, sinusoidal positions, causal transformer layers,
// final LayerNorm, and a zero-initialized binary head read at CLS.
struct FusionModel {
    FusionConfig cfg;
    std::size_t d_enc = 0;  // encoder token width feeding the AV projection
    Vocab vocab;

    Tensor embed;  // [vocab, d_model] frozen base
    std::vector<TransformerLayer> layers;
    Tensor ln_f_gain, ln_f_bias;
    Tensor sep, cls;          // [1, d_model], trainable
    Tensor proj_w, proj_b;    // [d_enc, d_model] + [d_model], trainable
    Tensor head_w, head_b;    // [d_model, 1] + [1], zero-init, trainable
    std::vector<LoraAdapter> q_adapters, v_adapters;  // one pair per layer
    bool adapters_enabled = true;

    static FusionModel init(const FusionConfig& cfg, Vocab vocab, std::size_t d_enc, Rng& rng);

    // av is the pre-projection fused-input sum [T, d_enc]; pass an undefined
    // tensor in text-only mode. Returns the scalar logit as a [1] tensor.
    Tensor segment_logit(const Tensor& av, const std::vector<std::size_t>& text_ids) const;

    // Freezes the embedding table and transformer base; adapters, the AV
    // projection, the head, and SEP/CLS stay trainable.
    void apply_stage3_freeze();

    void register_base(ParamRegistry& reg, const std::string& prefix) const;
    void register_adapters(ParamRegistry& reg, const std::string& prefix) const;
};

// Closed-form trainable-parameter count under the stage 3 freeze:
// sum of rank*(d_in+d_out) over adapters + projection + head + SEP + CLS.
std::size_t stage3_trainable_count(const FusionConfig& cfg, std::size_t d_enc);

// ---------------------------------------------------------------------------
// Segment preparation and classification.

// One training/inference-ready segment: constant fused-input sum (undefined
// in text-only mode), token ids, and the label.
struct Stage3Sample {
    Tensor av;
    std::vector<std::size_t> text_ids;
    bool depressed = false;
};

// Encodes a subdialogue's streams, checks token-level alignment (tav mode),
// and assembles the sample for the requested modalities. Degenerate or
// misaligned features raise DataError.
Stage3Sample prepare_stage3_sample(const EncoderStack& audio, const EncoderStack& visual, const Vocab& vocab,
                                   const SubDialogue& sub, ModalityMode mode);

// Streaming variant over a stored manifest: features are loaded one
// subdialogue at a time from dir; only the encoded sums are kept.
std::vector<Stage3Sample> prepare_stage3_samples(const EncoderStack& audio, const EncoderStack& visual,
                                                 const Vocab& vocab, const std::vector<SubDialogueMeta>& subs,
                                                 const std::string& dir, ModalityMode mode);

struct SegmentDecision {
    double logit = 0.0;
    bool positive = false;  // logit > 0; a zero logit ties to negative
};

SegmentDecision classify_segment(const EncoderStack& audio, const EncoderStack& visual, const FusionModel& model,
                                 const SubDialogue& sub, ModalityMode mode = ModalityMode::text_audio_visual);

// ---------------------------------------------------------------------------
// Stage III training.

struct Stage3Config {
    double lr = 3e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.001;
    std::size_t batch = 8;
    std::size_t accum = 8;
    std::size_t epochs = 3;
    double warmup_epochs = 0.1;
    double clip = 0.5;

    void validate() const;  // throws ConfigError
};

struct Stage3EpochStats {
    std::size_t epoch = 0;
    double loss = 0.0;      // mean per-sample binary cross-entropy
    double accuracy = 0.0;  // training accuracy at the logit>0 rule
};

struct Stage3TrainResult {
    std::vector<Stage3EpochStats> epochs;
};

// Binary cross-entropy fine-tuning of {adapters, AV projection, head,
// SEP/CLS} over prepared samples; everything else is frozen byte-exact.
Stage3TrainResult train_stage3(FusionModel& model, const std::vector<Stage3Sample>& samples,
                               const Stage3Config& cfg, Rng& rng);

}  // namespace chronofuse
