#pragma once

#include <string>
#include <vector>

#include "chronofuse/encoders.hpp"
#include "chronofuse/temporal.hpp"
#include "chronofuse/tensor.hpp"

namespace chronofuse {

class Rng;

enum class PoolMode { mean, max };

// One synchronized audio/visual feature pair from the same subdialogue.
struct AlignPair {
    FeatureSequence audio;   // mel frames, 100 Hz
    FeatureSequence visual;  // visual frames, 30 Hz (resampled to the mel grid internally)
};

struct AlignConfig {
    double tau = 0.07;
    bool symmetric = true;   // average audio->visual and visual->audio CE
    bool normalize = true;   // L2-normalize utterance rows before Sim
    PoolMode pool = PoolMode::mean;

    double lr = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.001;
    std::size_t batch = 64;
    std::size_t accum = 16;
    std::size_t epochs = 20;
    double warmup_epochs = 2.0;
    double clip = 0.5;
    std::size_t eval_batch = 32;  // retrieval group size for reporting

    void validate() const;  // throws ConfigError
};

// Projects encoder tokens [T, d_model], pools over time (mean by default),
// and L2-normalizes: one unit-norm utterance row [1, d_proj]. Differentiable.
Tensor utterance_pool(const Tensor& tokens, const ProjectionHead& head, PoolMode mode = PoolMode::mean);
// Same on an encoded sequence, outside any autodiff graph.
std::vector<double> utterance_pool(const FeatureSequence& tokens, const ProjectionHead& head,
                                   PoolMode mode = PoolMode::mean);

// Sim = h_a h_v^T over rows (L2-normalized first unless normalize=false);
// loss = mean cross-entropy of Sim/tau against the identity pairing,
// averaged over both directions when symmetric. Requires N >= 2 rows and
// tau > 0.
Tensor contrastive_loss(const Tensor& h_a, const Tensor& h_v, double tau, bool symmetric = true,
                        bool normalize = true);

struct RetrievalResult {
    double top1_a2v = 0.0;  // fraction of rows whose best column is the diagonal
    double top1_v2a = 0.0;  // fraction of columns whose best row is the diagonal
};

// Top-1 matching accuracy of the similarity matrix in both directions.
// Ties resolve to the lowest index, so a deterministic input gives a
// deterministic score.
RetrievalResult retrieval_eval(const Tensor& h_a, const Tensor& h_v);

struct AlignEpochStats {
    std::size_t epoch = 0;
    double loss = 0.0;
    double top1_a2v = 0.0;
    double top1_v2a = 0.0;
};

struct AlignTrainResult {
    std::vector<AlignEpochStats> epochs;
};

// Stage II: freezes the whole audio stack and the visual conv + lower half,
// then optimizes the contrastive objective over the projection heads and
// visual upper layers. Frozen prefixes are computed once and cached, so each
// step only replays the trainable suffix. Retrieval on eval_pairs is
// reported after every epoch. Throws NumericError if the loss leaves the
// finite range.
AlignTrainResult train_stage2(EncoderStack& audio, EncoderStack& visual, ProjectionHead& audio_head,
                              ProjectionHead& visual_head, const std::vector<AlignPair>& train_pairs,
                              const std::vector<AlignPair>& eval_pairs, const AlignConfig& cfg, Rng& rng);

// JSON array of {"epoch", "loss", "top1_a2v", "top1_v2a"} rows.
void save_alignment_report(const std::string& path, const AlignTrainResult& result);

}  // namespace chronofuse
