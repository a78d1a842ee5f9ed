#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chronofuse/temporal.hpp"
#include "chronofuse/tensor.hpp"
#include "chronofuse/transformer.hpp"

namespace chronofuse {

class Rng;
class ParamRegistry;

// A masking of {0..T-1} into masked and visible index sets, both non-empty.
struct MaskSpec {
    std::size_t T = 0;
    std::vector<std::size_t> mask_idx;     // sorted
    std::vector<std::size_t> visible_idx;  // sorted complement
};

// K = floor(ratio*T) clamped to [1, T-1], drawn uniformly without
// replacement. Requires T >= 2 and 0 < ratio < 1.
MaskSpec sample_mask(std::size_t T, double ratio, Rng& rng);

struct MaeConfig {
    std::size_t d_in = 0;        // frame feature dim (reconstruction target dim)
    std::size_t d_model = 64;
    std::size_t n_layers = 4;    // encoder depth; transplanted into the EncoderStack
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t decoder_layers = 2;

    void validate() const;  // throws ConfigError
};

// Masked-frame autoencoder operating at the input frame rate: visible frames
// are linearly embedded (no striding, so reconstruction targets stay
// frame-aligned), encoded, reassembled in temporal order with a shared
// learnable mask token at masked slots, and decoded back to the input dim.
struct MaeModel {
    MaeConfig cfg;
    Tensor in_w, in_b;  // d_in -> d_model
    std::vector<TransformerLayer> encoder;
    Tensor mask_token;  // [1, d_model]
    std::vector<TransformerLayer> decoder;
    Tensor out_w, out_b;  // d_model -> d_in

    static MaeModel init(const MaeConfig& cfg, Rng& rng);
    // x [T, d_in] with spec.T == T -> reconstruction [T, d_in]. The encoder
    // never sees masked frames' values.
    Tensor forward(const Tensor& x, const MaskSpec& spec) const;
    void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct Stage1Config {
    double lr = 1.5e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.0;
    std::size_t batch = 128;  // crops per optimizer step
    std::size_t accum = 8;    // gradient-accumulation chunks per step
    std::size_t epochs = 50;
    double warmup_epochs = 5.0;
    double clip = 1.0;
    double mask_ratio = 0.75;
    std::size_t crop_frames = 192;  // training crop length, input frames

    void validate() const;  // throws ConfigError
};

struct MaeTrainResult {
    std::vector<double> epoch_mse;  // mean masked MSE per epoch, index = epoch
    double baseline_mse = 0.0;      // constant-mean predictor on the same data
};

// Stage I optimization of the masked reconstruction objective over the given
// sequences (one random crop per sequence per epoch, masks resampled every
// time). Deterministic in (model init, data, cfg, rng). Throws NumericError
// with step diagnostics if the loss leaves the finite range.
MaeTrainResult train_stage1(MaeModel& model, const std::vector<FeatureSequence>& data, const Stage1Config& cfg,
                            Rng& rng);

// Masked MSE of predicting every frame with the dataset's per-dim mean:
// the scale against which reconstruction quality is judged.
double constant_mean_baseline(const std::vector<FeatureSequence>& data);

// Writes "epoch,masked_mse" rows.
void save_loss_curve(const std::string& path, const std::vector<double>& epoch_mse);

}  // namespace chronofuse
