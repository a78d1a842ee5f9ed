#include "chronofuse/mae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "chronofuse/errors.hpp"
#include "chronofuse/optim.hpp"
#include "chronofuse/rng.hpp"

namespace chronofuse {

MaskSpec sample_mask(std::size_t T, double ratio, Rng& rng) {
    if (T < 2) throw ContractError("sample_mask requires T >= 2");
    if (!(ratio > 0.0) || !(ratio < 1.0)) throw ContractError("mask ratio must lie strictly in (0, 1)");
    auto K = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(T)));
    K = std::min(std::max<std::size_t>(K, 1), T - 1);

    MaskSpec spec;
    spec.T = T;
    spec.mask_idx = rng.sample_without_replacement(T, K);
    std::sort(spec.mask_idx.begin(), spec.mask_idx.end());
    std::vector<bool> masked(T, false);
    for (const auto i : spec.mask_idx) masked[i] = true;
    spec.visible_idx.reserve(T - K);
    for (std::size_t i = 0; i < T; ++i)
        if (!masked[i]) spec.visible_idx.push_back(i);
    return spec;
}

void MaeConfig::validate() const {
    if (d_in == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || ffn_mult == 0 || decoder_layers == 0)
        throw ConfigError("MAE dimensions must be positive");
    if (d_model % 2 != 0) throw ConfigError("d_model must be even (sin|cos positional halves)");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
}

MaeModel MaeModel::init(const MaeConfig& cfg, Rng& rng) {
    cfg.validate();
    MaeModel m;
    m.cfg = cfg;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_in));
    const double out_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    m.in_w = Tensor::randn({cfg.d_in, cfg.d_model}, rng, in_std, true);
    m.in_b = Tensor::zeros({cfg.d_model}, true);
    for (std::size_t i = 0; i < cfg.n_layers; ++i)
        m.encoder.push_back(TransformerLayer::init(cfg.d_model, cfg.n_heads, cfg.ffn_mult, rng));
    m.mask_token = Tensor::randn({1, cfg.d_model}, rng, 0.02, true);
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i)
        m.decoder.push_back(TransformerLayer::init(cfg.d_model, cfg.n_heads, cfg.ffn_mult, rng));
    m.out_w = Tensor::randn({cfg.d_model, cfg.d_in}, rng, out_std, true);
    m.out_b = Tensor::zeros({cfg.d_in}, true);
    return m;
}

Tensor MaeModel::forward(const Tensor& x, const MaskSpec& spec) const {
    if (x.rank() != 2 || x.cols() != cfg.d_in)
        throw ShapeError("MAE expects [T, " + std::to_string(cfg.d_in) + "] input");
    if (spec.T != x.rows()) throw ContractError("mask spec length does not match the input");
    if (spec.mask_idx.empty() || spec.visible_idx.empty())
        throw ContractError("mask spec needs both masked and visible frames");

    const Tensor positions = sinusoidal_positions(spec.T, cfg.d_model);

    // Encode the visible frames only, at their original positions.
    Tensor h = embedding_lookup(x, spec.visible_idx);
    h = add_rowvec(matmul(h, in_w), in_b);
    h = add(h, embedding_lookup(positions, spec.visible_idx));
    for (const auto& layer : encoder) h = layer.forward(h, AttnMode::full);

    // Reassemble the full sequence: the shared mask token (plus position)
    // fills the masked slots; a row gather restores temporal order.
    const std::vector<std::size_t> broadcast(spec.mask_idx.size(), 0);
    Tensor masked_rows = add(embedding_lookup(mask_token, broadcast), embedding_lookup(positions, spec.mask_idx));
    std::vector<std::size_t> inverse(spec.T);
    for (std::size_t r = 0; r < spec.visible_idx.size(); ++r) inverse[spec.visible_idx[r]] = r;
    for (std::size_t r = 0; r < spec.mask_idx.size(); ++r) inverse[spec.mask_idx[r]] = spec.visible_idx.size() + r;
    Tensor z = embedding_lookup(concat_rows({h, masked_rows}), inverse);

    for (const auto& layer : decoder) z = layer.forward(z, AttnMode::full);
    return add_rowvec(matmul(z, out_w), out_b);
}

void MaeModel::register_params(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + "in.w", in_w);
    reg.add(prefix + "in.b", in_b);
    for (std::size_t i = 0; i < encoder.size(); ++i)
        encoder[i].register_params(reg, prefix + "encoder." + std::to_string(i) + ".");
    reg.add(prefix + "mask_token", mask_token);
    for (std::size_t i = 0; i < decoder.size(); ++i)
        decoder[i].register_params(reg, prefix + "decoder." + std::to_string(i) + ".");
    reg.add(prefix + "out.w", out_w);
    reg.add(prefix + "out.b", out_b);
}

void Stage1Config::validate() const {
    if (lr <= 0.0) throw ConfigError("stage 1 lr must be positive");
    if (batch == 0 || accum == 0 || epochs == 0) throw ConfigError("stage 1 batch/accum/epochs must be positive");
    if (accum > batch) throw ConfigError("stage 1 accum cannot exceed batch");
    if (warmup_epochs < 0.0 || warmup_epochs > static_cast<double>(epochs))
        throw ConfigError("stage 1 warmup must lie within [0, epochs]");
    if (clip <= 0.0) throw ConfigError("stage 1 clip must be positive");
    if (!(mask_ratio > 0.0) || !(mask_ratio < 1.0)) throw ConfigError("mask ratio must lie strictly in (0, 1)");
    if (crop_frames < 2) throw ConfigError("crop_frames must be at least 2");
}

double constant_mean_baseline(const std::vector<FeatureSequence>& data) {
    if (data.empty()) throw DataError("baseline requires a non-empty dataset");
    const std::size_t dim = data.front().dim;
    std::vector<double> mean(dim, 0.0);
    std::size_t frames = 0;
    for (const auto& seq : data) {
        if (seq.dim != dim) throw DataError("baseline requires equal feature dims across sequences");
        for (std::size_t t = 0; t < seq.frame_count(); ++t) {
            const double* row = seq.row(t);
            for (std::size_t j = 0; j < dim; ++j) mean[j] += row[j];
        }
        frames += seq.frame_count();
    }
    if (frames == 0) throw DataError("baseline requires non-empty sequences");
    for (auto& v : mean) v /= static_cast<double>(frames);

    double mse = 0.0;
    for (const auto& seq : data)
        for (std::size_t t = 0; t < seq.frame_count(); ++t) {
            const double* row = seq.row(t);
            for (std::size_t j = 0; j < dim; ++j) {
                const double e = row[j] - mean[j];
                mse += e * e;
            }
        }
    return mse / static_cast<double>(frames);  // per-frame squared L2, like Eq. 1
}

namespace {

// One training crop: a random window of cfg.crop_frames (whole sequence if
// shorter), returned as a plain constant tensor.
Tensor draw_crop(const FeatureSequence& seq, std::size_t crop_frames, Rng& rng) {
    const std::size_t T = seq.frame_count();
    const std::size_t len = std::min(T, crop_frames);
    std::size_t start = 0;
    if (T > len) start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(T - len)));
    return Tensor::from({len, seq.dim},
                        std::vector<double>(seq.frames.begin() + static_cast<std::ptrdiff_t>(start * seq.dim),
                                            seq.frames.begin() + static_cast<std::ptrdiff_t>((start + len) * seq.dim)));
}

}  // namespace

MaeTrainResult train_stage1(MaeModel& model, const std::vector<FeatureSequence>& data, const Stage1Config& cfg,
                            Rng& rng) {
    cfg.validate();
    if (data.empty()) throw DataError("stage 1 requires a non-empty dataset");
    for (const auto& seq : data) {
        if (seq.dim != model.cfg.d_in) throw DataError("stage 1 sequence dim does not match the model");
        if (seq.frame_count() < 2) throw DataError("stage 1 sequences need at least 2 frames");
    }

    ParamRegistry reg;
    model.register_params(reg, "mae.");
    auto params = reg.trainable();
    AdamW opt(params, {cfg.beta1, cfg.beta2, cfg.weight_decay, 1e-8});

    const std::size_t n = data.size();
    const auto steps_per_epoch = static_cast<double>((n + cfg.batch - 1) / cfg.batch);
    const LrSchedule schedule{cfg.lr, cfg.warmup_epochs * steps_per_epoch,
                              static_cast<double>(cfg.epochs) * steps_per_epoch};

    MaeTrainResult result;
    result.baseline_mse = constant_mean_baseline(data);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t steps_done = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t epoch_crops = 0;
        for (std::size_t begin = 0; begin < n; begin += cfg.batch) {
            const std::size_t group = std::min(cfg.batch, n - begin);
            // Split the step's crops into accumulation chunks; gradients sum
            // across chunks and are averaged before the optimizer step.
            const std::size_t chunk = (group + cfg.accum - 1) / cfg.accum;
            std::size_t chunks_used = 0;
            for (std::size_t c0 = 0; c0 < group; c0 += chunk) {
                const std::size_t c1 = std::min(group, c0 + chunk);
                ++chunks_used;
                for (std::size_t i = c0; i < c1; ++i) {
                    const auto& seq = data[order[begin + i]];
                    const Tensor x = draw_crop(seq, cfg.crop_frames, rng);
                    const MaskSpec spec = sample_mask(x.rows(), cfg.mask_ratio, rng);
                    const Tensor loss = mse_masked(model.forward(x, spec), x, spec.mask_idx);
                    const double val = loss.item();
                    if (!std::isfinite(val))
                        throw NumericError("stage 1 loss diverged at epoch " + std::to_string(epoch) + ", step " +
                                           std::to_string(steps_done));
                    epoch_loss += val;
                    ++epoch_crops;
                    backward(scale(loss, 1.0 / static_cast<double>(c1 - c0)));
                }
            }
            scale_grads(params, 1.0 / static_cast<double>(chunks_used));
            clip_global_norm(params, cfg.clip);
            opt.step(lr_at(schedule, static_cast<double>(steps_done) + 1.0));
            opt.zero_grad();
            ++steps_done;
        }
        result.epoch_mse.push_back(epoch_loss / static_cast<double>(epoch_crops));
    }
    return result;
}

void save_loss_curve(const std::string& path, const std::vector<double>& epoch_mse) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write loss curve: " + path);
    os << "epoch,masked_mse\n";
    os.precision(17);
    for (std::size_t e = 0; e < epoch_mse.size(); ++e) os << e << "," << epoch_mse[e] << "\n";
    if (!os) throw DataError("failed while writing loss curve: " + path);
}

}  // namespace chronofuse
