#include "chronofuse/align.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <utility>

#include "chronofuse/errors.hpp"
#include "chronofuse/optim.hpp"
#include "chronofuse/rng.hpp"
#include "nlohmann/json.hpp"

namespace chronofuse {

void AlignConfig::validate() const {
    if (tau <= 0.0) throw ConfigError("stage 2 temperature must be positive");
    if (lr <= 0.0) throw ConfigError("stage 2 lr must be positive");
    if (batch < 2) throw ConfigError("stage 2 batch needs at least two pairs for negatives");
    if (accum == 0 || accum > batch) throw ConfigError("stage 2 accum must lie in [1, batch]");
    if (epochs == 0) throw ConfigError("stage 2 epochs must be positive");
    if (warmup_epochs < 0.0 || warmup_epochs > static_cast<double>(epochs))
        throw ConfigError("stage 2 warmup must lie within [0, epochs]");
    if (clip <= 0.0) throw ConfigError("stage 2 clip must be positive");
    if (eval_batch < 2) throw ConfigError("stage 2 eval batch needs at least two pairs");
}

Tensor utterance_pool(const Tensor& tokens, const ProjectionHead& head, PoolMode mode) {
    if (tokens.rank() != 2) throw ShapeError("utterance_pool expects [T, d_model] tokens");
    if (tokens.rows() == 0) throw ContractError("utterance_pool requires at least one token");
    const Tensor projected = head.forward(tokens);
    const Tensor pooled = mode == PoolMode::mean ? mean_rows(projected) : max_rows(projected);
    return normalize_rows(reshape(pooled, {1, pooled.size()}));
}

std::vector<double> utterance_pool(const FeatureSequence& tokens, const ProjectionHead& head, PoolMode mode) {
    NoGradGuard ng;
    const Tensor x = Tensor::from({tokens.frame_count(), tokens.dim}, tokens.frames);
    const Tensor row = utterance_pool(x, head, mode);
    return std::vector<double>(row.data(), row.data() + row.size());
}

namespace {

Tensor identity_onehot(std::size_t n) {
    std::vector<double> eye(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    return Tensor::from({n, n}, std::move(eye));
}

}  // namespace

Tensor contrastive_loss(const Tensor& h_a, const Tensor& h_v, double tau, bool symmetric, bool normalize) {
    if (tau <= 0.0) throw ContractError("contrastive temperature must be positive");
    if (h_a.rank() != 2 || h_v.rank() != 2) throw ShapeError("contrastive inputs must be [N, d]");
    if (h_a.shape() != h_v.shape()) throw ShapeError("contrastive inputs must share one shape");
    const std::size_t n = h_a.rows();
    if (n < 2) throw ContractError("contrastive loss needs at least two pairs");

    const Tensor a = normalize ? normalize_rows(h_a) : h_a;
    const Tensor v = normalize ? normalize_rows(h_v) : h_v;
    const Tensor logits = scale(matmul(a, transpose(v)), 1.0 / tau);
    const Tensor eye = identity_onehot(n);
    const Tensor forward_ce = cross_entropy_rows(logits, eye);
    if (!symmetric) return forward_ce;
    return scale(add(forward_ce, cross_entropy_rows(transpose(logits), eye)), 0.5);
}

RetrievalResult retrieval_eval(const Tensor& h_a, const Tensor& h_v) {
    if (h_a.rank() != 2 || h_v.rank() != 2) throw ShapeError("retrieval inputs must be [N, d]");
    if (h_a.shape() != h_v.shape()) throw ShapeError("retrieval inputs must share one shape");
    const std::size_t n = h_a.rows(), d = h_a.cols();
    if (n < 2) throw ContractError("retrieval needs at least two pairs");

    std::vector<double> sim(n * n);
    const double* ad = h_a.data();
    const double* vd = h_v.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += ad[i * d + k] * vd[j * d + k];
            sim[i * n + j] = s;
        }

    RetrievalResult result;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (sim[i * n + j] > sim[i * n + best]) best = j;
        if (best == i) result.top1_a2v += 1.0;
    }
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (sim[i * n + j] > sim[best * n + j]) best = i;
        if (best == j) result.top1_v2a += 1.0;
    }
    result.top1_a2v /= static_cast<double>(n);
    result.top1_v2a /= static_cast<double>(n);
    return result;
}

namespace {

struct PairCache {
    Tensor audio_tokens;  // [T25, d_model], constant
    Tensor visual_lower;  // [T50, d_model] frozen-prefix output, constant
};

Tensor sequence_tensor(const FeatureSequence& seq) {
    return Tensor::from({seq.frame_count(), seq.dim}, seq.frames);
}

// Encodes both sides once with the frozen prefixes, verifies token-level
// alignment, and returns the reusable constants.
std::vector<PairCache> build_cache(EncoderStack& audio, EncoderStack& visual, const std::vector<AlignPair>& pairs,
                                   std::size_t lower, const std::string& role) {
    NoGradGuard ng;
    std::vector<PairCache> cache;
    cache.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const AlignPair& pair = pairs[i];
        if (!(pair.audio.rate == kMelRate)) throw ContractError("stage 2 audio features must be on the mel grid");
        if (!(pair.visual.rate == kVisualRate))
            throw ContractError("stage 2 visual features must be on the visual grid");

        const FeatureSequence audio_tokens = audio.encode(pair.audio);
        const FeatureSequence resampled = resample_linear(pair.visual, kMelRate);
        const Tensor lower_out = visual.forward_lower(sequence_tensor(resampled), lower);

        FeatureSequence visual_tokens;
        visual_tokens.rate = kEncoderOutRate;
        visual_tokens.dim = visual.config().d_model;
        visual_tokens.origin_s = resampled.origin_s;
        const Tensor vt = visual.forward_upper(lower_out, lower);
        visual_tokens.frames.assign(vt.data(), vt.data() + vt.size());

        const AlignmentReport report = check_alignment(audio_tokens, visual_tokens);
        if (!report.ok)
            throw DataError(role + " pair " + std::to_string(i) + " is misaligned: " + report.message);

        PairCache entry;
        entry.audio_tokens = sequence_tensor(audio_tokens);
        entry.visual_lower = lower_out;
        cache.push_back(std::move(entry));
    }
    return cache;
}

// Batch groups over n items; a trailing singleton is folded into the
// previous group so every contrastive forward sees at least two pairs.
std::vector<std::pair<std::size_t, std::size_t>> plan_groups(std::size_t n, std::size_t batch) {
    std::vector<std::pair<std::size_t, std::size_t>> groups;
    for (std::size_t b = 0; b < n; b += batch) groups.emplace_back(b, std::min(n, b + batch));
    if (groups.size() > 1 && groups.back().second - groups.back().first < 2) {
        groups.pop_back();
        groups.back().second = n;
    }
    return groups;
}

}  // namespace

AlignTrainResult train_stage2(EncoderStack& audio, EncoderStack& visual, ProjectionHead& audio_head,
                              ProjectionHead& visual_head, const std::vector<AlignPair>& train_pairs,
                              const std::vector<AlignPair>& eval_pairs, const AlignConfig& cfg, Rng& rng) {
    cfg.validate();
    if (train_pairs.size() < 2) throw DataError("stage 2 needs at least two training pairs");
    if (eval_pairs.size() < 2) throw DataError("stage 2 needs at least two eval pairs");

    audio.apply_freeze(FreezeMode::stage2_audio);
    visual.apply_freeze(FreezeMode::stage2_visual);
    const std::size_t lower = visual.layers().size() / 2;

    const std::vector<PairCache> train_cache = build_cache(audio, visual, train_pairs, lower, "train");
    const std::vector<PairCache> eval_cache = build_cache(audio, visual, eval_pairs, lower, "eval");

    ParamRegistry reg;
    visual.register_params(reg, "visual_encoder.");
    audio_head.register_params(reg, "audio_head.");
    visual_head.register_params(reg, "visual_head.");
    std::vector<Tensor> params = reg.trainable();
    AdamW opt(params, {cfg.beta1, cfg.beta2, cfg.weight_decay, 1e-8});

    const std::size_t n = train_pairs.size();
    const auto groups = plan_groups(n, cfg.batch);
    const auto steps_per_epoch = static_cast<double>(groups.size());
    const LrSchedule schedule{cfg.lr, cfg.warmup_epochs * steps_per_epoch,
                              static_cast<double>(cfg.epochs) * steps_per_epoch};

    const auto pooled_pair = [&](const PairCache& entry) {
        Tensor h_a = utterance_pool(entry.audio_tokens, audio_head, cfg.pool);
        Tensor tokens = visual.forward_upper(entry.visual_lower, lower);
        Tensor h_v = utterance_pool(tokens, visual_head, cfg.pool);
        return std::make_pair(std::move(h_a), std::move(h_v));
    };

    const auto eval_retrieval = [&] {
        NoGradGuard ng;
        std::vector<Tensor> rows_a, rows_v;
        for (const auto& entry : eval_cache) {
            auto [h_a, h_v] = pooled_pair(entry);
            rows_a.push_back(std::move(h_a));
            rows_v.push_back(std::move(h_v));
        }
        const Tensor h_a = concat_rows(rows_a);
        const Tensor h_v = concat_rows(rows_v);
        double correct_a = 0.0, correct_v = 0.0, counted = 0.0;
        for (std::size_t e0 = 0; e0 + 2 <= eval_cache.size(); e0 += cfg.eval_batch) {
            const std::size_t e1 = std::min(eval_cache.size(), e0 + cfg.eval_batch);
            if (e1 - e0 < 2) break;
            const RetrievalResult r = retrieval_eval(slice_rows(h_a, e0, e1), slice_rows(h_v, e0, e1));
            const auto rows = static_cast<double>(e1 - e0);
            correct_a += r.top1_a2v * rows;
            correct_v += r.top1_v2a * rows;
            counted += rows;
        }
        return RetrievalResult{correct_a / counted, correct_v / counted};
    };

    AlignTrainResult result;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t steps_done = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        for (const auto& [g0, g1] : groups) {
            const std::size_t group = g1 - g0;
            std::size_t chunk = (group + cfg.accum - 1) / cfg.accum;
            chunk = std::max<std::size_t>(chunk, 2);
            std::size_t chunks_used = 0;
            std::size_t c0 = g0;
            while (c0 < g1) {
                std::size_t c1 = std::min(g1, c0 + chunk);
                if (g1 - c1 == 1) c1 = g1;  // never leave a singleton behind
                ++chunks_used;
                std::vector<Tensor> rows_a, rows_v;
                for (std::size_t i = c0; i < c1; ++i) {
                    auto [h_a, h_v] = pooled_pair(train_cache[order[i]]);
                    rows_a.push_back(std::move(h_a));
                    rows_v.push_back(std::move(h_v));
                }
                const Tensor loss = contrastive_loss(concat_rows(rows_a), concat_rows(rows_v), cfg.tau,
                                                     cfg.symmetric, cfg.normalize);
                const double val = loss.item();
                if (!std::isfinite(val))
                    throw NumericError("stage 2 loss diverged at epoch " + std::to_string(epoch) + ", step " +
                                       std::to_string(steps_done));
                loss_sum += val;
                ++loss_count;
                backward(loss);
                c0 = c1;
            }
            scale_grads(params, 1.0 / static_cast<double>(chunks_used));
            clip_global_norm(params, cfg.clip);
            opt.step(lr_at(schedule, static_cast<double>(steps_done) + 1.0));
            opt.zero_grad();
            ++steps_done;
        }
        const RetrievalResult r = eval_retrieval();
        result.epochs.push_back({epoch, loss_sum / static_cast<double>(loss_count), r.top1_a2v, r.top1_v2a});
    }
    return result;
}

void save_alignment_report(const std::string& path, const AlignTrainResult& result) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& e : result.epochs)
        rows.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"top1_a2v", e.top1_a2v}, {"top1_v2a", e.top1_v2a}});
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write alignment report: " + path);
    os << rows.dump(2) << "\n";
    if (!os) throw DataError("failed while writing alignment report: " + path);
}

}  // namespace chronofuse
