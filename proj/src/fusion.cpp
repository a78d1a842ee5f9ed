#include "chronofuse/fusion.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <utility>

#include "chronofuse/checkpoint.hpp"
#include "chronofuse/errors.hpp"
#include "chronofuse/optim.hpp"
#include "nlohmann/json.hpp"

namespace chronofuse {

std::vector<std::string> whitespace_tokens(const std::string& text) {
    std::vector<std::string> tokens;
    std::string current;
    for (const char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!current.empty()) tokens.push_back(std::move(current));
            current.clear();
        } else {
            current.push_back(c);
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::string transcript_text(const std::vector<Utterance>& transcript) {
    std::string text;
    for (const Utterance& u : transcript) {
        if (u.text.empty()) continue;
        if (!text.empty()) text.push_back(' ');
        text += u.text;
    }
    return text;
}

Vocab Vocab::build(const std::vector<std::string>& texts, std::size_t max_size) {
    if (max_size < 2) throw ConfigError("vocabulary needs room for the OOV bucket plus one word");
    std::unordered_map<std::string, std::size_t> counts;
    for (const std::string& text : texts)
        for (std::string& token : whitespace_tokens(text)) ++counts[std::move(token)];

    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& lhs, const auto& rhs) {
        if (lhs.second != rhs.second) return lhs.second > rhs.second;
        return lhs.first < rhs.first;
    });
    if (ranked.size() > max_size - 1) ranked.resize(max_size - 1);

    Vocab vocab;
    vocab.words.reserve(ranked.size() + 1);
    vocab.words.emplace_back("<oov>");
    for (auto& [word, count] : ranked) {
        vocab.index.emplace(word, vocab.words.size());
        vocab.words.push_back(std::move(word));
    }
    return vocab;
}

std::vector<std::size_t> Vocab::encode(const std::string& text) const {
    std::vector<std::size_t> ids;
    for (const std::string& token : whitespace_tokens(text)) {
        const auto it = index.find(token);
        ids.push_back(it == index.end() ? 0 : it->second);
    }
    return ids;
}

void save_vocab(const std::string& path, const Vocab& vocab) {
    nlohmann::ordered_json doc;
    doc["words"] = vocab.words;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write vocabulary: " + path);
    os << doc.dump(2) << "\n";
    if (!os) throw DataError("failed while writing vocabulary: " + path);
}

Vocab load_vocab(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read vocabulary: " + path);
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed vocabulary file " + path + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("words") || !doc["words"].is_array() || doc["words"].empty())
        throw DataError("vocabulary file " + path + " must hold a non-empty words array");
    Vocab vocab;
    for (const auto& w : doc["words"]) {
        if (!w.is_string()) throw DataError("vocabulary file " + path + " holds a non-string word");
        vocab.words.push_back(w.get<std::string>());
    }
    for (std::size_t i = 1; i < vocab.words.size(); ++i) {
        if (!vocab.index.emplace(vocab.words[i], i).second)
            throw DataError("vocabulary file " + path + " repeats the word '" + vocab.words[i] + "'");
    }
    return vocab;
}

LoraAdapter LoraAdapter::init(std::size_t d_in, std::size_t d_out, std::size_t rank, double alpha, Rng& rng) {
    if (d_in == 0 || d_out == 0 || rank == 0) throw ConfigError("adapter dimensions must be positive");
    if (alpha <= 0.0) throw ConfigError("adapter alpha must be positive");
    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.a = Tensor::randn({d_in, rank}, rng, 1.0 / std::sqrt(static_cast<double>(d_in)), true);
    ad.b = Tensor::zeros({rank, d_out}, true);
    return ad;
}

Tensor LoraAdapter::delta(const Tensor& x) const {
    return scale(matmul(matmul(x, a), b), alpha / static_cast<double>(rank));
}

Tensor lora_forward(const Tensor& w, const LoraAdapter& adapter, const Tensor& x) {
    return add(matmul(x, w), adapter.delta(x));
}

ModalityMode modality_from_string(const std::string& name) {
    if (name == "t") return ModalityMode::text_only;
    if (name == "ta") return ModalityMode::text_audio;
    if (name == "tav") return ModalityMode::text_audio_visual;
    throw ConfigError("unknown modality '" + name + "' (expected t, ta, or tav)");
}

std::string to_string(ModalityMode mode) {
    switch (mode) {
        case ModalityMode::text_only: return "t";
        case ModalityMode::text_audio: return "ta";
        case ModalityMode::text_audio_visual: return "tav";
    }
    throw ContractError("unhandled modality mode");
}

void FusionConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("fusion d_model must be positive and divisible by n_heads");
    if (d_model % 2 != 0) throw ConfigError("fusion d_model must be even for sinusoidal positions");
    if (n_layers == 0) throw ConfigError("fusion needs at least one transformer layer");
    if (ffn_mult == 0) throw ConfigError("fusion ffn multiplier must be positive");
    if (vocab_size < 2) throw ConfigError("fusion vocabulary cap must allow the OOV bucket plus one word");
    if (lora_rank == 0) throw ConfigError("adapter rank must be positive");
    if (lora_alpha <= 0.0) throw ConfigError("adapter alpha must be positive");
}

Tensor fuse(const Tensor& audio_emb, const Tensor& visual_emb, const Tensor& proj_w, const Tensor& proj_b) {
    if (audio_emb.rank() != 2 || visual_emb.rank() != 2) throw ShapeError("fuse expects [T, d] embeddings");
    if (audio_emb.cols() != visual_emb.cols()) throw ShapeError("fused embeddings must share one width");
    if (audio_emb.rows() != visual_emb.rows())
        throw DataError("audio-visual token streams are misaligned: " + std::to_string(audio_emb.rows()) + " vs " +
                        std::to_string(visual_emb.rows()) + " tokens; refusing to truncate");
    return add_rowvec(matmul(add(audio_emb, visual_emb), proj_w), proj_b);
}

Tensor fusion_layer_forward(const TransformerLayer& layer, const LoraAdapter& q_adapter,
                            const LoraAdapter& v_adapter, bool adapters_enabled, const Tensor& x) {
    if (x.rank() != 2 || x.cols() != layer.d_model)
        throw ShapeError("fusion layer expects [T, " + std::to_string(layer.d_model) + "] input");
    const Tensor attn_in = layernorm_rows(x, layer.ln1_gain, layer.ln1_bias);
    Tensor q = add_rowvec(matmul(attn_in, layer.wq), layer.bq);
    const Tensor k = add_rowvec(matmul(attn_in, layer.wk), layer.bk);
    Tensor v = add_rowvec(matmul(attn_in, layer.wv), layer.bv);
    if (adapters_enabled) {
        q = add(q, q_adapter.delta(attn_in));
        v = add(v, v_adapter.delta(attn_in));
    }
    const Tensor h = add(x, attention_core(q, k, v, layer.n_heads, layer.wo, layer.bo, AttnMode::causal));
    const Tensor ffn_in = layernorm_rows(h, layer.ln2_gain, layer.ln2_bias);
    const Tensor mid = gelu(add_rowvec(matmul(ffn_in, layer.ffn_w1), layer.ffn_b1));
    return add(h, add_rowvec(matmul(mid, layer.ffn_w2), layer.ffn_b2));
}

FusionModel FusionModel::init(const FusionConfig& cfg, Vocab vocab, std::size_t d_enc, Rng& rng) {
    cfg.validate();
    if (d_enc == 0) throw ConfigError("fusion encoder width must be positive");
    if (vocab.size() < 2) throw ConfigError("fusion vocabulary must hold the OOV bucket plus one word");
    if (vocab.size() > cfg.vocab_size)
        throw ConfigError("vocabulary holds " + std::to_string(vocab.size()) + " entries, above the cap of " +
                          std::to_string(cfg.vocab_size));

    FusionModel m;
    m.cfg = cfg;
    m.d_enc = d_enc;
    m.vocab = std::move(vocab);
    const double embed_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    m.embed = Tensor::randn({m.vocab.size(), cfg.d_model}, rng, embed_std, true);
    m.layers.reserve(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i)
        m.layers.push_back(TransformerLayer::init(cfg.d_model, cfg.n_heads, cfg.ffn_mult, rng));
    m.ln_f_gain = Tensor::from({cfg.d_model}, std::vector<double>(cfg.d_model, 1.0), true);
    m.ln_f_bias = Tensor::zeros({cfg.d_model}, true);
    m.sep = Tensor::randn({1, cfg.d_model}, rng, 0.02, true);
    m.cls = Tensor::randn({1, cfg.d_model}, rng, 0.02, true);
    m.proj_w = Tensor::randn({d_enc, cfg.d_model}, rng, 1.0 / std::sqrt(static_cast<double>(d_enc)), true);
    m.proj_b = Tensor::zeros({cfg.d_model}, true);
    m.head_w = Tensor::zeros({cfg.d_model, 1}, true);
    m.head_b = Tensor::zeros({1}, true);
    m.q_adapters.reserve(cfg.n_layers);
    m.v_adapters.reserve(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        m.q_adapters.push_back(LoraAdapter::init(cfg.d_model, cfg.d_model, cfg.lora_rank, cfg.lora_alpha, rng));
        m.v_adapters.push_back(LoraAdapter::init(cfg.d_model, cfg.d_model, cfg.lora_rank, cfg.lora_alpha, rng));
    }
    return m;
}

Tensor FusionModel::segment_logit(const Tensor& av, const std::vector<std::size_t>& text_ids) const {
    std::vector<Tensor> parts;
    if (av.defined()) {
        if (av.rank() != 2 || av.cols() != d_enc)
            throw ShapeError("fused input must be [T, " + std::to_string(d_enc) + "]");
        parts.push_back(add_rowvec(matmul(av, proj_w), proj_b));
        parts.push_back(sep);
    }
    for (const std::size_t id : text_ids)
        if (id >= vocab.size())
            throw ContractError("token id " + std::to_string(id) + " exceeds the vocabulary");
    if (!text_ids.empty()) parts.push_back(embedding_lookup(embed, text_ids));
    parts.push_back(cls);

    Tensor x = parts.size() == 1 ? parts[0] : concat_rows(parts);
    x = add(x, sinusoidal_positions(x.rows(), cfg.d_model));
    for (std::size_t i = 0; i < layers.size(); ++i)
        x = fusion_layer_forward(layers[i], q_adapters[i], v_adapters[i], adapters_enabled, x);
    x = layernorm_rows(x, ln_f_gain, ln_f_bias);
    const Tensor cls_h = slice_rows(x, x.rows() - 1, x.rows());
    return reshape(add_rowvec(matmul(cls_h, head_w), head_b), {1});
}

void FusionModel::apply_stage3_freeze() {
    embed.set_requires_grad(false);
    for (TransformerLayer& layer : layers)
        for (Tensor* t : layer.param_ptrs()) t->set_requires_grad(false);
    ln_f_gain.set_requires_grad(false);
    ln_f_bias.set_requires_grad(false);
    sep.set_requires_grad(true);
    cls.set_requires_grad(true);
    proj_w.set_requires_grad(true);
    proj_b.set_requires_grad(true);
    head_w.set_requires_grad(true);
    head_b.set_requires_grad(true);
    for (LoraAdapter& ad : q_adapters) {
        ad.a.set_requires_grad(true);
        ad.b.set_requires_grad(true);
    }
    for (LoraAdapter& ad : v_adapters) {
        ad.a.set_requires_grad(true);
        ad.b.set_requires_grad(true);
    }
}

void FusionModel::register_base(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + "embed", embed);
    for (std::size_t i = 0; i < layers.size(); ++i)
        layers[i].register_params(reg, prefix + "layers." + std::to_string(i) + ".");
    reg.add(prefix + "ln_f.gain", ln_f_gain);
    reg.add(prefix + "ln_f.bias", ln_f_bias);
    reg.add(prefix + "sep", sep);
    reg.add(prefix + "cls", cls);
    reg.add(prefix + "proj.w", proj_w);
    reg.add(prefix + "proj.b", proj_b);
    reg.add(prefix + "head.w", head_w);
    reg.add(prefix + "head.b", head_b);
}

void FusionModel::register_adapters(ParamRegistry& reg, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string base = prefix + "layers." + std::to_string(i) + ".";
        reg.add(base + "q.a", q_adapters[i].a);
        reg.add(base + "q.b", q_adapters[i].b);
        reg.add(base + "v.a", v_adapters[i].a);
        reg.add(base + "v.b", v_adapters[i].b);
    }
}

std::size_t stage3_trainable_count(const FusionConfig& cfg, std::size_t d_enc) {
    const std::size_t adapters = cfg.n_layers * 2 * cfg.lora_rank * (cfg.d_model + cfg.d_model);
    const std::size_t proj = d_enc * cfg.d_model + cfg.d_model;
    const std::size_t head = cfg.d_model + 1;
    return adapters + proj + head + 2 * cfg.d_model;
}

namespace {

std::string segment_name(const SubDialogue& sub) {
    return "subdialogue " + sub.source_id + "[" + std::to_string(sub.start_s) + "," + std::to_string(sub.end_s) +
           "]";
}

Tensor sequence_tensor(const FeatureSequence& seq) {
    return Tensor::from({seq.frame_count(), seq.dim}, seq.frames);
}

}  // namespace

Stage3Sample prepare_stage3_sample(const EncoderStack& audio, const EncoderStack& visual, const Vocab& vocab,
                                   const SubDialogue& sub, ModalityMode mode) {
    Stage3Sample sample;
    sample.depressed = sub.depressed;
    sample.text_ids = vocab.encode(transcript_text(sub.transcript));
    if (mode == ModalityMode::text_only) return sample;

    NoGradGuard ng;
    if (sub.audio.frame_count() == 0) throw DataError("degenerate " + segment_name(sub) + ": audio is empty");
    if (sub.audio.frame_count() < 4)
        throw DataError("degenerate " + segment_name(sub) + ": only " + std::to_string(sub.audio.frame_count()) +
                        " audio frames");
    const FeatureSequence audio_tokens = audio.encode(sub.audio);
    if (mode == ModalityMode::text_audio) {
        sample.av = sequence_tensor(audio_tokens);
        return sample;
    }

    if (sub.visual.frame_count() == 0) throw DataError("degenerate " + segment_name(sub) + ": visual is empty");
    const FeatureSequence resampled = resample_linear(sub.visual, kMelRate);
    if (resampled.frame_count() < 4)
        throw DataError("degenerate " + segment_name(sub) + ": visual resamples to " +
                        std::to_string(resampled.frame_count()) + " frames");
    const FeatureSequence visual_tokens = visual.encode(resampled);
    const AlignmentReport report = check_alignment(audio_tokens, visual_tokens);
    if (!report.ok) throw DataError(segment_name(sub) + " is misaligned: " + report.message);
    sample.av = add(sequence_tensor(audio_tokens), sequence_tensor(visual_tokens));
    return sample;
}

std::vector<Stage3Sample> prepare_stage3_samples(const EncoderStack& audio, const EncoderStack& visual,
                                                 const Vocab& vocab, const std::vector<SubDialogueMeta>& subs,
                                                 const std::string& dir, ModalityMode mode) {
    std::vector<Stage3Sample> samples;
    samples.reserve(subs.size());
    for (const SubDialogueMeta& meta : subs) {
        SubDialogue sub;
        sub.source_id = meta.source_id;
        sub.start_s = meta.start_s;
        sub.end_s = meta.end_s;
        sub.depressed = meta.depressed;
        sub.transcript = meta.transcript;
        if (mode != ModalityMode::text_only) sub.audio = load_sub_audio(meta, dir);
        if (mode == ModalityMode::text_audio_visual) sub.visual = load_sub_visual(meta, dir);
        samples.push_back(prepare_stage3_sample(audio, visual, vocab, sub, mode));
    }
    return samples;
}

SegmentDecision classify_segment(const EncoderStack& audio, const EncoderStack& visual, const FusionModel& model,
                                 const SubDialogue& sub, ModalityMode mode) {
    const Stage3Sample sample = prepare_stage3_sample(audio, visual, model.vocab, sub, mode);
    NoGradGuard ng;
    SegmentDecision decision;
    decision.logit = model.segment_logit(sample.av, sample.text_ids).item();
    decision.positive = decision.logit > 0.0;
    return decision;
}

void Stage3Config::validate() const {
    if (lr <= 0.0) throw ConfigError("stage 3 lr must be positive");
    if (batch == 0) throw ConfigError("stage 3 batch must be positive");
    if (accum == 0 || accum > batch) throw ConfigError("stage 3 accum must lie in [1, batch]");
    if (epochs == 0) throw ConfigError("stage 3 epochs must be positive");
    if (warmup_epochs < 0.0 || warmup_epochs > static_cast<double>(epochs))
        throw ConfigError("stage 3 warmup must lie within [0, epochs]");
    if (clip <= 0.0) throw ConfigError("stage 3 clip must be positive");
    if (weight_decay < 0.0) throw ConfigError("stage 3 weight decay must be non-negative");
}

Stage3TrainResult train_stage3(FusionModel& model, const std::vector<Stage3Sample>& samples,
                               const Stage3Config& cfg, Rng& rng) {
    cfg.validate();
    if (samples.empty()) throw DataError("stage 3 needs at least one training sample");

    model.apply_stage3_freeze();
    ParamRegistry reg;
    model.register_base(reg, "fusion.");
    model.register_adapters(reg, "lora.");
    std::vector<Tensor> params = reg.trainable();
    AdamW opt(params, {cfg.beta1, cfg.beta2, cfg.weight_decay, 1e-8});

    const std::size_t n = samples.size();
    const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const LrSchedule schedule{cfg.lr, cfg.warmup_epochs * static_cast<double>(steps_per_epoch),
                              static_cast<double>(cfg.epochs) * static_cast<double>(steps_per_epoch)};

    Stage3TrainResult result;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t steps_done = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0, correct = 0.0;
        for (std::size_t g0 = 0; g0 < n; g0 += cfg.batch) {
            const std::size_t g1 = std::min(n, g0 + cfg.batch);
            const std::size_t chunk = (g1 - g0 + cfg.accum - 1) / cfg.accum;
            std::size_t chunks_used = 0;
            for (std::size_t c0 = g0; c0 < g1; c0 += chunk) {
                const std::size_t c1 = std::min(g1, c0 + chunk);
                ++chunks_used;
                for (std::size_t i = c0; i < c1; ++i) {
                    const Stage3Sample& s = samples[order[i]];
                    const Tensor logit = model.segment_logit(s.av, s.text_ids);
                    const double target = s.depressed ? 1.0 : 0.0;
                    const Tensor loss = bce_with_logits(logit, {target});
                    const double val = loss.item();
                    if (!std::isfinite(val))
                        throw NumericError("stage 3 loss diverged at epoch " + std::to_string(epoch) + ", step " +
                                           std::to_string(steps_done));
                    loss_sum += val;
                    if ((logit.item() > 0.0) == s.depressed) correct += 1.0;
                    backward(scale(loss, 1.0 / static_cast<double>(c1 - c0)));
                }
            }
            scale_grads(params, 1.0 / static_cast<double>(chunks_used));
            clip_global_norm(params, cfg.clip);
            opt.step(lr_at(schedule, static_cast<double>(steps_done) + 1.0));
            opt.zero_grad();
            ++steps_done;
        }
        result.epochs.push_back(
            {epoch, loss_sum / static_cast<double>(n), correct / static_cast<double>(n)});
    }
    return result;
}

}  // namespace chronofuse
