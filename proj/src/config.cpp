#include "chronofuse/config.hpp"

#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "chronofuse/errors.hpp"

namespace chronofuse {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string pool_to_string(PoolMode mode) {
    return mode == PoolMode::mean ? "mean" : "max";
}

PoolMode pool_from_string(const std::string& name, const std::string& path) {
    if (name == "mean") return PoolMode::mean;
    if (name == "max") return PoolMode::max;
    throw ConfigError("config key " + path + " must be \"mean\" or \"max\", got \"" + name + "\"");
}

ModalityMode mode_from_string(const std::string& name, const std::string& path) {
    try {
        return modality_from_string(name);
    } catch (const ConfigError&) {
        throw ConfigError("config key " + path + " must be \"t\", \"ta\", or \"tav\", got \"" + name + "\"");
    }
}

double as_number(const ordered_json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError("config key " + path + " must be a number");
    return v.get<double>();
}

// Unsigned integer fields reject floats and negatives outright rather than
// rounding them into silently different runs.
std::uint64_t as_uint(const ordered_json& v, const std::string& path) {
    if (!v.is_number_integer() || v.is_number_float() || v.get<std::int64_t>() < 0)
        throw ConfigError("config key " + path + " must be a non-negative integer");
    return v.get<std::uint64_t>();
}

bool as_bool(const ordered_json& v, const std::string& path) {
    if (!v.is_boolean()) throw ConfigError("config key " + path + " must be a boolean");
    return v.get<bool>();
}

std::string as_string(const ordered_json& v, const std::string& path) {
    if (!v.is_string()) throw ConfigError("config key " + path + " must be a string");
    return v.get<std::string>();
}

std::vector<std::uint64_t> as_uint_array(const ordered_json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError("config key " + path + " must be an array of integers");
    std::vector<std::uint64_t> out;
    out.reserve(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_uint(v[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

const ordered_json& section_object(const ordered_json& doc, const std::string& name) {
    const ordered_json& sec = doc.at(name);
    if (!sec.is_object()) throw ConfigError("config section " + name + " must be an object");
    return sec;
}

void parse_corpus(const ordered_json& sec, GenConfig& c) {
    for (const auto& [key, value] : sec.items()) {
        const std::string path = "corpus." + key;
        if (key == "train_total") c.train_total = as_uint(value, path);
        else if (key == "train_depressed") c.train_depressed = as_uint(value, path);
        else if (key == "dev_total") c.dev_total = as_uint(value, path);
        else if (key == "dev_depressed") c.dev_depressed = as_uint(value, path);
        else if (key == "test_total") c.test_total = as_uint(value, path);
        else if (key == "test_depressed") c.test_depressed = as_uint(value, path);
        else if (key == "d_a") c.d_a = as_uint(value, path);
        else if (key == "d_v") c.d_v = as_uint(value, path);
        else if (key == "min_duration_s") c.min_duration_s = as_uint(value, path);
        else if (key == "max_duration_s") c.max_duration_s = as_uint(value, path);
        else if (key == "audio_signal") c.audio_signal = as_number(value, path);
        else if (key == "visual_signal") c.visual_signal = as_number(value, path);
        else if (key == "p_text") c.p_text = as_number(value, path);
        else throw ConfigError("unknown config key " + path);
    }
}

void parse_augment(const ordered_json& sec, AugConfig& c) {
    for (const auto& [key, value] : sec.items()) {
        const std::string path = "augment." + key;
        if (key == "m_plus") c.m_plus = as_uint(value, path);
        else if (key == "d_min_s") c.d_min_s = as_uint(value, path);
        else if (key == "d_max_s") c.d_max_s = as_uint(value, path);
        else if (key == "remove_interviewer") c.remove_interviewer = as_bool(value, path);
        else if (key == "literal_m_minus") c.literal_m_minus = as_bool(value, path);
        else throw ConfigError("unknown config key " + path);
    }
}

void parse_stage1(const ordered_json& sec, Stage1Section& s) {
    for (const auto& [key, value] : sec.items()) {
        const std::string path = "stage1." + key;
        if (key == "lr") s.train.lr = as_number(value, path);
        else if (key == "beta1") s.train.beta1 = as_number(value, path);
        else if (key == "beta2") s.train.beta2 = as_number(value, path);
        else if (key == "weight_decay") s.train.weight_decay = as_number(value, path);
        else if (key == "batch") s.train.batch = as_uint(value, path);
        else if (key == "accum") s.train.accum = as_uint(value, path);
        else if (key == "epochs") s.train.epochs = as_uint(value, path);
        else if (key == "warmup_epochs") s.train.warmup_epochs = as_number(value, path);
        else if (key == "clip") s.train.clip = as_number(value, path);
        else if (key == "mask_ratio") s.train.mask_ratio = as_number(value, path);
        else if (key == "crop_frames") s.train.crop_frames = as_uint(value, path);
        else if (key == "d_model") s.d_model = as_uint(value, path);
        else if (key == "n_layers") s.n_layers = as_uint(value, path);
        else if (key == "n_heads") s.n_heads = as_uint(value, path);
        else if (key == "ffn_mult") s.ffn_mult = as_uint(value, path);
        else if (key == "decoder_layers") s.decoder_layers = as_uint(value, path);
        else if (key == "chunk_s") s.chunk_s = as_uint(value, path);
        else throw ConfigError("unknown config key " + path);
    }
}

void parse_stage2(const ordered_json& sec, Stage2Section& s) {
    for (const auto& [key, value] : sec.items()) {
        const std::string path = "stage2." + key;
        if (key == "tau") s.train.tau = as_number(value, path);
        else if (key == "symmetric") s.train.symmetric = as_bool(value, path);
        else if (key == "normalize") s.train.normalize = as_bool(value, path);
        else if (key == "pool") s.train.pool = pool_from_string(as_string(value, path), path);
        else if (key == "lr") s.train.lr = as_number(value, path);
        else if (key == "beta1") s.train.beta1 = as_number(value, path);
        else if (key == "beta2") s.train.beta2 = as_number(value, path);
        else if (key == "weight_decay") s.train.weight_decay = as_number(value, path);
        else if (key == "batch") s.train.batch = as_uint(value, path);
        else if (key == "accum") s.train.accum = as_uint(value, path);
        else if (key == "epochs") s.train.epochs = as_uint(value, path);
        else if (key == "warmup_epochs") s.train.warmup_epochs = as_number(value, path);
        else if (key == "clip") s.train.clip = as_number(value, path);
        else if (key == "eval_batch") s.train.eval_batch = as_uint(value, path);
        else if (key == "d_proj") s.d_proj = as_uint(value, path);
        else throw ConfigError("unknown config key " + path);
    }
}

void parse_stage3(const ordered_json& sec, Stage3Section& s) {
    for (const auto& [key, value] : sec.items()) {
        const std::string path = "stage3." + key;
        if (key == "lr") s.train.lr = as_number(value, path);
        else if (key == "beta1") s.train.beta1 = as_number(value, path);
        else if (key == "beta2") s.train.beta2 = as_number(value, path);
        else if (key == "weight_decay") s.train.weight_decay = as_number(value, path);
        else if (key == "batch") s.train.batch = as_uint(value, path);
        else if (key == "accum") s.train.accum = as_uint(value, path);
        else if (key == "epochs") s.train.epochs = as_uint(value, path);
        else if (key == "warmup_epochs") s.train.warmup_epochs = as_number(value, path);
        else if (key == "clip") s.train.clip = as_number(value, path);
        else if (key == "d_model") s.model.d_model = as_uint(value, path);
        else if (key == "n_layers") s.model.n_layers = as_uint(value, path);
        else if (key == "n_heads") s.model.n_heads = as_uint(value, path);
        else if (key == "ffn_mult") s.model.ffn_mult = as_uint(value, path);
        else if (key == "vocab_size") s.model.vocab_size = as_uint(value, path);
        else if (key == "lora_rank") s.model.lora_rank = as_uint(value, path);
        else if (key == "lora_alpha") s.model.lora_alpha = as_number(value, path);
        else throw ConfigError("unknown config key " + path);
    }
}

void parse_inference(const ordered_json& sec, InferenceConfig& c) {
    for (const auto& [key, value] : sec.items()) {
        const std::string path = "inference." + key;
        if (key == "scales_s") c.scales_s = as_uint_array(value, path);
        else if (key == "windows_per_scale") c.windows_per_scale = as_uint(value, path);
        else if (key == "remove_interviewer") c.remove_interviewer = as_bool(value, path);
        else if (key == "mode") c.mode = mode_from_string(as_string(value, path), path);
        else throw ConfigError("unknown config key " + path);
    }
}

ordered_json to_json(const RunConfig& cfg) {
    ordered_json doc;
    ordered_json& corpus = doc["corpus"] = ordered_json::object();
    corpus["train_total"] = cfg.corpus.train_total;
    corpus["train_depressed"] = cfg.corpus.train_depressed;
    corpus["dev_total"] = cfg.corpus.dev_total;
    corpus["dev_depressed"] = cfg.corpus.dev_depressed;
    corpus["test_total"] = cfg.corpus.test_total;
    corpus["test_depressed"] = cfg.corpus.test_depressed;
    corpus["d_a"] = cfg.corpus.d_a;
    corpus["d_v"] = cfg.corpus.d_v;
    corpus["min_duration_s"] = cfg.corpus.min_duration_s;
    corpus["max_duration_s"] = cfg.corpus.max_duration_s;
    corpus["audio_signal"] = cfg.corpus.audio_signal;
    corpus["visual_signal"] = cfg.corpus.visual_signal;
    corpus["p_text"] = cfg.corpus.p_text;

    ordered_json& augment = doc["augment"] = ordered_json::object();
    augment["m_plus"] = cfg.augment.m_plus;
    augment["d_min_s"] = cfg.augment.d_min_s;
    augment["d_max_s"] = cfg.augment.d_max_s;
    augment["remove_interviewer"] = cfg.augment.remove_interviewer;
    augment["literal_m_minus"] = cfg.augment.literal_m_minus;

    ordered_json& stage1 = doc["stage1"] = ordered_json::object();
    stage1["lr"] = cfg.stage1.train.lr;
    stage1["beta1"] = cfg.stage1.train.beta1;
    stage1["beta2"] = cfg.stage1.train.beta2;
    stage1["weight_decay"] = cfg.stage1.train.weight_decay;
    stage1["batch"] = cfg.stage1.train.batch;
    stage1["accum"] = cfg.stage1.train.accum;
    stage1["epochs"] = cfg.stage1.train.epochs;
    stage1["warmup_epochs"] = cfg.stage1.train.warmup_epochs;
    stage1["clip"] = cfg.stage1.train.clip;
    stage1["mask_ratio"] = cfg.stage1.train.mask_ratio;
    stage1["crop_frames"] = cfg.stage1.train.crop_frames;
    stage1["d_model"] = cfg.stage1.d_model;
    stage1["n_layers"] = cfg.stage1.n_layers;
    stage1["n_heads"] = cfg.stage1.n_heads;
    stage1["ffn_mult"] = cfg.stage1.ffn_mult;
    stage1["decoder_layers"] = cfg.stage1.decoder_layers;
    stage1["chunk_s"] = cfg.stage1.chunk_s;

    ordered_json& stage2 = doc["stage2"] = ordered_json::object();
    stage2["tau"] = cfg.stage2.train.tau;
    stage2["symmetric"] = cfg.stage2.train.symmetric;
    stage2["normalize"] = cfg.stage2.train.normalize;
    stage2["pool"] = pool_to_string(cfg.stage2.train.pool);
    stage2["lr"] = cfg.stage2.train.lr;
    stage2["beta1"] = cfg.stage2.train.beta1;
    stage2["beta2"] = cfg.stage2.train.beta2;
    stage2["weight_decay"] = cfg.stage2.train.weight_decay;
    stage2["batch"] = cfg.stage2.train.batch;
    stage2["accum"] = cfg.stage2.train.accum;
    stage2["epochs"] = cfg.stage2.train.epochs;
    stage2["warmup_epochs"] = cfg.stage2.train.warmup_epochs;
    stage2["clip"] = cfg.stage2.train.clip;
    stage2["eval_batch"] = cfg.stage2.train.eval_batch;
    stage2["d_proj"] = cfg.stage2.d_proj;

    ordered_json& stage3 = doc["stage3"] = ordered_json::object();
    stage3["lr"] = cfg.stage3.train.lr;
    stage3["beta1"] = cfg.stage3.train.beta1;
    stage3["beta2"] = cfg.stage3.train.beta2;
    stage3["weight_decay"] = cfg.stage3.train.weight_decay;
    stage3["batch"] = cfg.stage3.train.batch;
    stage3["accum"] = cfg.stage3.train.accum;
    stage3["epochs"] = cfg.stage3.train.epochs;
    stage3["warmup_epochs"] = cfg.stage3.train.warmup_epochs;
    stage3["clip"] = cfg.stage3.train.clip;
    stage3["d_model"] = cfg.stage3.model.d_model;
    stage3["n_layers"] = cfg.stage3.model.n_layers;
    stage3["n_heads"] = cfg.stage3.model.n_heads;
    stage3["ffn_mult"] = cfg.stage3.model.ffn_mult;
    stage3["vocab_size"] = cfg.stage3.model.vocab_size;
    stage3["lora_rank"] = cfg.stage3.model.lora_rank;
    stage3["lora_alpha"] = cfg.stage3.model.lora_alpha;

    ordered_json& inference = doc["inference"] = ordered_json::object();
    inference["scales_s"] = cfg.inference.scales_s;
    inference["windows_per_scale"] = cfg.inference.windows_per_scale;
    inference["remove_interviewer"] = cfg.inference.remove_interviewer;
    inference["mode"] = to_string(cfg.inference.mode);
    return doc;
}

RunConfig from_json(const ordered_json& doc) {
    if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
    RunConfig cfg;
    for (const auto& [key, value] : doc.items()) {
        (void)value;
        if (key == "corpus") parse_corpus(section_object(doc, key), cfg.corpus);
        else if (key == "augment") parse_augment(section_object(doc, key), cfg.augment);
        else if (key == "stage1") parse_stage1(section_object(doc, key), cfg.stage1);
        else if (key == "stage2") parse_stage2(section_object(doc, key), cfg.stage2);
        else if (key == "stage3") parse_stage3(section_object(doc, key), cfg.stage3);
        else if (key == "inference") parse_inference(section_object(doc, key), cfg.inference);
        else throw ConfigError("unknown config section " + key);
    }
    cfg.validate();
    return cfg;
}

ordered_json parse_document(const std::string& json_text) {
    ordered_json doc = ordered_json::parse(json_text, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config is not valid JSON");
    return doc;
}

}  // namespace

EncoderConfig RunConfig::encoder_config(std::size_t d_in) const {
    EncoderConfig c;
    c.d_in = d_in;
    c.d_model = stage1.d_model;
    c.n_layers = stage1.n_layers;
    c.n_heads = stage1.n_heads;
    c.ffn_mult = stage1.ffn_mult;
    c.chunk_s = stage1.chunk_s;
    return c;
}

MaeConfig RunConfig::mae_config(std::size_t d_in) const {
    MaeConfig c;
    c.d_in = d_in;
    c.d_model = stage1.d_model;
    c.n_layers = stage1.n_layers;
    c.n_heads = stage1.n_heads;
    c.ffn_mult = stage1.ffn_mult;
    c.decoder_layers = stage1.decoder_layers;
    return c;
}

void RunConfig::validate() const {
    corpus.validate();
    augment.validate();
    stage1.train.validate();
    stage2.train.validate();
    stage3.train.validate();
    stage3.model.validate();
    inference.validate();
    mae_config(corpus.d_a).validate();
    mae_config(corpus.d_v).validate();
    encoder_config(corpus.d_a).validate();
    encoder_config(corpus.d_v).validate();
    if (stage2.d_proj == 0) throw ConfigError("stage2.d_proj must be positive");
}

std::string default_config_text() { return serialize_run_config(RunConfig{}); }

RunConfig parse_run_config(const std::string& json_text) { return from_json(parse_document(json_text)); }

std::string serialize_run_config(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_run_config(buf.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string apply_override(const std::string& json_text, const std::string& dotted) {
    const std::size_t eq = dotted.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like section.key=value, got \"" + dotted + "\"");
    const std::string path = dotted.substr(0, eq);
    const std::string value_text = dotted.substr(eq + 1);

    ordered_json doc = parse_document(json_text);
    ordered_json* node = &doc;
    std::size_t begin = 0;
    std::vector<std::string> segments;
    while (true) {
        const std::size_t dot = path.find('.', begin);
        segments.push_back(path.substr(begin, dot == std::string::npos ? dot : dot - begin));
        if (dot == std::string::npos) break;
        begin = dot + 1;
    }
    for (std::size_t i = 0; i + 1 < segments.size(); ++i) {
        if (!node->is_object() || !node->contains(segments[i]))
            throw ConfigError("unknown config key " + path);
        node = &(*node)[segments[i]];
    }
    if (!node->is_object() || !node->contains(segments.back()))
        throw ConfigError("unknown config key " + path);

    // The value is a JSON literal when it parses as one, a string otherwise
    // (so pool=mean works without inner quotes).
    ordered_json value = ordered_json::parse(value_text, nullptr, false);
    if (value.is_discarded()) value = value_text;
    (*node)[segments.back()] = value;
    return doc.dump(2) + "\n";
}

std::string apply_preset(const std::string& json_text, const std::string& preset) {
    if (preset == "paper") return json_text;
    if (preset != "desk") throw ConfigError("unknown preset \"" + preset + "\" (expected paper or desk)");

    ordered_json doc = parse_document(json_text);
    // Desk scale: a corpus and schedule small enough that the whole pipeline
    // finishes in minutes on one core. Learning rates rise to compensate for
    // the far shorter schedules; everything else keeps its published value.
    ordered_json& corpus = doc["corpus"];
    corpus["train_total"] = 12;
    corpus["train_depressed"] = 5;
    corpus["dev_total"] = 8;
    corpus["dev_depressed"] = 4;
    corpus["test_total"] = 8;
    corpus["test_depressed"] = 4;
    corpus["d_a"] = 16;
    corpus["d_v"] = 12;
    corpus["min_duration_s"] = 40;
    corpus["max_duration_s"] = 90;
    ordered_json& augment = doc["augment"];
    augment["m_plus"] = 50;
    augment["d_min_s"] = 8;
    augment["d_max_s"] = 24;
    ordered_json& stage1 = doc["stage1"];
    stage1["lr"] = 2e-3;
    stage1["batch"] = 32;
    stage1["accum"] = 4;
    stage1["epochs"] = 8;
    stage1["warmup_epochs"] = 1.0;
    stage1["crop_frames"] = 128;
    stage1["d_model"] = 32;
    stage1["n_layers"] = 2;
    stage1["ffn_mult"] = 2;
    stage1["chunk_s"] = 8;
    ordered_json& stage2 = doc["stage2"];
    stage2["lr"] = 3e-3;
    stage2["batch"] = 32;
    stage2["accum"] = 4;
    stage2["epochs"] = 10;
    stage2["warmup_epochs"] = 1.0;
    stage2["d_proj"] = 32;
    ordered_json& stage3 = doc["stage3"];
    stage3["lr"] = 4e-3;
    stage3["accum"] = 2;
    stage3["epochs"] = 4;
    stage3["warmup_epochs"] = 0.5;
    stage3["d_model"] = 32;
    stage3["n_layers"] = 1;
    stage3["ffn_mult"] = 2;
    stage3["vocab_size"] = 256;
    stage3["lora_rank"] = 4;
    stage3["lora_alpha"] = 8.0;
    ordered_json& inference = doc["inference"];
    inference["scales_s"] = std::vector<std::uint64_t>{10, 16, 24};
    inference["windows_per_scale"] = 12;
    return doc.dump(2) + "\n";
}

}  // namespace chronofuse
