#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "chronofuse/augment.hpp"
#include "chronofuse/corpus.hpp"
#include "chronofuse/errors.hpp"
#include "chronofuse/rng.hpp"
#include "chronofuse/temporal.hpp"

using namespace chronofuse;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "chronofuse_augment_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Utterance utt(Speaker s, double a, double b) {
    Utterance u;
    u.speaker = s;
    u.start_s = a;
    u.end_s = b;
    u.text = s == Speaker::interviewer ? "w001 w002" : "w003 w004";
    return u;
}

// Feature stream whose every row holds its own frame index, so slices and
// removals reveal exactly which source frames survived.
FeatureSequence indexed_features(FrameRate rate, std::size_t dim, std::uint64_t duration_s) {
    FeatureSequence seq;
    seq.rate = rate;
    seq.dim = dim;
    const auto frames = duration_s * rate.num / rate.den;
    seq.frames.resize(frames * dim);
    for (std::uint64_t f = 0; f < frames; ++f)
        for (std::size_t j = 0; j < dim; ++j) seq.row(f)[j] = static_cast<double>(f);
    return seq;
}

GenConfig small_corpus_config(std::size_t total, std::size_t depressed) {
    GenConfig cfg;
    cfg.train_total = total;
    cfg.train_depressed = depressed;
    cfg.dev_total = 2;
    cfg.dev_depressed = 1;
    cfg.test_total = 2;
    cfg.test_depressed = 1;
    cfg.d_a = 6;
    cfg.d_v = 4;
    cfg.min_duration_s = 20;
    cfg.max_duration_s = 30;
    return cfg;
}

}  // namespace

TEST_SUITE("augment") {

TEST_CASE("plan_counts balances classes") {
    CHECK(plan_counts(3, 7, 100) == 43);
    CHECK(43 * 7 == 301);  // 300 positive vs 301 negative totals
    CHECK(plan_counts(30, 77, 1000) == 390);
    CHECK(plan_counts(5, 5, 12) == 12);  // n+ = n- keeps m unchanged
    CHECK(plan_counts(12, 12, 7) == 7);

    // The literal ratio direction reads the formula verbatim.
    CHECK(plan_counts(3, 7, 100, true) == 233);
    CHECK(plan_counts(5, 5, 12, true) == 12);

    CHECK_THROWS_AS(plan_counts(0, 7, 100), ContractError);
    CHECK_THROWS_AS(plan_counts(3, 0, 100), ContractError);
    CHECK_THROWS_AS(plan_counts(3, 7, 0), ContractError);

    // Balance property: totals agree within half the rounding slack.
    Rng rng(404);
    for (int i = 0; i < 300; ++i) {
        const auto np = static_cast<std::size_t>(rng.uniform_int(1, 200));
        const auto nm = static_cast<std::size_t>(rng.uniform_int(1, 200));
        const auto mp = static_cast<std::size_t>(rng.uniform_int(1, 5000));
        const auto mm = plan_counts(np, nm, mp);
        const auto pos = static_cast<std::int64_t>(np * mp);
        const auto neg = static_cast<std::int64_t>(nm * mm);
        CHECK(2 * std::abs(pos - neg) <= static_cast<std::int64_t>(nm));
    }
}

TEST_CASE("start floors and end ceils to integer seconds") {
    Dialogue d;
    d.id = "frac";
    d.duration_s = 46;
    d.utterances = {utt(Speaker::participant, 0.0, 12.7), utt(Speaker::interviewer, 12.7, 20.0),
                    utt(Speaker::participant, 20.0, 45.2)};
    const FeatureSequence audio = indexed_features(kMelRate, 3, d.duration_s);
    const FeatureSequence visual = indexed_features(kVisualRate, 2, d.duration_s);

    AugConfig cfg;
    cfg.m_plus = 1;
    cfg.d_min_s = 25;
    cfg.d_max_s = 26;
    cfg.remove_interviewer = false;
    Rng rng(9);
    const auto sub = sample_subdialogue(d, audio, visual, cfg, rng);
    REQUIRE(sub.has_value());
    CHECK(sub->start_s == 12);  // floor(12.7)
    CHECK(sub->end_s == 46);    // ceil(45.2)
    CHECK(sub->audio.frame_count() == (46 - 12) * 100);
    CHECK(sub->audio.row(0)[0] == 1200.0);
    CHECK(sub->visual.frame_count() == (46 - 12) * 30);
    CHECK(sub->visual.row(0)[0] == 360.0);
    CHECK(sub->audio.origin_s == 12);
    REQUIRE(sub->transcript.size() == 2);
    CHECK(sub->transcript.front().speaker == Speaker::interviewer);
    CHECK(sub->transcript.back().end_s == 45.2);
}

TEST_CASE("end candidate closest to the raw endpoint wins") {
    Dialogue d;
    d.id = "argmin";
    d.duration_s = 51;
    d.utterances = {utt(Speaker::participant, 0.0, 12.0), utt(Speaker::interviewer, 12.0, 14.0),
                    utt(Speaker::participant, 14.0, 40.0), utt(Speaker::interviewer, 40.0, 42.0),
                    utt(Speaker::participant, 42.0, 45.2), utt(Speaker::interviewer, 45.2, 47.0),
                    utt(Speaker::participant, 47.0, 51.0)};
    const FeatureSequence audio = indexed_features(kMelRate, 2, d.duration_s);
    const FeatureSequence visual = indexed_features(kVisualRate, 2, d.duration_s);

    // d is pinned near 34 so the raw endpoint sits near 46: distances to the
    // participant ends {40, 45.2, 51} are about {6, 0.8, 5} and 45.2 wins.
    AugConfig cfg;
    cfg.m_plus = 1;
    cfg.d_min_s = 33;
    cfg.d_max_s = 35;
    cfg.remove_interviewer = false;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        Rng rng(seed);
        const auto sub = sample_subdialogue(d, audio, visual, cfg, rng);
        REQUIRE(sub.has_value());
        CHECK(sub->start_s == 12);
        CHECK(sub->end_s == 46);
        CHECK(sub->transcript.back().end_s == 45.2);
        CHECK(sub->transcript.back().speaker == Speaker::participant);
    }
}

TEST_CASE("single-turn dialogue yields the whole dialogue") {
    Dialogue d;
    d.id = "single";
    d.duration_s = 30;
    d.utterances = {utt(Speaker::interviewer, 0.0, 5.0), utt(Speaker::participant, 5.0, 30.0)};
    const FeatureSequence audio = indexed_features(kMelRate, 2, d.duration_s);
    const FeatureSequence visual = indexed_features(kVisualRate, 2, d.duration_s);

    AugConfig cfg;
    cfg.m_plus = 1;
    cfg.d_min_s = 10;
    cfg.d_max_s = 20;
    cfg.remove_interviewer = false;
    Rng rng(4);
    const auto sub = sample_subdialogue(d, audio, visual, cfg, rng);
    REQUIRE(sub.has_value());
    CHECK(sub->start_s == 0);
    CHECK(sub->end_s == 30);
    CHECK(sub->transcript.size() == 2);
    CHECK(sub->audio.frame_count() == 3000);
    CHECK(sub->visual.frame_count() == 900);
}

TEST_CASE("interviewer removal deletes exactly the interviewer frames") {
    SubDialogue sub;
    sub.source_id = "rm";
    sub.start_s = 0;
    sub.end_s = 10;
    sub.transcript = {utt(Speaker::interviewer, 0.0, 4.0), utt(Speaker::participant, 4.0, 10.0)};
    sub.audio = indexed_features(kMelRate, 3, 10);
    sub.visual = indexed_features(kVisualRate, 2, 10);

    remove_interviewer_segments(sub);
    CHECK(sub.audio.frame_count() == 600);  // frames 400..999 survive
    CHECK(sub.audio.row(0)[0] == 400.0);
    CHECK(sub.audio.row(599)[0] == 999.0);
    CHECK(sub.visual.frame_count() == 180);  // frames 120..299
    CHECK(sub.visual.row(0)[0] == 120.0);
    CHECK(sub.transcript.size() == 2);  // transcript untouched
    CHECK(sub.transcript.front().speaker == Speaker::interviewer);
}

TEST_CASE("two participant spans concatenate to their summed duration") {
    SubDialogue sub;
    sub.source_id = "rm2";
    sub.start_s = 0;
    sub.end_s = 13;
    sub.transcript = {utt(Speaker::interviewer, 0.0, 2.0), utt(Speaker::participant, 2.0, 5.0),
                      utt(Speaker::interviewer, 5.0, 8.0), utt(Speaker::participant, 8.0, 13.0)};
    sub.audio = indexed_features(kMelRate, 2, 13);
    sub.visual = indexed_features(kVisualRate, 2, 13);

    remove_interviewer_segments(sub);
    CHECK(sub.audio.frame_count() == 800);   // 3 s + 5 s at 100 Hz
    CHECK(sub.visual.frame_count() == 240);  // 3 s + 5 s at 30 Hz
    CHECK(sub.audio.row(0)[0] == 200.0);
    CHECK(sub.audio.row(299)[0] == 499.0);
    CHECK(sub.audio.row(300)[0] == 800.0);  // second span starts at source frame 800
    CHECK(sub.audio.row(799)[0] == 1299.0);
    CHECK(sub.visual.row(0)[0] == 60.0);
    CHECK(sub.visual.row(90)[0] == 240.0);
}

TEST_CASE("removal with no participant frames is a degenerate-sample error") {
    SubDialogue sub;
    sub.source_id = "deg";
    sub.start_s = 0;
    sub.end_s = 10;
    sub.transcript = {utt(Speaker::interviewer, 0.0, 10.0)};
    sub.audio = indexed_features(kMelRate, 2, 10);
    sub.visual = indexed_features(kVisualRate, 2, 10);
    CHECK_THROWS_AS(remove_interviewer_segments(sub), DataError);
}

TEST_CASE("remove_interviewer=false keeps the raw slice") {
    Dialogue d;
    d.id = "raw";
    d.duration_s = 30;
    d.utterances = {utt(Speaker::interviewer, 0.0, 5.0), utt(Speaker::participant, 5.0, 30.0)};
    const FeatureSequence audio = indexed_features(kMelRate, 2, d.duration_s);
    const FeatureSequence visual = indexed_features(kVisualRate, 2, d.duration_s);

    AugConfig cfg;
    cfg.m_plus = 1;
    cfg.d_min_s = 10;
    cfg.d_max_s = 20;

    cfg.remove_interviewer = false;
    Rng raw_rng(6);
    const auto raw = sample_subdialogue(d, audio, visual, cfg, raw_rng);
    REQUIRE(raw.has_value());
    CHECK(raw->audio.frames == audio.frames);  // whole dialogue, untouched

    cfg.remove_interviewer = true;
    Rng rm_rng(6);
    const auto removed = sample_subdialogue(d, audio, visual, cfg, rm_rng);
    REQUIRE(removed.has_value());
    CHECK(removed->audio.frame_count() == 2500);  // participant 25 s only
    CHECK(removed->audio.row(0)[0] == 500.0);
}

TEST_CASE("augment_split hits the planned counts and is deterministic") {
    const fs::path corpus_dir = fresh_dir("counts_corpus");
    const Corpus corpus = generate_corpus(small_corpus_config(10, 3), 17, corpus_dir.string());

    AugConfig cfg;
    cfg.m_plus = 10;
    cfg.d_min_s = 8;
    cfg.d_max_s = 15;

    const fs::path a = fresh_dir("counts_a");
    const AugmentResult ra = augment_split(corpus.train, corpus_dir.string(), cfg, 23, a.string());
    CHECK(ra.skipped == 0);
    std::size_t pos = 0, neg = 0;
    for (const auto& m : ra.subdialogues) (m.depressed ? pos : neg) += 1;
    CHECK(pos == 3 * 10);
    CHECK(neg == 7 * plan_counts(3, 7, 10));
    CHECK(ra.requested == pos + neg);

    // Same seed -> byte-identical manifest and feature files.
    const fs::path b = fresh_dir("counts_b");
    augment_split(corpus.train, corpus_dir.string(), cfg, 23, b.string());
    CHECK(read_bytes(a / "subdialogues.jsonl") == read_bytes(b / "subdialogues.jsonl"));
    for (const auto& m : {ra.subdialogues.front(), ra.subdialogues.back()}) {
        CHECK(read_bytes(a / m.audio_path) == read_bytes(b / m.audio_path));
        CHECK(read_bytes(a / m.visual_path) == read_bytes(b / m.visual_path));
    }

    // Round trip through the manifest.
    const auto loaded = load_subdialogues((a / "subdialogues.jsonl").string());
    REQUIRE(loaded.size() == ra.subdialogues.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].source_id == ra.subdialogues[i].source_id);
        CHECK(loaded[i].start_s == ra.subdialogues[i].start_s);
        CHECK(loaded[i].end_s == ra.subdialogues[i].end_s);
        CHECK(loaded[i].depressed == ra.subdialogues[i].depressed);
        CHECK(loaded[i].rng_stream == ra.subdialogues[i].rng_stream);
        CHECK(loaded[i].transcript.size() == ra.subdialogues[i].transcript.size());
    }
    const FeatureSequence feat = load_sub_audio(loaded.front(), a.string());
    CHECK(feat.rate == kMelRate);
    CHECK(feat.frame_count() > 0);

    fs::remove_all(corpus_dir);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("oversized length range skips everything and fails the 10% gate") {
    const fs::path corpus_dir = fresh_dir("skip_corpus");
    const Corpus corpus = generate_corpus(small_corpus_config(4, 2), 31, corpus_dir.string());

    AugConfig cfg;
    cfg.m_plus = 5;
    cfg.d_min_s = 40;  // longer than every dialogue (20-30 s)
    cfg.d_max_s = 50;
    const fs::path out = fresh_dir("skip_out");
    CHECK_THROWS_AS(augment_split(corpus.train, corpus_dir.string(), cfg, 23, out.string()), DataError);

    fs::remove_all(corpus_dir);
    fs::remove_all(out);
}

TEST_CASE("emitted subdialogues satisfy the boundary, sync, and transcript invariants over 10k samples") {
    const fs::path corpus_dir = fresh_dir("property_corpus");
    const Corpus corpus = generate_corpus(small_corpus_config(8, 4), 77, corpus_dir.string());

    AugConfig cfg;
    cfg.m_plus = 1;
    cfg.d_min_s = 8;
    cfg.d_max_s = 15;

    std::vector<std::pair<Dialogue, std::pair<FeatureSequence, FeatureSequence>>> loaded;
    for (const auto& d : corpus.train.dialogues)
        loaded.push_back({d, {load_dialogue_audio(d, corpus_dir.string()),
                              load_dialogue_visual(d, corpus_dir.string())}});
    fs::remove_all(corpus_dir);

    const Rng root(123);
    std::size_t emitted = 0;
    for (std::size_t k = 0; k < 10000; ++k) {
        const auto& [d, feats] = loaded[k % loaded.size()];
        Rng rng = root.derive(d.id, k);
        auto sub = sample_subdialogue(d, feats.first, feats.second, cfg, rng);
        if (!sub) continue;
        ++emitted;

        // Boundary property.
        REQUIRE(!sub->transcript.empty());
        CHECK(sub->transcript.front().speaker == Speaker::interviewer);
        CHECK(sub->transcript.back().speaker == Speaker::participant);
        CHECK(sub->end_s <= d.duration_s);
        CHECK(sub->start_s < sub->end_s);

        // Sync property: equal time mass within one frame at the coarser rate.
        const double audio_s = static_cast<double>(sub->audio.frame_count()) / 100.0;
        const double visual_s = static_cast<double>(sub->visual.frame_count()) / 30.0;
        CHECK(std::abs(audio_s - visual_s) <= 1.0 / 30.0 + 1e-12);

        // Independent duration oracle: participant seconds inside the slice.
        std::uint64_t participant_s = 0;
        for (const auto& u : sub->transcript)
            if (u.speaker == Speaker::participant)
                participant_s += static_cast<std::uint64_t>(u.end_s) - static_cast<std::uint64_t>(u.start_s);
        CHECK(sub->audio.frame_count() == participant_s * 100);
        CHECK(sub->visual.frame_count() == participant_s * 30);

        // Transcript preservation: removal never touches the transcript.
        Rng twin = root.derive(d.id, k);
        AugConfig raw_cfg = cfg;
        raw_cfg.remove_interviewer = false;
        const auto raw = sample_subdialogue(d, feats.first, feats.second, raw_cfg, twin);
        REQUIRE(raw.has_value());
        REQUIRE(raw->transcript.size() == sub->transcript.size());
        for (std::size_t i = 0; i < raw->transcript.size(); ++i)
            CHECK(raw->transcript[i].text == sub->transcript[i].text);
        const std::uint64_t slice_frames = (sub->end_s - sub->start_s) * 100;
        CHECK(raw->audio.frame_count() == slice_frames);
    }
    // The draw parameters are feasible for every dialogue, so virtually all
    // samples must be emitted.
    CHECK(emitted > 9900);
}

TEST_CASE("manifest validation rejects malformed subdialogues") {
    SubDialogueMeta m;
    m.source_id = "x";
    m.start_s = 0;
    m.end_s = 10;
    m.depressed = false;
    m.transcript = {utt(Speaker::participant, 0.0, 10.0)};  // opens with the wrong speaker
    m.audio_path = "features/x.audio.mmfs";
    m.visual_path = "features/x.visual.mmfs";
    m.rng_stream = "x:0";

    const fs::path dir = fresh_dir("bad_manifest");
    const auto path = (dir / "subdialogues.jsonl").string();
    save_subdialogues({m}, path);
    CHECK_THROWS_AS(load_subdialogues(path), DataError);
    fs::remove_all(dir);
}

TEST_CASE("config validation rejects degenerate ranges") {
    AugConfig cfg;
    cfg.d_min_s = 10;
    cfg.d_max_s = 10;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.d_max_s = 20;
    cfg.m_plus = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(AugConfig{}.validate());
}

}  // TEST_SUITE
