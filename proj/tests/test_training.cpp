#include "forge/error.hpp"
#include "forge/training.hpp"

#include "helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace forge;

namespace {

std::vector<long double> weights_oracle(const std::vector<int> & lengths, long double ord) {
    long double mx = 0, total_len = 0, total_w = 0;
    for (int l : lengths) {
        mx = std::max<long double>(mx, l);
        total_len += l;
    }
    std::vector<long double> w;
    for (int l : lengths) {
        w.push_back(std::pow(mx / std::log(static_cast<long double>(l)), ord));
        total_w += w.back();
    }
    for (auto & x : w) {
        x *= total_len / total_w;
    }
    return w;
}

// Per-position cross-entropy in long double; row t-1 predicts token t.
long double ce_at(const Mat & logits, const std::vector<int> & ids, int t) {
    long double mx = logits(t - 1, 0);
    for (int v = 0; v < logits.cols(); ++v) {
        mx = std::max<long double>(mx, logits(t - 1, v));
    }
    long double z = 0;
    for (int v = 0; v < logits.cols(); ++v) {
        z += std::exp(static_cast<long double>(logits(t - 1, v)) - mx);
    }
    return mx + std::log(z) - logits(t - 1, ids[t]);
}

struct Fixture {
    Tokenizer tok = build_tokenizer();
    ChatTemplate tmpl;
    DecoderModel target;
    VisionBundle bundle;
    std::vector<TextInstruction> text;
    std::vector<VqaInstruction> vqa;

    Fixture() {
        auto spec = testing::tiny_spec(4, 16, 2);
        spec.max_seq_len = 160;
        target = init_model(spec, 31);
        testing::wake(target, 32);
        EncoderConfig enc;
        enc.width = 16;
        enc.depth = 2;
        enc.n_heads = 2;
        tmpl.image_tokens = enc.n_patches();
        bundle = init_vision_bundle(enc, 16, 16, TrainableScope::last_k(1), 5);
        testing::wake(bundle, 6);
        text = gen_text_corpus(3, 24);
        vqa = gen_vqa_corpus(3, 24);
    }

    StageConfig cfg(Stage s, int batch = 8) const {
        StageConfig c;
        c.stage = s;
        c.batch_size = batch;
        c.learning_rate = 3e-3;
        c.epochs = 1.0;
        c.seed = 9;
        return c;
    }
};

bool same_params(const DecoderModel & a, const DecoderModel & b) { return checksum(a) == checksum(b); }

} // namespace

TEST_CASE("dynamic loss weights against a long double oracle") {
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        std::vector<int> lengths(1 + rng.below(8));
        for (auto & l : lengths) {
            l = 2 + static_cast<int>(rng.below(200));
        }
        const double ord = rng.uniform() * 2.0;
        const auto got = dynamic_loss_weights(lengths, ord);
        const auto want = weights_oracle(lengths, ord);
        double sum_w = 0, sum_l = 0;
        for (std::size_t i = 0; i < lengths.size(); ++i) {
            CHECK(std::abs(got[i] - static_cast<double>(want[i])) <= 1e-9 * std::max(1.0, static_cast<double>(want[i])));
            sum_w += got[i];
            sum_l += lengths[i];
        }
        CHECK(std::abs(sum_w - sum_l) <= 1e-9 * sum_l);
    }
}

TEST_CASE("dynamic loss weights worked values") {
    CHECK(dynamic_loss_weights(std::vector<int>{50}, 0.5) == std::vector<double>{50.0});
    CHECK(dynamic_loss_weights(std::vector<int>{7}, 3.0) == std::vector<double>{7.0});
    const auto eq = dynamic_loss_weights(std::vector<int>{30, 30, 30}, 0.5);
    for (double w : eq) {
        CHECK(w == doctest::Approx(30.0).epsilon(1e-12));
    }
    const auto w = dynamic_loss_weights(std::vector<int>{10, 100}, 0.5);
    CHECK(w[0] == doctest::Approx(64.4365).epsilon(1e-5));
    CHECK(w[1] == doctest::Approx(45.5634).epsilon(1e-5));
    CHECK_THROWS_AS(dynamic_loss_weights(std::vector<int>{1, 5}, 0.5), Error);
    CHECK_THROWS_AS(dynamic_loss_weights(std::vector<int>{}, 0.5), Error);
}

TEST_CASE("masked weighted loss against a per-position loop") {
    Rng rng(2);
    const int n = 12, vocab = 9;
    const Mat logits = testing::random_mat(rng, n, vocab, 3.0);
    std::vector<int> ids(n);
    for (auto & t : ids) {
        t = static_cast<int>(rng.below(vocab));
    }
    std::vector<std::uint8_t> mask(n, 0);
    for (int t : {3, 4, 5, 8, 9, 10, 11}) {
        mask[t] = 1;
    }
    const std::vector<Span> groups = {{3, 3}, {8, 4}};
    long double g1 = 0, all = 0;
    for (int t = 1; t < n; ++t) {
        if (mask[t]) {
            all += ce_at(logits, ids, t);
            if (t < 8) {
                g1 += ce_at(logits, ids, t);
            }
        }
    }
    const double weighted = masked_weighted_loss(logits, ids, mask, groups, std::vector<double>{2.0, 0.0});
    CHECK(std::abs(weighted - static_cast<double>(2.0L * g1 / 7.0L)) <= 1e-9);
    const double ones = masked_weighted_loss(logits, ids, mask, groups, std::vector<double>{1.0, 1.0});
    const double plain = masked_weighted_loss(logits, ids, mask, groups, std::nullopt);
    CHECK(ones == plain);
    CHECK(std::abs(plain - static_cast<double>(all / 7.0L)) <= 1e-9);

    CHECK_THROWS_AS(masked_weighted_loss(logits, ids, std::vector<std::uint8_t>(n, 0), {}, std::nullopt), Error);
    CHECK_THROWS_AS(masked_weighted_loss(logits, ids, mask, groups, std::vector<double>{1.0}), Error);
    const std::vector<Span> overlap = {{3, 3}, {5, 4}};
    CHECK_THROWS_AS(masked_weighted_loss(logits, ids, mask, overlap, std::nullopt), Error);
    const std::vector<Span> outside = {{2, 2}};
    CHECK_THROWS_AS(masked_weighted_loss(logits, ids, mask, outside, std::nullopt), Error);
}

TEST_CASE("cosine schedule with warmup") {
    const CosineSchedule s{1e-3, 101, 10};
    CHECK(s.at(0) == 0.0);
    CHECK(s.at(5) == doctest::Approx(5e-4));
    CHECK(s.at(10) == 1e-3);
    CHECK(s.at(100) <= 1e-9 * 1e-3);
    for (int t = 10; t < 100; ++t) {
        CHECK(s.at(t + 1) <= s.at(t));
    }
    CHECK(s.at(55) == doctest::Approx(5e-4));
    CHECK(CosineSchedule{2e-3, 1, 0}.at(0) == 2e-3);
}

TEST_CASE("step arithmetic and item selection") {
    StageConfig c;
    c.stage = Stage::s3_decoder;
    c.batch_size = 32;
    c.data_fraction = 0.1;
    CHECK(steps_per_epoch(c, 20000) == 62);
    c.epochs = 1.5;
    CHECK(total_steps(c, 20000) == 93);
    const auto a = select_items(c, 20000);
    CHECK(a.size() == 2000);
    CHECK(select_items(c, 20000) == a);
    c.data_fraction = 0.2;
    const auto b = select_items(c, 20000);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
    c.data_fraction = 0.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c.data_fraction = 1.0;
    c.warmup_ratio = 0.6;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("stage config round trip rejects unknown keys") {
    StageConfig c;
    c.stage = Stage::s2_encoder;
    c.eval_fractions = {0.5, 1.0};
    const auto back = StageConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    auto j = c.to_json();
    j["momentum"] = 0.9;
    CHECK_THROWS_AS(StageConfig::from_json(j), Error);
}

TEST_CASE("AdamW first step and clipping") {
    Mat p = Mat::Constant(1, 3, 1.0f);
    Mat g(1, 3);
    g << 3.0f, 4.0f, 0.0f;
    std::vector<ParamSlot> slots(1);
    slots[0].name = "p";
    slots[0].param = &p;
    slots[0].grad = &g;
    slots[0].m = Mat::Zero(1, 3);
    slots[0].v = Mat::Zero(1, 3);
    AdamW opt(std::move(slots), CosineSchedule{0.1, 1, 0}, 1.0);
    CHECK(opt.global_grad_norm() == doctest::Approx(5.0));
    CHECK(opt.clip_gradients() == doctest::Approx(0.2));
    CHECK(opt.global_grad_norm() == doctest::Approx(1.0));
    opt.update();
    // bias-corrected first step moves by lr·sign(g) up to eps
    CHECK(p(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(p(0, 1) == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(p(0, 2) == 1.0f);
    CHECK(opt.step() == 1);
    CHECK(opt.state_tensors().size() == 2);
}

TEST_CASE("empty trainable set is a configuration error") {
    Fixture f;
    GradientBuffers g{f.target.zeros_like(), std::nullopt};
    CHECK_THROWS_AS(make_optimizer_and_schedule(f.cfg(Stage::s2_encoder), TrainableSet{}, f.target, nullptr, g, 10),
                    Error);
}

TEST_CASE("text-only stage-1 batch gives exactly zero adapter gradients") {
    Fixture f;
    const auto surrogate = build_surrogate(f.target, plan_surgery(f.target.spec, 1, 2));
    auto trainable = bundle_keys(f.bundle, true, false);
    trainable.decoder = surrogate.trainable_keys;
    const auto seqs = text_sequences(f.text, f.tmpl, f.tok);
    std::vector<const MultimodalSequence *> batch;
    for (int i = 0; i < 8; ++i) {
        batch.push_back(&seqs[i]);
    }
    GradientBuffers g{surrogate.model.zeros_like(), f.bundle.zeros_like()};
    batch_gradients(surrogate.model, &f.bundle, trainable, batch, f.cfg(Stage::s1_adapter_translator), g);
    bool all_zero = true;
    g.bundle->adapter.visit("", [&](const std::string &, Mat & m) { all_zero = all_zero && (m.array() == 0.0f).all(); });
    CHECK(all_zero);
    // the translator does receive signal
    CHECK(g.decoder.layers[1].wq.cwiseAbs().maxCoeff() > 0.0f);

    // one VQA sequence switches the adapter on
    const auto vseqs = vqa_sequences(f.vqa, f.tmpl, f.tok);
    batch.push_back(&vseqs[0]);
    batch_gradients(surrogate.model, &f.bundle, trainable, batch, f.cfg(Stage::s1_adapter_translator), g);
    CHECK(g.bundle->adapter.w2.cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("stage 1 changes only the translator and adapter") {
    Fixture f;
    auto surrogate = build_surrogate(f.target, plan_surgery(f.target.spec, 1, 2));
    auto bundle = f.bundle;
    const auto enc_before = checksum(bundle);
    const auto adapter_before = bundle.adapter.w1;
    const auto out = run_stage1(surrogate, bundle, f.text, f.vqa, f.cfg(Stage::s1_adapter_translator), f.tok);
    CHECK(out.steps_done == 6);
    CHECK(frozen_mismatches(surrogate, f.target).empty());
    CHECK_FALSE(surrogate.model.layers[1].wq == f.target.layers[1].wq);
    CHECK_FALSE(bundle.adapter.w1 == adapter_before);
    CHECK(bundle.encoder.patch_proj == f.bundle.encoder.patch_proj);
    CHECK(bundle.encoder.layers[1].wq == f.bundle.encoder.layers[1].wq);
    CHECK(checksum(bundle) != enc_before);
    for (const auto & r : out.records) {
        CHECK(std::isfinite(r.loss));
        CHECK(r.grad_norms.contains("adapter"));
    }
}

TEST_CASE("zero-step run leaves parameters untouched") {
    Fixture f;
    auto surrogate = build_surrogate(f.target, plan_surgery(f.target.spec, 1, 2));
    const auto before = checksum(surrogate.model) + checksum(f.bundle);
    auto bundle = f.bundle;
    StageRun run;
    run.stop_after = 0;
    const auto out = run_stage1(surrogate, bundle, f.text, f.vqa, f.cfg(Stage::s1_adapter_translator), f.tok, run);
    CHECK(out.steps_done == 0);
    CHECK(checksum(surrogate.model) + checksum(bundle) == before);
}

TEST_CASE("stage 2 freezes the decoder and the lower encoder layers") {
    Fixture f;
    auto bundle = f.bundle;
    const auto dec_before = checksum(f.target);
    run_stage2(bundle, f.target, f.vqa, f.cfg(Stage::s2_encoder), f.tok);
    CHECK(checksum(f.target) == dec_before);
    CHECK(bundle.encoder.layers[0].wq == f.bundle.encoder.layers[0].wq);
    CHECK(bundle.encoder.patch_proj == f.bundle.encoder.patch_proj);
    CHECK_FALSE(bundle.encoder.layers[1].wq == f.bundle.encoder.layers[1].wq);
    CHECK_THROWS_AS(run_stage2(bundle, f.target, f.vqa, f.cfg(Stage::s3_decoder), f.tok), Error);
}

TEST_CASE("stage 3 trains the decoder and fires eval hooks") {
    Fixture f;
    auto target = f.target;
    auto bundle = f.bundle;
    auto cfg = f.cfg(Stage::s3_decoder, 4);
    cfg.eval_fractions = {0.5, 1.0};
    std::vector<int> fired;
    StageRun run;
    run.on_eval = [&](int done, int) { fired.push_back(done); };
    const auto out = run_stage3(target, bundle, f.vqa, cfg, f.tok, run);
    CHECK(out.total_steps == 6);
    CHECK(fired == std::vector<int>{3, 6});
    CHECK_FALSE(same_params(target, f.target));
}

TEST_CASE("resumed training matches the uninterrupted run") {
    Fixture f;
    const auto cfg = f.cfg(Stage::s1_adapter_translator, 4);
    auto s_full = build_surrogate(f.target, plan_surgery(f.target.spec, 1, 2));
    auto b_full = f.bundle;
    const auto full = run_stage1(s_full, b_full, f.text, f.vqa, cfg, f.tok);

    auto s_part = build_surrogate(f.target, plan_surgery(f.target.spec, 1, 2));
    auto b_part = f.bundle;
    StageRun first;
    first.stop_after = 5;
    const auto part = run_stage1(s_part, b_part, f.text, f.vqa, cfg, f.tok, first);
    CHECK(part.steps_done == 5);
    StageRun rest;
    rest.resume = ResumeState{part.optimizer_state, part.steps_done};
    const auto resumed = run_stage1(s_part, b_part, f.text, f.vqa, cfg, f.tok, rest);
    CHECK(resumed.steps_done == full.steps_done);
    CHECK(checksum(s_part.model) == checksum(s_full.model));
    CHECK(checksum(b_part) == checksum(b_full));
    REQUIRE(resumed.records.size() == full.records.size() - 5);
    for (std::size_t i = 0; i < resumed.records.size(); ++i) {
        CHECK(resumed.records[i].loss == full.records[i + 5].loss);
    }
}

TEST_CASE("worker count does not change the gradient sum") {
    Fixture f;
    auto run_with = [&](const char * threads) {
        setenv("FORGE_THREADS", threads, 1);
        auto target = f.target;
        auto bundle = f.bundle;
        run_stage3(target, bundle, f.vqa, f.cfg(Stage::s3_decoder), f.tok);
        unsetenv("FORGE_THREADS");
        return checksum(target) + checksum(bundle);
    };
    CHECK(run_with("1") == run_with("3"));
}

TEST_CASE("non-finite loss aborts with a numeric error") {
    Fixture f;
    auto target = f.target;
    target.unembedding(0, 0) = std::numeric_limits<float>::quiet_NaN();
    auto bundle = f.bundle;
    try {
        run_stage3(target, bundle, f.vqa, f.cfg(Stage::s3_decoder), f.tok);
        FAIL("expected a numeric error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::numeric);
    }
}

TEST_CASE("target training lowers the loss") {
    Fixture f;
    auto target = f.target;
    auto cfg = f.cfg(Stage::target_text, 4);
    cfg.epochs = 8.0;
    cfg.learning_rate = 1e-2;
    const auto out = train_target(target, f.text, cfg, f.tok);
    double first = 0, last = 0;
    for (int i = 0; i < 6; ++i) {
        first += out.records[i].loss;
        last += out.records[out.records.size() - 1 - i].loss;
    }
    CHECK(last < first);
}
