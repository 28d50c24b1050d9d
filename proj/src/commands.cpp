#include "forge/commands.hpp"

#include "forge/checkpoint.hpp"
#include "forge/digest.hpp"
#include "forge/error.hpp"
#include "forge/eval_report.hpp"
#include "forge/plot.hpp"
#include "forge/surgery.hpp"
#include "forge/training.hpp"
#include "forge/trajectory.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>

namespace forge {

namespace fs = std::filesystem;
using nlohmann::json;

nlohmann::json load_config(const fs::path & path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::config, "cannot open config " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception & e) {
        fail(ErrorKind::config, path.string() + ": " + e.what());
    }
}

void check_keys(const json & j, const std::string & where, const std::vector<std::string> & required,
                const std::vector<std::string> & optional) {
    require(j.is_object(), ErrorKind::config, where + ": expected an object");
    for (const auto & [k, _] : j.items()) {
        const bool known = std::find(required.begin(), required.end(), k) != required.end() ||
                           std::find(optional.begin(), optional.end(), k) != optional.end();
        require(known, ErrorKind::config, where + ": unknown key '" + k + "'");
    }
    for (const auto & k : required) {
        require(j.contains(k), ErrorKind::config, where + ": missing key '" + k + "'");
    }
}

namespace {

template <class T> T get(const json & j, const std::string & key, const std::string & where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception & e) {
        fail(ErrorKind::config, where + "." + key + ": " + e.what());
    }
}

template <class T> T get_or(const json & j, const std::string & key, T fallback, const std::string & where) {
    return j.contains(key) ? get<T>(j, key, where) : fallback;
}

fs::path resolve(const CommandContext & ctx, const std::string & p) {
    const fs::path path(p);
    return path.is_absolute() ? path : ctx.base_dir / path;
}

fs::path existing(const CommandContext & ctx, const json & j, const std::string & key, const std::string & where) {
    const fs::path p = resolve(ctx, get<std::string>(j, key, where));
    require(fs::exists(p), ErrorKind::data, where + "." + key + ": " + p.string() + " does not exist");
    return p;
}

void say(const CommandContext & ctx, const std::string & msg) {
    if (ctx.verbose) {
        std::fprintf(stderr, "[forge] %s\n", msg.c_str());
    }
}

void finish(const CommandContext & ctx, const std::string & name, const json & summary) {
    write_json(ctx.out_dir / (name + "_summary.json"), summary);
}

std::string manifest_hash(const fs::path & corpus_dir) {
    const fs::path m = corpus_dir / "MANIFEST.json";
    if (!fs::exists(m)) {
        return "";
    }
    return load_config(m).value("items_hash", std::string());
}

StageConfig stage_config(const json & j, const CommandContext & ctx, const std::string & where) {
    json doc = j;
    if (ctx.seed && !doc.contains("seed")) {
        doc["seed"] = *ctx.seed;
    }
    try {
        return StageConfig::from_json(doc);
    } catch (const Error & e) {
        throw Error(e.kind(), where + ": " + e.detail());
    }
}

// Digest of the parameters a run must leave alone.
template <class Visitable>
std::string frozen_digest(const Visitable & v, const std::set<std::string> & trainable) {
    Fnv1a h;
    v.visit([&](const std::string & name, const Mat & m) {
        if (!trainable.contains(name)) {
            h.update(name);
            h.update(m);
        }
    });
    return h.hex();
}

json records_to_jsonl(const fs::path & path, const std::vector<TrainRecord> & records) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::input, "cannot write " + path.string());
    for (const auto & r : records) {
        out << r.to_json().dump() << "\n";
    }
    return json::array();
}

double seconds_per_step(const std::vector<TrainRecord> & records) {
    if (records.empty()) {
        return 0.0;
    }
    return records.back().elapsed / static_cast<double>(records.size());
}

} // namespace

// ---- gen-data ---------------------------------------------------------------

json cmd_gen_data(const json & cfg, const CommandContext & ctx) {
    const std::string w = "gen-data";
    check_keys(cfg, w, {}, {"seed", "text_train", "text_eval", "vqa_train", "vqa_eval"});
    const auto seed = ctx.seed.value_or(get_or<std::uint64_t>(cfg, "seed", 1, w));
    const int text_train = get_or(cfg, "text_train", 20000, w);
    const int text_eval = get_or(cfg, "text_eval", 1000, w);
    const int vqa_train = get_or(cfg, "vqa_train", 20000, w);
    const int vqa_eval = get_or(cfg, "vqa_eval", 1000, w);
    for (int n : {text_train, text_eval, vqa_train, vqa_eval}) {
        require(n >= 1, ErrorKind::config, w + ": corpus sizes must be >= 1");
    }
    fs::create_directories(ctx.out_dir);
    write_text_corpus(ctx.out_dir / "text_train", gen_text_corpus(seed, text_train, Split::train), seed, Split::train);
    write_text_corpus(ctx.out_dir / "text_eval", gen_text_corpus(seed, text_eval, Split::eval), seed, Split::eval);
    write_vqa_corpus(ctx.out_dir / "vqa_train", gen_vqa_corpus(seed, vqa_train, Split::train), seed, Split::train);
    write_vqa_corpus(ctx.out_dir / "vqa_eval", gen_vqa_corpus(seed, vqa_eval, Split::eval), seed, Split::eval);
    json summary = {{"seed", seed}};
    for (const char * name : {"text_train", "text_eval", "vqa_train", "vqa_eval"}) {
        summary[name] = {{"path", (ctx.out_dir / name).string()}, {"items_hash", manifest_hash(ctx.out_dir / name)}};
    }
    finish(ctx, "gen_data", summary);
    return summary;
}

// ---- train-target -----------------------------------------------------------

json cmd_train_target(const json & cfg, const CommandContext & ctx) {
    const std::string w = "train-target";
    check_keys(cfg, w, {"model", "corpus", "train"}, {"init_seed", "eval_corpus", "name"});
    const Tokenizer tok = build_tokenizer();
    json spec_doc = cfg.at("model");
    if (!spec_doc.contains("vocab_size")) {
        spec_doc["vocab_size"] = tok.vocab_size();
    }
    const ModelSpec spec = ModelSpec::from_json(spec_doc);
    require(spec.vocab_size == tok.vocab_size(), ErrorKind::config,
            w + ": model.vocab_size must equal the tokenizer size " + std::to_string(tok.vocab_size()));
    const StageConfig train = stage_config(cfg.at("train"), ctx, w + ".train");
    require(train.stage == Stage::target_text, ErrorKind::config, w + ": train.stage must be target_text");
    const auto init_seed = ctx.seed.value_or(get_or<std::uint64_t>(cfg, "init_seed", 1, w));
    const std::string name = get_or<std::string>(cfg, "name", "target", w);
    const fs::path corpus_dir = existing(ctx, cfg, "corpus", w);
    const auto corpus = read_text_corpus(corpus_dir);

    fs::create_directories(ctx.out_dir);
    DecoderModel model = init_model(spec, init_seed);
    say(ctx, "training " + name + " on " + std::to_string(corpus.size()) + " text items");
    const auto outcome = train_target(model, corpus, train, tok);
    records_to_jsonl(ctx.out_dir / (name + "_records.jsonl"), outcome.records);

    json summary = {{"name", name},
                    {"steps", outcome.steps_done},
                    {"seconds_per_step", seconds_per_step(outcome.records)},
                    {"final_loss", outcome.records.empty() ? 0.0 : outcome.records.back().loss}};
    if (cfg.contains("eval_corpus")) {
        const auto eval = read_text_corpus(existing(ctx, cfg, "eval_corpus", w));
        const auto acc = eval_text(model, eval, tok);
        summary["text_acc"] = acc.overall;
        summary["text_eval"] = acc.to_json();
    }
    const json extra = {{"created_by", "train-target"},
                        {"stage", stage_name(Stage::target_text)},
                        {"init_seed", init_seed},
                        {"train", train.to_json()},
                        {"corpus_hash", manifest_hash(corpus_dir)}};
    const fs::path ckpt = ctx.out_dir / (name + ".frga");
    save_checkpoint(model, ckpt, ArchiveRole::target, extra);
    summary["checkpoint"] = ckpt.string();
    summary["checksum"] = checksum(model);
    finish(ctx, name, summary);
    return summary;
}

// ---- trajectory -------------------------------------------------------------

json cmd_trajectory(const json & cfg, const CommandContext & ctx) {
    const std::string w = "trajectory";
    check_keys(cfg, w, {"checkpoint", "corpus"},
               {"n_samples", "mode", "max_new", "tol_spread", "tol_mono", "kl_form", "name"});
    const std::string kl_form = get_or<std::string>(cfg, "kl_form", "scalar", w);
    require(kl_form == "scalar", ErrorKind::config, w + ": only kl_form 'scalar' is implemented");
    const int n_samples = get_or(cfg, "n_samples", 300, w);
    const int max_new = get_or(cfg, "max_new", kAnswerBudget, w);
    const double tol_spread = get_or(cfg, "tol_spread", kDefaultTolSpread, w);
    const double tol_mono = get_or(cfg, "tol_mono", kDefaultTolMono, w);
    const std::string mode = get_or<std::string>(cfg, "mode", "teacher_forced", w);
    const std::string name = get_or<std::string>(cfg, "name", "trajectory", w);
    require(mode == "teacher_forced" || mode == "free_running" || mode == "both", ErrorKind::config,
            w + ": mode must be teacher_forced, free_running or both");
    require(n_samples >= 1 && max_new >= 1, ErrorKind::config, w + ": n_samples and max_new must be >= 1");

    const DecoderModel model = load_checkpoint(existing(ctx, cfg, "checkpoint", w));
    auto corpus = read_text_corpus(existing(ctx, cfg, "corpus", w));
    require(static_cast<int>(corpus.size()) >= n_samples, ErrorKind::data,
            w + ": corpus has fewer than n_samples items");
    corpus.resize(static_cast<std::size_t>(n_samples));
    const Tokenizer tok = build_tokenizer();
    const ChatTemplate tmpl;
    fs::create_directories(ctx.out_dir);

    json summary = {{"name", name}, {"n_samples", n_samples}, {"tol_spread", tol_spread}, {"tol_mono", tol_mono}};
    auto run_mode = [&](FeedMode m) {
        std::vector<TrajectorySample> samples;
        if (m == FeedMode::teacher_forced) {
            for (const auto & it : corpus) {
                samples.push_back({assemble_sequence(tmpl, nullptr, it.question, it.response, tok).token_ids, m});
            }
        } else {
            std::vector<std::vector<int>> prompts;
            for (const auto & it : corpus) {
                prompts.push_back(assemble_sequence(tmpl, nullptr, it.question, std::nullopt, tok).token_ids);
            }
            samples = generate_free_running_samples(model, prompts, max_new, tok.eot());
        }
        const auto r = prediction_trajectory(model, samples, tol_spread, tol_mono);
        const std::string stem = name + "_" + mode_name(m);
        write_trajectory_csv(ctx.out_dir / (stem + ".csv"), r);
        const json s = trajectory_summary(r);
        write_json(ctx.out_dir / (stem + ".json"), s);
        write_trajectory_svg(ctx.out_dir / (stem + ".svg"), r, "Prediction trajectory (" + mode_name(m) + ")");
        summary[mode_name(m)] = s;
        return r.transition_layer;
    };
    std::optional<int> tf, fr;
    if (mode != "free_running") {
        tf = run_mode(FeedMode::teacher_forced);
    }
    if (mode != "teacher_forced") {
        fr = run_mode(FeedMode::free_running);
    }
    if (tf && fr) {
        summary["transition_difference"] = std::abs(*tf - *fr);
    }
    const auto primary = mode == "free_running" ? fr : tf;
    summary["transition_layer"] = primary ? json(*primary) : json(nullptr);
    summary["n_layers"] = model.n_layers();
    finish(ctx, name, summary);
    return summary;
}

// ---- surgery ------------------------------------------------------------------

json cmd_surgery(const json & cfg, const CommandContext & ctx) {
    const std::string w = "surgery";
    check_keys(cfg, w, {"checkpoint", "name"}, {"first_replaced", "last_replaced", "variant", "from_trajectory"});
    const std::string name = get<std::string>(cfg, "name", w);
    const std::string variant = get_or<std::string>(cfg, "variant", "plain", w);
    require(variant == "plain" || variant == "control", ErrorKind::config, w + ": variant must be plain or control");
    const fs::path ckpt = existing(ctx, cfg, "checkpoint", w);
    const Archive archive = read_archive(ckpt);
    require(archive.manifest.value("role", "") == "target", ErrorKind::protocol,
            w + ": surgery needs a target checkpoint");
    const DecoderModel target = decoder_from_archive(archive);
    const int L = target.n_layers();

    int a = 0, b = 0;
    json derivation;
    if (cfg.contains("from_trajectory")) {
        require(!cfg.contains("first_replaced") && !cfg.contains("last_replaced"), ErrorKind::config,
                w + ": give either explicit layers or from_trajectory");
        const json & ft = cfg.at("from_trajectory");
        check_keys(ft, w + ".from_trajectory", {"summary", "placement"}, {});
        const json traj = load_config(existing(ctx, ft, "summary", w + ".from_trajectory"));
        const std::string placement = get<std::string>(ft, "placement", w);
        require(traj.contains("transition_layer") && !traj.at("transition_layer").is_null(), ErrorKind::plan,
                w + ": trajectory summary has no transition layer");
        const int t = traj.at("transition_layer").get<int>();
        // late: the transition layer through L-2; early: a span of the same width from layer 1
        const int span = (L - 2) - t;
        if (placement == "late") {
            a = t, b = L - 2;
        } else if (placement == "early") {
            a = 1, b = 1 + span;
        } else {
            fail(ErrorKind::config, w + ": placement must be late or early");
        }
        derivation = {{"transition_layer", t}, {"placement", placement}};
    } else {
        a = get<int>(cfg, "first_replaced", w);
        b = get<int>(cfg, "last_replaced", w);
    }
    const SurgeryPlan plan = plan_surgery(target.spec, a, b);
    const SurrogateModel s = variant == "control" ? build_control_variant(target, plan) : build_surrogate(target, plan);
    json extra = s.manifest_fields();
    extra["created_by"] = "surgery";
    extra["variant"] = variant;
    extra["plan"] = plan.to_json();
    if (!derivation.is_null()) {
        extra["derivation"] = derivation;
    }
    fs::create_directories(ctx.out_dir);
    const fs::path out = ctx.out_dir / (name + ".frga");
    save_checkpoint(s.model, out, ArchiveRole::surrogate, extra);

    // reload and confirm the shared parameters survived the round trip
    const Archive back = read_archive(out);
    const SurrogateModel reloaded = surrogate_from_manifest(decoder_from_archive(back), back.manifest);
    const auto bad = frozen_mismatches(reloaded, target);
    require(bad.empty(), ErrorKind::surgery, w + ": shared parameter " + (bad.empty() ? "" : bad.front()) + " differs");

    json summary = {{"name", name},
                    {"checkpoint", out.string()},
                    {"first_replaced", a},
                    {"last_replaced", b},
                    {"variant", variant},
                    {"surrogate_layers", plan.surrogate_layers()},
                    {"parameter_fraction", plan.parameter_fraction(target.spec)},
                    {"parent_checksum", s.parent_checksum},
                    {"checksum", checksum(s.model)},
                    {"trainable_keys", s.manifest_fields().at("trainable_keys")}};
    finish(ctx, name, summary);
    return summary;
}

// ---- stage ----------------------------------------------------------------------

namespace {

json eval_point_json(int step, int total, const Accuracy & acc) {
    return {{"step", step},
            {"fraction", total > 0 ? static_cast<double>(step) / total : 0.0},
            {"vqa_acc", acc.overall},
            {"per_tag", acc.per_tag}};
}

std::map<std::string, Mat> optimizer_tensors(const Archive & a) { return a.tensors; }

} // namespace

json cmd_stage(const json & cfg, const CommandContext & ctx) {
    const std::string w = "stage";
    check_keys(cfg, w, {"stage", "name", "train", "decoder", "vqa_corpus"},
               {"bundle", "encoder", "trainable_scope", "bundle_seed", "text_corpus", "vqa_eval", "text_eval", "resume",
                "stop_after", "eval_n"});
    const Stage stage = parse_stage(get<std::string>(cfg, "stage", w));
    require(stage != Stage::target_text, ErrorKind::config, w + ": use train-target for the target_text stage");
    const std::string name = get<std::string>(cfg, "name", w);
    const StageConfig train = stage_config(cfg.at("train"), ctx, w + ".train");
    require(train.stage == stage, ErrorKind::config, w + ": train.stage disagrees with stage");
    const Tokenizer tok = build_tokenizer();

    const fs::path decoder_path = existing(ctx, cfg, "decoder", w);
    const Archive dec_archive = read_archive(decoder_path);
    const std::string dec_role = dec_archive.manifest.value("role", "");

    // inputs
    std::optional<json> bundle_manifest;
    VisionBundle bundle;
    DecoderModel decoder = decoder_from_archive(dec_archive);
    if (cfg.contains("bundle")) {
        const Archive ba = read_archive(existing(ctx, cfg, "bundle", w));
        bundle_manifest = ba.manifest;
        bundle = bundle_from_archive(ba);
    } else {
        require(stage == Stage::s1_adapter_translator, ErrorKind::protocol,
                w + ": " + stage_name(stage) + " needs a bundle from an earlier stage");
        const EncoderConfig enc = cfg.contains("encoder") ? EncoderConfig::from_json(cfg.at("encoder")) : EncoderConfig{};
        const TrainableScope scope =
            TrainableScope::parse(get_or<std::string>(cfg, "trainable_scope", "last_k_layers(2)", w));
        const auto bseed = ctx.seed.value_or(get_or<std::uint64_t>(cfg, "bundle_seed", train.seed, w));
        bundle = init_vision_bundle(enc, decoder.spec.d_model, decoder.spec.d_model, scope, bseed);
    }
    if (cfg.contains("trainable_scope") && cfg.contains("bundle")) {
        bundle.trainable_scope = TrainableScope::parse(get<std::string>(cfg, "trainable_scope", w));
    }

    // stage ordering through manifest provenance
    const std::string prev = bundle_manifest ? bundle_manifest->value("stage", "") : "";
    switch (stage) {
        case Stage::s1_adapter_translator:
            require(!bundle_manifest || prev.empty(), ErrorKind::protocol,
                    w + ": stage 1 starts from a fresh bundle, got one from " + prev);
            require(dec_role == "target" || dec_role == "surrogate", ErrorKind::protocol, w + ": bad decoder role");
            break;
        case Stage::s2_encoder:
            require(prev == stage_name(Stage::s1_adapter_translator), ErrorKind::protocol,
                    w + ": stage 2 needs a stage-1 bundle, got '" + prev + "'");
            require(bundle_manifest->value("paired_decoder", "") == checksum(decoder), ErrorKind::protocol,
                    w + ": stage 2 must use the decoder the bundle was paired with in stage 1");
            break;
        case Stage::s3_decoder:
            require(prev == stage_name(Stage::s1_adapter_translator) || prev == stage_name(Stage::s2_encoder),
                    ErrorKind::protocol, w + ": stage 3 needs a bundle from stage 1 or 2, got '" + prev + "'");
            require(dec_role == "target", ErrorKind::protocol, w + ": stage 3 trains the target decoder");
            break;
        case Stage::target_text: break;
    }
    const std::string input_bundle_checksum = checksum(bundle);
    const std::string input_decoder_checksum = checksum(decoder);

    // resumption replaces the live parameters with the partial run's
    std::optional<ResumeState> resume;
    if (cfg.contains("resume")) {
        const json & r = cfg.at("resume");
        check_keys(r, w + ".resume", {"optimizer", "bundle"}, {"decoder"});
        const Archive opt = read_archive(existing(ctx, r, "optimizer", w + ".resume"));
        require(opt.manifest.value("role", "") == "optimizer", ErrorKind::load, w + ": resume.optimizer is not an optimizer archive");
        resume = ResumeState{optimizer_tensors(opt), opt.manifest.at("step").get<int>()};
        bundle = load_bundle(existing(ctx, r, "bundle", w + ".resume"));
        if (r.contains("decoder")) {
            decoder = load_checkpoint(existing(ctx, r, "decoder", w + ".resume"));
        }
    }

    const fs::path vqa_dir = existing(ctx, cfg, "vqa_corpus", w);
    const auto vqa = read_vqa_corpus(vqa_dir);
    std::vector<TextInstruction> text;
    if (stage == Stage::s1_adapter_translator) {
        text = read_text_corpus(existing(ctx, cfg, "text_corpus", w));
    }
    std::vector<VqaInstruction> vqa_eval;
    if (cfg.contains("vqa_eval")) {
        vqa_eval = read_vqa_corpus(existing(ctx, cfg, "vqa_eval", w));
        const int eval_n = get_or(cfg, "eval_n", static_cast<int>(vqa_eval.size()), w);
        vqa_eval.resize(std::min(vqa_eval.size(), static_cast<std::size_t>(std::max(1, eval_n))));
    }
    std::vector<TextInstruction> text_eval;
    if (cfg.contains("text_eval")) {
        text_eval = read_text_corpus(existing(ctx, cfg, "text_eval", w));
    }

    fs::create_directories(ctx.out_dir);
    json summary = {{"name", name}, {"stage", stage_name(stage)}, {"data_fraction", train.data_fraction}};
    StageRun run;
    if (cfg.contains("stop_after")) {
        run.stop_after = get<int>(cfg, "stop_after", w);
    }
    run.resume = resume;
    json evals = json::array();

    std::optional<SurrogateModel> surrogate;
    const DecoderModel * eval_decoder = &decoder;
    TrainOutcome outcome;
    std::string dec_frozen_before, dec_frozen_after, bun_frozen_before, bun_frozen_after;
    TrainableSet trainable;

    if (!text_eval.empty() && stage == Stage::s3_decoder) {
        summary["text_acc_before"] = eval_text(decoder, text_eval, tok).overall;
    }
    run.on_eval = [&](int done, int total) {
        if (vqa_eval.empty()) {
            return;
        }
        const auto acc = eval_vqa(graft(bundle, *eval_decoder), vqa_eval, tok);
        evals.push_back(eval_point_json(done, total, acc));
        say(ctx, name + ": step " + std::to_string(done) + "/" + std::to_string(total) + " vqa_acc " +
                     std::to_string(acc.overall));
    };

    say(ctx, "running " + stage_name(stage) + " as " + name);
    if (stage == Stage::s1_adapter_translator && dec_role == "surrogate") {
        surrogate = surrogate_from_manifest(decoder, dec_archive.manifest);
        if (resume && cfg.at("resume").contains("decoder")) {
            surrogate->model = decoder;
        }
        eval_decoder = &surrogate->model;
        trainable = bundle_keys(bundle, true, false);
        trainable.decoder = surrogate->trainable_keys;
        dec_frozen_before = frozen_digest(surrogate->model, trainable.decoder);
        bun_frozen_before = frozen_digest(bundle, trainable.bundle);
        outcome = run_stage1(*surrogate, bundle, text, vqa, train, tok, run);
        dec_frozen_after = frozen_digest(surrogate->model, trainable.decoder);
        decoder = surrogate->model;
        eval_decoder = &decoder;
    } else {
        switch (stage) {
            case Stage::s1_adapter_translator: trainable = bundle_keys(bundle, true, false); break;
            case Stage::s2_encoder: trainable = bundle_keys(bundle, true, true); break;
            default:
                trainable = bundle_keys(bundle, true, true);
                trainable.decoder = decoder_keys(decoder).decoder;
        }
        dec_frozen_before = frozen_digest(decoder, trainable.decoder);
        bun_frozen_before = frozen_digest(bundle, trainable.bundle);
        if (stage == Stage::s1_adapter_translator) {
            outcome = run_stage1_baseline(decoder, bundle, text, vqa, train, tok, run);
        } else if (stage == Stage::s2_encoder) {
            outcome = run_stage2(bundle, decoder, vqa, train, tok, run);
        } else {
            outcome = run_stage3(decoder, bundle, vqa, train, tok, run);
        }
        dec_frozen_after = frozen_digest(decoder, trainable.decoder);
    }
    bun_frozen_after = frozen_digest(bundle, trainable.bundle);
    require(dec_frozen_before == dec_frozen_after && bun_frozen_before == bun_frozen_after, ErrorKind::protocol,
            w + ": frozen parameters changed during " + stage_name(stage));
    if (stage == Stage::s2_encoder) {
        require(checksum(decoder) == input_decoder_checksum, ErrorKind::protocol, w + ": stage 2 changed the decoder");
    }

    records_to_jsonl(ctx.out_dir / (name + "_records.jsonl"), outcome.records);
    const bool complete = outcome.steps_done >= outcome.total_steps;
    const json provenance = {{"stage", complete ? stage_name(stage) : prev},
                             {"stage_run", stage_name(stage)},
                             {"steps_done", outcome.steps_done},
                             {"total_steps", outcome.total_steps},
                             {"data_fraction", train.data_fraction},
                             {"train", train.to_json()},
                             {"vqa_corpus_hash", manifest_hash(vqa_dir)}};
    json bextra = provenance;
    bextra["created_by"] = "stage";
    bextra["paired_decoder"] = checksum(decoder);
    bextra["parent_checksum"] = input_bundle_checksum;
    const fs::path bundle_out = ctx.out_dir / (name + "_bundle.frga");
    save_bundle(bundle, bundle_out, bextra);
    summary["bundle"] = bundle_out.string();
    summary["bundle_checksum"] = checksum(bundle);

    if (stage != Stage::s2_encoder && !trainable.decoder.empty()) {
        json dextra = provenance;
        dextra["created_by"] = "stage";
        dextra["parent_checksum"] = surrogate ? surrogate->parent_checksum : input_decoder_checksum;
        if (surrogate) {
            const json fields = surrogate->manifest_fields();
            for (const auto & [k, v] : fields.items()) {
                dextra[k] = v;
            }
            dextra["variant"] = dec_archive.manifest.value("variant", "plain");
        }
        const fs::path dec_out = ctx.out_dir / (name + "_decoder.frga");
        save_checkpoint(decoder, dec_out, surrogate ? ArchiveRole::surrogate : ArchiveRole::target, dextra);
        summary["decoder"] = dec_out.string();
    } else {
        summary["decoder"] = decoder_path.string();
    }
    summary["decoder_checksum"] = checksum(decoder);

    Archive opt;
    opt.tensors = outcome.optimizer_state;
    opt.manifest = {{"format_version", kArchiveFormatVersion},
                    {"role", role_name(ArchiveRole::optimizer)},
                    {"step", outcome.steps_done},
                    {"stage", stage_name(stage)},
                    {"created_by", "stage"}};
    write_archive(ctx.out_dir / (name + "_optimizer.frga"), opt);
    summary["optimizer"] = (ctx.out_dir / (name + "_optimizer.frga")).string();

    if (!text_eval.empty()) {
        summary["text_acc_after"] = eval_text(decoder, text_eval, tok).overall;
    }
    if (!vqa_eval.empty()) {
        const auto acc = eval_vqa(graft(bundle, decoder), vqa_eval, tok);
        summary["vqa_acc"] = acc.overall;
        summary["vqa_eval"] = acc.to_json();
    }
    summary["steps"] = outcome.steps_done;
    summary["total_steps"] = outcome.total_steps;
    summary["seconds_per_step"] = seconds_per_step(outcome.records);
    summary["complete"] = complete;
    summary["evals"] = evals;
    write_json(ctx.out_dir / (name + "_evals.json"), evals);
    finish(ctx, name, summary);
    return summary;
}

// ---- report ---------------------------------------------------------------------

namespace {

std::vector<EvalPoint> read_evals(const fs::path & p) {
    const json j = load_config(p);
    require(j.is_array(), ErrorKind::data, p.string() + ": expected an array of eval points");
    std::vector<EvalPoint> out;
    for (const auto & e : j) {
        out.push_back({e.at("step").get<int>(), e.at("fraction").get<double>(), e.at("vqa_acc").get<double>()});
    }
    return out;
}

PathCost read_path_cost(const CommandContext & ctx, const std::string & name, const json & stages) {
    PathCost c;
    c.name = name;
    for (const auto & [stage, path] : stages.items()) {
        const json s = load_config(resolve(ctx, path.get<std::string>()));
        c.steps[stage] = s.at("steps").get<int>();
        c.seconds_per_step[stage] = s.at("seconds_per_step").get<double>();
    }
    return c;
}

} // namespace

void validate_report_json(const json & j) {
    require(j.is_object(), ErrorKind::protocol, "report must be an object");
    for (const char * k : {"reports", "ordering"}) {
        require(j.contains(k) && j.at(k).is_array(), ErrorKind::protocol, std::string("report lacks array '") + k + "'");
    }
    std::set<std::string> names;
    for (const auto & r : j.at("reports")) {
        names.insert(EvalReport::from_json(r).config_name);
    }
    for (const auto & req : kRequiredConditions) {
        require(names.contains(req), ErrorKind::protocol, "report lacks condition " + req);
    }
    for (const auto & o : j.at("ordering")) {
        for (const char * k : {"a", "b", "a_acc", "b_acc", "delta", "better"}) {
            require(o.contains(k), ErrorKind::protocol, std::string("ordering entry lacks '") + k + "'");
        }
    }
    if (j.contains("convergence")) {
        const json & c = j.at("convergence");
        for (const char * k : {"surrogate", "baseline", "baseline_stage3_steps", "surrogate_monotone"}) {
            require(c.contains(k), ErrorKind::protocol, std::string("convergence lacks '") + k + "'");
        }
    }
    if (j.contains("degradation")) {
        for (const char * k : {"before", "surrogate_after", "baseline_after", "surrogate_drop", "baseline_drop"}) {
            require(j.at("degradation").contains(k), ErrorKind::protocol, std::string("degradation lacks '") + k + "'");
        }
    }
}

json cmd_report(const json & cfg, const CommandContext & ctx) {
    const std::string w = "report";
    check_keys(cfg, w, {"conditions", "vqa_eval"}, {"convergence", "degradation", "eval_n"});
    const Tokenizer tok = build_tokenizer();
    auto vqa_eval = read_vqa_corpus(existing(ctx, cfg, "vqa_eval", w));
    if (cfg.contains("eval_n")) {
        vqa_eval.resize(std::min(vqa_eval.size(), static_cast<std::size_t>(std::max(1, get<int>(cfg, "eval_n", w)))));
    }
    require(cfg.at("conditions").is_array(), ErrorKind::config, w + ".conditions must be an array");

    std::vector<DecoderModel> decoders;
    std::vector<VisionBundle> bundles;
    std::vector<std::string> names;
    decoders.reserve(cfg.at("conditions").size());
    bundles.reserve(cfg.at("conditions").size());
    for (const auto & c : cfg.at("conditions")) {
        check_keys(c, w + ".conditions[]", {"name", "decoder", "bundle"}, {});
        names.push_back(get<std::string>(c, "name", w));
        decoders.push_back(load_checkpoint(existing(ctx, c, "decoder", w)));
        bundles.push_back(load_bundle(existing(ctx, c, "bundle", w)));
    }
    std::vector<GraftCondition> conditions;
    for (std::size_t i = 0; i < names.size(); ++i) {
        conditions.push_back({names[i], &decoders[i], &bundles[i]});
    }
    const auto cmp = grafting_comparison(conditions, vqa_eval, tok);

    json report = {{"reports", json::array()}, {"ordering", cmp.ordering}};
    for (const auto & r : cmp.reports) {
        report["reports"].push_back(r.to_json());
    }
    fs::create_directories(ctx.out_dir);
    json cost;
    if (cfg.contains("convergence")) {
        const json & c = cfg.at("convergence");
        check_keys(c, w + ".convergence", {"surrogate_evals", "baseline_evals"},
                   {"threshold", "noise", "surrogate_path", "baseline_path"});
        const auto s_evals = read_evals(existing(ctx, c, "surrogate_evals", w));
        const auto b_evals = read_evals(existing(ctx, c, "baseline_evals", w));
        const PathCost s_cost = read_path_cost(ctx, "surrogate", c.value("surrogate_path", json::object()));
        const PathCost b_cost = read_path_cost(ctx, "baseline", c.value("baseline_path", json::object()));
        std::optional<double> threshold;
        if (c.contains("threshold")) {
            threshold = get<double>(c, "threshold", w);
        }
        const auto conv = convergence_accounting(s_evals, b_evals, s_cost, b_cost, threshold,
                                                 get_or(c, "noise", 0.01, w));
        json cj = conv.to_json();
        cost = cj.at("cost");
        cj.erase("cost");
        cj["surrogate_steps_total"] = s_cost.total_steps();
        cj["baseline_steps_total"] = b_cost.total_steps();
        report["convergence"] = cj;
        write_text_file((ctx.out_dir / "convergence.csv").string(), convergence_csv(s_evals, b_evals));
        write_convergence_svg(ctx.out_dir / "convergence.svg", s_evals, b_evals, conv.surrogate.threshold);
    }
    if (cfg.contains("degradation")) {
        const json & d = cfg.at("degradation");
        check_keys(d, w + ".degradation", {"text_eval", "before", "surrogate_after", "baseline_after"}, {});
        const auto text_eval = read_text_corpus(existing(ctx, d, "text_eval", w));
        const double before = eval_text(load_checkpoint(existing(ctx, d, "before", w)), text_eval, tok).overall;
        const double s_after = eval_text(load_checkpoint(existing(ctx, d, "surrogate_after", w)), text_eval, tok).overall;
        const double b_after = eval_text(load_checkpoint(existing(ctx, d, "baseline_after", w)), text_eval, tok).overall;
        report["degradation"] = {{"before", before},
                                 {"surrogate_after", s_after},
                                 {"baseline_after", b_after},
                                 {"surrogate_drop", before - s_after},
                                 {"baseline_drop", before - b_after}};
    }
    validate_report_json(report);
    write_json(ctx.out_dir / "report.json", report);
    write_text_file((ctx.out_dir / "comparison.csv").string(), comparison_csv(cmp.reports));
    write_text_file((ctx.out_dir / "comparison.txt").string(), comparison_grid(cmp.reports));
    if (!cost.is_null()) {
        write_json(ctx.out_dir / "cost.json", cost);
    }
    return report;
}

// ---- dispatch ---------------------------------------------------------------------

int run_command(const std::string & command, const json & cfg, const CommandContext & ctx) {
    if (command == "gen-data") {
        cmd_gen_data(cfg, ctx);
    } else if (command == "train-target") {
        cmd_train_target(cfg, ctx);
    } else if (command == "trajectory") {
        cmd_trajectory(cfg, ctx);
    } else if (command == "surgery") {
        cmd_surgery(cfg, ctx);
    } else if (command == "stage") {
        cmd_stage(cfg, ctx);
    } else if (command == "report") {
        cmd_report(cfg, ctx);
    } else if (command == "pipeline") {
        cmd_pipeline(cfg, ctx);
    } else {
        fail(ErrorKind::config, "unknown command '" + command + "'");
    }
    return 0;
}

} // namespace forge
