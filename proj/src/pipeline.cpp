#include "forge/commands.hpp"

#include "forge/error.hpp"
#include "forge/eval_report.hpp"

namespace forge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

CommandContext sub(const CommandContext & ctx, const std::string & dir) {
    CommandContext c = ctx;
    c.out_dir = ctx.out_dir / dir;
    c.base_dir = ctx.out_dir;
    c.seed.reset();
    return c;
}

// Writes the generated per-command config next to its outputs, then runs it.
json step(const std::string & command, const json & cfg, const CommandContext & c,
          json (*fn)(const json &, const CommandContext &)) {
    fs::create_directories(c.out_dir);
    write_json(c.out_dir / (command + "_config.json"), cfg);
    return fn(cfg, c);
}

json with_seed(json train, std::uint64_t seed) {
    if (!train.contains("seed")) {
        train["seed"] = seed;
    }
    return train;
}

} // namespace

json cmd_pipeline(const json & cfg, const CommandContext & ctx) {
    const std::string w = "pipeline";
    check_keys(cfg, w, {"model", "target_train", "stage1", "stage2", "stage3"},
               {"seed", "data", "trajectory", "encoder", "trainable_scope", "eval_n", "late_layers"});
    const std::uint64_t seed = ctx.seed.value_or(cfg.value("seed", std::uint64_t{1}));
    const int eval_n = cfg.value("eval_n", 300);
    const json encoder = cfg.value("encoder", json::object());
    const std::string scope = cfg.value("trainable_scope", std::string("last_k_layers(2)"));
    fs::create_directories(ctx.out_dir);
    write_json(ctx.out_dir / "pipeline_config.json", cfg);

    json data = cfg.value("data", json::object());
    data["seed"] = seed;
    step("gen-data", data, sub(ctx, "data"), cmd_gen_data);

    const json target_cfg = {{"model", cfg.at("model")},
                             {"init_seed", seed},
                             {"corpus", "data/text_train"},
                             {"eval_corpus", "data/text_eval"},
                             {"train", with_seed(cfg.at("target_train"), seed)}};
    const json target = step("train-target", target_cfg, sub(ctx, "target"), cmd_train_target);

    json traj_cfg = cfg.value("trajectory", json::object());
    traj_cfg["checkpoint"] = "target/target.frga";
    traj_cfg["corpus"] = "data/text_eval";
    traj_cfg["mode"] = "both";
    const json traj = step("trajectory", traj_cfg, sub(ctx, "trajectory"), cmd_trajectory);

    // surrogates; an explicit late_layers pair overrides the detected transition
    auto surgery_cfg = [&](const std::string & name, const std::string & placement, const std::string & variant) {
        json s = {{"checkpoint", "target/target.frga"}, {"name", name}, {"variant", variant}};
        if (cfg.contains("late_layers")) {
            const auto ab = cfg.at("late_layers").get<std::vector<int>>();
            require(ab.size() == 2, ErrorKind::config, w + ".late_layers must be [first, last]");
            const int span = ab[1] - ab[0];
            s["first_replaced"] = placement == "late" ? ab[0] : 1;
            s["last_replaced"] = placement == "late" ? ab[1] : 1 + span;
        } else {
            s["from_trajectory"] = {{"summary", "trajectory/trajectory_summary.json"}, {"placement", placement}};
        }
        return s;
    };
    json surgery;
    surgery["late"] = step("surgery", surgery_cfg("late", "late", "plain"), sub(ctx, "surgery/late"), cmd_surgery);
    surgery["early"] = step("surgery", surgery_cfg("early", "early", "plain"), sub(ctx, "surgery/early"), cmd_surgery);
    surgery["control"] =
        step("surgery", surgery_cfg("control", "late", "control"), sub(ctx, "surgery/control"), cmd_surgery);

    auto stage_cfg = [&](const std::string & stage, const std::string & name, const json & train,
                         const std::string & decoder) {
        json s = {{"stage", stage},
                  {"name", name},
                  {"train", with_seed(train, seed)},
                  {"decoder", decoder},
                  {"vqa_corpus", "data/vqa_train"},
                  {"vqa_eval", "data/vqa_eval"},
                  {"eval_n", eval_n}};
        s["train"]["stage"] = stage;
        return s;
    };
    json stages;
    const std::vector<std::pair<std::string, std::string>> s1_runs = {{"late", "surgery/late/late.frga"},
                                                                      {"early", "surgery/early/early.frga"},
                                                                      {"control", "surgery/control/control.frga"},
                                                                      {"target", "target/target.frga"}};
    for (const auto & [name, decoder] : s1_runs) {
        json s = stage_cfg("s1_adapter_translator", "s1_" + name, cfg.at("stage1"), decoder);
        s["text_corpus"] = "data/text_train";
        s["encoder"] = encoder;
        s["trainable_scope"] = scope;
        s["bundle_seed"] = seed + 17;  // every condition starts from the same bundle
        stages["s1_" + name] = step("stage", s, sub(ctx, "s1_" + name), cmd_stage);
    }
    for (const auto & [name, _] : s1_runs) {
        const std::string s1 = "s1_" + name;
        json s = stage_cfg("s2_encoder", "s2_" + name, cfg.at("stage2"),
                           name == "target" ? "target/target.frga" : s1 + "/" + s1 + "_decoder.frga");
        s["bundle"] = s1 + "/" + s1 + "_bundle.frga";
        stages["s2_" + name] = step("stage", s, sub(ctx, "s2_" + name), cmd_stage);
    }
    // final stage: surrogate-trained bundle vs a bundle that skipped stage 2
    const std::pair<std::string, std::string> s3_runs[] = {{"surrogate", "s2_late/s2_late_bundle.frga"},
                                                           {"baseline", "s1_target/s1_target_bundle.frga"}};
    for (const auto & [name, bundle] : s3_runs) {
        json s = stage_cfg("s3_decoder", "s3_" + name, cfg.at("stage3"), "target/target.frga");
        s["bundle"] = bundle;
        s["text_eval"] = "data/text_eval";
        stages["s3_" + name] = step("stage", s, sub(ctx, "s3_" + name), cmd_stage);
    }

    auto cond = [](const std::string & name, const std::string & decoder, const std::string & bundle) {
        return json{{"name", name}, {"decoder", decoder}, {"bundle", bundle}};
    };
    const json report_cfg = {
        {"vqa_eval", "data/vqa_eval"},
        {"eval_n", eval_n},
        {"conditions",
         {cond("target_baseline", "target/target.frga", "s2_target/s2_target_bundle.frga"),
          cond("late_paired", "s1_late/s1_late_decoder.frga", "s2_late/s2_late_bundle.frga"),
          cond("late_grafted", "target/target.frga", "s2_late/s2_late_bundle.frga"),
          cond("early_paired", "s1_early/s1_early_decoder.frga", "s2_early/s2_early_bundle.frga"),
          cond("early_grafted", "target/target.frga", "s2_early/s2_early_bundle.frga"),
          cond("control_paired", "s1_control/s1_control_decoder.frga", "s2_control/s2_control_bundle.frga"),
          cond("control_grafted", "target/target.frga", "s2_control/s2_control_bundle.frga")}},
        {"convergence",
         {{"surrogate_evals", "s3_surrogate/s3_surrogate_evals.json"},
          {"baseline_evals", "s3_baseline/s3_baseline_evals.json"},
          {"surrogate_path",
           {{"s1", "s1_late/s1_late_summary.json"},
            {"s2", "s2_late/s2_late_summary.json"},
            {"s3", "s3_surrogate/s3_surrogate_summary.json"}}},
          {"baseline_path",
           {{"s1", "s1_target/s1_target_summary.json"}, {"s3", "s3_baseline/s3_baseline_summary.json"}}}}},
        {"degradation",
         {{"text_eval", "data/text_eval"},
          {"before", "target/target.frga"},
          {"surrogate_after", "s3_surrogate/s3_surrogate_decoder.frga"},
          {"baseline_after", "s3_baseline/s3_baseline_decoder.frga"}}}};
    const json report = step("report", report_cfg, sub(ctx, "report"), cmd_report);

    json summary = {{"seed", seed},
                    {"target", target},
                    {"trajectory", traj},
                    {"surgery", surgery},
                    {"stages", stages},
                    {"report", report}};
    write_json(ctx.out_dir / "pipeline_summary.json", summary);
    return summary;
}

} // namespace forge
