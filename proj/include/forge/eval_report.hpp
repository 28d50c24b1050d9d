#pragma once

#include "forge/model.hpp"
#include "forge/multimodal.hpp"
#include "forge/synth_data.hpp"
#include "forge/tokenizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace forge {

inline constexpr int kAnswerBudget = 16;

struct Answer {
    std::string text;
    bool over_budget = false;
};

// Produces the answer for eval item `index`.
using Responder = std::function<Answer(std::size_t index)>;

struct Accuracy {
    double overall = 0.0;
    std::map<std::string, double> per_tag;
    std::map<std::string, int> per_tag_count;
    int n = 0;
    int correct = 0;
    int flagged = 0;  // answers that ran past the length budget

    nlohmann::json to_json() const;
};

// Exact match after trimming; over-budget answers count as wrong.
Accuracy score_answers(const std::vector<std::string> & tags, const std::vector<std::string> & truths,
                       const Responder & respond);

// Greedy decoding of the assistant turn until <|eot|> or the budget runs out.
Answer greedy_answer(const DecoderModel & decoder, const VisionBundle * bundle, const MultimodalSequence & prompt,
                     const Tokenizer & tok, int max_new = kAnswerBudget);
// Picks whichever of "yes"/"no" (each followed by <|eot|>) is more likely.
Answer binary_answer(const DecoderModel & decoder, const VisionBundle * bundle, const MultimodalSequence & prompt,
                     const Tokenizer & tok);

Accuracy eval_vqa(const std::vector<VqaInstruction> & items, const Responder & respond);
// yesno items are answered through the constrained binary prompt.
Accuracy eval_vqa(const VlmAssembly & assembly, const std::vector<VqaInstruction> & items, const Tokenizer & tok,
                  int max_new = kAnswerBudget);

Accuracy eval_text(const std::vector<TextInstruction> & items, const Responder & respond);
Accuracy eval_text(const DecoderModel & decoder, const std::vector<TextInstruction> & items, const Tokenizer & tok,
                   int max_new = kAnswerBudget);

// ---- reports -------------------------------------------------------------

struct EvalReport {
    std::string config_name;
    std::map<std::string, double> metrics;
    nlohmann::json provenance;  // {"checkpoints": {name: checksum}, "corpus": {name: items_hash}}

    void validate() const;
    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json & j);
};

void add_accuracy(EvalReport & report, const std::string & prefix, const Accuracy & acc);

struct GraftCondition {
    std::string name;
    const DecoderModel * decoder = nullptr;
    const VisionBundle * bundle = nullptr;
};

// Names every grafting comparison must contain.
inline const std::vector<std::string> kRequiredConditions = {"target_baseline", "late_paired", "late_grafted",
                                                             "early_grafted", "control_grafted"};

struct ComparisonResult {
    std::vector<EvalReport> reports;
    nlohmann::json ordering;  // list of {better, worse, delta}

    const EvalReport & report(const std::string & name) const;
};

ComparisonResult grafting_comparison(const std::vector<GraftCondition> & conditions,
                                     const std::vector<VqaInstruction> & vqa_eval, const Tokenizer & tok);

// ---- convergence ---------------------------------------------------------

struct EvalPoint {
    int step = 0;
    double fraction = 0.0;  // of the stage budget
    double vqa_acc = 0.0;
};

struct ThresholdResult {
    double threshold = 0.0;
    std::optional<int> step;
    std::optional<double> fraction;
};

// First eval point whose accuracy reaches the threshold.
ThresholdResult steps_to_threshold(const std::vector<EvalPoint> & evals, double threshold);

struct PathCost {
    std::string name;
    std::map<std::string, int> steps;               // per stage
    std::map<std::string, double> seconds_per_step;  // measured

    double total_seconds() const;
    int total_steps() const;
};

struct ConvergenceSummary {
    ThresholdResult surrogate;
    ThresholdResult baseline;
    int baseline_stage3_steps = 0;
    std::optional<double> step_ratio;  // surrogate steps-to-threshold / baseline stage-3 steps
    bool surrogate_monotone = false;    // non-decreasing within the noise allowance
    nlohmann::json cost;

    nlohmann::json to_json() const;
};

// Threshold defaults to the baseline path's final accuracy.
ConvergenceSummary convergence_accounting(const std::vector<EvalPoint> & surrogate_evals,
                                          const std::vector<EvalPoint> & baseline_evals,
                                          const PathCost & surrogate_cost, const PathCost & baseline_cost,
                                          std::optional<double> threshold = std::nullopt, double noise = 0.01);

bool monotone_within(const std::vector<EvalPoint> & evals, double noise);

// ---- emission ---------------------------------------------------------------

void write_json(const std::filesystem::path & path, const nlohmann::json & j);
std::string comparison_csv(const std::vector<EvalReport> & reports);
std::string comparison_grid(const std::vector<EvalReport> & reports);
std::string convergence_csv(const std::vector<EvalPoint> & surrogate, const std::vector<EvalPoint> & baseline);
void write_convergence_svg(const std::filesystem::path & path, const std::vector<EvalPoint> & surrogate,
                           const std::vector<EvalPoint> & baseline, std::optional<double> threshold);

} // namespace forge
