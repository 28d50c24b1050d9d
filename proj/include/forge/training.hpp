#pragma once

#include "forge/model.hpp"
#include "forge/multimodal.hpp"
#include "forge/surgery.hpp"
#include "forge/synth_data.hpp"
#include "forge/tokenizer.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace forge {

// target_text trains the toy target on the text corpus; the other three are
// the pipeline stages.
enum class Stage { target_text, s1_adapter_translator, s2_encoder, s3_decoder };

std::string stage_name(Stage s);
Stage parse_stage(const std::string & s);

struct StageConfig {
    Stage stage = Stage::s1_adapter_translator;
    double learning_rate = 1e-3;
    int batch_size = 32;
    double epochs = 1.0;
    double warmup_ratio = 0.03;
    double data_fraction = 1.0;
    double weight_ord = 0.5;
    bool use_dynamic_weights = false;
    double grad_clip_norm = 1.0;
    std::uint64_t seed = 0;
    // Completed-step fractions of the budget at which the periodic hook fires.
    std::vector<double> eval_fractions;

    void validate() const;
    nlohmann::json to_json() const;
    static StageConfig from_json(const nlohmann::json & j);
};

struct TrainRecord {
    int step = 0;
    double loss = 0.0;
    double learning_rate = 0.0;
    std::map<std::string, double> grad_norms;  // pre-clip, per component
    double elapsed = 0.0;                       // seconds since the run started

    nlohmann::json to_json() const;
};

// ---- loss --------------------------------------------------------------

// w_i = (max_j L_j / ln L_i)^ord, rescaled so that Σ w_i = Σ L_i.
std::vector<double> dynamic_loss_weights(std::span<const int> lengths, double ord);

// Mean over supervised positions of next-token cross-entropy; each position's
// term is scaled by its response group's weight (1 when weights are absent).
// Position t supervises the prediction made at row t-1.
double masked_weighted_loss(const Mat & logits, std::span<const int> token_ids, std::span<const std::uint8_t> loss_mask,
                            std::span<const Span> response_groups, const std::optional<std::vector<double>> & weights);

// ---- optimizer ---------------------------------------------------------

struct CosineSchedule {
    double peak = 0.0;
    int total_steps = 1;
    int warmup_steps = 0;

    double at(int step) const;
};

struct ParamSlot {
    std::string name;
    Mat * param = nullptr;
    Mat * grad = nullptr;
    Mat m;
    Mat v;
};

// AdamW(0.9, 0.999, 1e-8), weight decay 0, global 2-norm clipping.
class AdamW {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;
    static constexpr double kWeightDecay = 0.0;

    AdamW(std::vector<ParamSlot> slots, CosineSchedule schedule, double clip_norm);

    // Scales gradients in place so their global norm is at most clip_norm;
    // returns the factor applied (1 when no clipping happened).
    double clip_gradients();
    double global_grad_norm() const;
    void update();  // one step at the current schedule position
    void zero_grad();

    int step() const { return step_; }
    const CosineSchedule & schedule() const { return schedule_; }
    const std::vector<ParamSlot> & slots() const { return slots_; }

    // Moments + step counter for resumption.
    std::map<std::string, Mat> state_tensors() const;
    void load_state(const std::map<std::string, Mat> & tensors, int step);

private:
    std::vector<ParamSlot> slots_;
    CosineSchedule schedule_;
    double clip_norm_;
    int step_ = 0;
};

// ---- training jobs -----------------------------------------------------

// A model pair plus the names that may change. Decoder names use the model's
// own keys; bundle names are prefixed "encoder." / "adapter.".
struct TrainableSet {
    std::set<std::string> decoder;
    std::set<std::string> bundle;

    bool empty() const { return decoder.empty() && bundle.empty(); }
};

struct GradientBuffers {
    DecoderModel decoder;
    std::optional<VisionBundle> bundle;
};

AdamW make_optimizer_and_schedule(const StageConfig & cfg, const TrainableSet & trainable, DecoderModel & decoder,
                                  VisionBundle * bundle, GradientBuffers & grads, int total_steps);

int steps_per_epoch(const StageConfig & cfg, std::size_t n_items);
int total_steps(const StageConfig & cfg, std::size_t n_items);

// Indices of the items a run uses (first ⌊fraction·n⌋ under the seed's shuffle).
std::vector<std::size_t> select_items(const StageConfig & cfg, std::size_t n_items);

struct TrainOutcome {
    std::vector<TrainRecord> records;
    std::map<std::string, Mat> optimizer_state;
    int steps_done = 0;
    int total_steps = 0;
};

struct ResumeState {
    std::map<std::string, Mat> optimizer_state;
    int step = 0;
};

struct TrainingJob {
    DecoderModel * decoder = nullptr;
    VisionBundle * bundle = nullptr;
    TrainableSet trainable;
    std::vector<MultimodalSequence> data;
    StageConfig cfg;
    std::optional<ResumeState> resume;
    int stop_after = -1;  // stop once this many steps are done (for resumable runs)
    std::function<void(int steps_done, int total)> on_eval;  // fired at cfg.eval_fractions
    std::function<void(const TrainRecord &)> on_record;
};

TrainOutcome run_training(TrainingJob & job);

// Loss + gradients of one batch without updating anything. Buffers are
// zeroed first. Exposed for gradient routing checks.
double batch_gradients(const DecoderModel & decoder, const VisionBundle * bundle, const TrainableSet & trainable,
                       std::span<const MultimodalSequence * const> batch, const StageConfig & cfg,
                       GradientBuffers & grads);

// ---- stage data --------------------------------------------------------

std::vector<MultimodalSequence> text_sequences(const std::vector<TextInstruction> & items, const ChatTemplate & tmpl,
                                               const Tokenizer & tok);
std::vector<MultimodalSequence> vqa_sequences(const std::vector<VqaInstruction> & items, const ChatTemplate & tmpl,
                                              const Tokenizer & tok);
// Equal parts text and vision-language, interleaved.
std::vector<MultimodalSequence> mixed_sequences(const std::vector<TextInstruction> & text,
                                                const std::vector<VqaInstruction> & vqa, const ChatTemplate & tmpl,
                                                const Tokenizer & tok);

TrainableSet decoder_keys(const DecoderModel & model);
TrainableSet bundle_keys(const VisionBundle & bundle, bool adapter, bool encoder_by_scope);

// ---- pipeline stages ---------------------------------------------------

struct StageRun {
    std::function<void(int, int)> on_eval;
    std::function<void(const TrainRecord &)> on_record;
    std::optional<ResumeState> resume;
    int stop_after = -1;
};

TrainOutcome train_target(DecoderModel & target, const std::vector<TextInstruction> & corpus, const StageConfig & cfg,
                          const Tokenizer & tok, const StageRun & run = {});

// Adapter + translator (+ control layers) on the mixed corpus; encoder frozen.
TrainOutcome run_stage1(SurrogateModel & surrogate, VisionBundle & bundle, const std::vector<TextInstruction> & text,
                        const std::vector<VqaInstruction> & vqa, const StageConfig & cfg, const Tokenizer & tok,
                        const StageRun & run = {});
// Baseline stage 1: adapter only against the frozen target.
TrainOutcome run_stage1_baseline(const DecoderModel & target, VisionBundle & bundle,
                                 const std::vector<TextInstruction> & text, const std::vector<VqaInstruction> & vqa,
                                 const StageConfig & cfg, const Tokenizer & tok, const StageRun & run = {});
// Encoder (per trainable scope) + adapter against a frozen decoder.
TrainOutcome run_stage2(VisionBundle & bundle, const DecoderModel & decoder, const std::vector<VqaInstruction> & vqa,
                        const StageConfig & cfg, const Tokenizer & tok, const StageRun & run = {});
// Full decoder + encoder (per scope) + adapter.
TrainOutcome run_stage3(DecoderModel & target, VisionBundle & bundle, const std::vector<VqaInstruction> & vqa,
                        const StageConfig & cfg, const Tokenizer & tok, const StageRun & run = {});

} // namespace forge
