#include "forge/training.hpp"

#include "forge/error.hpp"
#include "forge/parallel.hpp"
#include "forge/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

namespace forge {

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::target_text: return "target_text";
        case Stage::s1_adapter_translator: return "s1_adapter_translator";
        case Stage::s2_encoder: return "s2_encoder";
        case Stage::s3_decoder: return "s3_decoder";
    }
    return "?";
}

Stage parse_stage(const std::string & s) {
    for (auto st : {Stage::target_text, Stage::s1_adapter_translator, Stage::s2_encoder, Stage::s3_decoder}) {
        if (stage_name(st) == s) {
            return st;
        }
    }
    fail(ErrorKind::config, "unknown stage '" + s + "'");
}

void StageConfig::validate() const {
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::config, "learning_rate must be positive");
    require(batch_size >= 1, ErrorKind::config, "batch_size must be >= 1");
    require(epochs > 0.0, ErrorKind::config, "epochs must be positive");
    require(warmup_ratio >= 0.0 && warmup_ratio <= 0.5, ErrorKind::config, "warmup_ratio must be in [0, 0.5]");
    require(data_fraction > 0.0 && data_fraction <= 1.0, ErrorKind::config, "data_fraction must be in (0, 1]");
    require(weight_ord >= 0.0, ErrorKind::config, "weight_ord must be >= 0");
    require(grad_clip_norm > 0.0, ErrorKind::config, "grad_clip_norm must be positive");
    for (double f : eval_fractions) {
        require(f > 0.0 && f <= 1.0, ErrorKind::config, "eval fractions must be in (0, 1]");
    }
}

nlohmann::json StageConfig::to_json() const {
    return {{"stage", stage_name(stage)},
            {"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"warmup_ratio", warmup_ratio},
            {"data_fraction", data_fraction},
            {"weight_ord", weight_ord},
            {"use_dynamic_weights", use_dynamic_weights},
            {"grad_clip_norm", grad_clip_norm},
            {"seed", seed},
            {"eval_fractions", eval_fractions}};
}

StageConfig StageConfig::from_json(const nlohmann::json & j) {
    static const char * known[] = {"stage",      "learning_rate",       "batch_size",     "epochs",
                                   "warmup_ratio", "data_fraction",     "weight_ord",     "use_dynamic_weights",
                                   "grad_clip_norm", "seed",            "eval_fractions"};
    require(j.is_object(), ErrorKind::config, "stage config must be an object");
    for (const auto & [key, _] : j.items()) {
        bool ok = false;
        for (const char * k : known) {
            ok = ok || key == k;
        }
        require(ok, ErrorKind::config, "unknown stage config key '" + key + "'");
    }
    StageConfig c;
    try {
        c.stage = parse_stage(j.at("stage").get<std::string>());
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
        c.data_fraction = j.value("data_fraction", c.data_fraction);
        c.weight_ord = j.value("weight_ord", c.weight_ord);
        c.use_dynamic_weights = j.value("use_dynamic_weights", c.use_dynamic_weights);
        c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
        c.seed = j.value("seed", c.seed);
        c.eval_fractions = j.value("eval_fractions", c.eval_fractions);
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::config, std::string("stage config: ") + e.what());
    }
    c.validate();
    return c;
}

nlohmann::json TrainRecord::to_json() const {
    return {{"step", step}, {"loss", loss}, {"lr", learning_rate}, {"grad_norms", grad_norms}, {"elapsed", elapsed}};
}

// ---- loss ----------------------------------------------------------------

std::vector<double> dynamic_loss_weights(std::span<const int> lengths, double ord) {
    require(!lengths.empty(), ErrorKind::input, "no response groups to weight");
    int max_len = 0;
    double total_len = 0.0;
    for (int len : lengths) {
        require(len >= 2, ErrorKind::input, "response length " + std::to_string(len) + " < 2 has no positive log");
        max_len = std::max(max_len, len);
        total_len += len;
    }
    std::vector<double> w(lengths.size());
    double total_w = 0.0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        w[i] = std::pow(static_cast<double>(max_len) / std::log(static_cast<double>(lengths[i])), ord);
        total_w += w[i];
    }
    for (auto & x : w) {
        x = x / total_w * total_len;
    }
    return w;
}

namespace {

// Per-position weights (0 outside the mask). Validates mask/group consistency.
std::vector<double> position_weights(std::size_t n, std::span<const std::uint8_t> loss_mask,
                                     std::span<const Span> groups, const std::vector<double> * weights) {
    require(loss_mask.size() == n, ErrorKind::input, "loss mask length does not match the token count");
    require(n == 0 || loss_mask[0] == 0, ErrorKind::input, "position 0 has no preceding prediction to supervise");
    if (weights) {
        require(weights->size() == groups.size(), ErrorKind::input, "weights must align one-to-one with response groups");
    }
    std::vector<double> pw(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        pw[i] = loss_mask[i] ? 1.0 : 0.0;
    }
    std::vector<bool> seen(n, false);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto & s = groups[g];
        require(s.start >= 1 && s.length >= 1 && static_cast<std::size_t>(s.end()) <= n, ErrorKind::input,
                "response group out of range");
        for (int t = s.start; t < s.end(); ++t) {
            require(loss_mask[t] != 0, ErrorKind::input, "response group covers an unsupervised position");
            require(!seen[t], ErrorKind::input, "response groups overlap");
            seen[t] = true;
            pw[t] = weights ? (*weights)[g] : 1.0;
        }
    }
    return pw;
}

// Adds w·CE terms of one sequence; when d_logits is given, writes
// scale·w·(softmax - onehot) into the row preceding each target.
double sequence_loss(const Mat & logits, std::span<const int> token_ids, const std::vector<double> & pw, double scale,
                     Mat * d_logits) {
    double sum = 0.0;
    for (std::size_t t = 1; t < token_ids.size(); ++t) {
        if (pw[t] == 0.0) {
            continue;
        }
        const auto row = logits.row(static_cast<Eigen::Index>(t - 1));
        const double m = row.maxCoeff();
        double z = 0.0;
        for (Eigen::Index v = 0; v < row.size(); ++v) {
            z += std::exp(static_cast<double>(row(v)) - m);
        }
        const double log_z = m + std::log(z);
        sum += pw[t] * (log_z - static_cast<double>(row(token_ids[t])));
        if (d_logits) {
            const double coef = scale * pw[t];
            auto drow = d_logits->row(static_cast<Eigen::Index>(t - 1));
            for (Eigen::Index v = 0; v < row.size(); ++v) {
                drow(v) += static_cast<float>(coef * std::exp(static_cast<double>(row(v)) - log_z));
            }
            drow(token_ids[t]) -= static_cast<float>(coef);
        }
    }
    return sum;
}

int masked_count(std::span<const std::uint8_t> mask) {
    return static_cast<int>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t b) { return b != 0; }));
}

} // namespace

double masked_weighted_loss(const Mat & logits, std::span<const int> token_ids, std::span<const std::uint8_t> loss_mask,
                            std::span<const Span> response_groups, const std::optional<std::vector<double>> & weights) {
    require(logits.rows() == static_cast<Eigen::Index>(token_ids.size()), ErrorKind::input,
            "logits rows must equal the token count");
    const auto pw = position_weights(token_ids.size(), loss_mask, response_groups, weights ? &*weights : nullptr);
    const int count = masked_count(loss_mask);
    require(count > 0, ErrorKind::input, "no supervised positions in the loss mask");
    return sequence_loss(logits, token_ids, pw, 0.0, nullptr) / count;
}

// ---- optimizer -------------------------------------------------------------

double CosineSchedule::at(int step) const {
    if (total_steps <= 1) {
        return peak;
    }
    if (step < warmup_steps) {
        return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    const int decay_len = total_steps - 1 - warmup_steps;
    if (decay_len <= 0 || step >= total_steps - 1) {
        return step >= total_steps - 1 && decay_len > 0 ? 0.0 : peak;
    }
    const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(decay_len);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(std::vector<ParamSlot> slots, CosineSchedule schedule, double clip_norm)
    : slots_(std::move(slots)), schedule_(schedule), clip_norm_(clip_norm) {
    for (auto & s : slots_) {
        s.m = Mat::Zero(s.param->rows(), s.param->cols());
        s.v = Mat::Zero(s.param->rows(), s.param->cols());
    }
}

double AdamW::global_grad_norm() const {
    double sq = 0.0;
    for (const auto & s : slots_) {
        sq += s.grad->cast<double>().squaredNorm();
    }
    return std::sqrt(sq);
}

double AdamW::clip_gradients() {
    const double norm = global_grad_norm();
    if (norm <= clip_norm_ || norm == 0.0) {
        return 1.0;
    }
    const double factor = clip_norm_ / norm;
    for (auto & s : slots_) {
        *s.grad *= static_cast<float>(factor);
    }
    return factor;
}

void AdamW::update() {
    const double lr = schedule_.at(step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(kBeta1, step_);
    const double bc2 = 1.0 - std::pow(kBeta2, step_);
    const auto b1 = static_cast<float>(kBeta1);
    const auto b2 = static_cast<float>(kBeta2);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto bc2_sqrt = static_cast<float>(std::sqrt(bc2));
    const auto eps = static_cast<float>(kEps);
    for (auto & s : slots_) {
        float * p = s.param->data();
        const float * g = s.grad->data();
        float * m = s.m.data();
        float * v = s.v.data();
        for (Eigen::Index i = 0; i < s.param->size(); ++i) {
            m[i] = b1 * m[i] + (1.0f - b1) * g[i];
            v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
            p[i] -= step_size * m[i] / (std::sqrt(v[i]) / bc2_sqrt + eps);
        }
    }
}

void AdamW::zero_grad() {
    for (auto & s : slots_) {
        s.grad->setZero();
    }
}

std::map<std::string, Mat> AdamW::state_tensors() const {
    std::map<std::string, Mat> out;
    for (const auto & s : slots_) {
        out.emplace("m." + s.name, s.m);
        out.emplace("v." + s.name, s.v);
    }
    return out;
}

void AdamW::load_state(const std::map<std::string, Mat> & tensors, int step) {
    for (auto & s : slots_) {
        const auto m = tensors.find("m." + s.name);
        const auto v = tensors.find("v." + s.name);
        require(m != tensors.end() && v != tensors.end(), ErrorKind::load, "optimizer state lacks '" + s.name + "'");
        require(m->second.rows() == s.m.rows() && m->second.cols() == s.m.cols(), ErrorKind::load,
                "optimizer state shape mismatch for '" + s.name + "'");
        s.m = m->second;
        s.v = v->second;
    }
    step_ = step;
}

// ---- jobs --------------------------------------------------------------------

int steps_per_epoch(const StageConfig & cfg, std::size_t n_items) {
    const auto selected = static_cast<std::size_t>(std::floor(cfg.data_fraction * static_cast<double>(n_items)));
    return static_cast<int>(selected / static_cast<std::size_t>(cfg.batch_size));
}

int total_steps(const StageConfig & cfg, std::size_t n_items) {
    const int per_epoch = steps_per_epoch(cfg, n_items);
    return static_cast<int>(std::floor(cfg.epochs * per_epoch));
}

std::vector<std::size_t> select_items(const StageConfig & cfg, std::size_t n_items) {
    std::vector<std::size_t> order(n_items);
    for (std::size_t i = 0; i < n_items; ++i) {
        order[i] = i;
    }
    Rng rng(Rng::mix(cfg.seed ^ 0x73656c656374ULL));
    rng.shuffle(order);
    order.resize(static_cast<std::size_t>(std::floor(cfg.data_fraction * static_cast<double>(n_items))));
    return order;
}

namespace {

struct Requests {
    GradRequest decoder;
    BundleGradRequest bundle;
    bool bundle_any = false;
};

Requests requests_for(const DecoderModel & decoder, const VisionBundle * bundle, const TrainableSet & t) {
    Requests r;
    r.decoder = GradRequest::none(decoder.n_layers());
    r.decoder.token_embedding = t.decoder.contains("token_embedding");
    r.decoder.final_norm = t.decoder.contains("final_norm");
    r.decoder.unembedding = t.decoder.contains("unembedding");
    for (const auto & name : t.decoder) {
        if (name.starts_with("layers.")) {
            r.decoder.layers[std::stoi(name.substr(7))] = true;
        }
    }
    r.bundle.adapter = false;
    r.bundle.encoder_stem = false;
    r.bundle.encoder_final_norm = false;
    if (bundle) {
        r.bundle.encoder_from_layer = bundle->encoder.config.depth;
        for (const auto & name : t.bundle) {
            r.bundle_any = true;
            if (name.starts_with("adapter.")) {
                r.bundle.adapter = true;
            } else if (name.starts_with("encoder.layers.")) {
                r.bundle.encoder_from_layer = std::min(r.bundle.encoder_from_layer, std::stoi(name.substr(15)));
            } else if (name == "encoder.final_norm") {
                r.bundle.encoder_final_norm = true;
            } else {
                r.bundle.encoder_stem = true;
            }
        }
        r.decoder.input = r.bundle_any;
    }
    return r;
}

} // namespace

AdamW make_optimizer_and_schedule(const StageConfig & cfg, const TrainableSet & trainable, DecoderModel & decoder,
                                  VisionBundle * bundle, GradientBuffers & grads, int total) {
    cfg.validate();
    require(!trainable.empty(), ErrorKind::config, "empty trainable set");
    require(total >= 1, ErrorKind::config, "training run has no steps (corpus too small for the batch size?)");
    std::vector<ParamSlot> slots;
    std::vector<Mat *> grad_ptrs;
    grads.decoder.visit([&](const std::string & name, Mat & g) {
        if (trainable.decoder.contains(name)) {
            grad_ptrs.push_back(&g);
        }
    });
    std::size_t gi = 0;
    decoder.visit([&](const std::string & name, Mat & p) {
        if (trainable.decoder.contains(name)) {
            slots.push_back({name, &p, grad_ptrs[gi++], {}, {}});
        }
    });
    require(gi == trainable.decoder.size(), ErrorKind::config, "trainable decoder keys not found in the model");
    if (bundle) {
        std::vector<Mat *> bundle_grads;
        grads.bundle->visit([&](const std::string & name, Mat & g) {
            if (trainable.bundle.contains(name)) {
                bundle_grads.push_back(&g);
            }
        });
        std::size_t bi = 0;
        bundle->visit([&](const std::string & name, Mat & p) {
            if (trainable.bundle.contains(name)) {
                slots.push_back({name, &p, bundle_grads[bi++], {}, {}});
            }
        });
        require(bi == trainable.bundle.size(), ErrorKind::config, "trainable bundle keys not found in the bundle");
    } else {
        require(trainable.bundle.empty(), ErrorKind::config, "bundle keys given without a bundle");
    }
    CosineSchedule schedule{cfg.learning_rate, total, static_cast<int>(std::floor(cfg.warmup_ratio * total))};
    return AdamW(std::move(slots), schedule, cfg.grad_clip_norm);
}

namespace {

constexpr std::size_t kChunk = 4;

double sequence_step(const DecoderModel & decoder, const VisionBundle * bundle, const Requests & req,
                     const MultimodalSequence & seq, const std::vector<double> & pw, double scale,
                     GradientBuffers & grads) {
    std::optional<BundleActivations> bacts;
    std::vector<EmbeddingOverride> overrides;
    if (seq.image_span) {
        require(bundle != nullptr, ErrorKind::input, "image sequence without a vision bundle");
        require(seq.image != nullptr, ErrorKind::input, "image span without image");
        bacts = bundle_forward(*bundle, *seq.image);
        overrides.push_back({seq.image_span->start, bacts->output});
    }
    const Mat x0 = embed_tokens(decoder, seq.token_ids, overrides);
    const auto acts = decoder_forward(decoder, x0);
    Mat d_logits = Mat::Zero(acts.logits.rows(), acts.logits.cols());
    const double loss = sequence_loss(acts.logits, seq.token_ids, pw, scale, &d_logits);

    GradRequest dreq = req.decoder;
    dreq.input = bacts.has_value() && req.bundle_any;
    const Mat dx0 = decoder_backward(decoder, acts, d_logits, dreq, grads.decoder, seq.token_ids);
    if (dreq.input) {
        const Mat d_img = dx0.middleRows(seq.image_span->start, seq.image_span->length);
        bundle_backward(*bundle, *bacts, d_img, req.bundle, *grads.bundle);
    }
    return loss;
}

void add_into(GradientBuffers & dst, GradientBuffers & src) {
    std::vector<Mat *> from;
    src.decoder.visit([&](const std::string &, Mat & m) { from.push_back(&m); });
    std::size_t i = 0;
    dst.decoder.visit([&](const std::string &, Mat & m) { m += *from[i++]; });
    if (dst.bundle) {
        from.clear();
        src.bundle->visit([&](const std::string &, Mat & m) { from.push_back(&m); });
        i = 0;
        dst.bundle->visit([&](const std::string &, Mat & m) { m += *from[i++]; });
    }
}

double accumulate_batch(const DecoderModel & decoder, const VisionBundle * bundle, const Requests & req,
                        std::span<const MultimodalSequence * const> batch, const StageConfig & cfg,
                        GradientBuffers & grads) {
    // group weights across the whole batch
    std::vector<int> lengths;
    int count = 0;
    for (const auto * seq : batch) {
        count += masked_count(seq->loss_mask);
        for (const auto & g : seq->response_groups) {
            lengths.push_back(g.length);
        }
    }
    require(count > 0, ErrorKind::input, "batch has no supervised positions");
    std::vector<double> all_weights;
    if (cfg.use_dynamic_weights && !lengths.empty()) {
        all_weights = dynamic_loss_weights(lengths, cfg.weight_ord);
    }
    const double scale = 1.0 / count;
    std::vector<std::vector<double>> pws;
    std::size_t wi = 0;
    for (const auto * seq : batch) {
        std::vector<double> w;
        const std::vector<double> * wp = nullptr;
        if (!all_weights.empty()) {
            w.assign(all_weights.begin() + static_cast<std::ptrdiff_t>(wi),
                     all_weights.begin() + static_cast<std::ptrdiff_t>(wi + seq->response_groups.size()));
            wp = &w;
        }
        wi += seq->response_groups.size();
        pws.push_back(position_weights(seq->token_ids.size(), seq->loss_mask, seq->response_groups, wp));
    }

    // Fixed chunking keeps the summation order independent of the worker count.
    const std::size_t n_chunks = (batch.size() + kChunk - 1) / kChunk;
    std::vector<GradientBuffers> partial;
    for (std::size_t c = 0; c < n_chunks; ++c) {
        partial.push_back({grads.decoder.zeros_like(), std::nullopt});
        if (grads.bundle) {
            partial.back().bundle = grads.bundle->zeros_like();
        }
    }
    std::vector<double> losses(batch.size(), 0.0);
    parallel_for(n_chunks, [&](std::size_t c) {
        for (std::size_t i = c * kChunk; i < std::min(batch.size(), (c + 1) * kChunk); ++i) {
            losses[i] = sequence_step(decoder, bundle, req, *batch[i], pws[i], scale, partial[c]);
        }
    });
    for (auto & part : partial) {
        add_into(grads, part);
    }
    double total = 0.0;
    for (double l : losses) {
        total += l;
    }
    return total * scale;
}

GradientBuffers make_buffers(const DecoderModel & decoder, const VisionBundle * bundle) {
    GradientBuffers g{decoder.zeros_like(), std::nullopt};
    if (bundle) {
        g.bundle = bundle->zeros_like();
    }
    return g;
}

double component_norm(const std::vector<ParamSlot> & slots, std::string_view prefix, bool decoder_side) {
    double sq = 0.0;
    for (const auto & s : slots) {
        const bool is_bundle = s.name.starts_with("encoder.") || s.name.starts_with("adapter.");
        const bool match = decoder_side ? !is_bundle : s.name.starts_with(prefix);
        if (match) {
            sq += s.grad->cast<double>().squaredNorm();
        }
    }
    return std::sqrt(sq);
}

} // namespace

double batch_gradients(const DecoderModel & decoder, const VisionBundle * bundle, const TrainableSet & trainable,
                       std::span<const MultimodalSequence * const> batch, const StageConfig & cfg,
                       GradientBuffers & grads) {
    grads.decoder.visit([](const std::string &, Mat & m) { m.setZero(); });
    if (grads.bundle) {
        grads.bundle->visit([](const std::string &, Mat & m) { m.setZero(); });
    }
    return accumulate_batch(decoder, bundle, requests_for(decoder, bundle, trainable), batch, cfg, grads);
}

TrainOutcome run_training(TrainingJob & job) {
    require(job.decoder != nullptr, ErrorKind::config, "training job without a decoder");
    const auto & cfg = job.cfg;
    cfg.validate();
    const auto selected = select_items(cfg, job.data.size());
    const int per_epoch = steps_per_epoch(cfg, job.data.size());
    const int total = total_steps(cfg, job.data.size());

    GradientBuffers grads = make_buffers(*job.decoder, job.bundle);
    AdamW opt = make_optimizer_and_schedule(cfg, job.trainable, *job.decoder, job.bundle, grads, total);
    const Requests req = requests_for(*job.decoder, job.bundle, job.trainable);

    int start = 0;
    if (job.resume) {
        opt.load_state(job.resume->optimizer_state, job.resume->step);
        start = job.resume->step;
    }
    std::vector<int> eval_steps;
    for (double f : cfg.eval_fractions) {
        eval_steps.push_back(std::max(1, static_cast<int>(std::lround(f * total))));
    }

    TrainOutcome out;
    out.total_steps = total;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order;
    int order_epoch = -1;
    const int end = job.stop_after >= 0 ? std::min(total, job.stop_after) : total;
    for (int step = start; step < end; ++step) {
        const int epoch = step / per_epoch;
        if (epoch != order_epoch) {
            order = selected;
            Rng rng(Rng::mix(cfg.seed + 0x65706f6368ULL * static_cast<std::uint64_t>(epoch + 1)));
            rng.shuffle(order);
            order_epoch = epoch;
        }
        const int offset = (step % per_epoch) * cfg.batch_size;
        std::vector<const MultimodalSequence *> batch;
        for (int i = 0; i < cfg.batch_size; ++i) {
            batch.push_back(&job.data[order[static_cast<std::size_t>(offset + i)]]);
        }
        opt.zero_grad();
        const double loss = accumulate_batch(*job.decoder, job.bundle, req, batch, cfg, grads);
        if (!std::isfinite(loss)) {
            fail(ErrorKind::numeric, "non-finite loss at step " + std::to_string(step) + "; parameters hold the last good step");
        }
        TrainRecord rec;
        rec.step = step;
        rec.loss = loss;
        rec.learning_rate = opt.schedule().at(opt.step());
        rec.grad_norms["decoder"] = component_norm(opt.slots(), "", true);
        rec.grad_norms["adapter"] = component_norm(opt.slots(), "adapter.", false);
        rec.grad_norms["encoder"] = component_norm(opt.slots(), "encoder.", false);
        opt.clip_gradients();
        opt.update();
        rec.elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.records.push_back(rec);
        if (job.on_record) {
            job.on_record(rec);
        }
        const int done = step + 1;
        if (job.on_eval && std::find(eval_steps.begin(), eval_steps.end(), done) != eval_steps.end()) {
            job.on_eval(done, total);
        }
    }
    out.steps_done = std::max(start, end);
    out.optimizer_state = opt.state_tensors();
    return out;
}

// ---- stage data ----------------------------------------------------------------

std::vector<MultimodalSequence> text_sequences(const std::vector<TextInstruction> & items, const ChatTemplate & tmpl,
                                               const Tokenizer & tok) {
    std::vector<MultimodalSequence> out;
    out.reserve(items.size());
    for (const auto & it : items) {
        out.push_back(assemble_sequence(tmpl, nullptr, it.question, it.response, tok));
    }
    return out;
}

std::vector<MultimodalSequence> vqa_sequences(const std::vector<VqaInstruction> & items, const ChatTemplate & tmpl,
                                              const Tokenizer & tok) {
    std::vector<MultimodalSequence> out;
    out.reserve(items.size());
    for (const auto & it : items) {
        out.push_back(assemble_sequence(tmpl, &it.image, it.question, it.response, tok));
    }
    return out;
}

std::vector<MultimodalSequence> mixed_sequences(const std::vector<TextInstruction> & text,
                                                const std::vector<VqaInstruction> & vqa, const ChatTemplate & tmpl,
                                                const Tokenizer & tok) {
    const std::size_t n = std::min(text.size(), vqa.size());
    std::vector<MultimodalSequence> out;
    out.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(assemble_sequence(tmpl, nullptr, text[i].question, text[i].response, tok));
        out.push_back(assemble_sequence(tmpl, &vqa[i].image, vqa[i].question, vqa[i].response, tok));
    }
    return out;
}

TrainableSet decoder_keys(const DecoderModel & model) {
    TrainableSet t;
    model.visit([&](const std::string & name, const Mat &) { t.decoder.insert(name); });
    return t;
}

TrainableSet bundle_keys(const VisionBundle & bundle, bool adapter, bool encoder_by_scope) {
    TrainableSet t;
    bundle.visit([&](const std::string & name, const Mat &) {
        if (name.starts_with("adapter.")) {
            if (adapter) {
                t.bundle.insert(name);
            }
        } else if (encoder_by_scope && bundle.encoder_param_trainable(name)) {
            t.bundle.insert(name);
        }
    });
    return t;
}

namespace {

void expect_stage(const StageConfig & cfg, Stage s) {
    require(cfg.stage == s, ErrorKind::config, "config is for stage " + stage_name(cfg.stage) + ", expected " + stage_name(s));
}

TrainOutcome launch(DecoderModel & decoder, VisionBundle * bundle, TrainableSet trainable,
                    std::vector<MultimodalSequence> data, const StageConfig & cfg, const StageRun & run) {
    TrainingJob job;
    job.decoder = &decoder;
    job.bundle = bundle;
    job.trainable = std::move(trainable);
    job.data = std::move(data);
    job.cfg = cfg;
    job.resume = run.resume;
    job.stop_after = run.stop_after;
    job.on_eval = run.on_eval;
    job.on_record = run.on_record;
    return run_training(job);
}

} // namespace

TrainOutcome train_target(DecoderModel & target, const std::vector<TextInstruction> & corpus, const StageConfig & cfg,
                          const Tokenizer & tok, const StageRun & run) {
    expect_stage(cfg, Stage::target_text);
    ChatTemplate tmpl;
    return launch(target, nullptr, decoder_keys(target), text_sequences(corpus, tmpl, tok), cfg, run);
}

TrainOutcome run_stage1(SurrogateModel & surrogate, VisionBundle & bundle, const std::vector<TextInstruction> & text,
                        const std::vector<VqaInstruction> & vqa, const StageConfig & cfg, const Tokenizer & tok,
                        const StageRun & run) {
    expect_stage(cfg, Stage::s1_adapter_translator);
    require(bundle.adapter.out_width() == surrogate.model.spec.d_model, ErrorKind::graft, "adapter width mismatch");
    TrainableSet t = bundle_keys(bundle, true, false);
    t.decoder = surrogate.trainable_keys;
    ChatTemplate tmpl{bundle.encoder.config.n_patches()};
    return launch(surrogate.model, &bundle, std::move(t), mixed_sequences(text, vqa, tmpl, tok), cfg, run);
}

TrainOutcome run_stage1_baseline(const DecoderModel & target, VisionBundle & bundle,
                                 const std::vector<TextInstruction> & text, const std::vector<VqaInstruction> & vqa,
                                 const StageConfig & cfg, const Tokenizer & tok, const StageRun & run) {
    expect_stage(cfg, Stage::s1_adapter_translator);
    require(bundle.adapter.out_width() == target.spec.d_model, ErrorKind::graft, "adapter width mismatch");
    DecoderModel frozen = target;
    ChatTemplate tmpl{bundle.encoder.config.n_patches()};
    return launch(frozen, &bundle, bundle_keys(bundle, true, false), mixed_sequences(text, vqa, tmpl, tok), cfg, run);
}

TrainOutcome run_stage2(VisionBundle & bundle, const DecoderModel & decoder, const std::vector<VqaInstruction> & vqa,
                        const StageConfig & cfg, const Tokenizer & tok, const StageRun & run) {
    expect_stage(cfg, Stage::s2_encoder);
    require(bundle.adapter.out_width() == decoder.spec.d_model, ErrorKind::graft, "adapter width mismatch");
    DecoderModel frozen = decoder;
    ChatTemplate tmpl{bundle.encoder.config.n_patches()};
    return launch(frozen, &bundle, bundle_keys(bundle, true, true), vqa_sequences(vqa, tmpl, tok), cfg, run);
}

TrainOutcome run_stage3(DecoderModel & target, VisionBundle & bundle, const std::vector<VqaInstruction> & vqa,
                        const StageConfig & cfg, const Tokenizer & tok, const StageRun & run) {
    expect_stage(cfg, Stage::s3_decoder);
    require(bundle.adapter.out_width() == target.spec.d_model, ErrorKind::graft, "adapter width mismatch");
    TrainableSet t = bundle_keys(bundle, true, true);
    t.decoder = decoder_keys(target).decoder;
    ChatTemplate tmpl{bundle.encoder.config.n_patches()};
    return launch(target, &bundle, std::move(t), vqa_sequences(vqa, tmpl, tok), cfg, run);
}

} // namespace forge
