#pragma once

#include "forge/model.hpp"
#include "forge/synth_data.hpp"
#include "forge/tokenizer.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace forge {

struct EncoderConfig {
    int image_size = 32;
    int channels = 1;
    int patch_size = 8;
    int width = 48;
    int depth = 4;
    int n_heads = 4;
    double mlp_ratio = 4.0;

    int patches_per_side() const { return image_size / patch_size; }
    int n_patches() const { return patches_per_side() * patches_per_side(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int mlp_hidden() const { return static_cast<int>(mlp_ratio * width); }

    void validate() const;
    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json & j);
    bool operator==(const EncoderConfig &) const = default;
};

struct EncoderLayer {
    Mat norm1;                 // [1 × W]
    Mat wq, wk, wv, wo;        // [W × W]
    Mat norm2;                 // [1 × W]
    Mat w_fc, b_fc;            // [M × W], [1 × M]
    Mat w_proj, b_proj;        // [W × M], [1 × W]

    template <class F> void visit(const std::string & p, F && f) {
        f(p + "norm1", norm1);
        f(p + "wq", wq);
        f(p + "wk", wk);
        f(p + "wv", wv);
        f(p + "wo", wo);
        f(p + "norm2", norm2);
        f(p + "w_fc", w_fc);
        f(p + "b_fc", b_fc);
        f(p + "w_proj", w_proj);
        f(p + "b_proj", b_proj);
    }
};

// Patch transformer: linear patch embedding + learned positions, bidirectional
// pre-norm blocks with GELU MLPs, final RMS norm.
struct VisionEncoder {
    EncoderConfig config;
    Mat patch_proj;   // [W × P²C]
    Mat patch_bias;   // [1 × W]
    Mat pos_embed;    // [n_patches × W]
    std::vector<EncoderLayer> layers;
    Mat final_norm;   // [1 × W]

    template <class F> void visit(const std::string & p, F && f) {
        f(p + "patch_proj", patch_proj);
        f(p + "patch_bias", patch_bias);
        f(p + "pos_embed", pos_embed);
        for (int i = 0; i < static_cast<int>(layers.size()); ++i) {
            layers[i].visit(p + "layers." + std::to_string(i) + ".", f);
        }
        f(p + "final_norm", final_norm);
    }
};

// Linear → GELU → Linear into the decoder's embedding space.
struct Adapter {
    Mat w1, b1;  // [hidden × in], [1 × hidden]
    Mat w2, b2;  // [out × hidden], [1 × out]

    int in_width() const { return static_cast<int>(w1.cols()); }
    int hidden_width() const { return static_cast<int>(w1.rows()); }
    int out_width() const { return static_cast<int>(w2.rows()); }

    template <class F> void visit(const std::string & p, F && f) {
        f(p + "w1", w1);
        f(p + "b1", b1);
        f(p + "w2", w2);
        f(p + "b2", b2);
    }
};

struct TrainableScope {
    enum class Kind { full_encoder, last_k_layers, adapter_only };
    Kind kind = Kind::full_encoder;
    int k = 0;

    static TrainableScope full() { return {Kind::full_encoder, 0}; }
    static TrainableScope last_k(int k) { return {Kind::last_k_layers, k}; }
    static TrainableScope adapter_only() { return {Kind::adapter_only, 0}; }

    std::string to_string() const;
    static TrainableScope parse(const std::string & s);
    bool operator==(const TrainableScope &) const = default;
};

struct VisionBundle {
    VisionEncoder encoder;
    Adapter adapter;
    TrainableScope trainable_scope;

    template <class F> void visit(F && f) {
        encoder.visit("encoder.", f);
        adapter.visit("adapter.", f);
    }
    template <class F> void visit(F && f) const {
        const_cast<VisionBundle *>(this)->visit([&](const std::string & n, Mat & m) { f(n, static_cast<const Mat &>(m)); });
    }

    VisionBundle zeros_like() const;
    // Names of encoder parameters the scope leaves trainable (adapter excluded).
    bool encoder_param_trainable(const std::string & name) const;
};

VisionBundle init_vision_bundle(const EncoderConfig & config, int d_model, int adapter_hidden,
                                TrainableScope scope, std::uint64_t seed);

Mat encode_image(const VisionBundle & bundle, const Raster & image);
Mat adapt(const VisionBundle & bundle, const Mat & features);

// ---- training path -------------------------------------------------------

struct BundleActivations {
    Mat patches;
    Mat x0;
    struct Layer {
        Mat x_in;
        VecF inv1;
        Mat xn1, q, k, v;
        std::vector<Mat> probs;
        Mat att, h;
        VecF inv2;
        Mat xn2, fc_pre, fc_act;
    };
    std::vector<Layer> layers;
    Mat x_out;
    VecF inv_final;
    Mat features;
    Mat a_pre, a_act;
    Mat output;  // [n_patches × d_model]
};

BundleActivations bundle_forward(const VisionBundle & bundle, const Raster & image);

// Which bundle gradients to produce. encoder_from_layer = depth means no encoder layer.
struct BundleGradRequest {
    bool adapter = true;
    bool encoder_stem = false;  // patch projection + positions
    int encoder_from_layer = 0;
    bool encoder_final_norm = false;

    static BundleGradRequest from_scope(const VisionBundle & bundle);
    static BundleGradRequest adapter_only(const VisionBundle & bundle);
};

void bundle_backward(const VisionBundle & bundle, const BundleActivations & acts, const Mat & d_output,
                     const BundleGradRequest & request, VisionBundle & grads);

// ---- chat template + sequences ------------------------------------------

struct Span {
    int start = 0;
    int length = 0;
    int end() const { return start + length; }
    bool operator==(const Span &) const = default;
};

// <|bos|><|user|>\n{question}<|eot|><|assistant|>\n{response}<|eot|>
// An image inserts <|img|> × image_tokens immediately after "<|user|>\n".
struct ChatTemplate {
    int image_tokens = 16;

    std::string render(const std::string & question, const std::optional<std::string> & response, bool has_image) const;
};

struct MultimodalSequence {
    std::vector<int> token_ids;
    std::optional<Span> image_span;
    std::vector<std::uint8_t> loss_mask;   // 1 where the token is a supervised target
    std::vector<Span> response_groups;
    const Raster * image = nullptr;        // non-owning; must outlive the sequence
};

// Without a response the sequence ends after "<|assistant|>\n" (a generation prompt).
MultimodalSequence assemble_sequence(const ChatTemplate & tmpl, const Raster * image, const std::string & question,
                                     const std::optional<std::string> & response, const Tokenizer & tokenizer);

// Inference-only composition of a bundle and a decoder. Holds references;
// neither side is copied or modified.
struct VlmAssembly {
    const VisionBundle * bundle = nullptr;
    const DecoderModel * decoder = nullptr;
};

VlmAssembly graft(const VisionBundle & bundle, const DecoderModel & decoder);

// Embedding overrides carrying the adapted image features for a sequence.
std::vector<EmbeddingOverride> image_overrides(const VisionBundle & bundle, const MultimodalSequence & seq);

std::string checksum(const VisionBundle & bundle);

} // namespace forge
