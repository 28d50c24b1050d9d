#pragma once

#include "forge/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace forge {

enum class NormKind { rms };
enum class PosKind { rotary };

struct ModelSpec {
    int n_layers = 12;
    int d_model = 64;
    int n_heads = 4;
    int vocab_size = 72;
    int max_seq_len = 256;
    NormKind norm_kind = NormKind::rms;
    PosKind pos_kind = PosKind::rotary;
    double mlp_ratio = 4.0;

    // Gated MLP width: two thirds of mlp_ratio·d_model rounded to a multiple of 8.
    int mlp_hidden() const;
    int head_dim() const { return d_model / n_heads; }

    void validate() const;

    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json & j);

    bool operator==(const ModelSpec &) const = default;
};

struct DecoderLayer {
    Mat attn_norm;  // [1 × D]
    Mat wq, wk, wv, wo;  // [D × D]
    Mat mlp_norm;   // [1 × D]
    Mat w_gate, w_up;  // [H × D]
    Mat w_down;     // [D × H]

    template <class F> void visit(const std::string & prefix, F && f) {
        f(prefix + "attn_norm", attn_norm);
        f(prefix + "wq", wq);
        f(prefix + "wk", wk);
        f(prefix + "wv", wv);
        f(prefix + "wo", wo);
        f(prefix + "mlp_norm", mlp_norm);
        f(prefix + "w_gate", w_gate);
        f(prefix + "w_up", w_up);
        f(prefix + "w_down", w_down);
    }
    template <class F> void visit(const std::string & prefix, F && f) const {
        const_cast<DecoderLayer *>(this)->visit(prefix, [&](const std::string & n, Mat & m) { f(n, static_cast<const Mat &>(m)); });
    }
};

struct DecoderModel {
    ModelSpec spec;
    Mat token_embedding;  // [V × D]
    std::vector<DecoderLayer> layers;
    Mat final_norm;       // [1 × D]
    Mat unembedding;      // [V × D], untied from the embedding

    static std::string layer_prefix(int index) { return "layers." + std::to_string(index) + "."; }

    // Visits every parameter as (name, matrix) in a fixed order.
    template <class F> void visit(F && f) {
        f(std::string("token_embedding"), token_embedding);
        for (int i = 0; i < static_cast<int>(layers.size()); ++i) {
            layers[i].visit(layer_prefix(i), f);
        }
        f(std::string("final_norm"), final_norm);
        f(std::string("unembedding"), unembedding);
    }
    template <class F> void visit(F && f) const {
        const_cast<DecoderModel *>(this)->visit([&](const std::string & n, Mat & m) { f(n, static_cast<const Mat &>(m)); });
    }

    // Same shapes, all zeros; used as a gradient buffer.
    DecoderModel zeros_like() const;
    std::size_t parameter_count() const;
    int n_layers() const { return static_cast<int>(layers.size()); }
};

// Replaces token embeddings at rows [start, start + rows.rows()) before layer 0.
struct EmbeddingOverride {
    int start = 0;
    Mat rows;
};

struct HiddenTrace {
    std::vector<Mat> hidden_states;  // L entries of [N × D]; entry ℓ is the output of layer ℓ
    MatD logits;                     // [N × V]
};

DecoderModel init_model(const ModelSpec & spec, std::uint64_t seed);

// Inference forward that keeps every layer's output.
HiddenTrace forward_with_hidden(const DecoderModel & model, std::span<const int> token_ids,
                                std::span<const EmbeddingOverride> overrides = {});

// Final norm and unembedding in double precision: logits and softmax rows.
MatD project_logits(const Mat & hidden, const DecoderModel & model);
MatD unembed(const Mat & hidden, const DecoderModel & model);
MatD softmax_rows(const MatD & logits);

// Token embedding lookup with overrides applied; validates ids and spans.
Mat embed_tokens(const DecoderModel & model, std::span<const int> token_ids,
                 std::span<const EmbeddingOverride> overrides);

// ---- training path -------------------------------------------------------

struct LayerActivations {
    Mat x_in;
    VecF inv_rms1;
    Mat xn1, q, k, v;
    std::vector<Mat> probs;
    Mat att;
    Mat h;
    VecF inv_rms2;
    Mat xn2, gate, up, act;
    Mat sig;  // sigmoid(gate)
};

struct DecoderActivations {
    std::vector<LayerActivations> layers;
    Mat x_out;       // output of the last layer
    VecF inv_rms_final;
    Mat x_final;     // normalized final hidden
    Mat logits;      // [N × V] float logits used by the loss
};

// Which gradients the backward pass must produce. Layers below the lowest
// flagged layer are skipped entirely unless input gradients are requested.
struct GradRequest {
    bool token_embedding = false;
    bool final_norm = false;
    bool unembedding = false;
    bool input = false;
    std::vector<bool> layers;

    static GradRequest all(int n_layers);
    static GradRequest none(int n_layers);
    bool any_layer() const;
};

DecoderActivations decoder_forward(const DecoderModel & model, const Mat & x0);

// Accumulates requested parameter gradients into grads; returns dL/dx0 when
// request.input is set (empty matrix otherwise).
Mat decoder_backward(const DecoderModel & model, const DecoderActivations & acts, const Mat & d_logits,
                     const GradRequest & request, DecoderModel & grads, std::span<const int> token_ids);

// ---- incremental decoding -----------------------------------------------

// Greedy decoding helper with a per-layer key/value cache.
class DecodeSession {
public:
    explicit DecodeSession(const DecoderModel & model);

    // Feeds positions [position(), position() + x.rows()) and returns the
    // double-precision logits of the last fed row.
    Eigen::VectorXd feed(const Mat & x);
    Eigen::VectorXd feed_tokens(std::span<const int> token_ids, std::span<const EmbeddingOverride> overrides = {});

    int position() const { return position_; }

private:
    const DecoderModel & model_;
    std::vector<Mat> keys_;
    std::vector<Mat> values_;
    int position_ = 0;
};

// 64-bit FNV-1a over parameter names, shapes, and raw float bytes.
std::string checksum(const DecoderModel & model);

} // namespace forge
