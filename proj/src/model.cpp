#include "forge/model.hpp"

#include "forge/digest.hpp"
#include "forge/error.hpp"

#include <cmath>
#include <random>

namespace forge {

int ModelSpec::mlp_hidden() const {
    const double raw = 2.0 / 3.0 * mlp_ratio * d_model;
    const int rounded = static_cast<int>(std::lround(raw / 8.0)) * 8;
    return rounded < 8 ? 8 : rounded;
}

void ModelSpec::validate() const {
    require(n_layers >= 4, ErrorKind::config, "n_layers must be >= 4 (got " + std::to_string(n_layers) + ")");
    require(d_model > 0, ErrorKind::config, "d_model must be positive");
    require(n_heads > 0, ErrorKind::config, "n_heads must be positive");
    require(d_model % n_heads == 0, ErrorKind::config, "d_model must be divisible by n_heads");
    require(head_dim() % 2 == 0, ErrorKind::config, "rotary positions need an even head dimension");
    require(vocab_size > 0, ErrorKind::config, "vocab_size must be positive");
    require(max_seq_len > 0, ErrorKind::config, "max_seq_len must be positive");
    require(mlp_ratio > 0.0, ErrorKind::config, "mlp_ratio must be positive");
}

nlohmann::json ModelSpec::to_json() const {
    return {
        {"n_layers", n_layers},   {"d_model", d_model},         {"n_heads", n_heads},
        {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len}, {"norm_kind", "rms"},
        {"pos_kind", "rotary"},   {"mlp_ratio", mlp_ratio},
    };
}

ModelSpec ModelSpec::from_json(const nlohmann::json & j) {
    static const char * known[] = {"n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len",
                                   "norm_kind", "pos_kind", "mlp_ratio"};
    require(j.is_object(), ErrorKind::config, "model spec must be an object");
    for (const auto & [key, _] : j.items()) {
        bool ok = false;
        for (const char * k : known) {
            ok = ok || key == k;
        }
        require(ok, ErrorKind::config, "unknown model spec key '" + key + "'");
    }
    ModelSpec s;
    try {
        s.n_layers = j.value("n_layers", s.n_layers);
        s.d_model = j.value("d_model", s.d_model);
        s.n_heads = j.value("n_heads", s.n_heads);
        s.vocab_size = j.value("vocab_size", s.vocab_size);
        s.max_seq_len = j.value("max_seq_len", s.max_seq_len);
        s.mlp_ratio = j.value("mlp_ratio", s.mlp_ratio);
        require(j.value("norm_kind", std::string("rms")) == "rms", ErrorKind::config, "norm_kind must be 'rms'");
        require(j.value("pos_kind", std::string("rotary")) == "rotary", ErrorKind::config, "pos_kind must be 'rotary'");
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::config, std::string("model spec: ") + e.what());
    }
    s.validate();
    return s;
}

DecoderModel DecoderModel::zeros_like() const {
    DecoderModel z = *this;
    z.visit([](const std::string &, Mat & m) { m.setZero(); });
    return z;
}

std::size_t DecoderModel::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string &, const Mat & m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

namespace {

constexpr float kInitStd = 0.02f;

Mat normal_matrix(std::mt19937_64 & rng, int rows, int cols, float std = kInitStd) {
    std::normal_distribution<float> dist(0.0f, std);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
    return m;
}

Mat ones_row(int cols) { return Mat::Ones(1, cols); }

} // namespace

DecoderModel init_model(const ModelSpec & spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    const int d = spec.d_model;
    const int h = spec.mlp_hidden();
    // fan-in scaling; residual outputs shrink further with depth
    const float in_d = 1.0f / std::sqrt(static_cast<float>(d));
    const float in_h = 1.0f / std::sqrt(static_cast<float>(h));
    const float depth = 1.0f / std::sqrt(2.0f * static_cast<float>(spec.n_layers));
    DecoderModel m;
    m.spec = spec;
    m.token_embedding = normal_matrix(rng, spec.vocab_size, d);
    m.layers.resize(spec.n_layers);
    for (auto & layer : m.layers) {
        layer.attn_norm = ones_row(d);
        layer.wq = normal_matrix(rng, d, d, in_d);
        layer.wk = normal_matrix(rng, d, d, in_d);
        layer.wv = normal_matrix(rng, d, d, in_d);
        layer.wo = normal_matrix(rng, d, d, in_d * depth);
        layer.mlp_norm = ones_row(d);
        layer.w_gate = normal_matrix(rng, h, d, in_d);
        layer.w_up = normal_matrix(rng, h, d, in_d);
        layer.w_down = normal_matrix(rng, d, h, in_h * depth);
    }
    m.final_norm = ones_row(d);
    m.unembedding = normal_matrix(rng, spec.vocab_size, d);
    return m;
}

Mat embed_tokens(const DecoderModel & model, std::span<const int> token_ids,
                 std::span<const EmbeddingOverride> overrides) {
    const int n = static_cast<int>(token_ids.size());
    const int d = model.spec.d_model;
    require(n > 0, ErrorKind::input, "empty token sequence");
    require(n <= model.spec.max_seq_len, ErrorKind::input,
            "sequence length " + std::to_string(n) + " exceeds max_seq_len " + std::to_string(model.spec.max_seq_len));
    Mat x(n, d);
    for (int i = 0; i < n; ++i) {
        const int t = token_ids[i];
        require(t >= 0 && t < model.spec.vocab_size, ErrorKind::input,
                "token id " + std::to_string(t) + " at position " + std::to_string(i) + " out of range");
        x.row(i) = model.token_embedding.row(t);
    }
    std::vector<bool> covered(n, false);
    for (const auto & o : overrides) {
        const int len = static_cast<int>(o.rows.rows());
        require(o.start >= 0 && len > 0 && o.start + len <= n, ErrorKind::input, "override span out of range");
        require(o.rows.cols() == d, ErrorKind::input, "override width must equal d_model");
        for (int i = o.start; i < o.start + len; ++i) {
            require(!covered[i], ErrorKind::input, "override spans overlap");
            covered[i] = true;
        }
        x.middleRows(o.start, len) = o.rows;
    }
    return x;
}

namespace {

// One decoder block. past_k/past_v hold earlier positions for incremental
// decoding; acts (training) records everything the backward pass needs.
Mat layer_forward(const DecoderLayer & layer, const ModelSpec & spec, const Mat & x, int pos0, Mat * past_k,
                  Mat * past_v, LayerActivations * acts) {
    VecF inv1;
    Mat xn1 = nn::rms_norm(x, layer.attn_norm, &inv1);
    Mat q = nn::linear(xn1, layer.wq);
    Mat k = nn::linear(xn1, layer.wk);
    Mat v = nn::linear(xn1, layer.wv);
    nn::rope(q, spec.n_heads, pos0);
    nn::rope(k, spec.n_heads, pos0);
    if (past_k) {
        Mat kk(past_k->rows() + k.rows(), k.cols());
        kk << *past_k, k;
        Mat vv(past_v->rows() + v.rows(), v.cols());
        vv << *past_v, v;
        *past_k = std::move(kk);
        *past_v = std::move(vv);
    }
    const Mat & keys = past_k ? *past_k : k;
    const Mat & values = past_v ? *past_v : v;
    std::vector<Mat> probs;
    Mat att = nn::attention(q, keys, values, spec.n_heads, true, pos0, acts ? &probs : nullptr);
    Mat h = x + nn::linear(att, layer.wo);
    VecF inv2;
    Mat xn2 = nn::rms_norm(h, layer.mlp_norm, &inv2);
    Mat gate = nn::linear(xn2, layer.w_gate);
    Mat up = nn::linear(xn2, layer.w_up);
    Mat sig = (1.0f + (-gate.array()).exp()).inverse().matrix();
    Mat act = (gate.array() * sig.array() * up.array()).matrix();
    Mat out = h + nn::linear(act, layer.w_down);
    if (acts) {
        acts->x_in = x;
        acts->inv_rms1 = std::move(inv1);
        acts->xn1 = std::move(xn1);
        acts->q = std::move(q);
        acts->k = std::move(k);
        acts->v = std::move(v);
        acts->probs = std::move(probs);
        acts->att = std::move(att);
        acts->h = std::move(h);
        acts->inv_rms2 = std::move(inv2);
        acts->xn2 = std::move(xn2);
        acts->gate = std::move(gate);
        acts->up = std::move(up);
        acts->act = std::move(act);
        acts->sig = std::move(sig);
    }
    return out;
}

Mat layer_backward(const DecoderLayer & layer, const ModelSpec & spec, const LayerActivations & a, const Mat & d_out,
                   DecoderLayer * grads) {
    DecoderLayer scratch;
    const bool want = grads != nullptr;
    auto & g = want ? *grads : scratch;
    if (!want) {
        g.attn_norm = Mat::Zero(1, layer.attn_norm.cols());
        g.mlp_norm = Mat::Zero(1, layer.mlp_norm.cols());
    }
    // MLP branch
    Mat d_act = want ? nn::linear_backward(a.act, layer.w_down, d_out, g.w_down) : Mat(d_out * layer.w_down);
    const auto g_arr = a.gate.array();
    const auto s_arr = a.sig.array();
    Mat d_up = (d_act.array() * g_arr * s_arr).matrix();
    Mat d_gate = (d_act.array() * a.up.array() * s_arr * (1.0f + g_arr * (1.0f - s_arr))).matrix();
    Mat d_xn2;
    if (want) {
        d_xn2 = nn::linear_backward(a.xn2, layer.w_gate, d_gate, g.w_gate);
        d_xn2 += nn::linear_backward(a.xn2, layer.w_up, d_up, g.w_up);
    } else {
        d_xn2 = d_gate * layer.w_gate + d_up * layer.w_up;
    }
    Mat d_h = d_out + nn::rms_norm_backward(a.h, layer.mlp_norm, a.inv_rms2, d_xn2, g.mlp_norm);
    // attention branch
    Mat d_att = want ? nn::linear_backward(a.att, layer.wo, d_h, g.wo) : Mat(d_h * layer.wo);
    Mat dq, dk, dv;
    nn::attention_backward(a.q, a.k, a.v, a.probs, d_att, spec.n_heads, dq, dk, dv);
    nn::rope(dq, spec.n_heads, 0, true);
    nn::rope(dk, spec.n_heads, 0, true);
    Mat d_xn1;
    if (want) {
        d_xn1 = nn::linear_backward(a.xn1, layer.wq, dq, g.wq);
        d_xn1 += nn::linear_backward(a.xn1, layer.wk, dk, g.wk);
        d_xn1 += nn::linear_backward(a.xn1, layer.wv, dv, g.wv);
    } else {
        d_xn1 = dq * layer.wq + dk * layer.wk + dv * layer.wv;
    }
    return d_h + nn::rms_norm_backward(a.x_in, layer.attn_norm, a.inv_rms1, d_xn1, g.attn_norm);
}

} // namespace

HiddenTrace forward_with_hidden(const DecoderModel & model, std::span<const int> token_ids,
                                std::span<const EmbeddingOverride> overrides) {
    Mat x = embed_tokens(model, token_ids, overrides);
    HiddenTrace trace;
    trace.hidden_states.reserve(model.layers.size());
    for (const auto & layer : model.layers) {
        x = layer_forward(layer, model.spec, x, 0, nullptr, nullptr, nullptr);
        trace.hidden_states.push_back(x);
    }
    trace.logits = project_logits(x, model);
    return trace;
}

MatD project_logits(const Mat & hidden, const DecoderModel & model) {
    require(hidden.cols() == model.spec.d_model, ErrorKind::input,
            "hidden width " + std::to_string(hidden.cols()) + " does not match d_model " +
                std::to_string(model.spec.d_model));
    const MatD h = hidden.cast<double>();
    const Eigen::RowVectorXd gain = model.final_norm.row(0).cast<double>();
    const auto d = static_cast<double>(hidden.cols());
    MatD normed(h.rows(), h.cols());
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
        const double r = 1.0 / std::sqrt(h.row(i).squaredNorm() / d + static_cast<double>(nn::kRmsEps));
        normed.row(i) = (h.row(i) * r).cwiseProduct(gain);
    }
    MatD logits(h.rows(), model.spec.vocab_size);
    logits.noalias() = normed * model.unembedding.cast<double>().transpose();
    return logits;
}

MatD softmax_rows(const MatD & logits) {
    MatD p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        p.row(i) = (logits.row(i).array() - m).exp().matrix();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

MatD unembed(const Mat & hidden, const DecoderModel & model) {
    return softmax_rows(project_logits(hidden, model));
}

GradRequest GradRequest::all(int n_layers) {
    GradRequest r;
    r.token_embedding = r.final_norm = r.unembedding = r.input = true;
    r.layers.assign(n_layers, true);
    return r;
}

GradRequest GradRequest::none(int n_layers) {
    GradRequest r;
    r.layers.assign(n_layers, false);
    return r;
}

bool GradRequest::any_layer() const {
    for (bool b : layers) {
        if (b) {
            return true;
        }
    }
    return false;
}

DecoderActivations decoder_forward(const DecoderModel & model, const Mat & x0) {
    DecoderActivations acts;
    acts.layers.resize(model.layers.size());
    Mat x = x0;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        x = layer_forward(model.layers[i], model.spec, x, 0, nullptr, nullptr, &acts.layers[i]);
    }
    acts.x_out = std::move(x);
    acts.x_final = nn::rms_norm(acts.x_out, model.final_norm, &acts.inv_rms_final);
    acts.logits = nn::linear(acts.x_final, model.unembedding);
    return acts;
}

Mat decoder_backward(const DecoderModel & model, const DecoderActivations & acts, const Mat & d_logits,
                     const GradRequest & request, DecoderModel & grads, std::span<const int> token_ids) {
    const int n_layers = model.n_layers();
    int lowest = n_layers;
    for (int i = 0; i < n_layers; ++i) {
        if (request.layers[i]) {
            lowest = i;
            break;
        }
    }
    if (request.input || request.token_embedding) {
        lowest = 0;
    }
    const bool need_trunk = lowest < n_layers;

    Mat d_final;
    if (request.unembedding) {
        d_final = nn::linear_backward(acts.x_final, model.unembedding, d_logits, grads.unembedding);
    } else if (need_trunk || request.final_norm) {
        d_final = d_logits * model.unembedding;
    } else {
        return {};
    }
    Mat scratch_gain = Mat::Zero(1, model.spec.d_model);
    Mat d_x = nn::rms_norm_backward(acts.x_out, model.final_norm, acts.inv_rms_final, d_final,
                                    request.final_norm ? grads.final_norm : scratch_gain);
    if (!need_trunk) {
        return {};
    }
    for (int i = n_layers - 1; i >= lowest; --i) {
        d_x = layer_backward(model.layers[i], model.spec, acts.layers[i], d_x,
                             request.layers[i] ? &grads.layers[i] : nullptr);
    }
    if (request.token_embedding) {
        for (std::size_t i = 0; i < token_ids.size(); ++i) {
            grads.token_embedding.row(token_ids[i]) += d_x.row(static_cast<Eigen::Index>(i));
        }
    }
    return request.input ? d_x : Mat();
}

DecodeSession::DecodeSession(const DecoderModel & model)
    : model_(model), keys_(model.layers.size()), values_(model.layers.size()) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        keys_[i].resize(0, model.spec.d_model);
        values_[i].resize(0, model.spec.d_model);
    }
}

Eigen::VectorXd DecodeSession::feed(const Mat & x_in) {
    require(x_in.rows() > 0, ErrorKind::input, "nothing to feed");
    require(position_ + x_in.rows() <= model_.spec.max_seq_len, ErrorKind::input, "decoding exceeds max_seq_len");
    Mat x = x_in;
    for (std::size_t i = 0; i < model_.layers.size(); ++i) {
        x = layer_forward(model_.layers[i], model_.spec, x, position_, &keys_[i], &values_[i], nullptr);
    }
    position_ += static_cast<int>(x_in.rows());
    const Mat last = x.bottomRows(1);
    return project_logits(last, model_).row(0).transpose();
}

Eigen::VectorXd DecodeSession::feed_tokens(std::span<const int> token_ids,
                                           std::span<const EmbeddingOverride> overrides) {
    return feed(embed_tokens(model_, token_ids, overrides));
}

std::string checksum(const DecoderModel & model) { return param_checksum(model); }

} // namespace forge
