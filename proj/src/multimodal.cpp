#include "forge/multimodal.hpp"

#include "forge/digest.hpp"
#include "forge/error.hpp"

#include <random>

namespace forge {

void EncoderConfig::validate() const {
    require(image_size > 0 && patch_size > 0 && channels > 0, ErrorKind::config, "encoder dimensions must be positive");
    require(image_size % patch_size == 0, ErrorKind::config, "image_size must be divisible by patch_size");
    require(width > 0 && depth > 0 && n_heads > 0 && width % n_heads == 0, ErrorKind::config,
            "encoder width must be divisible by n_heads");
    require(mlp_ratio > 0, ErrorKind::config, "encoder mlp_ratio must be positive");
}

nlohmann::json EncoderConfig::to_json() const {
    return {{"image_size", image_size}, {"channels", channels}, {"patch_size", patch_size}, {"width", width},
            {"depth", depth},           {"n_heads", n_heads},   {"mlp_ratio", mlp_ratio}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json & j) {
    static const char * known[] = {"image_size", "channels", "patch_size", "width", "depth", "n_heads", "mlp_ratio"};
    require(j.is_object(), ErrorKind::config, "encoder config must be an object");
    for (const auto & [key, _] : j.items()) {
        bool ok = false;
        for (const char * k : known) {
            ok = ok || key == k;
        }
        require(ok, ErrorKind::config, "unknown encoder key '" + key + "'");
    }
    EncoderConfig c;
    try {
        c.image_size = j.value("image_size", c.image_size);
        c.channels = j.value("channels", c.channels);
        c.patch_size = j.value("patch_size", c.patch_size);
        c.width = j.value("width", c.width);
        c.depth = j.value("depth", c.depth);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::config, std::string("encoder config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string TrainableScope::to_string() const {
    switch (kind) {
        case Kind::full_encoder: return "full_encoder";
        case Kind::adapter_only: return "adapter_only";
        case Kind::last_k_layers: return "last_k_layers(" + std::to_string(k) + ")";
    }
    return "?";
}

TrainableScope TrainableScope::parse(const std::string & s) {
    if (s == "full_encoder") {
        return full();
    }
    if (s == "adapter_only") {
        return adapter_only();
    }
    const std::string prefix = "last_k_layers(";
    if (s.starts_with(prefix) && s.ends_with(")")) {
        try {
            const int k = std::stoi(s.substr(prefix.size(), s.size() - prefix.size() - 1));
            require(k >= 1, ErrorKind::config, "last_k_layers needs k >= 1");
            return last_k(k);
        } catch (const std::logic_error &) {
        }
    }
    fail(ErrorKind::config, "unknown trainable scope '" + s + "'");
}

VisionBundle VisionBundle::zeros_like() const {
    VisionBundle z = *this;
    z.visit([](const std::string &, Mat & m) { m.setZero(); });
    return z;
}

bool VisionBundle::encoder_param_trainable(const std::string & name) const {
    switch (trainable_scope.kind) {
        case TrainableScope::Kind::full_encoder: return true;
        case TrainableScope::Kind::adapter_only: return false;
        case TrainableScope::Kind::last_k_layers: break;
    }
    const int depth = encoder.config.depth;
    const int first = std::max(0, depth - trainable_scope.k);
    if (name == "encoder.final_norm") {
        return true;
    }
    const std::string prefix = "encoder.layers.";
    if (name.starts_with(prefix)) {
        const int layer = std::stoi(name.substr(prefix.size()));
        return layer >= first;
    }
    // stem (patch projection, positions) belongs to the first layer's side
    return first == 0;
}

namespace {

constexpr float kInitStd = 0.02f;

Mat normal(std::mt19937_64 & rng, int rows, int cols) {
    std::normal_distribution<float> dist(0.0f, kInitStd);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
    return m;
}

Mat patchify(const EncoderConfig & c, const Raster & image) {
    require(image.channels == c.channels, ErrorKind::input, "image channel count does not match the encoder");
    require(image.height % c.patch_size == 0 && image.width % c.patch_size == 0, ErrorKind::input,
            "image dimensions must be divisible by the patch size");
    require(image.height == c.image_size && image.width == c.image_size, ErrorKind::input,
            "image must be " + std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
    const int side = c.patches_per_side();
    Mat patches(c.n_patches(), c.patch_dim());
    for (int py = 0; py < side; ++py) {
        for (int px = 0; px < side; ++px) {
            int col = 0;
            for (int y = 0; y < c.patch_size; ++y) {
                for (int x = 0; x < c.patch_size; ++x) {
                    for (int ch = 0; ch < c.channels; ++ch) {
                        patches(py * side + px, col++) = image.at(py * c.patch_size + y, px * c.patch_size + x, ch);
                    }
                }
            }
        }
    }
    return patches;
}

Mat gelu_of(const Mat & x) {
    return x.unaryExpr([](float v) { return nn::gelu(v); });
}

} // namespace

VisionBundle init_vision_bundle(const EncoderConfig & config, int d_model, int adapter_hidden, TrainableScope scope,
                                std::uint64_t seed) {
    config.validate();
    require(d_model > 0 && adapter_hidden > 0, ErrorKind::config, "adapter widths must be positive");
    if (scope.kind == TrainableScope::Kind::last_k_layers) {
        require(scope.k >= 1 && scope.k <= config.depth, ErrorKind::config, "last_k_layers k must be in [1, depth]");
    }
    std::mt19937_64 rng(seed);
    VisionBundle b;
    b.trainable_scope = scope;
    auto & e = b.encoder;
    e.config = config;
    const int w = config.width;
    const int m = config.mlp_hidden();
    e.patch_proj = normal(rng, w, config.patch_dim());
    e.patch_bias = Mat::Zero(1, w);
    e.pos_embed = normal(rng, config.n_patches(), w);
    e.layers.resize(config.depth);
    for (auto & l : e.layers) {
        l.norm1 = Mat::Ones(1, w);
        l.wq = normal(rng, w, w);
        l.wk = normal(rng, w, w);
        l.wv = normal(rng, w, w);
        l.wo = Mat::Zero(w, w);
        l.norm2 = Mat::Ones(1, w);
        l.w_fc = normal(rng, m, w);
        l.b_fc = Mat::Zero(1, m);
        l.w_proj = Mat::Zero(w, m);
        l.b_proj = Mat::Zero(1, w);
    }
    e.final_norm = Mat::Ones(1, w);
    b.adapter.w1 = normal(rng, adapter_hidden, w);
    b.adapter.b1 = Mat::Zero(1, adapter_hidden);
    b.adapter.w2 = normal(rng, d_model, adapter_hidden);
    b.adapter.b2 = Mat::Zero(1, d_model);
    return b;
}

BundleActivations bundle_forward(const VisionBundle & bundle, const Raster & image) {
    const auto & e = bundle.encoder;
    const auto & c = e.config;
    BundleActivations a;
    a.patches = patchify(c, image);
    a.x0 = nn::linear(a.patches, e.patch_proj, e.patch_bias) + e.pos_embed;
    Mat x = a.x0;
    a.layers.resize(e.layers.size());
    for (std::size_t i = 0; i < e.layers.size(); ++i) {
        const auto & l = e.layers[i];
        auto & s = a.layers[i];
        s.x_in = x;
        s.xn1 = nn::rms_norm(x, l.norm1, &s.inv1);
        s.q = nn::linear(s.xn1, l.wq);
        s.k = nn::linear(s.xn1, l.wk);
        s.v = nn::linear(s.xn1, l.wv);
        s.att = nn::attention(s.q, s.k, s.v, c.n_heads, false, 0, &s.probs);
        s.h = x + nn::linear(s.att, l.wo);
        s.xn2 = nn::rms_norm(s.h, l.norm2, &s.inv2);
        s.fc_pre = nn::linear(s.xn2, l.w_fc, l.b_fc);
        s.fc_act = gelu_of(s.fc_pre);
        x = s.h + nn::linear(s.fc_act, l.w_proj, l.b_proj);
    }
    a.x_out = x;
    a.features = nn::rms_norm(x, e.final_norm, &a.inv_final);
    const auto & ad = bundle.adapter;
    a.a_pre = nn::linear(a.features, ad.w1, ad.b1);
    a.a_act = gelu_of(a.a_pre);
    a.output = nn::linear(a.a_act, ad.w2, ad.b2);
    return a;
}

Mat encode_image(const VisionBundle & bundle, const Raster & image) {
    const auto & e = bundle.encoder;
    const auto & c = e.config;
    Mat x = nn::linear(patchify(c, image), e.patch_proj, e.patch_bias) + e.pos_embed;
    for (const auto & l : e.layers) {
        Mat xn1 = nn::rms_norm(x, l.norm1);
        Mat att = nn::attention(nn::linear(xn1, l.wq), nn::linear(xn1, l.wk), nn::linear(xn1, l.wv), c.n_heads, false, 0);
        Mat h = x + nn::linear(att, l.wo);
        Mat fc = gelu_of(nn::linear(nn::rms_norm(h, l.norm2), l.w_fc, l.b_fc));
        x = h + nn::linear(fc, l.w_proj, l.b_proj);
    }
    return nn::rms_norm(x, e.final_norm);
}

Mat adapt(const VisionBundle & bundle, const Mat & features) {
    const auto & ad = bundle.adapter;
    require(features.cols() == ad.in_width(), ErrorKind::input,
            "feature width " + std::to_string(features.cols()) + " does not match adapter input " +
                std::to_string(ad.in_width()));
    return nn::linear(gelu_of(nn::linear(features, ad.w1, ad.b1)), ad.w2, ad.b2);
}

BundleGradRequest BundleGradRequest::from_scope(const VisionBundle & bundle) {
    BundleGradRequest r;
    const int depth = bundle.encoder.config.depth;
    switch (bundle.trainable_scope.kind) {
        case TrainableScope::Kind::full_encoder:
            r.encoder_stem = true;
            r.encoder_from_layer = 0;
            r.encoder_final_norm = true;
            break;
        case TrainableScope::Kind::last_k_layers:
            r.encoder_from_layer = std::max(0, depth - bundle.trainable_scope.k);
            r.encoder_stem = r.encoder_from_layer == 0;
            r.encoder_final_norm = true;
            break;
        case TrainableScope::Kind::adapter_only:
            r.encoder_from_layer = depth;
            break;
    }
    return r;
}

BundleGradRequest BundleGradRequest::adapter_only(const VisionBundle & bundle) {
    BundleGradRequest r;
    r.encoder_from_layer = bundle.encoder.config.depth;
    return r;
}

void bundle_backward(const VisionBundle & bundle, const BundleActivations & a, const Mat & d_output,
                     const BundleGradRequest & request, VisionBundle & grads) {
    const auto & ad = bundle.adapter;
    auto & ga = grads.adapter;
    const auto & e = bundle.encoder;
    const int depth = e.config.depth;
    const bool need_encoder = request.encoder_stem || request.encoder_final_norm || request.encoder_from_layer < depth;

    Mat d_act;
    if (request.adapter) {
        d_act = nn::linear_backward(a.a_act, ad.w2, d_output, ga.w2, ga.b2);
    } else if (need_encoder) {
        d_act = d_output * ad.w2;
    } else {
        return;
    }
    Mat d_pre = d_act.cwiseProduct(a.a_pre.unaryExpr([](float v) { return nn::gelu_grad(v); }));
    Mat d_feat = request.adapter ? nn::linear_backward(a.features, ad.w1, d_pre, ga.w1, ga.b1) : Mat(d_pre * ad.w1);
    if (!need_encoder) {
        return;
    }
    auto & ge = grads.encoder;
    Mat scratch_gain = Mat::Zero(1, e.config.width);
    Mat dx = nn::rms_norm_backward(a.x_out, e.final_norm, a.inv_final, d_feat,
                                   request.encoder_final_norm ? ge.final_norm : scratch_gain);
    const int lowest = request.encoder_stem ? 0 : request.encoder_from_layer;
    for (int i = depth - 1; i >= lowest; --i) {
        const auto & l = e.layers[i];
        const auto & s = a.layers[i];
        EncoderLayer * g = i >= request.encoder_from_layer ? &ge.layers[i] : nullptr;
        Mat d_fc_act;
        if (g) {
            d_fc_act = nn::linear_backward(s.fc_act, l.w_proj, dx, g->w_proj, g->b_proj);
        } else {
            d_fc_act = dx * l.w_proj;
        }
        Mat d_fc_pre = d_fc_act.cwiseProduct(s.fc_pre.unaryExpr([](float v) { return nn::gelu_grad(v); }));
        Mat d_xn2 = g ? nn::linear_backward(s.xn2, l.w_fc, d_fc_pre, g->w_fc, g->b_fc) : Mat(d_fc_pre * l.w_fc);
        Mat gain2 = Mat::Zero(1, e.config.width);
        Mat d_h = dx + nn::rms_norm_backward(s.h, l.norm2, s.inv2, d_xn2, g ? g->norm2 : gain2);
        Mat d_att = g ? nn::linear_backward(s.att, l.wo, d_h, g->wo) : Mat(d_h * l.wo);
        Mat dq, dk, dv;
        nn::attention_backward(s.q, s.k, s.v, s.probs, d_att, e.config.n_heads, dq, dk, dv);
        Mat d_xn1;
        if (g) {
            d_xn1 = nn::linear_backward(s.xn1, l.wq, dq, g->wq);
            d_xn1 += nn::linear_backward(s.xn1, l.wk, dk, g->wk);
            d_xn1 += nn::linear_backward(s.xn1, l.wv, dv, g->wv);
        } else {
            d_xn1 = dq * l.wq + dk * l.wk + dv * l.wv;
        }
        Mat gain1 = Mat::Zero(1, e.config.width);
        dx = d_h + nn::rms_norm_backward(s.x_in, l.norm1, s.inv1, d_xn1, g ? g->norm1 : gain1);
    }
    if (request.encoder_stem) {
        ge.pos_embed += dx;
        nn::linear_backward(a.patches, e.patch_proj, dx, ge.patch_proj, ge.patch_bias);
    }
}

std::string ChatTemplate::render(const std::string & question, const std::optional<std::string> & response,
                                 bool has_image) const {
    std::string out;
    out += special::bos;
    out += special::user;
    out += "\n";
    if (has_image) {
        for (int i = 0; i < image_tokens; ++i) {
            out += special::img;
        }
    }
    out += question;
    out += special::eot;
    out += special::assistant;
    out += "\n";
    if (response) {
        out += *response;
        out += special::eot;
    }
    return out;
}

MultimodalSequence assemble_sequence(const ChatTemplate & tmpl, const Raster * image, const std::string & question,
                                     const std::optional<std::string> & response, const Tokenizer & tokenizer) {
    require(!question.empty(), ErrorKind::assembly, "a turn needs a non-empty question");
    if (response) {
        require(!response->empty(), ErrorKind::assembly, "an assistant turn needs a non-empty response");
    }
    MultimodalSequence seq;
    seq.image = image;
    auto push = [&](int id, bool supervised) {
        seq.token_ids.push_back(id);
        seq.loss_mask.push_back(supervised ? 1 : 0);
    };
    push(tokenizer.bos(), false);
    push(tokenizer.user(), false);
    for (int id : tokenizer.encode("\n")) {
        push(id, false);
    }
    if (image) {
        seq.image_span = Span{static_cast<int>(seq.token_ids.size()), tmpl.image_tokens};
        for (int i = 0; i < tmpl.image_tokens; ++i) {
            push(tokenizer.img(), false);
        }
    }
    for (int id : tokenizer.encode(question)) {
        push(id, false);
    }
    push(tokenizer.eot(), false);
    push(tokenizer.assistant(), false);
    for (int id : tokenizer.encode("\n")) {
        push(id, false);
    }
    if (response) {
        const int start = static_cast<int>(seq.token_ids.size());
        for (int id : tokenizer.encode(*response)) {
            push(id, true);
        }
        push(tokenizer.eot(), true);
        seq.response_groups.push_back({start, static_cast<int>(seq.token_ids.size()) - start});
    }
    return seq;
}

VlmAssembly graft(const VisionBundle & bundle, const DecoderModel & decoder) {
    require(bundle.adapter.out_width() == decoder.spec.d_model, ErrorKind::graft,
            "adapter output width " + std::to_string(bundle.adapter.out_width()) + " does not match decoder d_model " +
                std::to_string(decoder.spec.d_model));
    return {&bundle, &decoder};
}

std::vector<EmbeddingOverride> image_overrides(const VisionBundle & bundle, const MultimodalSequence & seq) {
    if (!seq.image_span) {
        return {};
    }
    require(seq.image != nullptr, ErrorKind::input, "sequence has an image span but no image");
    require(seq.image_span->length == bundle.encoder.config.n_patches(), ErrorKind::input,
            "image span length must equal the encoder's patch count");
    return {EmbeddingOverride{seq.image_span->start, adapt(bundle, encode_image(bundle, *seq.image))}};
}

std::string checksum(const VisionBundle & bundle) { return param_checksum(bundle); }

} // namespace forge
