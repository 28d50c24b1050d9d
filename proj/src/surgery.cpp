#include "forge/surgery.hpp"

#include "forge/error.hpp"

#include <cstring>

namespace forge {

namespace {

std::size_t layer_params(const ModelSpec & s) {
    const std::size_t d = s.d_model;
    const std::size_t h = s.mlp_hidden();
    return 2 * d + 4 * d * d + 3 * d * h;
}

std::size_t total_params(const ModelSpec & s, int layers) {
    const std::size_t d = s.d_model;
    return 2 * static_cast<std::size_t>(s.vocab_size) * d + d + static_cast<std::size_t>(layers) * layer_params(s);
}

void mark_layer(std::set<std::string> & keys, const DecoderModel & model, int layer) {
    model.layers[layer].visit(DecoderModel::layer_prefix(layer),
                              [&](const std::string & name, const Mat &) { keys.insert(name); });
}

} // namespace

double SurgeryPlan::parameter_fraction(const ModelSpec & spec) const {
    return static_cast<double>(total_params(spec, surrogate_layers())) / static_cast<double>(total_params(spec, n_layers));
}

nlohmann::json SurgeryPlan::to_json() const {
    return {{"first_replaced", first_replaced}, {"last_replaced", last_replaced},
            {"translator_init_layer", translator_init_layer}, {"target_layers", n_layers},
            {"surrogate_layers", surrogate_layers()}};
}

SurgeryPlan plan_surgery(const ModelSpec & spec, int first_replaced, int last_replaced) {
    spec.validate();
    const int last = spec.n_layers - 1;
    require(first_replaced >= 1, ErrorKind::plan, "layer 0 must be preserved (first_replaced = " +
                                                      std::to_string(first_replaced) + ")");
    require(last_replaced <= last - 1, ErrorKind::plan,
            "layer " + std::to_string(last) + " must be preserved (last_replaced = " + std::to_string(last_replaced) + ")");
    require(first_replaced <= last_replaced, ErrorKind::plan,
            "inverted range " + std::to_string(first_replaced) + ".." + std::to_string(last_replaced));
    return {spec.n_layers, first_replaced, last_replaced, first_replaced};
}

nlohmann::json SurrogateModel::manifest_fields() const {
    return {{"first_replaced", plan.first_replaced},
            {"last_replaced", plan.last_replaced},
            {"target_layers", plan.n_layers},
            {"parent_checksum", parent_checksum},
            {"source_layers", source_layers},
            {"trainable_keys", std::vector<std::string>(trainable_keys.begin(), trainable_keys.end())}};
}

SurrogateModel build_surrogate(const DecoderModel & target, const SurgeryPlan & plan) {
    require(plan.n_layers == target.n_layers(), ErrorKind::surgery,
            "plan expects " + std::to_string(plan.n_layers) + " layers, target has " + std::to_string(target.n_layers()));
    require(plan.translator_init_layer == plan.first_replaced, ErrorKind::surgery,
            "translator must be initialized from the first replaced layer");
    require(plan.first_replaced >= 1 && plan.last_replaced <= target.n_layers() - 2 &&
                plan.first_replaced <= plan.last_replaced,
            ErrorKind::surgery, "plan range invalid for this target");
    SurrogateModel s;
    s.plan = plan;
    s.parent_checksum = checksum(target);
    s.model.spec = target.spec;
    s.model.token_embedding = target.token_embedding;
    s.model.final_norm = target.final_norm;
    s.model.unembedding = target.unembedding;
    for (int i = 0; i < plan.first_replaced; ++i) {
        s.source_layers.push_back(i);
    }
    s.source_layers.push_back(plan.first_replaced);
    for (int i = plan.last_replaced + 1; i < target.n_layers(); ++i) {
        s.source_layers.push_back(i);
    }
    for (int src : s.source_layers) {
        s.model.layers.push_back(target.layers[src]);
    }
    s.model.spec.n_layers = static_cast<int>(s.model.layers.size());
    mark_layer(s.trainable_keys, s.model, s.translator_index());
    return s;
}

SurrogateModel build_control_variant(const DecoderModel & target, const SurgeryPlan & plan) {
    SurrogateModel s = build_surrogate(target, plan);
    for (int layer = plan.first_replaced - 2; layer >= 0; layer -= 2) {
        mark_layer(s.trainable_keys, s.model, layer);
    }
    return s;
}

SurrogateModel surrogate_from_manifest(DecoderModel model, const nlohmann::json & manifest) {
    SurrogateModel s;
    try {
        s.plan.n_layers = manifest.at("target_layers").get<int>();
        s.plan.first_replaced = manifest.at("first_replaced").get<int>();
        s.plan.last_replaced = manifest.at("last_replaced").get<int>();
        s.plan.translator_init_layer = s.plan.first_replaced;
        s.parent_checksum = manifest.at("parent_checksum").get<std::string>();
        s.source_layers = manifest.at("source_layers").get<std::vector<int>>();
        for (const auto & k : manifest.at("trainable_keys")) {
            s.trainable_keys.insert(k.get<std::string>());
        }
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::load, std::string("surrogate manifest: ") + e.what());
    }
    require(static_cast<int>(s.source_layers.size()) == model.n_layers() &&
                model.n_layers() == s.plan.surrogate_layers(),
            ErrorKind::load, "surrogate manifest layer bookkeeping does not match the archive");
    s.model = std::move(model);
    return s;
}

std::vector<std::string> frozen_mismatches(const SurrogateModel & surrogate, const DecoderModel & target) {
    std::vector<std::string> bad;
    auto compare = [&](const std::string & name, const Mat & a, const Mat & b) {
        if (surrogate.is_trainable(name)) {
            return;
        }
        if (a.rows() != b.rows() || a.cols() != b.cols() ||
            std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) != 0) {
            bad.push_back(name);
        }
    };
    const auto & m = surrogate.model;
    compare("token_embedding", m.token_embedding, target.token_embedding);
    compare("final_norm", m.final_norm, target.final_norm);
    compare("unembedding", m.unembedding, target.unembedding);
    for (int i = 0; i < m.n_layers(); ++i) {
        const auto & src = target.layers[surrogate.source_layers[i]];
        std::vector<const Mat *> theirs;
        src.visit("", [&](const std::string &, const Mat & t) { theirs.push_back(&t); });
        std::size_t j = 0;
        m.layers[i].visit(DecoderModel::layer_prefix(i),
                          [&](const std::string & name, const Mat & mine) { compare(name, mine, *theirs[j++]); });
    }
    return bad;
}

std::vector<bool> trainable_layers(const SurrogateModel & surrogate) {
    std::vector<bool> flags(surrogate.model.n_layers(), false);
    for (int i = 0; i < surrogate.model.n_layers(); ++i) {
        surrogate.model.layers[i].visit(DecoderModel::layer_prefix(i), [&](const std::string & name, const Mat &) {
            if (surrogate.is_trainable(name)) {
                flags[i] = true;
            }
        });
    }
    return flags;
}

} // namespace forge
