#pragma once

#include "forge/model.hpp"
#include "forge/multimodal.hpp"

#include <json.hpp>

#include <set>
#include <string>
#include <vector>

namespace forge {

// Replace target layers [first_replaced, last_replaced] with one translator
// layer initialized from layer first_replaced. Layers 0 and L-1 always survive.
struct SurgeryPlan {
    int n_layers = 0;  // of the target
    int first_replaced = 0;
    int last_replaced = 0;
    int translator_init_layer = 0;

    int surrogate_layers() const { return n_layers - (last_replaced - first_replaced + 1) + 1; }
    // Surrogate parameter count over target parameter count.
    double parameter_fraction(const ModelSpec & spec) const;
    nlohmann::json to_json() const;
};

SurgeryPlan plan_surgery(const ModelSpec & spec, int first_replaced, int last_replaced);

struct SurrogateModel {
    DecoderModel model;
    SurgeryPlan plan;
    std::set<std::string> trainable_keys;  // parameter names the surrogate may update
    std::string parent_checksum;
    std::vector<int> source_layers;        // target layer each surrogate layer was copied from

    int translator_index() const { return plan.first_replaced; }
    bool is_trainable(const std::string & name) const { return trainable_keys.contains(name); }
    nlohmann::json manifest_fields() const;
};

SurrogateModel build_surrogate(const DecoderModel & target, const SurgeryPlan & plan);

// Also unfreezes every other layer below the translator: a-2, a-4, ... >= 0.
SurrogateModel build_control_variant(const DecoderModel & target, const SurgeryPlan & plan);

// Rebuilds the bookkeeping for a surrogate loaded from an archive manifest.
SurrogateModel surrogate_from_manifest(DecoderModel model, const nlohmann::json & manifest);

// Names of frozen surrogate parameters that differ from their target source.
std::vector<std::string> frozen_mismatches(const SurrogateModel & surrogate, const DecoderModel & target);

// Per-layer trainable flags derived from trainable_keys.
std::vector<bool> trainable_layers(const SurrogateModel & surrogate);

} // namespace forge
