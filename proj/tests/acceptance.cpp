// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Drives the shipped reference and smoke configs end to end.
//
// usage: acceptance [work_dir] [--reuse]
// --reuse keeps pipeline outputs already present under work_dir.

#include "forge/checkpoint.hpp"
#include "forge/commands.hpp"
#include "forge/error.hpp"
#include "forge/multimodal.hpp"
#include "forge/rng.hpp"
#include "forge/surgery.hpp"
#include "forge/synth_data.hpp"
#include "forge/tokenizer.hpp"
#include "forge/training.hpp"
#include "forge/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#ifndef FORGE_SOURCE_DIR
#define FORGE_SOURCE_DIR "."
#endif

using namespace forge;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
    bool ok = true;
    std::string detail;

    void require(bool cond, const std::string & what) {
        if (!cond) {
            ok = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
    void note(const std::string & s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char * f, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, a, b, c);
    return buf;
}

std::string slurp(const fs::path & p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path & p) { return json::parse(slurp(p)); }

// ---- independent oracles -------------------------------------------------

long double kl_oracle(const std::vector<double> & q, const std::vector<double> & p) {
    long double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        const long double qi = std::max<long double>(q[i], 1e-12L);
        const long double pi = std::max<long double>(p[i], 1e-12L);
        s += qi * std::log(qi / pi);
    }
    return s;
}

std::vector<long double> weights_oracle(const std::vector<int> & lengths, long double ord) {
    long double mx = 0, tl = 0, tw = 0;
    for (int l : lengths) {
        mx = std::max<long double>(mx, l);
        tl += l;
    }
    std::vector<long double> w;
    for (int l : lengths) {
        w.push_back(std::pow(mx / std::log(static_cast<long double>(l)), ord));
        tw += w.back();
    }
    for (auto & x : w) {
        x *= tl / tw;
    }
    return w;
}

// Probability of each next token from one layer's hidden rows: RMS norm,
// unembedding and softmax redone in long double.
std::vector<long double> layer_probs_oracle(const DecoderModel & m, const Mat & hidden, const std::vector<int> & ids) {
    const int d = m.spec.d_model;
    const int V = m.spec.vocab_size;
    std::vector<long double> out;
    std::vector<long double> z(V);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
        long double ss = 0;
        for (int j = 0; j < d; ++j) {
            ss += static_cast<long double>(hidden(t, j)) * hidden(t, j);
        }
        const long double inv = 1.0L / std::sqrt(ss / d + static_cast<long double>(nn::kRmsEps));
        long double mx = -1e300L;
        for (int v = 0; v < V; ++v) {
            long double acc = 0;
            for (int j = 0; j < d; ++j) {
                acc += static_cast<long double>(hidden(t, j)) * inv * m.final_norm(0, j) * m.unembedding(v, j);
            }
            z[v] = acc;
            mx = std::max(mx, acc);
        }
        long double tot = 0;
        for (auto x : z) {
            tot += std::exp(x - mx);
        }
        out.push_back(std::exp(z[ids[t + 1]] - mx) / tot);
    }
    return out;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::vector<int>> teacher_forced_ids(const fs::path & corpus, int n) {
    const auto items = read_text_corpus(corpus);
    const Tokenizer tok = build_tokenizer();
    const ChatTemplate tmpl;
    std::vector<std::vector<int>> out;
    for (int i = 0; i < n && i < static_cast<int>(items.size()); ++i) {
        out.push_back(assemble_sequence(tmpl, nullptr, items[i].question, items[i].response, tok).token_ids);
    }
    return out;
}

// ---- criteria ------------------------------------------------------------

Verdict equation_fidelity(const fs::path & ref) {
    Verdict v;
    Rng rng(2024);
    double worst_kl = 0, worst_w = 0, worst_sum = 0, worst_dist = 0;
    for (int t = 0; t < 100; ++t) {
        const int n = 1 + static_cast<int>(rng.below(60));
        std::vector<double> q(n), p(n);
        for (int i = 0; i < n; ++i) {
            q[i] = rng.uniform();
            p[i] = rng.below(12) == 0 ? 0.0 : rng.uniform();
        }
        const double got = kl_deviation(q, p);
        worst_kl = std::max(worst_kl, std::abs(got - static_cast<double>(kl_oracle(q, p))) / std::max(1.0, std::abs(got)));

        std::vector<int> lengths(1 + rng.below(10));
        for (auto & l : lengths) {
            l = 2 + static_cast<int>(rng.below(300));
        }
        const double ord = 2.0 * rng.uniform();
        const auto w = dynamic_loss_weights(lengths, ord);
        const auto wo = weights_oracle(lengths, ord);
        double sw = 0, sl = 0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            worst_w = std::max(worst_w, std::abs(w[i] - static_cast<double>(wo[i])) / std::max(1.0, static_cast<double>(wo[i])));
            sw += w[i];
            sl += lengths[i];
        }
        worst_sum = std::max(worst_sum, std::abs(sw - sl) / sl);
    }
    v.require(std::abs(kl_deviation(std::vector<double>{0.5}, std::vector<double>{0.25}) - 0.5 * std::log(2.0)) <= 1e-12,
              "kl([0.5],[0.25]) != 0.5 ln 2");
    v.require(worst_kl <= 1e-9, fmt("kl_deviation off by %.3g", worst_kl));
    v.require(worst_w <= 1e-9, fmt("weights off by %.3g", worst_w));
    v.require(worst_sum <= 1e-9, fmt("sum w vs sum L off by %.3g", worst_sum));
    for (int len : {2, 7, 50, 333}) {
        v.require(dynamic_loss_weights(std::vector<int>{len}, 0.5)[0] == static_cast<double>(len),
                  "single-group weight differs from its length");
    }

    // distributions on the trained reference target
    const DecoderModel model = load_checkpoint(ref / "target/target.frga");
    const auto seqs = teacher_forced_ids(ref / "data/text_eval", 100);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        const auto & ids = seqs[s];
        const auto trace = forward_with_hidden(model, ids);
        const int layer = static_cast<int>(rng.below(model.n_layers()));
        const auto got = layer_distribution(model, trace, layer, ids);
        const auto want = layer_probs_oracle(model, trace.hidden_states[layer], ids);
        const auto final_got = next_token_probs(softmax_rows(trace.logits), ids);
        const auto final_want = layer_probs_oracle(model, trace.hidden_states.back(), ids);
        for (std::size_t i = 0; i < got.size(); ++i) {
            worst_dist = std::max(worst_dist, std::abs(got[i] - static_cast<double>(want[i])));
            worst_dist = std::max(worst_dist, std::abs(final_got[i] - static_cast<double>(final_want[i])));
        }
        // gather oracle for next_token_probs
        const MatD rows = softmax_rows(trace.logits);
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            if (final_got[i] != rows(static_cast<Eigen::Index>(i), ids[i + 1])) {
                v.require(false, "next_token_probs differs from a direct gather");
                break;
            }
        }
    }
    v.require(worst_dist <= 1e-7, fmt("distributions off by %.3g", worst_dist));
    v.note(fmt("max errors kl %.2g, w %.2g, dist %.2g", worst_kl, worst_w, worst_dist));
    return v;
}

Verdict final_layer(const fs::path & ref) {
    Verdict v;
    const DecoderModel model = load_checkpoint(ref / "target/target.frga");
    const auto seqs = teacher_forced_ids(ref / "data/text_eval", 300);
    v.require(seqs.size() == 300, "fewer than 300 eval samples");
    std::vector<TrajectorySample> samples;
    for (const auto & ids : seqs) {
        samples.push_back({ids, FeedMode::teacher_forced});
    }
    const auto r = prediction_trajectory(model, samples);
    const int L = model.n_layers();
    const double worst = r.kl_matrix.col(L - 1).maxCoeff();
    v.require(worst <= 1e-5, fmt("max kl[:, L-1] = %.3g", worst));

    // second implementation of the whole chain, compared with the stored run's medians
    std::vector<std::vector<double>> cols(L);
    for (const auto & ids : seqs) {
        const auto trace = forward_with_hidden(model, ids);
        const auto p = layer_probs_oracle(model, trace.hidden_states.back(), ids);
        for (int l = 0; l < L; ++l) {
            const auto q = layer_probs_oracle(model, trace.hidden_states[l], ids);
            long double s = 0;
            for (std::size_t i = 0; i < q.size(); ++i) {
                const long double qi = std::max(q[i], 1e-12L);
                s += qi * std::log(qi / std::max(p[i], 1e-12L));
            }
            cols[l].push_back(static_cast<double>(s));
        }
    }
    const json stored = read_json(ref / "trajectory/trajectory_summary.json");
    const auto med = stored.at("teacher_forced").at("per_layer_median").get<std::vector<double>>();
    double worst_med = 0;
    for (int l = 0; l < L; ++l) {
        worst_med = std::max(worst_med, std::abs(median(cols[l]) - med.at(l)));
    }
    v.require(worst_med <= 1e-6, fmt("stored medians differ from the second implementation by %.3g", worst_med));
    v.note(fmt("max final-layer kl %.2g, median agreement %.2g", worst, worst_med));
    return v;
}

Verdict transition_fixtures() {
    Verdict v;
    for (int k : {3, 6, 9}) {
        Rng rng(500 + k);
        Eigen::MatrixXd m(60, 12);
        for (int s = 0; s < 60; ++s) {
            for (int l = 0; l < 12; ++l) {
                m(s, l) = l < k ? 1.0 + 5.0 * rng.uniform() : 1.5 * std::exp(-0.4 * (l - k));
            }
        }
        const auto got = detect_transition(m);
        v.require(got == k, "planted k=" + std::to_string(k) + " returned " + (got ? std::to_string(*got) : "none"));
    }
    Eigen::MatrixXd same(8, 12);
    for (int l = 0; l < 12; ++l) {
        same.col(l).setConstant(4.0 / (1 + l));
    }
    v.require(detect_transition(same) == 0, "all-converged fixture did not return 0");
    Eigen::MatrixXd rising(8, 12);
    for (int s = 0; s < 8; ++s) {
        for (int l = 0; l < 12; ++l) {
            rising(s, l) = 0.5 * l + 0.01 * s;
        }
    }
    v.require(!detect_transition(rising).has_value(), "monotone-increasing fixture did not return none");
    return v;
}

bool same_tensors(const Archive & a, const Archive & b, const std::function<bool(const std::string &)> & pick,
                  std::string & first_diff) {
    for (const auto & [name, t] : a.tensors) {
        if (!pick(name)) {
            continue;
        }
        const auto it = b.tensors.find(name);
        if (it == b.tensors.end() || it->second.rows() != t.rows() || it->second.cols() != t.cols() ||
            std::memcmp(it->second.data(), t.data(), sizeof(float) * static_cast<std::size_t>(t.size())) != 0) {
            first_diff = name;
            return false;
        }
    }
    return true;
}

Verdict surgery_invariants(const fs::path & ref) {
    Verdict v;
    const DecoderModel target = load_checkpoint(ref / "target/target.frga");
    const auto seqs = teacher_forced_ids(ref / "data/text_eval", 20);

    // pre-training: shared prefix is bit-exact
    for (const std::string name : {"late", "early", "control"}) {
        const Archive a = read_archive(ref / ("surgery/" + name + "/" + name + ".frga"));
        const SurrogateModel s = surrogate_from_manifest(decoder_from_archive(a), a.manifest);
        const int prefix = s.plan.first_replaced;
        for (const auto & ids : seqs) {
            const auto ht = forward_with_hidden(target, ids);
            const auto hs = forward_with_hidden(s.model, ids);
            for (int l = 0; l < prefix; ++l) {
                if (std::memcmp(ht.hidden_states[l].data(), hs.hidden_states[l].data(),
                                sizeof(float) * static_cast<std::size_t>(ht.hidden_states[l].size())) != 0) {
                    v.require(false, name + ": prefix hidden state " + std::to_string(l) + " differs");
                    break;
                }
            }
        }
    }

    // post-training: everything frozen in a stage keeps its bytes
    std::string diff;
    const Archive s1_target_bundle = read_archive(ref / "s1_target/s1_target_bundle.frga");
    const VisionBundle scope_probe = bundle_from_archive(s1_target_bundle);
    auto encoder_only = [](const std::string & n) { return n.rfind("encoder.", 0) == 0; };
    auto frozen_encoder = [&](const std::string & n) {
        return encoder_only(n) && !scope_probe.encoder_param_trainable(n);
    };
    for (const std::string name : {"late", "early", "control"}) {
        const Archive d1 = read_archive(ref / ("s1_" + name + "/s1_" + name + "_decoder.frga"));
        const SurrogateModel s1 = surrogate_from_manifest(decoder_from_archive(d1), d1.manifest);
        const auto bad = frozen_mismatches(s1, target);
        v.require(bad.empty(), "stage 1 " + name + ": frozen decoder tensor " + (bad.empty() ? "" : bad[0]) + " changed");
        const Archive b1 = read_archive(ref / ("s1_" + name + "/s1_" + name + "_bundle.frga"));
        v.require(same_tensors(b1, s1_target_bundle, encoder_only, diff), "stage 1 " + name + ": encoder tensor " + diff + " changed");

        const json s2 = read_json(ref / ("s2_" + name + "/s2_" + name + "_summary.json"));
        v.require(s2.at("decoder_checksum").get<std::string>() == checksum(s1.model),
                  "stage 2 " + name + ": decoder checksum differs from stage 1 output");
        const Archive b2 = read_archive(ref / ("s2_" + name + "/s2_" + name + "_bundle.frga"));
        v.require(same_tensors(b2, b1, frozen_encoder, diff), "stage 2 " + name + ": frozen encoder tensor " + diff + " changed");
    }
    const Archive b2 = read_archive(ref / "s2_late/s2_late_bundle.frga");
    const Archive b3 = read_archive(ref / "s3_surrogate/s3_surrogate_bundle.frga");
    v.require(same_tensors(b3, b2, frozen_encoder, diff), "stage 3: frozen encoder tensor " + diff + " changed");
    v.require(checksum(load_checkpoint(ref / "target/target.frga")) == read_json(ref / "target/target_summary.json").at("checksum"),
              "target checksum drifted after the downstream stages");

    Rng rng(4242);
    for (int t = 0; t < 20; ++t) {
        const int L = 4 + static_cast<int>(rng.below(21));
        const int a = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(L - 2)));
        const int b = a + static_cast<int>(rng.below(static_cast<std::uint64_t>(L - 1 - a)));
        ModelSpec spec;
        spec.n_layers = L;
        spec.d_model = 8;
        spec.n_heads = 2;
        spec.vocab_size = 79;
        spec.max_seq_len = 16;
        const auto s = build_surrogate(init_model(spec, static_cast<std::uint64_t>(t)), plan_surgery(spec, a, b));
        v.require(s.model.n_layers() == L - (b - a + 1) + 1,
                  "layer count formula fails for L=" + std::to_string(L) + " a=" + std::to_string(a) + " b=" + std::to_string(b));
    }
    return v;
}

Verdict zero_adapter_gradients(const fs::path & ref) {
    Verdict v;
    const Archive d1 = read_archive(ref / "s1_late/s1_late_decoder.frga");
    const SurrogateModel s = surrogate_from_manifest(decoder_from_archive(d1), d1.manifest);
    const VisionBundle bundle = load_bundle(ref / "s1_late/s1_late_bundle.frga");
    const Tokenizer tok = build_tokenizer();
    ChatTemplate tmpl;
    tmpl.image_tokens = bundle.encoder.config.n_patches();
    auto text = read_text_corpus(ref / "data/text_train");
    text.resize(32);
    const auto seqs = text_sequences(text, tmpl, tok);
    std::vector<const MultimodalSequence *> batch;
    for (const auto & q : seqs) {
        batch.push_back(&q);
    }
    TrainableSet trainable = bundle_keys(bundle, true, false);
    trainable.decoder = s.trainable_keys;
    StageConfig cfg;
    cfg.stage = Stage::s1_adapter_translator;
    GradientBuffers g{s.model.zeros_like(), bundle.zeros_like()};
    batch_gradients(s.model, &bundle, trainable, batch, cfg, g);
    bool zero = true;
    g.bundle->adapter.visit("", [&](const std::string &, Mat & m) { zero = zero && (m.array() == 0.0f).all(); });
    v.require(zero, "adapter gradient is not exactly zero");
    double translator = 0;
    g.decoder.visit([&](const std::string & n, Mat & m) {
        if (s.trainable_keys.contains(n)) {
            translator += m.cwiseAbs().sum();
        }
    });
    v.require(translator > 0, "translator received no gradient either");
    return v;
}

double cond_acc(const json & report, const std::string & name) {
    for (const auto & r : report.at("reports")) {
        if (r.at("config_name") == name) {
            return 100.0 * r.at("metrics").at("vqa_acc").get<double>();
        }
    }
    throw Error(ErrorKind::protocol, "report lacks condition " + name);
}

Verdict phase_ordering(const fs::path & ref) {
    Verdict v;
    const json report = read_json(ref / "report/report.json");
    const double late_g = cond_acc(report, "late_grafted");
    const double late_p = cond_acc(report, "late_paired");
    const double early_g = cond_acc(report, "early_grafted");
    const double ctrl_g = cond_acc(report, "control_grafted");
    v.require(late_g >= early_g + 10.0, fmt("late_grafted %.1f < early_grafted %.1f + 10", late_g, early_g));
    v.require(late_g >= late_p - 3.0, fmt("late_grafted %.1f < late_paired %.1f - 3", late_g, late_p));
    v.require(ctrl_g <= late_g - 10.0, fmt("control_grafted %.1f > late_grafted %.1f - 10", ctrl_g, late_g));
    v.note(fmt("late_grafted %.1f, early_grafted %.1f, control_grafted %.1f", late_g, early_g, ctrl_g) +
           fmt(", late_paired %.1f", late_p));
    return v;
}

Verdict convergence(const fs::path & ref) {
    Verdict v;
    const json sur = read_json(ref / "s3_surrogate/s3_surrogate_evals.json");
    const json base = read_json(ref / "s3_baseline/s3_baseline_evals.json");
    v.require(!sur.empty() && !base.empty(), "stage-3 eval curves missing");
    if (!v.ok) {
        return v;
    }
    const double target = base.back().at("vqa_acc").get<double>();
    const int base_steps = base.back().at("step").get<int>();
    int reached = -1;
    double best = -1.0;
    bool monotone = true;
    for (const auto & e : sur) {
        const double acc = e.at("vqa_acc").get<double>();
        if (reached < 0 && acc >= target) {
            reached = e.at("step").get<int>();
        }
        monotone = monotone && acc >= best - 0.01;
        best = std::max(best, acc);
    }
    v.require(reached >= 0, fmt("surrogate path never reaches the baseline's final %.3f", target));
    if (reached >= 0) {
        const double ratio = static_cast<double>(reached) / base_steps;
        v.require(ratio <= 0.5, fmt("surrogate needs %.0f%% of baseline steps", 100.0 * ratio));
        v.note(fmt("threshold %.3f reached at %.0f%% of the baseline's stage-3 steps", target, 100.0 * ratio));
    }
    v.require(monotone, "surrogate accuracy curve drops by more than 1 point");
    return v;
}

Verdict degradation(const fs::path & ref) {
    Verdict v;
    const json d = read_json(ref / "report/report.json").at("degradation");
    const double sd = d.at("surrogate_drop").get<double>();
    const double bd = d.at("baseline_drop").get<double>();
    v.require(sd <= bd, fmt("surrogate drop %.3f > baseline drop %.3f", sd, bd));
    v.note(fmt("text accuracy drop: surrogate %.3f, baseline %.3f", sd, bd));
    return v;
}

std::map<std::string, std::string> archive_bytes(const fs::path & root) {
    std::map<std::string, std::string> out;
    for (const auto & e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && e.path().extension() == ".frga") {
            out[fs::relative(e.path(), root).string()] = slurp(e.path());
        }
    }
    return out;
}

Verdict determinism(const fs::path & smoke_a, const fs::path & smoke_b, const fs::path & work) {
    Verdict v;
    const auto a = archive_bytes(smoke_a);
    const auto b = archive_bytes(smoke_b);
    v.require(!a.empty() && a.size() == b.size(), "reruns produced different archive sets");
    for (const auto & [name, bytes] : a) {
        const auto it = b.find(name);
        if (it == b.end() || it->second != bytes) {
            v.require(false, "rerun differs in " + name);
            break;
        }
    }

    // round trip: read, write elsewhere, compare bytes of tensors and manifest
    const fs::path rt = work / "roundtrip";
    fs::create_directories(rt);
    for (const auto & [name, bytes] : a) {
        const fs::path src = smoke_a / name;
        const fs::path dst = rt / src.filename();
        write_archive(dst, read_archive(src));
        if (slurp(dst) != bytes || read_json(manifest_path(dst)) != read_json(manifest_path(src))) {
            v.require(false, "archive round trip changed " + name);
            break;
        }
    }
    const DecoderModel t = load_checkpoint(smoke_a / "target/target.frga");
    save_checkpoint(t, rt / "again.frga", ArchiveRole::target);
    v.require(checksum(load_checkpoint(rt / "again.frga")) == checksum(t), "decoder reload changed the checksum");

    // resume: stop a stage midway, continue from its archives, compare with the straight run
    json cfg = read_json(smoke_a / "s2_late/stage_config.json");
    const int total = read_json(smoke_a / "s2_late/s2_late_summary.json").at("total_steps").get<int>();
    CommandContext ctx;
    ctx.base_dir = smoke_a;
    ctx.verbose = false;
    json first = cfg;
    first["stop_after"] = std::max(1, total / 2);
    ctx.out_dir = work / "resume_first";
    cmd_stage(first, ctx);
    json rest = cfg;
    rest["resume"] = {{"optimizer", (work / "resume_first/s2_late_optimizer.frga").string()},
                      {"bundle", (work / "resume_first/s2_late_bundle.frga").string()}};
    ctx.out_dir = work / "resume_rest";
    cmd_stage(rest, ctx);
    v.require(slurp(work / "resume_rest/s2_late_bundle.frga") == slurp(smoke_a / "s2_late/s2_late_bundle.frga"),
              "resumed bundle differs from the unresumed run");
    v.note(std::to_string(a.size()) + " archives compared, resume split at step " + std::to_string(std::max(1, total / 2)) +
           " of " + std::to_string(total));
    return v;
}

json run_pipeline(const fs::path & config, const fs::path & out, bool reuse) {
    if (reuse && fs::exists(out / "pipeline_summary.json")) {
        return read_json(out / "pipeline_summary.json");
    }
    fs::remove_all(out);
    CommandContext ctx;
    ctx.out_dir = out;
    ctx.base_dir = config.parent_path();
    ctx.verbose = false;
    return cmd_pipeline(load_config(config), ctx);
}

} // namespace

int main(int argc, char ** argv) {
    const fs::path work = fs::absolute(argc > 1 ? argv[1] : "acceptance_work");
    const bool reuse = argc > 2 && std::string(argv[2]) == "--reuse";
    const fs::path src = FORGE_SOURCE_DIR;
    fs::create_directories(work);

    const fs::path ref = work / "reference";
    const fs::path smoke_a = work / "smoke_a";
    const fs::path smoke_b = work / "smoke_b";
    try {
        std::printf("running reference pipeline (%s)\n", (src / "configs/pipeline.json").c_str());
        std::fflush(stdout);
        run_pipeline(src / "configs/pipeline.json", ref, reuse);
        run_pipeline(src / "configs/smoke.json", smoke_a, reuse);
        run_pipeline(src / "configs/smoke.json", smoke_b, reuse);
    } catch (const std::exception & e) {
        std::printf("pipeline run failed: %s\n", e.what());
        return 2;
    }

    const std::pair<const char *, std::function<Verdict()>> criteria[] = {
        {"1 equation fidelity", [&] { return equation_fidelity(ref); }},
        {"2 final-layer coincidence", [&] { return final_layer(ref); }},
        {"3 transition detection", [] { return transition_fixtures(); }},
        {"4 surgery invariants", [&] { return surgery_invariants(ref); }},
        {"5 zero-gradient routing", [&] { return zero_adapter_gradients(ref); }},
        {"6 phase ordering", [&] { return phase_ordering(ref); }},
        {"7 convergence speedup", [&] { return convergence(ref); }},
        {"8 language degradation", [&] { return degradation(ref); }},
        {"9 determinism and persistence", [&] { return determinism(smoke_a, smoke_b, work); }},
    };
    int failed = 0;
    for (const auto & [name, check] : criteria) {
        Verdict v;
        try {
            v = check();
        } catch (const std::exception & e) {
            v.ok = false;
            v.detail = std::string("error: ") + e.what();
        }
        failed += !v.ok;
        std::printf("criterion %-32s %s  %s\n", name, v.ok ? "PASS" : "FAIL", v.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(std::size(criteria)) - failed, std::size(criteria));
    return failed == 0 ? 0 : 1;
}
