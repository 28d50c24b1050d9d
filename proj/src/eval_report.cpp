#include "forge/eval_report.hpp"

#include "forge/error.hpp"
#include "forge/parallel.hpp"
#include "forge/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace forge {

namespace {

std::string trim(const std::string & s) {
    const auto b = s.find_first_not_of(" \t\n\r");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\n\r");
    return s.substr(b, e - b + 1);
}

std::string fmt(double v, const char * f = "%.4f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::vector<EmbeddingOverride> overrides_for(const VisionBundle * bundle, const MultimodalSequence & seq) {
    if (!seq.image_span) {
        return {};
    }
    require(bundle != nullptr, ErrorKind::input, "image prompt without a vision bundle");
    return image_overrides(*bundle, seq);
}

} // namespace

nlohmann::json Accuracy::to_json() const {
    return {{"overall", overall}, {"per_tag", per_tag}, {"per_tag_count", per_tag_count},
            {"n", n},             {"correct", correct}, {"flagged", flagged}};
}

Accuracy score_answers(const std::vector<std::string> & tags, const std::vector<std::string> & truths,
                       const Responder & respond) {
    require(!truths.empty(), ErrorKind::input, "empty eval set");
    require(tags.size() == truths.size(), ErrorKind::input, "tags and truths differ in length");
    std::vector<Answer> answers(truths.size());
    parallel_for(truths.size(), [&](std::size_t i) { answers[i] = respond(i); });

    Accuracy acc;
    std::map<std::string, int> tag_correct;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const bool ok = !answers[i].over_budget && trim(answers[i].text) == trim(truths[i]);
        acc.flagged += answers[i].over_budget ? 1 : 0;
        acc.correct += ok ? 1 : 0;
        acc.per_tag_count[tags[i]] += 1;
        tag_correct[tags[i]] += ok ? 1 : 0;
    }
    acc.n = static_cast<int>(truths.size());
    acc.overall = static_cast<double>(acc.correct) / acc.n;
    for (const auto & [tag, n] : acc.per_tag_count) {
        acc.per_tag[tag] = static_cast<double>(tag_correct[tag]) / n;
    }
    return acc;
}

Answer greedy_answer(const DecoderModel & decoder, const VisionBundle * bundle, const MultimodalSequence & prompt,
                     const Tokenizer & tok, int max_new) {
    require(max_new >= 1, ErrorKind::input, "answer budget must be >= 1");
    DecodeSession session(decoder);
    const auto overrides = overrides_for(bundle, prompt);
    Eigen::VectorXd logits = session.feed_tokens(prompt.token_ids, overrides);
    std::vector<int> out;
    for (int t = 0; t < max_new; ++t) {
        Eigen::Index best = 0;
        logits.maxCoeff(&best);
        const int id = static_cast<int>(best);
        if (id == tok.eot()) {
            return {tok.decode(out), false};
        }
        out.push_back(id);
        if (session.position() >= decoder.spec.max_seq_len) {
            break;
        }
        const int one[1] = {id};
        logits = session.feed_tokens(one);
    }
    return {tok.decode(out), true};
}

Answer binary_answer(const DecoderModel & decoder, const VisionBundle * bundle, const MultimodalSequence & prompt,
                     const Tokenizer & tok) {
    DecodeSession base(decoder);
    const auto overrides = overrides_for(bundle, prompt);
    const Eigen::VectorXd first = base.feed_tokens(prompt.token_ids, overrides);
    auto log_softmax_at = [](const Eigen::VectorXd & z, int id) {
        const double m = z.maxCoeff();
        return z(id) - m - std::log((z.array() - m).exp().sum());
    };
    double best_score = -std::numeric_limits<double>::infinity();
    std::string best;
    for (const char * word : {"yes", "no"}) {
        std::vector<int> ids = tok.encode(word);
        ids.push_back(tok.eot());
        DecodeSession s = base;
        Eigen::VectorXd z = first;
        double score = 0.0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            score += log_softmax_at(z, ids[i]);
            if (i + 1 < ids.size()) {
                const int one[1] = {ids[i]};
                z = s.feed_tokens(one);
            }
        }
        if (score > best_score) {
            best_score = score;
            best = word;
        }
    }
    return {best, false};
}

Accuracy eval_vqa(const std::vector<VqaInstruction> & items, const Responder & respond) {
    std::vector<std::string> tags, truths;
    for (const auto & it : items) {
        tags.emplace_back(task_name(it.task_tag));
        truths.push_back(it.response);
    }
    return score_answers(tags, truths, respond);
}

Accuracy eval_vqa(const VlmAssembly & assembly, const std::vector<VqaInstruction> & items, const Tokenizer & tok,
                  int max_new) {
    require(assembly.bundle && assembly.decoder, ErrorKind::input, "incomplete assembly");
    const ChatTemplate tmpl{assembly.bundle->encoder.config.n_patches()};
    return eval_vqa(items, [&](std::size_t i) {
        const auto prompt = assemble_sequence(tmpl, &items[i].image, items[i].question, std::nullopt, tok);
        if (items[i].task_tag == VqaTask::yesno) {
            return binary_answer(*assembly.decoder, assembly.bundle, prompt, tok);
        }
        return greedy_answer(*assembly.decoder, assembly.bundle, prompt, tok, max_new);
    });
}

Accuracy eval_text(const std::vector<TextInstruction> & items, const Responder & respond) {
    std::vector<std::string> tags, truths;
    for (const auto & it : items) {
        tags.emplace_back(task_name(it.task_tag));
        truths.push_back(it.response);
    }
    return score_answers(tags, truths, respond);
}

Accuracy eval_text(const DecoderModel & decoder, const std::vector<TextInstruction> & items, const Tokenizer & tok,
                   int max_new) {
    const ChatTemplate tmpl;
    return eval_text(items, [&](std::size_t i) {
        const auto prompt = assemble_sequence(tmpl, nullptr, items[i].question, std::nullopt, tok);
        return greedy_answer(decoder, nullptr, prompt, tok, max_new);
    });
}

// ---- reports -------------------------------------------------------------

void EvalReport::validate() const {
    require(!config_name.empty(), ErrorKind::protocol, "report without a config name");
    for (const auto & [k, v] : metrics) {
        require(std::isfinite(v), ErrorKind::protocol, "metric " + k + " is not finite");
        if (k.find("_acc") != std::string::npos) {
            require(v >= 0.0 && v <= 1.0, ErrorKind::protocol, "accuracy " + k + " outside [0, 1]");
        }
    }
    require(provenance.is_object() && provenance.contains("checkpoints") && provenance.contains("corpus"),
            ErrorKind::protocol, "report " + config_name + " lacks provenance");
}

nlohmann::json EvalReport::to_json() const {
    return {{"config_name", config_name}, {"metrics", metrics}, {"provenance", provenance}};
}

EvalReport EvalReport::from_json(const nlohmann::json & j) {
    EvalReport r;
    try {
        for (const auto & [k, _] : j.items()) {
            require(k == "config_name" || k == "metrics" || k == "provenance", ErrorKind::protocol,
                    "unknown report key '" + k + "'");
        }
        r.config_name = j.at("config_name").get<std::string>();
        r.metrics = j.at("metrics").get<std::map<std::string, double>>();
        r.provenance = j.at("provenance");
    } catch (const nlohmann::json::exception & e) {
        fail(ErrorKind::protocol, std::string("report: ") + e.what());
    }
    r.validate();
    return r;
}

void add_accuracy(EvalReport & report, const std::string & prefix, const Accuracy & acc) {
    report.metrics[prefix + "_acc"] = acc.overall;
    for (const auto & [tag, v] : acc.per_tag) {
        report.metrics[prefix + "_acc." + tag] = v;
    }
    report.metrics[prefix + "_flagged"] = acc.flagged;
    report.metrics[prefix + "_n"] = acc.n;
}

const EvalReport & ComparisonResult::report(const std::string & name) const {
    for (const auto & r : reports) {
        if (r.config_name == name) {
            return r;
        }
    }
    fail(ErrorKind::protocol, "no report for condition '" + name + "'");
}

ComparisonResult grafting_comparison(const std::vector<GraftCondition> & conditions,
                                     const std::vector<VqaInstruction> & vqa_eval, const Tokenizer & tok) {
    std::set<std::string> names;
    for (const auto & c : conditions) {
        require(c.decoder && c.bundle, ErrorKind::protocol, "condition " + c.name + " lacks a decoder or bundle");
        require(names.insert(c.name).second, ErrorKind::protocol, "duplicate condition " + c.name);
    }
    for (const auto & req : kRequiredConditions) {
        require(names.contains(req), ErrorKind::protocol, "missing condition '" + req + "'");
    }
    require(!vqa_eval.empty(), ErrorKind::input, "empty eval set");

    ComparisonResult out;
    const std::string corpus = corpus_hash(vqa_eval);
    for (const auto & c : conditions) {
        const std::string dec_before = checksum(*c.decoder);
        const std::string bun_before = checksum(*c.bundle);
        const auto acc = eval_vqa(graft(*c.bundle, *c.decoder), vqa_eval, tok);
        require(checksum(*c.decoder) == dec_before && checksum(*c.bundle) == bun_before, ErrorKind::protocol,
                "evaluation mutated a checkpoint");
        EvalReport r;
        r.config_name = c.name;
        add_accuracy(r, "vqa", acc);
        r.provenance = {{"checkpoints", {{"decoder", dec_before}, {"bundle", bun_before}}},
                        {"corpus", {{"vqa_eval", corpus}}}};
        r.validate();
        out.reports.push_back(std::move(r));
    }
    const std::pair<const char *, const char *> pairs[] = {{"late_grafted", "early_grafted"},
                                                           {"late_grafted", "control_grafted"},
                                                           {"late_grafted", "late_paired"},
                                                           {"late_grafted", "target_baseline"}};
    out.ordering = nlohmann::json::array();
    for (const auto & [a, b] : pairs) {
        const double va = out.report(a).metrics.at("vqa_acc");
        const double vb = out.report(b).metrics.at("vqa_acc");
        out.ordering.push_back({{"a", a}, {"b", b}, {"a_acc", va}, {"b_acc", vb}, {"delta", va - vb},
                                {"better", va >= vb ? a : b}});
    }
    return out;
}

// ---- convergence ---------------------------------------------------------

ThresholdResult steps_to_threshold(const std::vector<EvalPoint> & evals, double threshold) {
    ThresholdResult r;
    r.threshold = threshold;
    for (const auto & e : evals) {
        if (e.vqa_acc >= threshold) {
            r.step = e.step;
            r.fraction = e.fraction;
            break;
        }
    }
    return r;
}

double PathCost::total_seconds() const {
    double t = 0.0;
    for (const auto & [stage, n] : steps) {
        const auto it = seconds_per_step.find(stage);
        t += n * (it == seconds_per_step.end() ? 0.0 : it->second);
    }
    return t;
}

int PathCost::total_steps() const {
    int t = 0;
    for (const auto & [_, n] : steps) {
        t += n;
    }
    return t;
}

bool monotone_within(const std::vector<EvalPoint> & evals, double noise) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto & e : evals) {
        if (e.vqa_acc < best - noise) {
            return false;
        }
        best = std::max(best, e.vqa_acc);
    }
    return true;
}

nlohmann::json ConvergenceSummary::to_json() const {
    auto th = [](const ThresholdResult & t) {
        return nlohmann::json{{"threshold", t.threshold},
                              {"reached", t.step.has_value()},
                              {"step", t.step ? nlohmann::json(*t.step) : nlohmann::json(nullptr)},
                              {"fraction", t.fraction ? nlohmann::json(*t.fraction) : nlohmann::json(nullptr)}};
    };
    return {{"surrogate", th(surrogate)},
            {"baseline", th(baseline)},
            {"baseline_stage3_steps", baseline_stage3_steps},
            {"step_ratio", step_ratio ? nlohmann::json(*step_ratio) : nlohmann::json(nullptr)},
            {"surrogate_monotone", surrogate_monotone},
            {"cost", cost}};
}

ConvergenceSummary convergence_accounting(const std::vector<EvalPoint> & surrogate_evals,
                                          const std::vector<EvalPoint> & baseline_evals,
                                          const PathCost & surrogate_cost, const PathCost & baseline_cost,
                                          std::optional<double> threshold, double noise) {
    require(!surrogate_evals.empty() && !baseline_evals.empty(), ErrorKind::protocol, "periodic evals missing");
    const double th = threshold.value_or(baseline_evals.back().vqa_acc);
    ConvergenceSummary s;
    s.surrogate = steps_to_threshold(surrogate_evals, th);
    s.baseline = steps_to_threshold(baseline_evals, th);
    s.baseline_stage3_steps = baseline_evals.back().step;
    if (s.surrogate.step && s.baseline_stage3_steps > 0) {
        s.step_ratio = static_cast<double>(*s.surrogate.step) / s.baseline_stage3_steps;
    }
    s.surrogate_monotone = monotone_within(surrogate_evals, noise);
    auto path = [](const PathCost & p) {
        return nlohmann::json{{"name", p.name},
                              {"steps", p.steps},
                              {"seconds_per_step", p.seconds_per_step},
                              {"total_steps", p.total_steps()},
                              {"total_seconds", p.total_seconds()}};
    };
    s.cost = {{"surrogate_path", path(surrogate_cost)}, {"baseline_path", path(baseline_cost)}};
    // cost of the surrogate path if stage 3 stops at the threshold
    if (s.surrogate.step) {
        PathCost early = surrogate_cost;
        early.steps["s3"] = *s.surrogate.step;
        s.cost["surrogate_path_to_threshold_seconds"] = early.total_seconds();
        const double base = baseline_cost.total_seconds();
        if (base > 0.0) {
            s.cost["relative_cost"] = early.total_seconds() / base;
        }
    }
    return s;
}

// ---- emission ---------------------------------------------------------------

void write_json(const std::filesystem::path & path, const nlohmann::json & j) {
    write_text_file(path.string(), j.dump(2) + "\n");
}

namespace {

std::vector<std::string> metric_columns(const std::vector<EvalReport> & reports) {
    std::set<std::string> cols;
    for (const auto & r : reports) {
        for (const auto & [k, _] : r.metrics) {
            cols.insert(k);
        }
    }
    return {cols.begin(), cols.end()};
}

} // namespace

std::string comparison_csv(const std::vector<EvalReport> & reports) {
    const auto cols = metric_columns(reports);
    std::ostringstream o;
    o << "condition";
    for (const auto & c : cols) {
        o << ',' << c;
    }
    o << '\n';
    for (const auto & r : reports) {
        o << r.config_name;
        for (const auto & c : cols) {
            const auto it = r.metrics.find(c);
            o << ',' << (it == r.metrics.end() ? "" : fmt(it->second, "%.6g"));
        }
        o << '\n';
    }
    return o.str();
}

std::string comparison_grid(const std::vector<EvalReport> & reports) {
    std::vector<std::string> cols;
    for (const auto & c : metric_columns(reports)) {
        if (c.starts_with("vqa_acc") || c.starts_with("text_acc")) {
            cols.push_back(c);
        }
    }
    std::vector<std::vector<std::string>> rows;
    rows.push_back({"condition"});
    rows.back().insert(rows.back().end(), cols.begin(), cols.end());
    for (const auto & r : reports) {
        std::vector<std::string> row{r.config_name};
        for (const auto & c : cols) {
            const auto it = r.metrics.find(c);
            row.push_back(it == r.metrics.end() ? "-" : fmt(100.0 * it->second, "%.1f"));
        }
        rows.push_back(std::move(row));
    }
    std::vector<std::size_t> width(rows.front().size(), 0);
    for (const auto & row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            width[i] = std::max(width[i], row[i].size());
        }
    }
    std::ostringstream o;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t i = 0; i < rows[r].size(); ++i) {
            const auto & cell = rows[r][i];
            if (i == 0) {
                o << cell << std::string(width[i] - cell.size(), ' ');
            } else {
                o << "  " << std::string(width[i] - cell.size(), ' ') << cell;
            }
        }
        o << '\n';
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : width) {
                total += w + 2;
            }
            o << std::string(total - 2, '-') << '\n';
        }
    }
    return o.str();
}

std::string convergence_csv(const std::vector<EvalPoint> & surrogate, const std::vector<EvalPoint> & baseline) {
    std::ostringstream o;
    o << "path,step,fraction,vqa_acc\n";
    for (const auto & [name, evals] : {std::pair{"surrogate", &surrogate}, std::pair{"baseline", &baseline}}) {
        for (const auto & e : *evals) {
            o << name << ',' << e.step << ',' << fmt(e.fraction, "%.6g") << ',' << fmt(e.vqa_acc, "%.6g") << '\n';
        }
    }
    return o.str();
}

void write_convergence_svg(const std::filesystem::path & path, const std::vector<EvalPoint> & surrogate,
                           const std::vector<EvalPoint> & baseline, std::optional<double> threshold) {
    LinePlot plot;
    plot.title = "Final-stage accuracy vs share of training data";
    plot.x_label = "% of stage data";
    plot.y_label = "VQA accuracy (%)";
    auto series = [](const std::string & label, const std::vector<EvalPoint> & evals, const std::string & color) {
        PlotSeries s{label, {0.0}, {0.0}, color, 2.0, 1.0};
        s.x.clear();
        s.y.clear();
        for (const auto & e : evals) {
            s.x.push_back(100.0 * e.fraction);
            s.y.push_back(100.0 * e.vqa_acc);
        }
        return s;
    };
    plot.series.push_back(series("surrogate-trained bundle", surrogate, "#d62728"));
    plot.series.push_back(series("baseline", baseline, "#1f77b4"));
    if (threshold) {
        plot.series.push_back({"threshold", {0.0, 100.0}, {100.0 * *threshold, 100.0 * *threshold}, "#7f7f7f", 1.0, 0.8});
    }
    write_text_file(path.string(), render_svg(plot));
}

} // namespace forge
