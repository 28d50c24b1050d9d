#include "forge/trajectory.hpp"

#include "forge/error.hpp"
#include "forge/parallel.hpp"
#include "forge/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace forge {

std::string mode_name(FeedMode m) {
    return m == FeedMode::teacher_forced ? "teacher_forced" : "free_running";
}

FeedMode parse_mode(const std::string & s) {
    if (s == "teacher_forced") {
        return FeedMode::teacher_forced;
    }
    if (s == "free_running") {
        return FeedMode::free_running;
    }
    fail(ErrorKind::config, "unknown feeding mode '" + s + "'");
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> column_medians(const Eigen::MatrixXd & m) {
    std::vector<double> out;
    for (Eigen::Index l = 0; l < m.cols(); ++l) {
        std::vector<double> col(m.rows());
        for (Eigen::Index s = 0; s < m.rows(); ++s) {
            col[s] = m(s, l);
        }
        out.push_back(median(std::move(col)));
    }
    return out;
}

} // namespace

std::vector<double> TrajectoryResult::per_layer_median() const {
    if (kl_matrix.rows() == 0) {
        return {};
    }
    return column_medians(kl_matrix);
}

std::vector<double> next_token_probs(const MatD & prob_rows, std::span<const int> token_ids) {
    const auto n = static_cast<Eigen::Index>(token_ids.size());
    require(n >= 2, ErrorKind::input, "need at least two tokens to align next-token probabilities");
    require(prob_rows.rows() == n, ErrorKind::input, "probability rows must match the token count");
    std::vector<double> out(token_ids.size() - 1);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
        const int next = token_ids[i + 1];
        require(next >= 0 && next < prob_rows.cols(), ErrorKind::input, "token id out of vocabulary");
        out[i] = prob_rows(i, next);
    }
    return out;
}

std::vector<double> layer_distribution(const DecoderModel & model, const HiddenTrace & trace, int layer,
                                       std::span<const int> token_ids) {
    require(layer >= 0 && layer < static_cast<int>(trace.hidden_states.size()), ErrorKind::input,
            "layer " + std::to_string(layer) + " out of range");
    return next_token_probs(unembed(trace.hidden_states[layer], model), token_ids);
}

double kl_deviation(std::span<const double> q, std::span<const double> p) {
    require(q.size() == p.size(), ErrorKind::input, "kl_deviation length mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        const double qi = std::max(q[i], kProbFloor);
        const double pi = std::max(p[i], kProbFloor);
        sum += qi * std::log(qi / pi);
    }
    return sum;
}

TrajectoryResult prediction_trajectory(const DecoderModel & model, const std::vector<TrajectorySample> & samples,
                                       double tol_spread, double tol_mono) {
    require(!samples.empty(), ErrorKind::input, "no trajectory samples");
    const int L = model.n_layers();
    TrajectoryResult r;
    r.mode = samples.front().source;
    r.kl_matrix = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(samples.size()), L);
    parallel_for(samples.size(), [&](std::size_t s) {
        try {
            const auto & ids = samples[s].token_ids;
            require(ids.size() >= 2, ErrorKind::input, "sample shorter than two tokens");
            const HiddenTrace trace = forward_with_hidden(model, ids);
            const auto p = next_token_probs(softmax_rows(trace.logits), ids);
            for (int l = 0; l < L; ++l) {
                r.kl_matrix(static_cast<Eigen::Index>(s), l) = kl_deviation(layer_distribution(model, trace, l, ids), p);
            }
        } catch (const Error & e) {
            throw Error(e.kind(), "sample " + std::to_string(s) + ": " + e.detail());
        }
    });
    if (samples.size() >= 2) {
        r.transition_layer = detect_transition(r.kl_matrix, tol_spread, tol_mono);
    }
    return r;
}

std::vector<TrajectorySample> generate_free_running_samples(const DecoderModel & model,
                                                            const std::vector<std::vector<int>> & prompts, int max_new,
                                                            std::optional<int> stop_id) {
    require(max_new >= 1, ErrorKind::input, "max_new must be >= 1");
    std::vector<TrajectorySample> out(prompts.size());
    parallel_for(prompts.size(), [&](std::size_t i) {
        const auto & prompt = prompts[i];
        require(!prompt.empty(), ErrorKind::input, "empty prompt");
        require(static_cast<int>(prompt.size()) + max_new <= model.spec.max_seq_len, ErrorKind::input,
                "prompt plus continuation exceeds max_seq_len");
        DecodeSession session(model);
        std::vector<int> ids = prompt;
        Eigen::VectorXd logits = session.feed_tokens(ids);
        for (int t = 0; t < max_new; ++t) {
            Eigen::Index best = 0;
            logits.maxCoeff(&best);
            const int next = static_cast<int>(best);
            ids.push_back(next);
            if ((stop_id && next == *stop_id) || t + 1 == max_new) {
                break;
            }
            const int one[1] = {next};
            logits = session.feed_tokens(one);
        }
        out[i] = {std::move(ids), FeedMode::free_running};
    });
    return out;
}

std::optional<int> detect_transition(const Eigen::MatrixXd & m, double tol_spread, double tol_mono) {
    require(m.rows() >= 2, ErrorKind::detection, "transition detection needs at least two samples");
    require(m.cols() >= 1, ErrorKind::detection, "empty trajectory matrix");
    require(m.allFinite(), ErrorKind::detection, "non-finite KL values");
    const Eigen::Index L = m.cols();
    double range = 0.0;
    for (Eigen::Index s = 0; s < m.rows(); ++s) {
        range += m.row(s).maxCoeff() - m.row(s).minCoeff();
    }
    range /= static_cast<double>(m.rows());
    const auto med = column_medians(m);
    std::vector<bool> ok(L);
    for (Eigen::Index l = 0; l < L; ++l) {
        const double mean = m.col(l).mean();
        const double sd = std::sqrt((m.col(l).array() - mean).square().mean());
        const bool tight = sd <= tol_spread * range;
        const bool falling = l == 0 || med[l] <= med[l - 1] + tol_mono;
        ok[l] = tight && falling;
    }
    std::optional<int> best;
    for (Eigen::Index l = L - 1; l >= 0 && ok[l]; --l) {
        best = static_cast<int>(l);
    }
    return best;
}

std::optional<int> detect_transition(const TrajectoryResult & result, double tol_spread, double tol_mono) {
    return detect_transition(result.kl_matrix, tol_spread, tol_mono);
}

void write_trajectory_csv(const std::filesystem::path & path, const TrajectoryResult & r) {
    std::ofstream f(path);
    require(static_cast<bool>(f), ErrorKind::input, "cannot write " + path.string());
    f << "sample_id,layer,kl\n";
    char buf[64];
    for (Eigen::Index s = 0; s < r.kl_matrix.rows(); ++s) {
        for (Eigen::Index l = 0; l < r.kl_matrix.cols(); ++l) {
            std::snprintf(buf, sizeof buf, "%.17g", r.kl_matrix(s, l));
            f << s << ',' << l << ',' << buf << '\n';
        }
    }
}

nlohmann::json trajectory_summary(const TrajectoryResult & r) {
    nlohmann::json j;
    j["mode"] = mode_name(r.mode);
    j["transition_layer"] = r.transition_layer ? nlohmann::json(*r.transition_layer) : nlohmann::json(nullptr);
    j["per_layer_median"] = r.per_layer_median();
    j["n_samples"] = r.kl_matrix.rows();
    j["n_layers"] = r.kl_matrix.cols();
    return j;
}

void write_trajectory_svg(const std::filesystem::path & path, const TrajectoryResult & r, const std::string & title) {
    LinePlot plot;
    plot.title = title;
    plot.x_label = "layer";
    plot.y_label = "KL to final prediction";
    std::vector<double> xs(r.kl_matrix.cols());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        xs[i] = static_cast<double>(i);
    }
    for (Eigen::Index s = 0; s < r.kl_matrix.rows(); ++s) {
        PlotSeries series;
        series.x = xs;
        for (Eigen::Index l = 0; l < r.kl_matrix.cols(); ++l) {
            series.y.push_back(r.kl_matrix(s, l));
        }
        series.color = "#7f7f7f";
        series.opacity = 0.15;
        plot.series.push_back(std::move(series));
    }
    plot.series.push_back({"median", xs, r.per_layer_median(), "#1f77b4", 2.5, 1.0});
    if (r.transition_layer) {
        plot.arrow_x = *r.transition_layer;
        plot.arrow_label = "transition at layer " + std::to_string(*r.transition_layer);
    }
    write_text_file(path.string(), render_svg(plot));
}

} // namespace forge
