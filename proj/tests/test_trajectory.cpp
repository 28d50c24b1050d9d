#include "forge/error.hpp"
#include "forge/tokenizer.hpp"
#include "forge/trajectory.hpp"

#include "helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <vector>

using namespace forge;

namespace {

long double kl_oracle(const std::vector<double> & q, const std::vector<double> & p) {
    long double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        const long double qi = std::max<long double>(q[i], 1e-12L);
        const long double pi = std::max<long double>(p[i], 1e-12L);
        s += qi * std::log(qi / pi);
    }
    return s;
}

// RMS norm + unembed + softmax over one hidden row, all in long double.
std::vector<long double> softmax_oracle(const DecoderModel & m, const Mat & hidden, int row) {
    const int d = m.spec.d_model;
    long double ss = 0;
    for (int j = 0; j < d; ++j) {
        ss += static_cast<long double>(hidden(row, j)) * hidden(row, j);
    }
    const long double inv = 1.0L / std::sqrt(ss / d + static_cast<long double>(nn::kRmsEps));
    std::vector<long double> z(m.spec.vocab_size);
    for (int v = 0; v < m.spec.vocab_size; ++v) {
        long double acc = 0;
        for (int j = 0; j < d; ++j) {
            acc += static_cast<long double>(hidden(row, j)) * inv * m.final_norm(0, j) * m.unembedding(v, j);
        }
        z[v] = acc;
    }
    long double mx = z[0];
    for (auto x : z) {
        mx = std::max(mx, x);
    }
    long double tot = 0;
    for (auto & x : z) {
        x = std::exp(x - mx);
        tot += x;
    }
    for (auto & x : z) {
        x /= tot;
    }
    return z;
}

std::vector<int> random_ids(Rng & rng, int n, int vocab) {
    std::vector<int> ids(n);
    for (auto & t : ids) {
        t = static_cast<int>(rng.below(vocab));
    }
    return ids;
}

// Columns below k scatter; from k on every row shares one decaying curve.
Eigen::MatrixXd planted(int k, int n = 40, int L = 12) {
    Rng rng(100 + k);
    Eigen::MatrixXd m(n, L);
    for (int s = 0; s < n; ++s) {
        for (int l = 0; l < L; ++l) {
            m(s, l) = l < k ? 3.0 + 4.0 * rng.uniform() : 2.0 * std::exp(-0.5 * (l - k));
        }
    }
    return m;
}

} // namespace

TEST_CASE("kl_deviation matches a long double oracle") {
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        const int n = 1 + static_cast<int>(rng.below(40));
        std::vector<double> q(n), p(n);
        for (int i = 0; i < n; ++i) {
            q[i] = rng.uniform();
            p[i] = rng.uniform();
            if (rng.below(10) == 0) {
                p[i] = 0.0;  // exercises the floor
            }
        }
        const double got = kl_deviation(q, p);
        CHECK(std::abs(got - static_cast<double>(kl_oracle(q, p))) <= 1e-9 * std::max(1.0, std::abs(got)));
    }
    CHECK(kl_deviation(std::vector<double>{0.3, 0.2}, std::vector<double>{0.3, 0.2}) == 0.0);
    CHECK_THROWS_AS(kl_deviation(std::vector<double>{0.1}, std::vector<double>{}), Error);
}

TEST_CASE("next_token_probs and layer_distribution against the oracle") {
    Rng rng(2);
    const auto model = init_model(testing::tiny_spec(4, 16, 2), 11);
    for (int t = 0; t < 100; ++t) {
        const int n = 2 + static_cast<int>(rng.below(20));
        const auto ids = random_ids(rng, n, model.spec.vocab_size);
        const auto trace = forward_with_hidden(model, ids);
        const int layer = static_cast<int>(rng.below(model.n_layers()));
        const auto got = layer_distribution(model, trace, layer, ids);
        REQUIRE(got.size() == static_cast<std::size_t>(n - 1));
        for (int i = 0; i + 1 < n; ++i) {
            const auto oracle = softmax_oracle(model, trace.hidden_states[layer], i);
            CHECK(std::abs(got[i] - static_cast<double>(oracle[ids[i + 1]])) <= 1e-7);
        }
        // next_token_probs on the final projection
        const auto final_probs = next_token_probs(softmax_rows(trace.logits), ids);
        for (int i = 0; i + 1 < n; ++i) {
            const auto oracle = softmax_oracle(model, trace.hidden_states.back(), i);
            CHECK(std::abs(final_probs[i] - static_cast<double>(oracle[ids[i + 1]])) <= 1e-7);
        }
    }
}

TEST_CASE("next_token_probs input contract") {
    MatD rows = MatD::Constant(3, 4, 0.25);
    CHECK(next_token_probs(rows, std::vector<int>{0, 1, 3}) == std::vector<double>{0.25, 0.25});
    CHECK_THROWS_AS(next_token_probs(rows, std::vector<int>{0}), Error);
    CHECK_THROWS_AS(next_token_probs(rows, std::vector<int>{0, 9, 1}), Error);
    CHECK_THROWS_AS(next_token_probs(rows, std::vector<int>{0, 1}), Error);
}

TEST_CASE("last layer distribution equals the softmaxed logits") {
    const auto model = init_model(testing::tiny_spec(4, 16, 2), 5);
    Rng rng(3);
    const auto ids = random_ids(rng, 12, model.spec.vocab_size);
    const auto trace = forward_with_hidden(model, ids);
    const auto last = layer_distribution(model, trace, model.n_layers() - 1, ids);
    const auto ref = next_token_probs(softmax_rows(trace.logits), ids);
    for (std::size_t i = 0; i < ref.size(); ++i) {
        CHECK(std::abs(last[i] - ref[i]) <= 1e-6);
    }
    const auto r = prediction_trajectory(model, {{ids, FeedMode::teacher_forced}, {ids, FeedMode::teacher_forced}});
    CHECK(r.kl_matrix.rows() == 2);
    CHECK(r.kl_matrix.cols() == 4);
    CHECK(r.kl_matrix(0, 3) <= 1e-5);
}

TEST_CASE("detect_transition on planted fixtures") {
    for (int k : {3, 6, 9}) {
        CAPTURE(k);
        const auto got = detect_transition(planted(k));
        REQUIRE(got.has_value());
        CHECK(*got == k);
    }
    // identical decreasing rows: converged from the start
    Eigen::MatrixXd same(5, 12);
    for (int l = 0; l < 12; ++l) {
        same.col(l).setConstant(10.0 - l);
    }
    CHECK(detect_transition(same) == 0);
    // median rises after every layer
    Eigen::MatrixXd rising(5, 12);
    for (int s = 0; s < 5; ++s) {
        for (int l = 0; l < 12; ++l) {
            rising(s, l) = l + 0.1 * s;
        }
    }
    CHECK_FALSE(detect_transition(rising).has_value());
    CHECK_THROWS_AS(detect_transition(Eigen::MatrixXd::Ones(1, 12)), Error);
}

TEST_CASE("loosening tol_spread never moves the transition later") {
    Rng rng(9);
    for (int t = 0; t < 20; ++t) {
        Eigen::MatrixXd m(10, 8);
        for (int s = 0; s < 10; ++s) {
            for (int l = 0; l < 8; ++l) {
                m(s, l) = (8 - l) * (1.0 + 0.3 * rng.uniform());
            }
        }
        std::optional<int> prev;
        for (double tol : {0.01, 0.05, 0.1, 0.3, 1.0}) {
            const auto cur = detect_transition(m, tol, 1e-3);
            if (prev) {
                REQUIRE(cur.has_value());
                CHECK(*cur <= *prev);
            }
            if (cur) {
                prev = cur;
            }
        }
    }
}

TEST_CASE("free-running continuation equals a stepwise argmax") {
    const auto model = init_model(testing::tiny_spec(4, 16, 2), 21);
    Rng rng(4);
    std::vector<std::vector<int>> prompts;
    for (int i = 0; i < 4; ++i) {
        prompts.push_back(random_ids(rng, 3 + i, model.spec.vocab_size));
    }
    const auto samples = generate_free_running_samples(model, prompts, 6);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        std::vector<int> ids = prompts[i];
        for (int t = 0; t < 6; ++t) {
            const auto trace = forward_with_hidden(model, ids);
            Eigen::Index best = 0;
            trace.logits.row(trace.logits.rows() - 1).maxCoeff(&best);
            ids.push_back(static_cast<int>(best));
        }
        CHECK(samples[i].token_ids == ids);
        CHECK(samples[i].source == FeedMode::free_running);
    }
    const auto one = generate_free_running_samples(model, {prompts[0]}, 1);
    CHECK(one[0].token_ids.size() == prompts[0].size() + 1);
}

TEST_CASE("trajectory modes share a schema") {
    const auto model = init_model(testing::tiny_spec(4, 16, 2), 8);
    Rng rng(6);
    std::vector<TrajectorySample> tf;
    std::vector<std::vector<int>> prompts;
    for (int i = 0; i < 3; ++i) {
        auto ids = random_ids(rng, 9, model.spec.vocab_size);
        prompts.emplace_back(ids.begin(), ids.begin() + 4);
        tf.push_back({ids, FeedMode::teacher_forced});
    }
    const auto a = prediction_trajectory(model, tf);
    const auto b = prediction_trajectory(model, generate_free_running_samples(model, prompts, 5));
    CHECK(a.kl_matrix.rows() == b.kl_matrix.rows());
    CHECK(a.kl_matrix.cols() == b.kl_matrix.cols());
    auto ja = trajectory_summary(a);
    auto jb = trajectory_summary(b);
    CHECK(ja["mode"] == "teacher_forced");
    CHECK(jb["mode"] == "free_running");
    for (auto & [k, v] : ja.items()) {
        CHECK(jb.contains(k));
    }
}
