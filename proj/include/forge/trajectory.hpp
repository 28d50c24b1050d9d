#pragma once

#include "forge/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace forge {

enum class FeedMode { teacher_forced, free_running };

std::string mode_name(FeedMode m);
FeedMode parse_mode(const std::string & s);

struct TrajectorySample {
    std::vector<int> token_ids;
    FeedMode source = FeedMode::teacher_forced;
};

struct TrajectoryResult {
    Eigen::MatrixXd kl_matrix;  // [n_samples × L]
    std::optional<int> transition_layer;
    FeedMode mode = FeedMode::teacher_forced;

    std::vector<double> per_layer_median() const;
};

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kDefaultTolSpread = 0.05;
inline constexpr double kDefaultTolMono = 1e-3;

// out[i] = prob_rows(i, token_ids[i+1]) for i < N-1.
std::vector<double> next_token_probs(const MatD & prob_rows, std::span<const int> token_ids);

// Next-token probabilities read off layer `layer` through the final norm and
// unembedding.
std::vector<double> layer_distribution(const DecoderModel & model, const HiddenTrace & trace, int layer,
                                       std::span<const int> token_ids);

// Σ q·ln(q/p), both floored at kProbFloor.
double kl_deviation(std::span<const double> q, std::span<const double> p);

TrajectoryResult prediction_trajectory(const DecoderModel & model, const std::vector<TrajectorySample> & samples,
                                       double tol_spread = kDefaultTolSpread, double tol_mono = kDefaultTolMono);

// Greedy continuation of each prompt; stops after max_new tokens or at stop_id.
std::vector<TrajectorySample> generate_free_running_samples(const DecoderModel & model,
                                                            const std::vector<std::vector<int>> & prompts, int max_new,
                                                            std::optional<int> stop_id = std::nullopt);

// Smallest layer from which every column is tight across samples and the
// median no longer rises. nullopt when none qualifies.
std::optional<int> detect_transition(const Eigen::MatrixXd & kl_matrix, double tol_spread = kDefaultTolSpread,
                                     double tol_mono = kDefaultTolMono);
std::optional<int> detect_transition(const TrajectoryResult & result, double tol_spread = kDefaultTolSpread,
                                     double tol_mono = kDefaultTolMono);

// sample_id,layer,kl
void write_trajectory_csv(const std::filesystem::path & path, const TrajectoryResult & r);
nlohmann::json trajectory_summary(const TrajectoryResult & r);
// All per-sample curves plus the median, with an arrow at the transition layer.
void write_trajectory_svg(const std::filesystem::path & path, const TrajectoryResult & r, const std::string & title);

} // namespace forge
