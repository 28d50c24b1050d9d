#pragma once

#include "forge/model.hpp"
#include "forge/multimodal.hpp"
#include "forge/rng.hpp"

#include <filesystem>
#include <string>

namespace testing {

inline forge::ModelSpec tiny_spec(int layers = 4, int d = 16, int heads = 2) {
    forge::ModelSpec s;
    s.n_layers = layers;
    s.d_model = d;
    s.n_heads = heads;
    s.vocab_size = 79;
    s.max_seq_len = 96;
    return s;
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string & tag) {
        path = std::filesystem::temp_directory_path() /
               ("forge_test_" + tag + "_" + std::to_string(forge::Rng::mix(reinterpret_cast<std::uintptr_t>(this))));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

inline forge::Mat random_mat(forge::Rng & rng, int rows, int cols, double scale = 1.0) {
    forge::Mat m(rows, cols);
    for (int i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>((rng.uniform() * 2.0 - 1.0) * scale);
    }
    return m;
}

// Fresh models zero their residual output projections; fill them so every
// parameter receives gradient.
inline void wake(forge::DecoderModel & m, std::uint64_t seed) {
    forge::Rng rng(seed);
    for (auto & l : m.layers) {
        l.wo = random_mat(rng, static_cast<int>(l.wo.rows()), static_cast<int>(l.wo.cols()), 0.2);
        l.w_down = random_mat(rng, static_cast<int>(l.w_down.rows()), static_cast<int>(l.w_down.cols()), 0.2);
    }
}

inline void wake(forge::VisionBundle & b, std::uint64_t seed) {
    forge::Rng rng(seed);
    for (auto & l : b.encoder.layers) {
        l.wo = random_mat(rng, static_cast<int>(l.wo.rows()), static_cast<int>(l.wo.cols()), 0.2);
        l.w_proj = random_mat(rng, static_cast<int>(l.w_proj.rows()), static_cast<int>(l.w_proj.cols()), 0.2);
    }
}

} // namespace testing
