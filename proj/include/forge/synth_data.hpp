#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace forge {

// Row-major [H × W × C] raster with values in [0, 1] on a 1/255 grid.
struct Raster {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<float> pixels;

    float at(int y, int x, int c = 0) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float & at(int y, int x, int c = 0) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::string hash() const;

    bool operator==(const Raster &) const = default;
};

enum class TextTask { copy, reverse, arithmetic, compare, count };
enum class VqaTask { color, shape, count, position, yesno };
enum class Split { train, eval };

inline constexpr std::string_view kColors[] = {"red", "green", "blue"};
inline constexpr std::string_view kShapes[] = {"square", "circle", "cross"};
inline constexpr int kGridCells = 4;   // 4 × 4 grid of objects
inline constexpr int kCellSize = 8;
inline constexpr int kImageSize = kGridCells * kCellSize;

struct SceneObject {
    int color = 0;
    int shape = 0;
    int row = 0;
    int col = 0;
};

struct Scene {
    std::vector<SceneObject> objects;  // distinct cells, sorted by (row, col)
};

struct TextInstruction {
    std::string question;
    std::string response;
    TextTask task_tag = TextTask::copy;
};

struct VqaInstruction {
    Raster image;
    Scene scene;
    std::string question;
    std::string response;
    VqaTask task_tag = VqaTask::color;
};

std::string_view task_name(TextTask t);
std::string_view task_name(VqaTask t);
TextTask parse_text_task(std::string_view s);
VqaTask parse_vqa_task(std::string_view s);

Raster render_scene(const Scene & scene);
// "red square top left, blue circle bottom right"
std::string describe_scene(const Scene & scene);
std::string quadrant_name(int row, int col);
// One character per grid cell, row-major: '.' when empty, else 'A' + 3·color + shape.
std::string scene_code(const Scene & scene);

// Pure generators: (seed, n, split) fully determine the output. Item i depends
// only on (seed, i) so generation can be partitioned by index. Splits are
// disjoint by construction: an item's content hash decides which split may hold it.
std::vector<TextInstruction> gen_text_corpus(std::uint64_t seed, int n, Split split = Split::train);
std::vector<VqaInstruction> gen_vqa_corpus(std::uint64_t seed, int n, Split split = Split::train);

// Line-delimited JSON: {task_tag, question, response, image_path?} plus MANIFEST.json.
void write_text_corpus(const std::filesystem::path & dir, const std::vector<TextInstruction> & items,
                       std::uint64_t seed, Split split);
void write_vqa_corpus(const std::filesystem::path & dir, const std::vector<VqaInstruction> & items,
                      std::uint64_t seed, Split split);
// FNV-1a over the serialized rows (and image bytes); matches MANIFEST items_hash.
std::string corpus_hash(const std::vector<TextInstruction> & items);
std::string corpus_hash(const std::vector<VqaInstruction> & items);

std::vector<TextInstruction> read_text_corpus(const std::filesystem::path & dir);
std::vector<VqaInstruction> read_vqa_corpus(const std::filesystem::path & dir);

// Binary PGM (P5) for single-channel rasters; lossless on the 1/255 grid.
void write_pgm(const std::filesystem::path & path, const Raster & r);
Raster read_pgm(const std::filesystem::path & path);

} // namespace forge
