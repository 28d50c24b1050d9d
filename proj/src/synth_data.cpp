#include "forge/synth_data.hpp"

#include "forge/digest.hpp"
#include "forge/error.hpp"
#include "forge/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace forge {

namespace {

constexpr int kEvalModulus = 8;  // one hash bucket in eight belongs to the eval split
constexpr int kMaxObjects = 4;
constexpr std::uint8_t kColorLevels[] = {102, 178, 255};
// Occupied cells get a frame at a fixed level, so color is not a pure rescale of the patch.
constexpr std::uint8_t kFrameLevel = 51;

std::uint64_t content_hash(std::string_view s) {
    Fnv1a h;
    h.update(s);
    return h.value();
}

bool in_split(std::string_view key, Split split) {
    const bool eval = content_hash(key) % kEvalModulus == 0;
    return eval == (split == Split::eval);
}

std::string color_name(int c) { return std::string(kColors[c]); }
std::string shape_name(int s) { return std::string(kShapes[s]); }

Scene random_scene(Rng & rng, int n_objects) {
    std::vector<int> cells(kGridCells * kGridCells);
    for (int i = 0; i < static_cast<int>(cells.size()); ++i) {
        cells[i] = i;
    }
    rng.shuffle(cells);
    Scene scene;
    for (int i = 0; i < n_objects; ++i) {
        SceneObject o;
        o.color = static_cast<int>(rng.below(std::size(kColors)));
        o.shape = static_cast<int>(rng.below(std::size(kShapes)));
        o.row = cells[i] / kGridCells;
        o.col = cells[i] % kGridCells;
        scene.objects.push_back(o);
    }
    std::sort(scene.objects.begin(), scene.objects.end(),
              [](const SceneObject & a, const SceneObject & b) { return a.row * kGridCells + a.col < b.row * kGridCells + b.col; });
    return scene;
}

int count_if_obj(const Scene & s, auto pred) {
    return static_cast<int>(std::count_if(s.objects.begin(), s.objects.end(), pred));
}

struct SceneQa {
    std::string question;
    std::string response;
};

// Scene questions shared by the VQA corpus and the text corpus (which states
// the scene in words). Returns false when the drawn scene cannot host the kind.
bool scene_question(Rng & rng, const Scene & scene, VqaTask kind, SceneQa & out) {
    switch (kind) {
        case VqaTask::color: {
            std::vector<const SceneObject *> unique;
            for (const auto & o : scene.objects) {
                if (count_if_obj(scene, [&](const SceneObject & p) { return p.shape == o.shape; }) == 1) {
                    unique.push_back(&o);
                }
            }
            if (unique.empty()) {
                return false;
            }
            const auto * o = unique[rng.below(unique.size())];
            out = {"What color is the " + shape_name(o->shape) + "?", color_name(o->color)};
            return true;
        }
        case VqaTask::shape: {
            std::vector<const SceneObject *> unique;
            for (const auto & o : scene.objects) {
                if (count_if_obj(scene, [&](const SceneObject & p) { return p.color == o.color; }) == 1) {
                    unique.push_back(&o);
                }
            }
            if (unique.empty()) {
                return false;
            }
            const auto * o = unique[rng.below(unique.size())];
            out = {"What shape is the " + color_name(o->color) + " one?", shape_name(o->shape)};
            return true;
        }
        case VqaTask::count:
            out = {"How many shapes are there?", std::to_string(scene.objects.size())};
            return true;
        case VqaTask::position: {
            std::vector<const SceneObject *> unique;
            for (const auto & o : scene.objects) {
                if (count_if_obj(scene, [&](const SceneObject & p) { return p.shape == o.shape && p.color == o.color; }) == 1) {
                    unique.push_back(&o);
                }
            }
            if (unique.empty()) {
                return false;
            }
            const auto * o = unique[rng.below(unique.size())];
            out = {"Where is the " + color_name(o->color) + " " + shape_name(o->shape) + "?", quadrant_name(o->row, o->col)};
            return true;
        }
        case VqaTask::yesno: {
            const bool want_yes = rng.coin();
            if (want_yes) {
                const auto & o = scene.objects[rng.below(scene.objects.size())];
                out = {"Is there a " + color_name(o.color) + " " + shape_name(o.shape) + "?", "yes"};
                return true;
            }
            std::vector<std::pair<int, int>> absent;
            for (int c = 0; c < static_cast<int>(std::size(kColors)); ++c) {
                for (int s = 0; s < static_cast<int>(std::size(kShapes)); ++s) {
                    if (count_if_obj(scene, [&](const SceneObject & p) { return p.color == c && p.shape == s; }) == 0) {
                        absent.emplace_back(c, s);
                    }
                }
            }
            const auto [c, s] = absent[rng.below(absent.size())];
            out = {"Is there a " + color_name(c) + " " + shape_name(s) + "?", "no"};
            return true;
        }
    }
    return false;
}

std::string random_word(Rng & rng, int min_len, int max_len, std::string_view letters) {
    const int len = rng.range(min_len, max_len);
    std::string w;
    for (int i = 0; i < len; ++i) {
        w += letters[rng.below(letters.size())];
    }
    return w;
}

constexpr std::string_view kLetters = "abcdefghijklmnopqrstuvwxyz";

bool symbolic_item(Rng & rng, TextTask task, TextInstruction & out) {
    out.task_tag = task;
    switch (task) {
        case TextTask::copy: {
            const auto w = random_word(rng, 3, 5, kLetters);
            out.question = "Copy: " + w;
            out.response = w;
            return true;
        }
        case TextTask::reverse: {
            const auto w = random_word(rng, 3, 5, kLetters);
            out.question = "Reverse: " + w;
            out.response = std::string(w.rbegin(), w.rend());
            return true;
        }
        case TextTask::arithmetic: {
            const int a = rng.range(10, 59);
            const int b = rng.range(10, 59);
            out.question = "What is " + std::to_string(a) + " + " + std::to_string(b) + "?";
            out.response = std::to_string(a + b);
            return true;
        }
        case TextTask::compare: {
            const int a = rng.range(10, 99);
            int b = rng.range(10, 98);
            if (b >= a) {
                ++b;
            }
            out.question = "Is " + std::to_string(a) + " larger than " + std::to_string(b) + "?";
            out.response = a > b ? "yes" : "no";
            return true;
        }
        case TextTask::count: {
            const auto w = random_word(rng, 4, 7, "abc");
            const char target = "abc"[rng.below(3)];
            out.question = std::string("How many ") + target + " in " + w + "?";
            out.response = std::to_string(std::count(w.begin(), w.end(), target));
            return true;
        }
    }
    return false;
}

// Text-side scene items: the scene is stated as its grid code, occupying the
// positions an image would, ahead of the same question the VQA corpus asks.
bool scene_text_item(Rng & rng, TextTask task, TextInstruction & out, std::string & split_key) {
    VqaTask kind;
    switch (task) {
        case TextTask::copy: {
            constexpr VqaTask lookups[] = {VqaTask::color, VqaTask::shape, VqaTask::position};
            kind = lookups[rng.below(3)];
            break;
        }
        case TextTask::compare: kind = VqaTask::yesno; break;
        case TextTask::count: kind = VqaTask::count; break;
        default: return false;
    }
    const Scene scene = random_scene(rng, rng.range(1, kMaxObjects));
    SceneQa qa;
    if (!scene_question(rng, scene, kind, qa)) {
        return false;
    }
    split_key = describe_scene(scene);
    out.task_tag = task;
    out.question = scene_code(scene) + qa.question;
    out.response = qa.response;
    return true;
}

} // namespace

std::string Raster::hash() const {
    Fnv1a h;
    const int dims[3] = {height, width, channels};
    h.update(dims, sizeof(dims));
    h.update(pixels.data(), pixels.size() * sizeof(float));
    return h.hex();
}

std::string_view task_name(TextTask t) {
    switch (t) {
        case TextTask::copy: return "copy";
        case TextTask::reverse: return "reverse";
        case TextTask::arithmetic: return "arithmetic";
        case TextTask::compare: return "compare";
        case TextTask::count: return "count";
    }
    return "?";
}

std::string_view task_name(VqaTask t) {
    switch (t) {
        case VqaTask::color: return "color";
        case VqaTask::shape: return "shape";
        case VqaTask::count: return "count";
        case VqaTask::position: return "position";
        case VqaTask::yesno: return "yesno";
    }
    return "?";
}

TextTask parse_text_task(std::string_view s) {
    for (auto t : {TextTask::copy, TextTask::reverse, TextTask::arithmetic, TextTask::compare, TextTask::count}) {
        if (task_name(t) == s) {
            return t;
        }
    }
    fail(ErrorKind::data, "unknown text task tag '" + std::string(s) + "'");
}

VqaTask parse_vqa_task(std::string_view s) {
    for (auto t : {VqaTask::color, VqaTask::shape, VqaTask::count, VqaTask::position, VqaTask::yesno}) {
        if (task_name(t) == s) {
            return t;
        }
    }
    fail(ErrorKind::data, "unknown vqa task tag '" + std::string(s) + "'");
}

std::string quadrant_name(int row, int col) {
    std::string q = row < kGridCells / 2 ? "top" : "bottom";
    q += col < kGridCells / 2 ? " left" : " right";
    return q;
}

Raster render_scene(const Scene & scene) {
    Raster r;
    r.height = r.width = kImageSize;
    r.channels = 1;
    r.pixels.assign(static_cast<std::size_t>(kImageSize) * kImageSize, 0.0f);
    for (const auto & o : scene.objects) {
        const float level = static_cast<float>(kColorLevels[o.color]) / 255.0f;
        const float frame = static_cast<float>(kFrameLevel) / 255.0f;
        for (int i = 0; i < kCellSize; ++i) {
            r.at(o.row * kCellSize, o.col * kCellSize + i) = frame;
            r.at(o.row * kCellSize + kCellSize - 1, o.col * kCellSize + i) = frame;
            r.at(o.row * kCellSize + i, o.col * kCellSize) = frame;
            r.at(o.row * kCellSize + i, o.col * kCellSize + kCellSize - 1) = frame;
        }
        for (int y = 1; y < kCellSize - 1; ++y) {
            for (int x = 1; x < kCellSize - 1; ++x) {
                bool on = false;
                switch (o.shape) {
                    case 0: on = true; break;
                    case 1: {
                        const float dy = static_cast<float>(y) - 3.5f;
                        const float dx = static_cast<float>(x) - 3.5f;
                        on = dy * dy + dx * dx <= 9.0f;
                        break;
                    }
                    case 2: on = y == 3 || y == 4 || x == 3 || x == 4; break;
                }
                if (on) {
                    r.at(o.row * kCellSize + y, o.col * kCellSize + x) = level;
                }
            }
        }
    }
    return r;
}

std::string describe_scene(const Scene & scene) {
    std::string out;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        const auto & o = scene.objects[i];
        if (i > 0) {
            out += ", ";
        }
        out += color_name(o.color) + " " + shape_name(o.shape) + " " + quadrant_name(o.row, o.col);
    }
    return out;
}

std::string scene_code(const Scene & scene) {
    std::string code(kGridCells * kGridCells, '.');
    for (const auto & o : scene.objects) {
        code[static_cast<std::size_t>(o.row * kGridCells + o.col)] =
            static_cast<char>('A' + o.color * static_cast<int>(std::size(kShapes)) + o.shape);
    }
    return code;
}

std::vector<TextInstruction> gen_text_corpus(std::uint64_t seed, int n, Split split) {
    require(n >= 1, ErrorKind::input, "corpus size must be >= 1");
    constexpr TextTask order[] = {TextTask::copy, TextTask::reverse, TextTask::arithmetic, TextTask::compare,
                                  TextTask::count};
    std::vector<TextInstruction> items(n);
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::for_item(seed, static_cast<std::uint64_t>(i));
        const TextTask task = order[i % 5];
        const bool scene_capable = task == TextTask::copy || task == TextTask::compare || task == TextTask::count;
        for (;;) {
            TextInstruction item;
            std::string key;
            const bool ok = scene_capable && rng.below(4) != 0 ? scene_text_item(rng, task, item, key)
                                                        : symbolic_item(rng, task, item);
            if (!ok) {
                continue;
            }
            if (key.empty()) {
                key = item.question;
            }
            if (in_split(key, split)) {
                items[i] = std::move(item);
                break;
            }
        }
    }
    return items;
}

std::vector<VqaInstruction> gen_vqa_corpus(std::uint64_t seed, int n, Split split) {
    require(n >= 1, ErrorKind::input, "corpus size must be >= 1");
    constexpr VqaTask order[] = {VqaTask::color, VqaTask::shape, VqaTask::count, VqaTask::position, VqaTask::yesno};
    std::vector<VqaInstruction> items(n);
    // distinct stream from the text corpus for the same seed
    const std::uint64_t stream = Rng::mix(seed ^ 0x5651415f73636e65ULL);
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::for_item(stream, static_cast<std::uint64_t>(i));
        const VqaTask task = order[i % 5];
        for (;;) {
            const Scene scene = random_scene(rng, rng.range(1, kMaxObjects));
            if (!in_split(describe_scene(scene), split)) {
                continue;
            }
            SceneQa qa;
            if (!scene_question(rng, scene, task, qa)) {
                continue;
            }
            items[i].scene = scene;
            items[i].image = render_scene(scene);
            items[i].question = std::move(qa.question);
            items[i].response = std::move(qa.response);
            items[i].task_tag = task;
            break;
        }
    }
    return items;
}

namespace {

std::string split_name(Split s) { return s == Split::train ? "train" : "eval"; }

void write_manifest(const std::filesystem::path & dir, std::string_view kind, std::uint64_t seed, std::size_t n,
                    Split split, const std::string & items_hash) {
    nlohmann::json m = {{"kind", kind},   {"seed", seed}, {"n", n}, {"split", split_name(split)},
                        {"items_hash", items_hash}};
    std::ofstream(dir / "MANIFEST.json") << m.dump(2) << "\n";
}

nlohmann::json read_lines_checked(const std::filesystem::path & file, std::vector<nlohmann::json> & rows) {
    std::ifstream in(file);
    require(in.good(), ErrorKind::data, "cannot open corpus file " + file.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            rows.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception & e) {
            fail(ErrorKind::data, file.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return {};
}

} // namespace

namespace {

std::string text_row(const TextInstruction & it) {
    return nlohmann::json{{"task_tag", task_name(it.task_tag)}, {"question", it.question}, {"response", it.response}}
        .dump();
}

std::string vqa_row(const VqaInstruction & it, const std::string & image_path) {
    return nlohmann::json{{"task_tag", task_name(it.task_tag)},
                          {"question", it.question},
                          {"response", it.response},
                          {"image_path", image_path}}
        .dump();
}

std::string image_name(std::size_t i) {
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.pgm", i);
    return name;
}

} // namespace

std::string corpus_hash(const std::vector<TextInstruction> & items) {
    Fnv1a h;
    for (const auto & it : items) {
        h.update(text_row(it));
    }
    return h.hex();
}

std::string corpus_hash(const std::vector<VqaInstruction> & items) {
    Fnv1a h;
    for (std::size_t i = 0; i < items.size(); ++i) {
        h.update(vqa_row(items[i], image_name(i)));
        h.update(items[i].image.hash());
    }
    return h.hex();
}

void write_text_corpus(const std::filesystem::path & dir, const std::vector<TextInstruction> & items,
                       std::uint64_t seed, Split split) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "data.jsonl");
    for (const auto & it : items) {
        out << text_row(it) << "\n";
    }
    write_manifest(dir, "text", seed, items.size(), split, corpus_hash(items));
}

void write_vqa_corpus(const std::filesystem::path & dir, const std::vector<VqaInstruction> & items,
                      std::uint64_t seed, Split split) {
    std::filesystem::create_directories(dir / "images");
    std::ofstream out(dir / "data.jsonl");
    for (std::size_t i = 0; i < items.size(); ++i) {
        const std::string name = image_name(i);
        write_pgm(dir / name, items[i].image);
        out << vqa_row(items[i], name) << "\n";
    }
    write_manifest(dir, "vqa", seed, items.size(), split, corpus_hash(items));
}

std::vector<TextInstruction> read_text_corpus(const std::filesystem::path & dir) {
    std::vector<nlohmann::json> rows;
    read_lines_checked(dir / "data.jsonl", rows);
    std::vector<TextInstruction> items;
    for (const auto & r : rows) {
        try {
            items.push_back({r.at("question").get<std::string>(), r.at("response").get<std::string>(),
                             parse_text_task(r.at("task_tag").get<std::string>())});
        } catch (const nlohmann::json::exception & e) {
            fail(ErrorKind::data, "text corpus row: " + std::string(e.what()));
        }
    }
    return items;
}

std::vector<VqaInstruction> read_vqa_corpus(const std::filesystem::path & dir) {
    std::vector<nlohmann::json> rows;
    read_lines_checked(dir / "data.jsonl", rows);
    std::vector<VqaInstruction> items;
    for (const auto & r : rows) {
        try {
            VqaInstruction it;
            it.question = r.at("question").get<std::string>();
            it.response = r.at("response").get<std::string>();
            it.task_tag = parse_vqa_task(r.at("task_tag").get<std::string>());
            it.image = read_pgm(dir / r.at("image_path").get<std::string>());
            items.push_back(std::move(it));
        } catch (const nlohmann::json::exception & e) {
            fail(ErrorKind::data, "vqa corpus row: " + std::string(e.what()));
        }
    }
    return items;
}

void write_pgm(const std::filesystem::path & path, const Raster & r) {
    require(r.channels == 1, ErrorKind::input, "PGM output needs a single-channel raster");
    std::ofstream out(path, std::ios::binary);
    out << "P5\n" << r.width << " " << r.height << "\n255\n";
    for (float v : r.pixels) {
        const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        out.put(static_cast<char>(byte));
    }
    require(out.good(), ErrorKind::data, "failed writing " + path.string());
}

Raster read_pgm(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::data, "cannot open image " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    require(magic == "P5" && w > 0 && h > 0 && maxval == 255, ErrorKind::data, "unsupported PGM header in " + path.string());
    in.get();
    Raster r;
    r.width = w;
    r.height = h;
    r.channels = 1;
    r.pixels.resize(static_cast<std::size_t>(w) * h);
    for (auto & v : r.pixels) {
        const int c = in.get();
        require(c != EOF, ErrorKind::data, "truncated PGM " + path.string());
        v = static_cast<float>(c) / 255.0f;
    }
    return r;
}

} // namespace forge
