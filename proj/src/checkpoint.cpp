#include "forge/checkpoint.hpp"

#include "forge/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace forge {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'F', 'R', 'G', 'A'};

template <class T> void put(std::ofstream & out, T value) { out.write(reinterpret_cast<const char *>(&value), sizeof(T)); }

template <class T> T get(std::ifstream & in, const std::string & what) {
    T value{};
    in.read(reinterpret_cast<char *>(&value), sizeof(T));
    require(in.good(), ErrorKind::load, "truncated archive while reading " + what);
    return value;
}

} // namespace

std::string role_name(ArchiveRole role) {
    switch (role) {
        case ArchiveRole::target: return "target";
        case ArchiveRole::surrogate: return "surrogate";
        case ArchiveRole::encoder: return "encoder";
        case ArchiveRole::adapter: return "adapter";
        case ArchiveRole::optimizer: return "optimizer";
    }
    return "?";
}

ArchiveRole parse_role(const std::string & s) {
    for (auto r : {ArchiveRole::target, ArchiveRole::surrogate, ArchiveRole::encoder, ArchiveRole::adapter,
                   ArchiveRole::optimizer}) {
        if (role_name(r) == s) {
            return r;
        }
    }
    fail(ErrorKind::load, "unknown archive role '" + s + "'");
}

const Mat & Archive::at(const std::string & name) const {
    const auto it = tensors.find(name);
    require(it != tensors.end(), ErrorKind::load, "missing key '" + name + "'");
    return it->second;
}

std::filesystem::path manifest_path(const std::filesystem::path & archive_path) {
    return archive_path.string() + ".json";
}

void write_archive(const std::filesystem::path & path, const Archive & archive) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    {
        std::ofstream out(path, std::ios::binary);
        require(out.good(), ErrorKind::load, "cannot write archive " + path.string());
        out.write(kMagic, 4);
        put<std::uint32_t>(out, kArchiveFormatVersion);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.tensors.size()));
        for (const auto & [name, m] : archive.tensors) {
            put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<std::int64_t>(out, m.rows());
            put<std::int64_t>(out, m.cols());
            out.write(reinterpret_cast<const char *>(m.data()), static_cast<std::streamsize>(sizeof(float) * m.size()));
        }
        require(out.good(), ErrorKind::load, "failed writing archive " + path.string());
    }
    std::ofstream(manifest_path(path)) << archive.manifest.dump(2) << "\n";
}

Archive read_archive(const std::filesystem::path & path) {
    Archive a;
    {
        std::ifstream mf(manifest_path(path));
        require(mf.good(), ErrorKind::load, "missing manifest " + manifest_path(path).string());
        try {
            mf >> a.manifest;
        } catch (const nlohmann::json::exception & e) {
            fail(ErrorKind::load, "bad manifest: " + std::string(e.what()));
        }
    }
    const int version = a.manifest.value("format_version", -1);
    require(version == kArchiveFormatVersion, ErrorKind::load,
            "manifest format_version " + std::to_string(version) + " != supported " + std::to_string(kArchiveFormatVersion));
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::load, "cannot open archive " + path.string());
    char magic[4];
    in.read(magic, 4);
    require(in.good() && std::memcmp(magic, kMagic, 4) == 0, ErrorKind::load, "not a forge archive: " + path.string());
    const auto file_version = get<std::uint32_t>(in, "version");
    require(file_version == static_cast<std::uint32_t>(kArchiveFormatVersion), ErrorKind::load,
            "archive format version " + std::to_string(file_version) + " unsupported");
    const auto count = get<std::uint32_t>(in, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = get<std::uint32_t>(in, "name length");
        require(len < 4096, ErrorKind::load, "corrupt tensor name length");
        std::string name(len, '\0');
        in.read(name.data(), len);
        const auto rows = get<std::int64_t>(in, name + " rows");
        const auto cols = get<std::int64_t>(in, name + " cols");
        require(rows >= 0 && cols >= 0 && rows * cols < (1LL << 32), ErrorKind::load, "corrupt shape for '" + name + "'");
        Mat m(rows, cols);
        in.read(reinterpret_cast<char *>(m.data()), static_cast<std::streamsize>(sizeof(float) * m.size()));
        require(in.good(), ErrorKind::load, "truncated data for '" + name + "'");
        a.tensors.emplace(std::move(name), std::move(m));
    }
    return a;
}

namespace {

void check_shape(const std::string & name, const Mat & m, Eigen::Index rows, Eigen::Index cols) {
    require(m.rows() == rows && m.cols() == cols, ErrorKind::load,
            "shape mismatch for '" + name + "': archive [" + std::to_string(m.rows()) + " x " + std::to_string(m.cols()) +
                "], expected [" + std::to_string(rows) + " x " + std::to_string(cols) + "]");
}

// Copies every visited parameter from the archive with shape checks, then
// rejects leftover keys.
template <class Visitable> void fill_from(Visitable & target, const Archive & a) {
    std::size_t used = 0;
    target.visit([&](const std::string & name, Mat & m) {
        const Mat & src = a.at(name);
        check_shape(name, src, m.rows(), m.cols());
        m = src;
        ++used;
    });
    require(used == a.tensors.size(), ErrorKind::load, "archive holds keys the manifest does not describe");
}

void merge(nlohmann::json & into, const nlohmann::json & extra) {
    if (extra.is_object()) {
        for (const auto & [k, v] : extra.items()) {
            into[k] = v;
        }
    }
}

} // namespace

Archive decoder_archive(const DecoderModel & model, ArchiveRole role, const nlohmann::json & extra) {
    Archive a;
    model.visit([&](const std::string & name, const Mat & m) { a.tensors.emplace(name, m); });
    a.manifest = {{"format_version", kArchiveFormatVersion},
                  {"role", role_name(role)},
                  {"spec", model.spec.to_json()},
                  {"checksum", checksum(model)},
                  {"parent_checksum", nullptr},
                  {"created_by", "forge"}};
    merge(a.manifest, extra);
    return a;
}

// Archives written before checksums were recorded carry none; those load as is.
static void verify_checksum(const Archive & a, const std::string & actual) {
    if (!a.manifest.contains("checksum") || !a.manifest.at("checksum").is_string()) {
        return;
    }
    const std::string expected = a.manifest.at("checksum").get<std::string>();
    require(expected == actual, ErrorKind::load, "checksum mismatch: manifest " + expected + ", data " + actual);
}

DecoderModel decoder_from_archive(const Archive & a) {
    const std::string role = a.manifest.value("role", std::string());
    require(role == "target" || role == "surrogate", ErrorKind::load, "archive role '" + role + "' is not a decoder");
    require(a.manifest.contains("spec"), ErrorKind::load, "manifest lacks 'spec'");
    ModelSpec spec;
    try {
        spec = ModelSpec::from_json(a.manifest.at("spec"));
    } catch (const Error & e) {
        fail(ErrorKind::load, e.what());
    }
    DecoderModel m;
    m.spec = spec;
    const int d = spec.d_model;
    const int h = spec.mlp_hidden();
    m.token_embedding = Mat::Zero(spec.vocab_size, d);
    m.layers.resize(spec.n_layers);
    for (auto & l : m.layers) {
        l.attn_norm = Mat::Zero(1, d);
        l.wq = l.wk = l.wv = l.wo = Mat::Zero(d, d);
        l.mlp_norm = Mat::Zero(1, d);
        l.w_gate = l.w_up = Mat::Zero(h, d);
        l.w_down = Mat::Zero(d, h);
    }
    m.final_norm = Mat::Zero(1, d);
    m.unembedding = Mat::Zero(spec.vocab_size, d);
    fill_from(m, a);
    verify_checksum(a, checksum(m));
    return m;
}

Archive bundle_archive(const VisionBundle & bundle, const nlohmann::json & extra) {
    Archive a;
    bundle.visit([&](const std::string & name, const Mat & m) { a.tensors.emplace(name, m); });
    a.manifest = {{"format_version", kArchiveFormatVersion},
                  {"role", role_name(ArchiveRole::encoder)},
                  {"encoder", bundle.encoder.config.to_json()},
                  {"adapter", {{"in", bundle.adapter.in_width()},
                               {"hidden", bundle.adapter.hidden_width()},
                               {"out", bundle.adapter.out_width()}}},
                  {"trainable_scope", bundle.trainable_scope.to_string()},
                  {"checksum", checksum(bundle)},
                  {"parent_checksum", nullptr},
                  {"created_by", "forge"}};
    merge(a.manifest, extra);
    return a;
}

VisionBundle bundle_from_archive(const Archive & a) {
    const std::string role = a.manifest.value("role", std::string());
    require(role == "encoder" || role == "adapter", ErrorKind::load, "archive role '" + role + "' is not a vision bundle");
    EncoderConfig cfg;
    TrainableScope scope;
    int hidden = 0, out = 0;
    try {
        cfg = EncoderConfig::from_json(a.manifest.at("encoder"));
        scope = TrainableScope::parse(a.manifest.at("trainable_scope").get<std::string>());
        hidden = a.manifest.at("adapter").at("hidden").get<int>();
        out = a.manifest.at("adapter").at("out").get<int>();
    } catch (const std::exception & e) {
        fail(ErrorKind::load, std::string("bundle manifest: ") + e.what());
    }
    VisionBundle b = init_vision_bundle(cfg, out, hidden, scope, 0);
    fill_from(b, a);
    verify_checksum(a, checksum(b));
    return b;
}

void save_checkpoint(const DecoderModel & model, const std::filesystem::path & path, ArchiveRole role,
                     const nlohmann::json & extra) {
    write_archive(path, decoder_archive(model, role, extra));
}

DecoderModel load_checkpoint(const std::filesystem::path & path) { return decoder_from_archive(read_archive(path)); }

void save_bundle(const VisionBundle & bundle, const std::filesystem::path & path, const nlohmann::json & extra) {
    write_archive(path, bundle_archive(bundle, extra));
}

VisionBundle load_bundle(const std::filesystem::path & path) { return bundle_from_archive(read_archive(path)); }

} // namespace forge
