#pragma once

#include "forge/model.hpp"
#include "forge/multimodal.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace forge {

inline constexpr int kArchiveFormatVersion = 1;

enum class ArchiveRole { target, surrogate, encoder, adapter, optimizer };

std::string role_name(ArchiveRole role);
ArchiveRole parse_role(const std::string & s);

// Flat name → tensor container. On disk: "<path>" holds the tensors
// (little-endian f32) and "<path>.json" the manifest.
struct Archive {
    nlohmann::json manifest;
    std::map<std::string, Mat> tensors;

    const Mat & at(const std::string & name) const;
};

void write_archive(const std::filesystem::path & path, const Archive & archive);
Archive read_archive(const std::filesystem::path & path);
std::filesystem::path manifest_path(const std::filesystem::path & archive_path);

// Archive of a decoder; manifest carries format_version, role, spec, checksum
// and any extra fields (which override defaults).
Archive decoder_archive(const DecoderModel & model, ArchiveRole role, const nlohmann::json & extra = {});
DecoderModel decoder_from_archive(const Archive & archive);

Archive bundle_archive(const VisionBundle & bundle, const nlohmann::json & extra = {});
VisionBundle bundle_from_archive(const Archive & archive);

void save_checkpoint(const DecoderModel & model, const std::filesystem::path & path, ArchiveRole role,
                     const nlohmann::json & extra = {});
DecoderModel load_checkpoint(const std::filesystem::path & path);

void save_bundle(const VisionBundle & bundle, const std::filesystem::path & path, const nlohmann::json & extra = {});
VisionBundle load_bundle(const std::filesystem::path & path);

} // namespace forge
