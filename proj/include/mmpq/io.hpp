#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "mmpq/optimizer.hpp"
#include "mmpq/pq.hpp"

namespace mmpq {

nlohmann::json to_json(const ModelGraph& model);
ModelGraph model_from_json(const nlohmann::json& j);

nlohmann::json to_json(const CodebookPair& pair);
CodebookPair codebooks_from_json(const nlohmann::json& j);

nlohmann::json to_json(const CompressedModel& model);
CompressedModel compressed_from_json(const nlohmann::json& j);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

std::vector<std::byte> read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace mmpq
