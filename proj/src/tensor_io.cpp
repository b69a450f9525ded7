#include "remap/tensor_io.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "remap/binary_io.hpp"
#include "remap/error.hpp"

namespace remap {

namespace fs = std::filesystem;
using nlohmann::json;

FeatureMap::FeatureMap(std::uint32_t w, std::uint32_t h, std::uint32_t d, std::uint32_t layer)
    : width(w), height(h), depth(d), layer_id(layer),
      data(static_cast<std::size_t>(w) * h * d, 0.0f) {}

void FeatureMap::validate() const {
    if (width == 0 || height == 0 || depth == 0) {
        throw DataError("feature map has a zero dimension (" + std::to_string(width) + "x" +
                        std::to_string(height) + "x" + std::to_string(depth) + ")");
    }
    const std::size_t expected = static_cast<std::size_t>(width) * height * depth;
    if (data.size() != expected) {
        throw DataError("feature map payload holds " + std::to_string(data.size()) +
                        " values, dims require " + std::to_string(expected));
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
            throw DataError("feature map value " + std::to_string(i) + " is not finite");
        }
    }
}

void write_tensor(const FeatureMap& map, const fs::path& path) {
    try {
        map.validate();
    } catch (const DataError& e) {
        throw DataError(path.string() + ": refusing to write: " + e.what());
    }
    binary::Writer out;
    out.bytes(std::string_view(kTensorMagic, sizeof kTensorMagic));
    out.u32(kTensorVersion);
    out.u32(map.layer_id);
    out.u32(map.width);
    out.u32(map.height);
    out.u32(map.depth);
    out.f32s(map.data);
    out.save(path);
}

FeatureMap read_tensor(const fs::path& path) {
    auto in = binary::Reader::open(path);
    if (in.size() < kTensorHeaderBytes) {
        throw CorruptionError(path.string() + ": file shorter than tensor header");
    }
    if (in.bytes(8) != std::string_view(kTensorMagic, sizeof kTensorMagic)) {
        throw FormatError(path.string() + ": bad magic, not a tensor file");
    }
    if (const auto version = in.u32(); version != kTensorVersion) {
        throw FormatError(path.string() + ": unsupported tensor version " + std::to_string(version));
    }
    FeatureMap map;
    map.layer_id = in.u32();
    map.width = in.u32();
    map.height = in.u32();
    map.depth = in.u32();
    const auto count = static_cast<std::uint64_t>(map.width) * map.height * map.depth;
    if (count * 4 != in.remaining()) {
        throw CorruptionError(path.string() + ": dims " + std::to_string(map.width) + "x" +
                              std::to_string(map.height) + "x" + std::to_string(map.depth) +
                              " need " + std::to_string(count * 4) + " payload bytes, file has " +
                              std::to_string(in.remaining()));
    }
    map.data.resize(count);
    for (auto& v : map.data) v = in.f32();
    try {
        map.validate();
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return map;
}

// ---------------------------------------------------------------------------
// Manifest

std::map<int, FeatureMap> ManifestEntry::load_maps(std::size_t scale) const {
    if (scale >= feature_paths.size()) {
        throw DataError(image_id + ": no feature files for scale variant " + std::to_string(scale));
    }
    std::map<int, FeatureMap> maps;
    for (const auto& [layer, path] : feature_paths[scale]) {
        maps.emplace(layer, read_tensor(path));
    }
    return maps;
}

std::map<int, FeatureMap> ManifestEntry::load_maps(std::span<const int> layer_ids, std::size_t scale) const {
    if (scale >= feature_paths.size()) {
        throw DataError(image_id + ": no feature files for scale variant " + std::to_string(scale));
    }
    std::map<int, FeatureMap> maps;
    for (int layer : layer_ids) {
        const auto it = feature_paths[scale].find(layer);
        if (it == feature_paths[scale].end()) {
            throw DataError(image_id + ": missing feature file for layer " + std::to_string(layer));
        }
        maps.emplace(layer, read_tensor(it->second));
    }
    return maps;
}

const ManifestEntry* DatasetManifest::find(const std::string& image_id) const {
    const auto it = index_.find(image_id);
    return it == index_.end() ? nullptr : &entries[it->second];
}

std::size_t DatasetManifest::index_of(const std::string& image_id) const {
    const auto it = index_.find(image_id);
    if (it == index_.end()) throw DataError("unknown image_id: " + image_id);
    return it->second;
}

void DatasetManifest::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!index_.emplace(entries[i].image_id, i).second) {
            throw DataError("duplicate image_id: " + entries[i].image_id);
        }
    }
}

void DatasetManifest::validate() const {
    std::set<std::string> seen;
    for (const auto& entry : entries) {
        if (entry.image_id.empty()) throw DataError("manifest entry with empty image_id");
        if (!seen.insert(entry.image_id).second) throw DataError("duplicate image_id: " + entry.image_id);
    }
    for (const auto& entry : entries) {
        if (entry.is_query && entry.relevant_ids.empty()) {
            throw DataError("query " + entry.image_id + " has no relevant_ids");
        }
        for (const auto& scale : entry.feature_paths) {
            for (const auto& [layer, path] : scale) {
                if (!fs::exists(path)) {
                    throw DataError(entry.image_id + ": feature file for layer " + std::to_string(layer) +
                                    " not found: " + path.string());
                }
            }
        }
    }
}

namespace {

LayerPaths parse_layer_paths(const json& object, const fs::path& base, const std::string& where) {
    if (!object.is_object()) throw DataError(where + ": feature_paths must map layer_id to path");
    LayerPaths paths;
    for (const auto& [key, value] : object.items()) {
        int layer = 0;
        try {
            std::size_t used = 0;
            layer = std::stoi(key, &used);
            if (used != key.size()) throw std::invalid_argument(key);
        } catch (const std::exception&) {
            throw DataError(where + ": layer key '" + key + "' is not an integer");
        }
        fs::path p = value.get<std::string>();
        if (p.is_relative()) p = base / p;
        paths.emplace(layer, p.lexically_normal());
    }
    return paths;
}

std::vector<std::string> string_list(const json& line, const char* key) {
    if (!line.contains(key) || line[key].is_null()) return {};
    return line[key].get<std::vector<std::string>>();
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path.string());
    const fs::path base = path.parent_path();

    DatasetManifest manifest;
    std::string text;
    std::size_t line_no = 0;
    while (std::getline(in, text)) {
        ++line_no;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no);
        try {
            const json line = json::parse(text);
            ManifestEntry entry;
            entry.image_id = line.at("image_id").get<std::string>();
            if (line.contains("feature_paths")) {
                const auto& fp = line["feature_paths"];
                if (fp.is_array()) {
                    for (const auto& scale : fp) entry.feature_paths.push_back(parse_layer_paths(scale, base, where));
                } else {
                    entry.feature_paths.push_back(parse_layer_paths(fp, base, where));
                }
            }
            if (line.contains("class_id") && !line["class_id"].is_null()) entry.class_id = line["class_id"].get<int>();
            entry.is_query = line.value("is_query", false);
            entry.in_database = line.value("in_database", true);
            entry.relevant_ids = string_list(line, "relevant_ids");
            entry.junk_ids = string_list(line, "junk_ids");
            manifest.entries.push_back(std::move(entry));
        } catch (const json::exception& e) {
            throw DataError(where + ": " + e.what());
        }
    }
    manifest.validate();
    manifest.reindex();
    return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
    const fs::path base = path.parent_path();
    std::ostringstream out;
    auto encode_paths = [&](const LayerPaths& paths) {
        json object = json::object();
        for (const auto& [layer, p] : paths) {
            const auto rel = base.empty() ? p : p.lexically_relative(base);
            const bool below = !rel.empty() && *rel.begin() != "..";
            object[std::to_string(layer)] = (below ? rel : p).generic_string();
        }
        return object;
    };
    for (const auto& entry : manifest.entries) {
        json line;
        line["image_id"] = entry.image_id;
        if (entry.feature_paths.size() == 1) {
            line["feature_paths"] = encode_paths(entry.feature_paths.front());
        } else {
            json scales = json::array();
            for (const auto& s : entry.feature_paths) scales.push_back(encode_paths(s));
            line["feature_paths"] = scales;
        }
        if (entry.class_id) line["class_id"] = *entry.class_id;
        line["is_query"] = entry.is_query;
        if (!entry.in_database) line["in_database"] = false;
        if (!entry.relevant_ids.empty()) line["relevant_ids"] = entry.relevant_ids;
        if (!entry.junk_ids.empty()) line["junk_ids"] = entry.junk_ids;
        out << line.dump() << '\n';
    }
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw IoError("cannot open manifest for writing: " + path.string());
    file << out.str();
    if (!file) throw IoError("write failed: " + path.string());
}

}  // namespace remap
