#include "remap/synth.hpp"

#include <cmath>
#include <set>

#include "remap/error.hpp"
#include "remap/rng.hpp"

namespace remap {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
    std::vector<std::string> problems;
    if (classes < 2) problems.emplace_back("synth: need at least 2 classes");
    if (per_class < 2) problems.emplace_back("synth: need at least 2 images per class");
    if (layers.empty()) problems.emplace_back("synth: no layers");
    std::set<int> ids;
    for (const auto& l : layers) {
        if (l.width < 1 || l.height < 1 || l.depth < 1) problems.emplace_back("synth: layer dims must be positive");
        if (!ids.insert(l.layer_id).second) problems.emplace_back("synth: duplicate layer id");
    }
    if (scales.empty()) problems.emplace_back("synth: no scale variants");
    for (double s : scales) {
        if (!(s > 0.0)) problems.emplace_back("synth: scale multipliers must be positive");
    }
    if (!(object_x0 < object_x1 && object_y0 < object_y1)) problems.emplace_back("synth: empty object box");
    if (!problems.empty()) {
        std::string msg = "invalid synthetic dataset config:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ConfigError(msg);
    }
}

namespace {

std::vector<double> sparse_pattern(SeededRng& rng, int depth) {
    std::vector<double> p(static_cast<std::size_t>(depth));
    for (auto& v : p) v = rng.uniform() < 0.35 ? rng.uniform(0.5, 1.5) : rng.uniform(0.0, 0.1);
    return p;
}

struct Blob {
    double cx = 0.0;
    double cy = 0.0;
    std::size_t pattern = 0;
    double amplitude = 0.0;
};

}  // namespace

std::vector<SynthImage> generate_split(const SynthConfig& config, SynthSplit split) {
    config.validate();
    const std::uint64_t split_tag = split == SynthSplit::Train ? 1 : 2;
    const std::size_t classes =
        split == SynthSplit::Train && config.train_classes > 0 ? config.train_classes : config.classes;
    const std::size_t per_class =
        split == SynthSplit::Train && config.train_per_class > 0 ? config.train_per_class : config.per_class;
    const int class_base = split == SynthSplit::Train ? 0 : 1000;

    // Clutter dictionary is shared by both splits; prototypes are not.
    std::vector<std::vector<std::vector<double>>> clutter(config.layers.size());
    for (std::size_t l = 0; l < config.layers.size(); ++l) {
        SeededRng rng(mix_seed({config.seed, 0xC1077E5ULL, l}));
        for (std::size_t p = 0; p < config.clutter_patterns; ++p) {
            clutter[l].push_back(sparse_pattern(rng, config.layers[l].depth));
        }
    }

    std::vector<SynthImage> images;
    images.reserve(classes * per_class);
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::vector<double>> prototype;
        {
            SeededRng rng(mix_seed({config.seed, split_tag, 0x9707ULL, c}));
            for (const auto& layer : config.layers) prototype.push_back(sparse_pattern(rng, layer.depth));
        }
        for (std::size_t i = 0; i < per_class; ++i) {
            SeededRng rng(mix_seed({config.seed, split_tag, c, i}));
            SynthImage image;
            image.class_id = class_base + static_cast<int>(c);
            image.image_id = std::string(split == SynthSplit::Train ? "train" : "test") + "_c" + std::to_string(c) +
                             "_i" + std::to_string(i);

            const double dx = rng.uniform(-config.jitter, config.jitter);
            const double dy = rng.uniform(-config.jitter, config.jitter);
            std::vector<std::vector<double>> instance;
            for (const auto& layer : config.layers) {
                std::vector<double> noise(static_cast<std::size_t>(layer.depth));
                for (auto& v : noise) v = std::exp(config.instance_noise * rng.normal());
                instance.push_back(std::move(noise));
            }
            std::vector<Blob> blobs(config.clutter_blobs);
            for (auto& b : blobs) {
                b.cx = rng.uniform();
                b.cy = rng.uniform();
                b.pattern = config.clutter_patterns > 0 ? rng.below(config.clutter_patterns) : 0;
                b.amplitude = config.clutter_amplitude * rng.uniform(0.7, 1.3);
            }

            for (double scale : config.scales) {
                std::map<int, FeatureMap> maps;
                for (std::size_t l = 0; l < config.layers.size(); ++l) {
                    const auto& spec = config.layers[l];
                    const auto w = static_cast<std::uint32_t>(std::max(1L, std::lround(spec.width * scale)));
                    const auto h = static_cast<std::uint32_t>(std::max(1L, std::lround(spec.height * scale)));
                    const auto d = static_cast<std::uint32_t>(spec.depth);
                    FeatureMap map(w, h, d, static_cast<std::uint32_t>(spec.layer_id));

                    std::vector<double> render(d);
                    for (auto& v : render) v = std::exp(config.render_noise * rng.normal());

                    for (std::uint32_t y = 0; y < h; ++y) {
                        for (std::uint32_t x = 0; x < w; ++x) {
                            const double u = (x + 0.5) / w;
                            const double v = (y + 0.5) / h;
                            const bool inside = u >= config.object_x0 + dx && u <= config.object_x1 + dx &&
                                                v >= config.object_y0 + dy && v <= config.object_y1 + dy;
                            const double strength = inside ? config.object_amplitude * rng.uniform(0.7, 1.0) : 0.0;
                            for (std::uint32_t ch = 0; ch < d; ++ch) {
                                double value = config.background_noise * std::abs(rng.normal());
                                if (inside) value += strength * prototype[l][ch] * instance[l][ch] * render[ch];
                                map.at(y, x, ch) = static_cast<float>(value);
                            }
                            for (const auto& b : blobs) {
                                if (config.clutter_patterns == 0) break;
                                const double dist = std::hypot(u - b.cx, v - b.cy);
                                if (dist > config.clutter_radius) continue;
                                const double falloff = 1.0 - 0.5 * dist / config.clutter_radius;
                                const auto& pattern = clutter[l][b.pattern];
                                for (std::uint32_t ch = 0; ch < d; ++ch) {
                                    map.at(y, x, ch) += static_cast<float>(b.amplitude * falloff * pattern[ch]);
                                }
                            }
                        }
                    }
                    maps.emplace(spec.layer_id, std::move(map));
                }
                image.scales.push_back(std::move(maps));
            }
            images.push_back(std::move(image));
        }
    }
    return images;
}

namespace {

fs::path write_split(const std::vector<SynthImage>& images, SynthSplit split, const fs::path& out_dir) {
    const fs::path features = out_dir / "features";
    fs::create_directories(features);
    DatasetManifest manifest;
    for (const auto& image : images) {
        ManifestEntry entry;
        entry.image_id = image.image_id;
        entry.class_id = image.class_id;
        for (std::size_t s = 0; s < image.scales.size(); ++s) {
            LayerPaths paths;
            for (const auto& [layer, map] : image.scales[s]) {
                const fs::path file =
                    features / (image.image_id + "_l" + std::to_string(layer) + "_s" + std::to_string(s) + ".bin");
                write_tensor(map, file);
                paths.emplace(layer, file);
            }
            entry.feature_paths.push_back(std::move(paths));
        }
        if (split == SynthSplit::Test) {
            entry.is_query = true;
            for (const auto& other : images) {
                if (other.class_id == image.class_id && other.image_id != image.image_id) {
                    entry.relevant_ids.push_back(other.image_id);
                }
            }
        }
        manifest.entries.push_back(std::move(entry));
    }
    const fs::path path = out_dir / (split == SynthSplit::Train ? "train.jsonl" : "test.jsonl");
    save_manifest(manifest, path);
    return path;
}

}  // namespace

SynthPaths write_synthetic_dataset(const SynthConfig& config, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    SynthPaths paths;
    paths.train_manifest = write_split(generate_split(config, SynthSplit::Train), SynthSplit::Train, out_dir);
    paths.test_manifest = write_split(generate_split(config, SynthSplit::Test), SynthSplit::Test, out_dir);
    return paths;
}

}  // namespace remap
