// remap: command-line front end for the retrieval descriptor pipeline.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "remap/aggregate.hpp"
#include "remap/compact.hpp"
#include "remap/config.hpp"
#include "remap/entropy.hpp"
#include "remap/error.hpp"
#include "remap/eval.hpp"
#include "remap/grid.hpp"
#include "remap/synth.hpp"
#include "remap/tensor_io.hpp"
#include "remap/train.hpp"

namespace fs = std::filesystem;
using namespace remap;
using nlohmann::json;

namespace {

void log(const std::string& message) { std::cerr << "[remap] " << message << '\n'; }

/// Records what a run consumed and produced, without timestamps, so two runs
/// with the same config and inputs write the same stanza.
class Repro {
public:
    Repro(std::string command, const RunConfig& config) : command_(std::move(command)), config_(config) {}

    void input(const fs::path& path) { inputs_[path.string()] = sha256_file(path); }
    void output(const fs::path& path, const std::string& name = {}) {
        outputs_[name.empty() ? path.string() : name] = sha256_file(path);
    }

    /// Logs the stanza, and writes it to `path` when given.
    void finish(const std::optional<fs::path>& path) const {
        json j;
        j["tool"] = "remap";
        j["version"] = REMAP_VERSION;
        j["command"] = command_;
        j["seed"] = config_.seed;
        j["config_sha256"] = config_.hash();
        j["config"] = config_.to_json();
        j["config"].erase("run.workers");
        j["inputs"] = inputs_;
        j["outputs"] = outputs_;
        log("config sha256 " + config_.hash() + ", seed " + std::to_string(config_.seed));
        if (outputs_.size() > 8) {
            log("wrote " + std::to_string(outputs_.size()) + " files" + (path ? ", hashes in " + path->string() : ""));
        } else {
            for (const auto& [name, hash] : outputs_.items()) log("wrote " + name + " sha256 " + hash.get<std::string>());
        }
        if (path) {
            std::ofstream out(*path, std::ios::trunc);
            if (!out) throw IoError("cannot open for writing: " + path->string());
            out << j.dump(2) << '\n';
        }
    }

private:
    std::string command_;
    const RunConfig& config_;
    json inputs_ = json::object();
    json outputs_ = json::object();
};

fs::path repro_path(const fs::path& output) { return fs::path(output.string() + ".repro.json"); }

DescriptorSet descriptors_from(const fs::path& path, Repro& repro) {
    repro.input(path);
    return load_descriptors(path);
}

Eigen::MatrixXd rows_of(const DescriptorSet& set) {
    Eigen::MatrixXd data(static_cast<Eigen::Index>(set.size()), set.dim());
    for (std::size_t i = 0; i < set.size(); ++i) data.row(static_cast<Eigen::Index>(i)) = set.vectors[i].transpose();
    return data;
}

// ---------------------------------------------------------------------------

int grid_info(const RunConfig& config, int width, int height, bool list) {
    const auto grid = build_grid(width, height, config.grid_scale);
    std::cout << "grid " << width << "x" << height << ", S=" << config.grid_scale << ": " << grid.size()
              << " regions\n";
    std::string counts;
    for (int s = 1; s <= config.grid_scale; ++s) {
        const auto n = grid.count_at_scale(s);
        int side = 0;
        for (const auto& r : grid.regions)
            if (r.scale == s) side = r.width();
        std::cout << "  scale " << s << ": " << n << " regions of side " << side << '\n';
        counts += (s == 1 ? "" : "/") + std::to_string(n);
    }
    std::cout << "per-scale counts: " << counts << '\n';
    if (list) {
        for (const auto& r : grid.regions) {
            std::cout << "  s=" << r.scale << " x=[" << r.x0 << "," << r.x1 << ") y=[" << r.y0 << "," << r.y1 << ")\n";
        }
    }
    return 0;
}

int synth_gen(const RunConfig& config, const fs::path& out) {
    const auto synth = config.synth_config();
    const auto paths = write_synthetic_dataset(synth, out);
    Repro repro("synth-gen", config);
    for (const auto& p : {paths.train_manifest, paths.test_manifest}) repro.output(p, fs::relative(p, out).string());
    std::vector<fs::path> features;
    for (const auto& f : fs::directory_iterator(out / "features")) features.push_back(f.path());
    std::sort(features.begin(), features.end());
    for (const auto& f : features) repro.output(f, fs::relative(f, out).string());
    log("synthetic dataset in " + out.string() + ": " + std::to_string(features.size()) + " feature files");
    repro.finish(out / "repro.json");
    return 0;
}

int fit_entropy(const RunConfig& config, const fs::path& manifest_path, const fs::path& out) {
    Repro repro("fit-entropy", config);
    repro.input(manifest_path);
    const auto manifest = load_manifest(manifest_path);
    const auto samples = collect_pair_distances(manifest, config.sampling_config());
    log("collected " + std::to_string(samples.size()) + " region distances");
    const auto weights = init_weights(samples, config.kl);
    save_weights(weights, out);
    repro.output(out);
    repro.finish(repro_path(out));
    return 0;
}

int fit_whitening_cmd(const RunConfig& config, const fs::path& manifest_path, const std::optional<fs::path>& entropy_path,
                      const fs::path& out) {
    Repro repro("fit-whitening", config);
    repro.input(manifest_path);
    const auto manifest = load_manifest(manifest_path);
    AggregationModel model;
    if (config.method == Method::Mac || config.method == Method::Spoc) {
        std::vector<const ManifestEntry*> labeled;
        for (const auto& e : manifest.entries)
            if (e.class_id) labeled.push_back(&e);
        if (labeled.empty()) throw DataError("manifest has no labeled entries to fit the whitening on");
        const auto first = labeled.front()->load_maps(config.layers);
        model = make_identity_model(config.method, config.layers,
                                    {static_cast<int>(first.at(config.layers[0]).depth)}, {}, config.grid_scale);
        Eigen::MatrixXd samples(static_cast<Eigen::Index>(labeled.size()), model.d_cat());
        for (std::size_t i = 0; i < labeled.size(); ++i) {
            samples.row(static_cast<Eigen::Index>(i)) =
                pre_projection(labeled[i]->load_maps(config.layers), model).transpose();
        }
        const auto w = fit_whitening(samples, config.d_out > 0 ? config.d_out : model.d_cat(), config.regularizer);
        model.projection = w.projection;
        model.bias = w.bias;
    } else {
        const auto set = load_training_set(manifest, config.layers, config.grid_scale, 0, config.effective_workers());
        AlphaInit init = config.alpha_init;
        if (config.method == Method::Rmac && init != AlphaInit::Ones) {
            log("RMAC keeps all region weights at one; model.alpha_init ignored");
            init = AlphaInit::Ones;
        }
        std::optional<EntropyWeights> weights;
        if (init == AlphaInit::Entropy) {
            if (!entropy_path) throw ConfigError("model.alpha_init=entropy needs --entropy (from fit-entropy)");
            repro.input(*entropy_path);
            weights = load_weights(*entropy_path);
        }
        model = initial_model(set, config.method, config.layers, config.grid_scale, init,
                              weights ? &*weights : nullptr, config.d_out, config.regularizer);
    }
    save_model(model, out);
    log(std::string(to_string(model.method)) + " model, D_cat " + std::to_string(model.d_cat()) + " -> D_out " +
        std::to_string(model.d_out()));
    repro.output(out);
    repro.finish(repro_path(out));
    return 0;
}

int train_cmd(const RunConfig& config, const fs::path& manifest_path, const fs::path& model_path, const fs::path& out,
              const std::optional<fs::path>& trace_path) {
    Repro repro("train", config);
    repro.input(manifest_path);
    repro.input(model_path);
    const auto manifest = load_manifest(manifest_path);
    const auto model = load_model(model_path);
    if (model.method != Method::Remap && model.method != Method::Rmac) {
        throw ConfigError("only REMAP and RMAC models are trainable, got " + std::string(to_string(model.method)));
    }
    const auto set = load_training_set(manifest, model.layer_ids, model.grid_scale, 0, config.effective_workers());
    const auto result = train(model, set, config.train_config());
    save_model(result.model, out);
    repro.output(out);
    if (!result.trace.empty()) {
        log("trained on " + std::to_string(result.triplets_seen) + " triplets; window loss " +
            std::to_string(result.trace.front().mean_loss) + " -> " + std::to_string(result.trace.back().mean_loss));
    }
    if (trace_path) {
        save_loss_trace(result.trace, *trace_path);
        repro.output(*trace_path);
    }
    repro.finish(repro_path(out));
    return 0;
}

int extract(const RunConfig& config, const fs::path& manifest_path, const fs::path& model_path, const fs::path& out) {
    Repro repro("extract", config);
    repro.input(manifest_path);
    repro.input(model_path);
    const auto descriptors = compute_descriptors(load_manifest(manifest_path), load_model(model_path),
                                                 config.eval.multiscale, config.effective_workers());
    save_descriptors(descriptors, out);
    log(std::to_string(descriptors.size()) + " descriptors of dimension " + std::to_string(descriptors.dim()));
    repro.output(out);
    repro.finish(repro_path(out));
    return 0;
}

int pq_train_cmd(const RunConfig& config, const fs::path& descriptors_path, const fs::path& out) {
    Repro repro("pq-train", config);
    const auto descriptors = descriptors_from(descriptors_path, repro);
    const auto book = pq_train(rows_of(descriptors), config.pq_config());
    save_codebook(book, out);
    double distortion = 0.0;
    for (const auto& h : book.training_distortion) distortion += h.back();
    log("codebook m=" + std::to_string(book.m()) + " k=" + std::to_string(book.k()) + ", " +
        std::to_string(book.code_size()) + " bytes per code, mean block distortion " +
        std::to_string(distortion / static_cast<double>(book.m())));
    repro.output(out);
    repro.finish(repro_path(out));
    return 0;
}

int pq_encode_cmd(const RunConfig& config, const fs::path& descriptors_path, const fs::path& codebook_path,
                  const fs::path& out) {
    Repro repro("pq-encode", config);
    const auto descriptors = descriptors_from(descriptors_path, repro);
    repro.input(codebook_path);
    const auto book = load_codebook(codebook_path);
    std::vector<PQCode> codes;
    for (std::size_t i = 0; i < descriptors.size(); ++i) {
        codes.push_back(PQCode{descriptors.ids[i], pq_encode(book, descriptors.vectors[i])});
    }
    save_codes(codes, book.m(), out);
    repro.output(out);
    repro.finish(repro_path(out));
    return 0;
}

int search_cmd(const RunConfig& config, const fs::path& db_path, const std::vector<std::string>& query_ids,
               const std::optional<fs::path>& query_path, const std::optional<fs::path>& codebook_path,
               const std::optional<fs::path>& codes_path) {
    Repro repro("search", config);
    const auto db = descriptors_from(db_path, repro);
    DescriptorSet queries;
    std::vector<bool> from_db;
    if (query_path) {
        queries = descriptors_from(*query_path, repro);
        from_db.assign(queries.size(), false);
    }
    for (const auto& id : query_ids) {
        const auto it = std::find(db.ids.begin(), db.ids.end(), id);
        if (it == db.ids.end()) throw DataError("query id " + id + " is not in " + db_path.string());
        queries.add(Descriptor{id, db.vectors[static_cast<std::size_t>(it - db.ids.begin())]});
        from_db.push_back(true);
    }
    if (queries.size() == 0) throw ConfigError("search needs --query or --query-descriptors");
    if (codebook_path.has_value() != codes_path.has_value()) {
        throw ConfigError("PQ search needs both --codebook and --codes");
    }
    std::optional<PQCodebook> book;
    std::vector<PQCode> codes;
    if (codebook_path) {
        repro.input(*codebook_path);
        repro.input(*codes_path);
        book = load_codebook(*codebook_path);
        codes = load_codes(*codes_path);
    }
    const std::size_t topk = config.search_topk;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        const auto self = from_db[q] ? queries.ids[q] : std::string();
        std::vector<SearchHit> hits;
        if (book) {
            hits = adc_search(*book, codes, queries.vectors[q], 0, config.effective_workers());
            std::erase_if(hits, [&](const SearchHit& h) { return !self.empty() && h.image_id == self; });
            if (topk > 0 && hits.size() > topk) hits.resize(topk);
        } else {
            hits = search_exhaustive(db, queries.vectors[q], topk, self);
        }
        for (std::size_t r = 0; r < hits.size(); ++r) {
            std::printf("%s\t%zu\t%s\t%.6f\n", queries.ids[q].c_str(), r + 1, hits[r].image_id.c_str(), hits[r].distance);
        }
    }
    repro.finish(std::nullopt);
    return 0;
}

int evaluate_cmd(const RunConfig& config, const fs::path& manifest_path, const std::optional<fs::path>& model_path,
                 const std::optional<fs::path>& descriptors_path, const std::optional<fs::path>& out) {
    if (model_path.has_value() == descriptors_path.has_value()) {
        throw ConfigError("evaluate needs exactly one of --model and --descriptors");
    }
    Repro repro("evaluate", config);
    repro.input(manifest_path);
    const auto manifest = load_manifest(manifest_path);
    const auto options = config.eval_options();
    Report report;
    if (model_path) {
        repro.input(*model_path);
        report = evaluate(manifest, load_model(*model_path), options);
    } else {
        report = evaluate_descriptors(manifest, descriptors_from(*descriptors_path, repro), options);
    }
    report.config["config_sha256"] = config.hash();
    report.config["seed"] = config.seed;
    report.print_table(std::cout);
    if (out) {
        save_report(report, *out);
        repro.output(*out);
        repro.finish(repro_path(*out));
    } else {
        repro.finish(std::nullopt);
    }
    return 0;
}

int exit_code(ErrorCategory category) {
    switch (category) {
        case ErrorCategory::Config: return 2;
        case ErrorCategory::Data: return 3;
        case ErrorCategory::Numeric: return 4;
        case ErrorCategory::Contract: return 1;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"REMAP retrieval descriptors: grids, entropy weights, training, extraction, PQ and evaluation"};
    app.set_version_flag("--version", REMAP_VERSION);
    app.require_subcommand(1);
    app.fallthrough();

    std::optional<fs::path> config_path;
    std::vector<std::string> overrides;
    std::optional<std::size_t> workers;
    app.add_option("-c,--config", config_path, "INI config file ([section] key = value)")->check(CLI::ExistingFile);
    app.add_option("--set", overrides, "Override one setting, section.key=value (repeatable)");
    app.add_option("-j,--workers", workers, "Worker threads (default: $REMAP_WORKERS, else all cores)");

    // Subcommand-specific options. Values given here become config overrides.
    int width = 0, height = 0;
    std::optional<int> scales;
    bool list = false;
    auto* grid_cmd = app.add_subcommand("grid-info", "Print the region grid of a feature map size");
    grid_cmd->add_option("--width", width, "Map width")->required();
    grid_cmd->add_option("--height", height, "Map height")->required();
    grid_cmd->add_option("--scales", scales, "Grid scales S (grid.scales)");
    grid_cmd->add_flag("--list", list, "List every region");

    fs::path out;
    std::optional<std::size_t> classes, per_class, train_classes;
    std::optional<std::uint64_t> seed;
    auto* synth_cmd = app.add_subcommand("synth-gen", "Write the planted-signal synthetic dataset");
    synth_cmd->add_option("-o,--out", out, "Output directory")->required();
    synth_cmd->add_option("--classes", classes, "Test classes (synth.classes)");
    synth_cmd->add_option("--per-class", per_class, "Images per class (synth.per_class)");
    synth_cmd->add_option("--train-classes", train_classes, "Training classes (synth.train_classes)");
    synth_cmd->add_option("--seed", seed, "Seed (run.seed)");

    fs::path manifest, model, descriptors, codebook_in;
    std::optional<fs::path> entropy, trace, report_out, model_opt, descriptors_opt, query_descriptors, codebook_opt,
        codes_opt;
    std::vector<std::string> query_ids;

    auto* entropy_cmd = app.add_subcommand("fit-entropy", "Fit per-region KL weights on a labeled manifest");
    entropy_cmd->add_option("-m,--manifest", manifest, "Labeled manifest")->required()->check(CLI::ExistingFile);
    entropy_cmd->add_option("-o,--out", out, "Weights file (JSON)")->required();

    auto* whitening_cmd = app.add_subcommand("fit-whitening", "Build the initial model: region weights plus PCA whitening");
    whitening_cmd->add_option("-m,--manifest", manifest, "Labeled manifest")->required()->check(CLI::ExistingFile);
    whitening_cmd->add_option("-e,--entropy", entropy, "Weights from fit-entropy")->check(CLI::ExistingFile);
    whitening_cmd->add_option("-o,--out", out, "Model file")->required();

    auto* train_sub = app.add_subcommand("train", "Train region weights and projection with the triplet loss");
    train_sub->add_option("-m,--manifest", manifest, "Labeled manifest")->required()->check(CLI::ExistingFile);
    train_sub->add_option("--model", model, "Initial model")->required()->check(CLI::ExistingFile);
    train_sub->add_option("-o,--out", out, "Trained model file")->required();
    train_sub->add_option("--loss-trace", trace, "CSV of per-window losses");

    auto* extract_cmd = app.add_subcommand("extract", "Compute descriptors for every manifest entry");
    extract_cmd->add_option("-m,--manifest", manifest, "Manifest")->required()->check(CLI::ExistingFile);
    extract_cmd->add_option("--model", model, "Model file")->required()->check(CLI::ExistingFile);
    extract_cmd->add_option("-o,--out", out, "Descriptor file")->required();

    auto* pq_train_sub = app.add_subcommand("pq-train", "Train a product quantizer on descriptors");
    pq_train_sub->add_option("-d,--descriptors", descriptors, "Descriptor file")->required()->check(CLI::ExistingFile);
    pq_train_sub->add_option("-o,--out", out, "Codebook file")->required();

    auto* pq_encode_sub = app.add_subcommand("pq-encode", "Encode descriptors with a codebook");
    pq_encode_sub->add_option("-d,--descriptors", descriptors, "Descriptor file")->required()->check(CLI::ExistingFile);
    pq_encode_sub->add_option("--codebook", codebook_in, "Codebook file")->required()->check(CLI::ExistingFile);
    pq_encode_sub->add_option("-o,--out", out, "Codes file")->required();

    auto* search_sub = app.add_subcommand("search", "Rank database descriptors for queries");
    search_sub->add_option("-d,--descriptors", descriptors, "Database descriptors")->required()->check(CLI::ExistingFile);
    search_sub->add_option("-q,--query", query_ids, "Query by database id (repeatable)");
    search_sub->add_option("--query-descriptors", query_descriptors, "Descriptor file of external queries")
        ->check(CLI::ExistingFile);
    search_sub->add_option("--codebook", codebook_opt, "Search PQ codes instead")->check(CLI::ExistingFile);
    search_sub->add_option("--codes", codes_opt, "Codes from pq-encode")->check(CLI::ExistingFile);

    auto* evaluate_sub = app.add_subcommand("evaluate", "mAP and Recall@4 of a model or descriptor file");
    evaluate_sub->add_option("-m,--manifest", manifest, "Manifest with queries")->required()->check(CLI::ExistingFile);
    evaluate_sub->add_option("--model", model_opt, "Model file")->check(CLI::ExistingFile);
    evaluate_sub->add_option("-d,--descriptors", descriptors_opt, "Descriptor file")->check(CLI::ExistingFile);
    evaluate_sub->add_option("-o,--out", report_out, "Report file (JSON)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (workers) overrides.push_back("run.workers=" + std::to_string(*workers));
        if (scales) overrides.push_back("grid.scales=" + std::to_string(*scales));
        if (classes) overrides.push_back("synth.classes=" + std::to_string(*classes));
        if (per_class) overrides.push_back("synth.per_class=" + std::to_string(*per_class));
        if (train_classes) overrides.push_back("synth.train_classes=" + std::to_string(*train_classes));
        if (seed) overrides.push_back("run.seed=" + std::to_string(*seed));
        const auto config = load_run_config(config_path, overrides);

        if (grid_cmd->parsed()) return grid_info(config, width, height, list);
        if (synth_cmd->parsed()) return synth_gen(config, out);
        if (entropy_cmd->parsed()) return fit_entropy(config, manifest, out);
        if (whitening_cmd->parsed()) return fit_whitening_cmd(config, manifest, entropy, out);
        if (train_sub->parsed()) return train_cmd(config, manifest, model, out, trace);
        if (extract_cmd->parsed()) return extract(config, manifest, model, out);
        if (pq_train_sub->parsed()) return pq_train_cmd(config, descriptors, out);
        if (pq_encode_sub->parsed()) return pq_encode_cmd(config, descriptors, codebook_in, out);
        if (search_sub->parsed()) {
            return search_cmd(config, descriptors, query_ids, query_descriptors, codebook_opt, codes_opt);
        }
        if (evaluate_sub->parsed()) return evaluate_cmd(config, manifest, model_opt, descriptors_opt, report_out);
    } catch (const Error& e) {
        const char* kind[] = {"config", "data", "numeric", "internal"};
        std::cerr << "remap: " << kind[static_cast<int>(e.category())] << " error: " << e.what() << '\n';
        return exit_code(e.category());
    } catch (const std::exception& e) {
        std::cerr << "remap: error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
