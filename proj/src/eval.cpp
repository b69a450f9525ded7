#include "remap/eval.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include "remap/error.hpp"
#include "remap/parallel.hpp"

namespace remap {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

bool hit_order(const SearchHit& a, const SearchHit& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.image_id < b.image_id);
}

std::vector<std::string> ids_of(std::span<const SearchHit> hits) {
    std::vector<std::string> ids;
    ids.reserve(hits.size());
    for (const auto& h : hits) ids.push_back(h.image_id);
    return ids;
}

}  // namespace

std::vector<SearchHit> search_exhaustive(const DescriptorSet& db, const VectorXd& query, std::size_t topk,
                                         std::string_view exclude_id) {
    std::vector<SearchHit> hits;
    hits.reserve(db.size());
    for (std::size_t i = 0; i < db.size(); ++i) {
        if (!exclude_id.empty() && db.ids[i] == exclude_id) continue;
        if (db.vectors[i].size() != query.size()) {
            throw ContractError("search: query has " + std::to_string(query.size()) + " dims, " + db.ids[i] + " has " +
                                std::to_string(db.vectors[i].size()));
        }
        hits.push_back(SearchHit{db.ids[i], (db.vectors[i] - query).squaredNorm()});
    }
    if (topk > 0 && topk < hits.size()) {
        std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(topk), hits.end(), hit_order);
        hits.resize(topk);
    } else {
        std::sort(hits.begin(), hits.end(), hit_order);
    }
    return hits;
}

double average_precision(std::span<const std::string> ranking, std::span<const std::string> relevant,
                         std::span<const std::string> junk) {
    if (relevant.empty()) throw ContractError("average_precision needs a non-empty relevant set");
    const std::unordered_set<std::string> positives(relevant.begin(), relevant.end());
    const std::unordered_set<std::string> ignored(junk.begin(), junk.end());
    std::size_t rank = 0;
    std::size_t hits = 0;
    double sum = 0.0;
    for (const auto& id : ranking) {
        if (ignored.contains(id)) continue;
        ++rank;
        if (positives.contains(id)) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(rank);
        }
    }
    return sum / static_cast<double>(positives.size());
}

double recall4(std::span<const std::string> ranking, std::span<const std::string> relevant, std::string_view query_id,
               bool include_self) {
    const std::unordered_set<std::string> positives(relevant.begin(), relevant.end());
    double found = 0.0;
    std::size_t taken = 0;
    if (include_self && !query_id.empty()) {
        found += 1.0;
        ++taken;
    }
    for (const auto& id : ranking) {
        if (taken == 4) break;
        if (include_self && id == query_id) continue;
        ++taken;
        if (positives.contains(id)) found += 1.0;
    }
    return found;
}

VectorXd query_expand(const VectorXd& query, std::span<const SearchHit> ranking, const DescriptorSet& db,
                      std::size_t topk_qe) {
    if (topk_qe == 0) return query;
    std::unordered_map<std::string, std::size_t> where;
    for (std::size_t i = 0; i < db.size(); ++i) where.emplace(db.ids[i], i);
    VectorXd sum = query;
    std::size_t used = 1;
    for (std::size_t r = 0; r < ranking.size() && r < topk_qe; ++r) {
        const auto it = where.find(ranking[r].image_id);
        if (it == where.end()) throw DataError("query expansion: " + ranking[r].image_id + " not in database");
        sum += db.vectors[it->second];
        ++used;
    }
    return l2_normalized(sum / static_cast<double>(used));
}

std::string_view to_string(SearchMode mode) {
    switch (mode) {
        case SearchMode::Exhaustive: return "exhaustive";
        case SearchMode::Truncate: return "truncate";
        case SearchMode::ProductQuantization: return "pq";
    }
    return "?";
}

SearchMode parse_search_mode(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "exhaustive") return SearchMode::Exhaustive;
    if (lower == "truncate") return SearchMode::Truncate;
    if (lower == "pq") return SearchMode::ProductQuantization;
    throw ConfigError("unknown search mode '" + std::string(name) + "' (expected exhaustive, truncate or pq)");
}

nlohmann::json Report::to_json() const {
    nlohmann::json out;
    out["config"] = config;
    out["map"] = mean_average_precision;
    out["mean_recall4"] = mean_recall4;
    out["degenerate"] = degenerate();
    out["degenerate_queries"] = degenerate_queries;
    if (exhaustive_map) {
        out["exhaustive_map"] = *exhaustive_map;
        out["map_gap"] = *exhaustive_map - mean_average_precision;
    }
    out["queries"] = nlohmann::json::array();
    for (const auto& q : queries) {
        out["queries"].push_back({{"query_id", q.query_id}, {"ap", q.average_precision}, {"recall4", q.recall4}});
    }
    return out;
}

void Report::print_table(std::ostream& out) const {
    const auto flags = out.flags();
    out << std::left << std::setw(22) << "queries" << queries.size() << '\n';
    if (config.contains("method")) out << std::setw(22) << "method" << config["method"].get<std::string>() << '\n';
    if (config.contains("search")) out << std::setw(22) << "search" << config["search"].get<std::string>() << '\n';
    out << std::fixed << std::setprecision(4);
    out << std::setw(22) << "mAP" << mean_average_precision << '\n';
    out << std::setw(22) << "4 x Recall@4" << mean_recall4 << '\n';
    if (exhaustive_map) {
        out << std::setw(22) << "exhaustive mAP" << *exhaustive_map << '\n';
        out << std::setw(22) << "gap" << (*exhaustive_map - mean_average_precision) << '\n';
    }
    if (degenerate()) out << "WARNING: " << degenerate_queries << " queries had all candidates tied\n";
    out.flags(flags);
}

DescriptorSet compute_descriptors(const DatasetManifest& manifest, const AggregationModel& model, bool multiscale,
                                  std::size_t workers) {
    std::vector<Descriptor> out(manifest.entries.size());
    parallel_for(manifest.entries.size(), workers, [&](std::size_t i) {
        const auto& entry = manifest.entries[i];
        auto d = describe(entry.load_maps(model.layer_ids, 0), model);
        if (multiscale) {
            const auto second = describe(entry.load_maps(model.layer_ids, 1), model);
            d.values = multiscale_fuse(d.values, second.values);
        }
        d.image_id = entry.image_id;
        out[i] = std::move(d);
    });
    DescriptorSet set;
    for (auto& d : out) set.add(std::move(d));
    return set;
}

Report evaluate_descriptors(const DatasetManifest& manifest, const DescriptorSet& descriptors,
                            const EvalOptions& options, nlohmann::json config) {
    std::unordered_map<std::string, std::size_t> where;
    for (std::size_t i = 0; i < descriptors.size(); ++i) where.emplace(descriptors.ids[i], i);
    auto vector_of = [&](const std::string& id) -> VectorXd {
        const auto it = where.find(id);
        if (it == where.end()) throw DataError("no descriptor for " + id);
        const auto& v = descriptors.vectors[it->second];
        return options.search == SearchMode::Truncate ? truncate(v, options.truncate_dim) : v;
    };

    DescriptorSet db;
    for (const auto& e : manifest.entries) {
        if (e.in_database) db.add(Descriptor{e.image_id, vector_of(e.image_id)});
    }

    std::optional<PQCodebook> codebook;
    std::vector<PQCode> codes;
    if (options.search == SearchMode::ProductQuantization) {
        MatrixXd data(static_cast<Index>(db.size()), db.dim());
        for (std::size_t i = 0; i < db.size(); ++i) data.row(static_cast<Index>(i)) = db.vectors[i].transpose();
        codebook = pq_train(data, options.pq);
        for (std::size_t i = 0; i < db.size(); ++i) codes.push_back(PQCode{db.ids[i], pq_encode(*codebook, db.vectors[i])});
    }
    auto search = [&](const VectorXd& q, const std::string& self) {
        if (codebook) {
            auto hits = adc_search(*codebook, codes, q, 0);
            std::erase_if(hits, [&](const SearchHit& h) { return h.image_id == self; });
            return hits;
        }
        return search_exhaustive(db, q, 0, self);
    };

    std::vector<const ManifestEntry*> queries;
    for (const auto& e : manifest.entries) {
        if (e.is_query) queries.push_back(&e);
    }
    if (queries.empty()) throw DataError("manifest has no queries");

    Report report;
    report.queries.resize(queries.size());
    std::vector<char> degenerate(queries.size(), 0);
    parallel_for(queries.size(), options.workers, [&](std::size_t qi) {
        const auto& entry = *queries[qi];
        VectorXd q = vector_of(entry.image_id);
        auto hits = search(q, entry.image_id);
        if (options.qe_topk > 0) {
            q = query_expand(q, hits, db, options.qe_topk);
            hits = search(q, entry.image_id);
        }
        degenerate[qi] = hits.size() > 1 && hits.front().distance == hits.back().distance;
        const auto ranking = ids_of(hits);
        auto& result = report.queries[qi];
        result.query_id = entry.image_id;
        result.average_precision = average_precision(ranking, entry.relevant_ids, entry.junk_ids);
        result.recall4 = recall4(ranking, entry.relevant_ids, entry.image_id, options.recall4_self);
        result.top.assign(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(4, ranking.size())));
    });
    double ap_sum = 0.0;
    double r4_sum = 0.0;
    for (std::size_t i = 0; i < report.queries.size(); ++i) {
        ap_sum += report.queries[i].average_precision;
        r4_sum += report.queries[i].recall4;
        report.degenerate_queries += degenerate[i] ? 1 : 0;
    }
    report.mean_average_precision = ap_sum / static_cast<double>(report.queries.size());
    report.mean_recall4 = r4_sum / static_cast<double>(report.queries.size());

    if (options.search != SearchMode::Exhaustive) {
        auto reference = options;
        reference.search = SearchMode::Exhaustive;
        report.exhaustive_map = evaluate_descriptors(manifest, descriptors, reference).mean_average_precision;
    }

    config["search"] = std::string(to_string(options.search));
    config["dim"] = descriptors.dim();
    if (options.search == SearchMode::Truncate) config["truncate_dim"] = options.truncate_dim;
    if (options.search == SearchMode::ProductQuantization) {
        config["pq_m"] = options.pq.m;
        config["pq_k"] = options.pq.k;
        config["pq_code_bytes"] = codebook->code_size();
        config["pq_seed"] = options.pq.seed;
    }
    config["qe_topk"] = options.qe_topk;
    config["multiscale"] = options.multiscale;
    config["recall4_self"] = options.recall4_self;
    report.config = std::move(config);
    return report;
}

Report evaluate(const DatasetManifest& manifest, const AggregationModel& model, const EvalOptions& options) {
    const auto descriptors = compute_descriptors(manifest, model, options.multiscale, options.workers);
    nlohmann::json config;
    config["method"] = std::string(to_string(model.method));
    config["layer_ids"] = model.layer_ids;
    config["grid_scale"] = model.grid_scale;
    config["alpha_init"] = model.alpha_init;
    config["d_out"] = model.d_out();
    return evaluate_descriptors(manifest, descriptors, options, std::move(config));
}

void save_report(const Report& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << report.to_json().dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace remap
