#include "remap/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <openssl/evp.h>

#include "remap/error.hpp"
#include "remap/parallel.hpp"

namespace remap {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

template <typename T>
T parse_number(const std::string& text) {
    T value{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end || text.empty()) throw ConfigError("'" + text + "' is not a valid number");
    return value;
}

std::size_t parse_count(const std::string& text) {
    if (!text.empty() && text.front() == '-') throw ConfigError("'" + text + "' must not be negative");
    return parse_number<std::size_t>(text);
}

bool parse_bool(const std::string& text) {
    const auto t = lower(text);
    if (t == "true" || t == "yes" || t == "on" || t == "1") return true;
    if (t == "false" || t == "no" || t == "off" || t == "0") return false;
    throw ConfigError("'" + text + "' is not a boolean");
}

template <typename T>
std::vector<T> parse_list(const std::string& text) {
    std::string spaced = text;
    std::replace(spaced.begin(), spaced.end(), ',', ' ');
    std::istringstream in(spaced);
    std::vector<T> out;
    for (std::string item; in >> item;) out.push_back(parse_number<T>(item));
    if (out.empty()) throw ConfigError("empty list");
    return out;
}

KlDirection parse_direction(const std::string& text) {
    const auto t = lower(text);
    if (t == "match_to_nonmatch") return KlDirection::MatchingToNonMatching;
    if (t == "nonmatch_to_match") return KlDirection::NonMatchingToMatching;
    throw ConfigError("'" + text + "' is not match_to_nonmatch or nonmatch_to_match");
}

std::string_view direction_name(KlDirection d) {
    return d == KlDirection::MatchingToNonMatching ? "match_to_nonmatch" : "nonmatch_to_match";
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<nlohmann::json(const RunConfig&)> get;
};

#define REMAP_COUNT(member) \
    Field { [](RunConfig& c, const std::string& v) { c.member = parse_count(v); }, [](const RunConfig& c) { return nlohmann::json(c.member); } }
#define REMAP_REAL(member) \
    Field { [](RunConfig& c, const std::string& v) { c.member = parse_number<double>(v); }, [](const RunConfig& c) { return nlohmann::json(c.member); } }
#define REMAP_FLAG(member) \
    Field { [](RunConfig& c, const std::string& v) { c.member = parse_bool(v); }, [](const RunConfig& c) { return nlohmann::json(c.member); } }

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = {
        {"run.seed", {[](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>(v); },
                      [](const RunConfig& c) { return nlohmann::json(c.seed); }}},
        {"run.workers", REMAP_COUNT(workers)},
        {"grid.scales", {[](RunConfig& c, const std::string& v) { c.grid_scale = parse_number<int>(v); },
                         [](const RunConfig& c) { return nlohmann::json(c.grid_scale); }}},
        {"model.method", {[](RunConfig& c, const std::string& v) { c.method = parse_method(v); },
                          [](const RunConfig& c) { return nlohmann::json(std::string(to_string(c.method))); }}},
        {"model.layers", {[](RunConfig& c, const std::string& v) { c.layers = parse_list<int>(v); },
                          [](const RunConfig& c) { return nlohmann::json(c.layers); }}},
        {"model.d_out", {[](RunConfig& c, const std::string& v) { c.d_out = static_cast<Eigen::Index>(parse_count(v)); },
                         [](const RunConfig& c) { return nlohmann::json(c.d_out); }}},
        {"model.regularizer",
         {[](RunConfig& c, const std::string& v) {
              if (lower(v) == "auto") c.regularizer.reset();
              else c.regularizer = parse_number<double>(v);
          },
          [](const RunConfig& c) { return c.regularizer ? nlohmann::json(*c.regularizer) : nlohmann::json("auto"); }}},
        {"model.alpha_init", {[](RunConfig& c, const std::string& v) { c.alpha_init = parse_alpha_init(v); },
                              [](const RunConfig& c) { return nlohmann::json(std::string(to_string(c.alpha_init))); }}},
        {"entropy.bins", {[](RunConfig& c, const std::string& v) { c.kl.bins = parse_number<int>(v); },
                          [](const RunConfig& c) { return nlohmann::json(c.kl.bins); }}},
        {"entropy.epsilon", REMAP_REAL(kl.epsilon)},
        {"entropy.min_samples", REMAP_COUNT(kl.min_samples)},
        {"entropy.direction", {[](RunConfig& c, const std::string& v) { c.kl.direction = parse_direction(v); },
                               [](const RunConfig& c) { return nlohmann::json(std::string(direction_name(c.kl.direction))); }}},
        {"entropy.pair_budget", REMAP_COUNT(pair_budget)},
        {"train.margin", REMAP_REAL(train.margin)},
        {"train.learning_rate", REMAP_REAL(train.learning_rate)},
        {"train.momentum", REMAP_REAL(train.momentum)},
        {"train.weight_decay", REMAP_REAL(train.weight_decay)},
        {"train.accumulate", REMAP_COUNT(train.accumulate)},
        {"train.remine_every", REMAP_COUNT(train.remine_every)},
        {"train.epochs", REMAP_COUNT(train.epochs)},
        {"train.max_triplets", REMAP_COUNT(train.max_triplets)},
        {"train.checkpoint_every", REMAP_COUNT(train.checkpoint_every)},
        {"train.checkpoint_dir", {[](RunConfig& c, const std::string& v) { c.train.checkpoint_dir = v; },
                                  [](const RunConfig& c) { return nlohmann::json(c.train.checkpoint_dir.string()); }}},
        {"pq.m", REMAP_COUNT(pq.m)},
        {"pq.k", REMAP_COUNT(pq.k)},
        {"pq.max_iterations", REMAP_COUNT(pq.max_iterations)},
        {"pq.tolerance", REMAP_REAL(pq.tolerance)},
        {"eval.search", {[](RunConfig& c, const std::string& v) { c.eval.search = parse_search_mode(v); },
                         [](const RunConfig& c) { return nlohmann::json(std::string(to_string(c.eval.search))); }}},
        {"eval.truncate_dim",
         {[](RunConfig& c, const std::string& v) { c.eval.truncate_dim = static_cast<Eigen::Index>(parse_count(v)); },
          [](const RunConfig& c) { return nlohmann::json(c.eval.truncate_dim); }}},
        {"eval.qe_topk", REMAP_COUNT(eval.qe_topk)},
        {"eval.multiscale", REMAP_FLAG(eval.multiscale)},
        {"eval.recall4_self", REMAP_FLAG(eval.recall4_self)},
        {"eval.topk", REMAP_COUNT(search_topk)},
        {"synth.classes", REMAP_COUNT(synth.classes)},
        {"synth.per_class", REMAP_COUNT(synth.per_class)},
        {"synth.train_classes", REMAP_COUNT(synth.train_classes)},
        {"synth.train_per_class", REMAP_COUNT(synth.train_per_class)},
        {"synth.scales", {[](RunConfig& c, const std::string& v) { c.synth.scales = parse_list<double>(v); },
                          [](const RunConfig& c) { return nlohmann::json(c.synth.scales); }}},
    };
    return table;
}

#undef REMAP_COUNT
#undef REMAP_REAL
#undef REMAP_FLAG

// Runs `validate`, turning each line of a ConfigError after the first into a
// separate problem.
void collect(std::vector<std::string>& problems, const std::function<void()>& validate) {
    try {
        validate();
    } catch (const ConfigError& e) {
        std::istringstream lines(e.what());
        std::string line;
        std::getline(lines, line);
        bool any = false;
        while (std::getline(lines, line)) {
            problems.push_back(trim(line));
            any = true;
        }
        if (!any) problems.emplace_back(e.what());
    }
}

std::vector<std::string> semantic_problems(const RunConfig& c) {
    std::vector<std::string> problems;
    if (c.grid_scale < 1) problems.emplace_back("grid.scales must be at least 1");
    if (std::set<int>(c.layers.begin(), c.layers.end()).size() != c.layers.size()) {
        problems.emplace_back("model.layers has duplicates");
    }
    if ((c.method == Method::Mac || c.method == Method::Spoc || c.method == Method::Rmac) && c.layers.size() != 1) {
        problems.emplace_back("model.method=" + std::string(to_string(c.method)) + " uses exactly one layer");
    }
    if (c.regularizer && !(*c.regularizer >= 0.0)) problems.emplace_back("model.regularizer must be >= 0");
    if (c.kl.bins < 1) problems.emplace_back("entropy.bins must be positive");
    if (!(c.kl.epsilon > 0.0)) problems.emplace_back("entropy.epsilon must be positive");
    if (c.pair_budget == 0) problems.emplace_back("entropy.pair_budget must be positive");
    if (c.pq.m == 0) problems.emplace_back("pq.m must be positive");
    if (c.pq.k < 1 || c.pq.k > 256) problems.emplace_back("pq.k must lie in [1, 256]");
    if (!(c.pq.tolerance >= 0.0)) problems.emplace_back("pq.tolerance must be >= 0");
    if (c.eval.search == SearchMode::Truncate && c.eval.truncate_dim < 1) {
        problems.emplace_back("eval.search=truncate needs eval.truncate_dim >= 1");
    }
    collect(problems, [&] { c.train_config().validate(); });
    collect(problems, [&] { c.synth_config().validate(); });
    return problems;
}

}  // namespace

std::size_t RunConfig::effective_workers() const { return workers > 0 ? workers : default_workers(); }

TrainConfig RunConfig::train_config() const {
    auto t = train;
    t.seed = seed;
    t.alpha_init = alpha_init;
    t.workers = effective_workers();
    return t;
}

PQTrainConfig RunConfig::pq_config() const {
    auto p = pq;
    p.seed = seed;
    p.workers = effective_workers();
    return p;
}

EvalOptions RunConfig::eval_options() const {
    auto e = eval;
    e.pq = pq_config();
    e.workers = effective_workers();
    return e;
}

PairSamplingConfig RunConfig::sampling_config() const {
    PairSamplingConfig s;
    s.max_scale = grid_scale;
    s.layer_ids = layers;
    s.pair_budget = pair_budget;
    s.seed = seed;
    s.workers = effective_workers();
    return s;
}

SynthConfig RunConfig::synth_config() const {
    auto s = synth;
    s.seed = seed;
    return s;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [name, field] : fields()) out[name] = field.get(*this);
    return out;
}

std::string RunConfig::hash() const {
    // The worker count never changes results, so it stays out of the hash.
    auto j = to_json();
    j.erase("run.workers");
    return sha256_hex(j.dump());
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [name, field] : fields()) keys.push_back(name);
    return keys;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path, std::span<const std::string> overrides) {
    std::vector<std::string> problems;
    std::vector<std::pair<std::string, std::string>> values;

    if (path) {
        std::ifstream in(*path);
        if (!in) throw ConfigError("cannot read config file " + path->string());
        boost::property_tree::ptree tree;
        try {
            boost::property_tree::read_ini(in, tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(path->string() + ":" + std::to_string(e.line()) + ": " + e.message());
        }
        for (const auto& [section, body] : tree) {
            if (body.empty()) {
                problems.push_back("key '" + section + "' is outside any [section]");
                continue;
            }
            for (const auto& [key, value] : body) values.emplace_back(section + "." + key, trim(value.data()));
        }
    }
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) {
            problems.push_back("override '" + o + "' is not section.key=value");
            continue;
        }
        values.emplace_back(trim(std::string_view(o).substr(0, eq)), trim(std::string_view(o).substr(eq + 1)));
    }

    RunConfig config;
    const auto& table = fields();
    for (const auto& [name, value] : values) {
        const auto it = table.find(name);
        if (it == table.end()) {
            problems.push_back("unknown key '" + name + "'");
            continue;
        }
        try {
            it->second.set(config, value);
        } catch (const Error& e) {
            problems.push_back(name + ": " + e.what());
        }
    }
    const auto semantic = semantic_problems(config);
    problems.insert(problems.end(), semantic.begin(), semantic.end());
    if (!problems.empty()) {
        std::string msg = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                          (problems.size() == 1 ? "" : "s") + "):";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ConfigError(msg);
    }
    return config;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
        throw NumericError("SHA-256 computation failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < length; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for hashing: " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return sha256_hex(buffer.str());
}

}  // namespace remap
