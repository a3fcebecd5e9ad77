#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <pemm/data.hpp>
#include <pemm/io.hpp>
#include <pemm/metrics.hpp>
#include <pemm/model.hpp>
#include <pemm/trainer.hpp>

namespace pemm {

// ---------------------------------------------------------------------------
// Run configuration: everything one training/evaluation run needs, loadable
// from a sectioned key=value file. Unknown sections and keys are rejected
// with line-numbered errors, and every run can serialize the fully resolved
// configuration back out in a canonical, byte-stable form.
// ---------------------------------------------------------------------------

enum class DataSource { kSynthetic, kDataset, kManifest };

struct DataConfig {
    DataSource source = DataSource::kSynthetic;
    std::string path;        // dataset/manifest file for non-synthetic sources
    SyntheticSpec synthetic; // generator settings for the synthetic source
    std::array<double, 3> split{0.7, 0.1, 0.2};
    std::uint64_t split_seed = 0;

    /// Source-specific checks, run when data is materialized (not at parse
    /// time) so configs that never touch data stay loadable.
    void validate() const {
        if (source == DataSource::kSynthetic) {
            synthetic.validate();
        } else if (path.empty()) {
            throw ConfigError("data: path is required when source is not synthetic");
        }
    }
};

struct EvalConfig {
    bool search_weights = false; // grid-search the late-fusion triple on val
    double step = 0.1;           // simplex grid resolution for the search
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train; // includes loss_bias (W) and equal_weighting
    DataConfig data;
    EvalConfig eval;
    std::string out_dir; // where checkpoints/history/reports land

    void validate() const {
        model.validate();
        train.validate();
        if (!(train.loss_bias >= 0.0 && train.loss_bias <= 0.5))
            throw ConfigError("loss: w must lie in [0, 0.5], got " +
                              fmt_double(train.loss_bias));
        if (!(eval.step > 0.0) || eval.step > 0.5)
            throw ConfigError("eval: step must be in (0, 0.5], got " +
                              fmt_double(eval.step));
        double sum = 0.0;
        for (double r : data.split) {
            if (!(r >= 0.0))
                throw ConfigError("data: split ratios must be non-negative");
            sum += r;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ConfigError("data: split ratios must sum to 1, got " +
                              fmt_double(sum));
    }
};

namespace detail {

struct IniEntry {
    std::size_t line = 0;
    std::string section, key, value;
    bool is_header = false; // section header line, key/value empty
};

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return std::string(s.substr(b, e - b));
}

inline ConfigError line_error(std::size_t line, const std::string& what) {
    return ConfigError("line " + std::to_string(line) + ": " + what);
}

/// Splits sectioned key=value text into ordered entries. Section headers are
/// kept as marker entries so empty sections stay visible to callers.
inline std::vector<IniEntry> parse_ini(const std::string& text) {
    std::vector<IniEntry> out;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        const std::string raw =
            text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                throw line_error(line_no, "malformed section header '" + line + "'");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            if (section.empty())
                throw line_error(line_no, "empty section name");
            out.push_back({line_no, section, "", "", true});
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw line_error(line_no, "expected key = value, got '" + line + "'");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        if (key.empty()) throw line_error(line_no, "empty key before '='");
        if (section.empty())
            throw line_error(line_no, "key '" + key + "' outside any [section]");
        out.push_back({line_no, section, key, value, false});
    }
    return out;
}

inline ConfigError value_error(const IniEntry& e, const std::string& expected) {
    return line_error(e.line, "expected " + expected + " for " + e.section + "." +
                                  e.key + ", got '" + e.value + "'");
}

inline std::uint64_t parse_u64(const IniEntry& e) {
    std::uint64_t v = 0;
    const char* b = e.value.data();
    const char* end = b + e.value.size();
    const auto [p, ec] = std::from_chars(b, end, v);
    if (ec != std::errc{} || p != end) throw value_error(e, "an unsigned integer");
    return v;
}

inline std::size_t parse_size(const IniEntry& e) {
    return static_cast<std::size_t>(parse_u64(e));
}

inline double parse_double(const IniEntry& e) {
    double v = 0;
    const char* b = e.value.data();
    const char* end = b + e.value.size();
    const auto [p, ec] = std::from_chars(b, end, v);
    if (ec != std::errc{} || p != end) throw value_error(e, "a number");
    return v;
}

inline bool parse_bool(const IniEntry& e) {
    if (e.value == "true") return true;
    if (e.value == "false") return false;
    throw value_error(e, "true or false");
}

inline std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> items;
    if (trim(value).empty()) return items;
    std::size_t pos = 0;
    while (true) {
        const std::size_t comma = value.find(',', pos);
        items.push_back(trim(std::string_view(value).substr(
            pos, comma == std::string::npos ? std::string::npos : comma - pos)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return items;
}

inline std::vector<std::size_t> parse_size_list(const IniEntry& e) {
    std::vector<std::size_t> out;
    for (const std::string& item : split_list(e.value)) {
        IniEntry sub = e;
        sub.value = item;
        out.push_back(parse_size(sub));
    }
    return out;
}

inline std::vector<std::uint64_t> parse_u64_list(const IniEntry& e) {
    std::vector<std::uint64_t> out;
    for (const std::string& item : split_list(e.value)) {
        IniEntry sub = e;
        sub.value = item;
        out.push_back(parse_u64(sub));
    }
    return out;
}

inline std::vector<double> parse_double_list(const IniEntry& e) {
    std::vector<double> out;
    for (const std::string& item : split_list(e.value)) {
        IniEntry sub = e;
        sub.value = item;
        out.push_back(parse_double(sub));
    }
    return out;
}

// Two-way enum spellings -----------------------------------------------------

inline std::string to_text(Sharing s) {
    return s == Sharing::kShared ? "shared" : "individual";
}
inline std::string to_text(FusionMode m) {
    switch (m) {
    case FusionMode::kConcat: return "concat";
    case FusionMode::kCa: return "ca";
    default: return "sca";
    }
}
inline std::string to_text(AttnScale s) {
    return s == AttnScale::kInvSqrtD ? "inv_sqrt_d" : "none";
}
inline std::string to_text(ClassifierSharing s) {
    return s == ClassifierSharing::kSharedCD ? "shared_cd" : "individual";
}
inline std::string to_text(DataSource s) {
    switch (s) {
    case DataSource::kSynthetic: return "synthetic";
    case DataSource::kDataset: return "dataset";
    default: return "manifest";
    }
}

inline Sharing sharing_from(const IniEntry& e) {
    if (e.value == "shared") return Sharing::kShared;
    if (e.value == "individual") return Sharing::kIndividual;
    throw value_error(e, "shared or individual");
}
inline FusionMode fusion_mode_from(const IniEntry& e) {
    if (e.value == "concat") return FusionMode::kConcat;
    if (e.value == "ca") return FusionMode::kCa;
    if (e.value == "sca") return FusionMode::kSca;
    throw value_error(e, "concat, ca, or sca");
}
inline AttnScale attn_scale_from(const IniEntry& e) {
    if (e.value == "none") return AttnScale::kNone;
    if (e.value == "inv_sqrt_d") return AttnScale::kInvSqrtD;
    throw value_error(e, "none or inv_sqrt_d");
}
inline ClassifierSharing classifier_sharing_from(const IniEntry& e) {
    if (e.value == "individual") return ClassifierSharing::kIndividual;
    if (e.value == "shared_cd") return ClassifierSharing::kSharedCD;
    throw value_error(e, "individual or shared_cd");
}
inline DataSource data_source_from(const IniEntry& e) {
    if (e.value == "synthetic") return DataSource::kSynthetic;
    if (e.value == "dataset") return DataSource::kDataset;
    if (e.value == "manifest") return DataSource::kManifest;
    throw value_error(e, "synthetic, dataset, or manifest");
}

inline ConfigError unknown_key(const IniEntry& e) {
    return line_error(e.line,
                      "unknown key '" + e.key + "' in [" + e.section + "]");
}

inline bool known_run_section(const std::string& s) {
    return s == "encoder" || s == "fusion" || s == "heads" || s == "loss" ||
           s == "train" || s == "data" || s == "eval" || s == "output";
}

/// Applies one key=value entry to a run configuration. Shared between config
/// files and suite cell overrides so both reject unknown keys identically.
inline void apply_run_key(RunConfig& cfg, const IniEntry& e) {
    const std::string& s = e.section;
    if (e.is_header) {
        if (!known_run_section(s))
            throw line_error(e.line, "unknown section [" + s + "]");
        return;
    }
    const std::string& k = e.key;
    if (s == "encoder") {
        if (k == "in_channels") cfg.model.encoder.in_channels = parse_size(e);
        else if (k == "stage_channels") cfg.model.encoder.stage_channels = parse_size_list(e);
        else if (k == "kernel") cfg.model.encoder.kernel = parse_size(e);
        else if (k == "sharing") cfg.model.encoder.sharing = sharing_from(e);
        else if (k == "input_size") cfg.model.encoder.input_size = parse_size(e);
        else throw unknown_key(e);
    } else if (s == "fusion") {
        if (k == "mode") cfg.model.fusion.mode = fusion_mode_from(e);
        else if (k == "stages") cfg.model.fusion.stages = parse_size_list(e);
        else if (k == "scale") cfg.model.fusion.scale = attn_scale_from(e);
        else if (k == "self_variant") cfg.model.fusion.self_variant = parse_bool(e);
        else throw unknown_key(e);
    } else if (s == "heads") {
        if (k == "tasks") cfg.model.heads.tasks = parse_size_list(e);
        else if (k == "sharing") cfg.model.heads.classifier_sharing = classifier_sharing_from(e);
        else throw unknown_key(e);
    } else if (s == "loss") {
        if (k == "w") cfg.train.loss_bias = parse_double(e);
        else if (k == "equal") cfg.train.equal_weighting = parse_bool(e);
        else throw unknown_key(e);
    } else if (s == "train") {
        if (k == "epochs") cfg.train.epochs = parse_size(e);
        else if (k == "batch_size") cfg.train.batch_size = parse_size(e);
        else if (k == "lr_max") cfg.train.lr_max = parse_double(e);
        else if (k == "lr_min") cfg.train.lr_min = parse_double(e);
        else if (k == "seed") cfg.train.seed = parse_u64(e);
        else if (k == "swa_start_fraction") cfg.train.swa_start_fraction = parse_double(e);
        else if (k == "select_best_val") cfg.train.select_best_val = parse_bool(e);
        else throw unknown_key(e);
    } else if (s == "data") {
        if (k == "source") cfg.data.source = data_source_from(e);
        else if (k == "path") cfg.data.path = e.value;
        else if (k == "n_samples") cfg.data.synthetic.n_samples = parse_size(e);
        else if (k == "tasks") cfg.data.synthetic.tasks = parse_size_list(e);
        else if (k == "image_size") cfg.data.synthetic.image_size = parse_size(e);
        else if (k == "snr_derm") cfg.data.synthetic.snr_derm = parse_double(e);
        else if (k == "snr_clinical") cfg.data.synthetic.snr_clinical = parse_double(e);
        else if (k == "nuisance") cfg.data.synthetic.nuisance_strength = parse_double(e);
        else if (k == "data_seed") cfg.data.synthetic.seed = parse_u64(e);
        else if (k == "enforce_prior") cfg.data.synthetic.enforce_informative_derm = parse_bool(e);
        else if (k == "split") {
            const std::vector<double> r = parse_double_list(e);
            if (r.size() != 3)
                throw value_error(e, "exactly three comma-separated ratios");
            cfg.data.split = {r[0], r[1], r[2]};
        } else if (k == "split_seed") cfg.data.split_seed = parse_u64(e);
        else throw unknown_key(e);
    } else if (s == "eval") {
        if (k == "search_weights") cfg.eval.search_weights = parse_bool(e);
        else if (k == "step") cfg.eval.step = parse_double(e);
        else throw unknown_key(e);
    } else if (s == "output") {
        if (k == "dir") cfg.out_dir = e.value;
        else throw unknown_key(e);
    } else {
        throw line_error(e.line, "unknown section [" + s + "]");
    }
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

inline std::string join_u64(const std::vector<std::uint64_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

inline const char* bool_text(bool b) { return b ? "true" : "false"; }

} // namespace detail

/// Parses a full run configuration, rejecting unknown sections/keys and
/// duplicate keys with line-numbered errors, then validates it.
inline RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    for (const detail::IniEntry& e : detail::parse_ini(text)) {
        if (!e.is_header && !seen.insert(e.section + "." + e.key).second)
            throw detail::line_error(e.line, "duplicate key '" + e.key +
                                                 "' in [" + e.section + "]");
        detail::apply_run_key(cfg, e);
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    return parse_run_config(read_text_file(path));
}

/// Canonical serialization: every key, fixed order, shortest round-trip
/// number rendering. parse(to_ini_text(c)) reproduces c exactly, and the
/// text itself is a byte-stable fixed point.
inline std::string to_ini_text(const RunConfig& cfg) {
    using namespace detail;
    std::string o;
    o += "[encoder]\n";
    o += "in_channels = " + std::to_string(cfg.model.encoder.in_channels) + "\n";
    o += "stage_channels = " + join_sizes(cfg.model.encoder.stage_channels) + "\n";
    o += "kernel = " + std::to_string(cfg.model.encoder.kernel) + "\n";
    o += "sharing = " + to_text(cfg.model.encoder.sharing) + "\n";
    o += "input_size = " + std::to_string(cfg.model.encoder.input_size) + "\n";
    o += "\n[fusion]\n";
    o += "mode = " + to_text(cfg.model.fusion.mode) + "\n";
    o += "stages = " + join_sizes(cfg.model.fusion.stages) + "\n";
    o += "scale = " + to_text(cfg.model.fusion.scale) + "\n";
    o += "self_variant = " + std::string(bool_text(cfg.model.fusion.self_variant)) + "\n";
    o += "\n[heads]\n";
    o += "tasks = " + join_sizes(cfg.model.heads.tasks) + "\n";
    o += "sharing = " + to_text(cfg.model.heads.classifier_sharing) + "\n";
    o += "\n[loss]\n";
    o += "w = " + fmt_double(cfg.train.loss_bias) + "\n";
    o += "equal = " + std::string(bool_text(cfg.train.equal_weighting)) + "\n";
    o += "\n[train]\n";
    o += "epochs = " + std::to_string(cfg.train.epochs) + "\n";
    o += "batch_size = " + std::to_string(cfg.train.batch_size) + "\n";
    o += "lr_max = " + fmt_double(cfg.train.lr_max) + "\n";
    o += "lr_min = " + fmt_double(cfg.train.lr_min) + "\n";
    o += "seed = " + std::to_string(cfg.train.seed) + "\n";
    o += "swa_start_fraction = " + fmt_double(cfg.train.swa_start_fraction) + "\n";
    o += "select_best_val = " + std::string(bool_text(cfg.train.select_best_val)) + "\n";
    o += "\n[data]\n";
    o += "source = " + to_text(cfg.data.source) + "\n";
    o += "path = " + cfg.data.path + "\n";
    o += "n_samples = " + std::to_string(cfg.data.synthetic.n_samples) + "\n";
    o += "tasks = " + join_sizes(cfg.data.synthetic.tasks) + "\n";
    o += "image_size = " + std::to_string(cfg.data.synthetic.image_size) + "\n";
    o += "snr_derm = " + fmt_double(cfg.data.synthetic.snr_derm) + "\n";
    o += "snr_clinical = " + fmt_double(cfg.data.synthetic.snr_clinical) + "\n";
    o += "nuisance = " + fmt_double(cfg.data.synthetic.nuisance_strength) + "\n";
    o += "data_seed = " + std::to_string(cfg.data.synthetic.seed) + "\n";
    o += "enforce_prior = " +
         std::string(bool_text(cfg.data.synthetic.enforce_informative_derm)) + "\n";
    o += "split = " + fmt_double(cfg.data.split[0]) + "," +
         fmt_double(cfg.data.split[1]) + "," + fmt_double(cfg.data.split[2]) + "\n";
    o += "split_seed = " + std::to_string(cfg.data.split_seed) + "\n";
    o += "\n[eval]\n";
    o += "search_weights = " + std::string(bool_text(cfg.eval.search_weights)) + "\n";
    o += "step = " + fmt_double(cfg.eval.step) + "\n";
    o += "\n[output]\n";
    o += "dir = " + cfg.out_dir + "\n";
    return o;
}

/// Materializes the configured dataset. Relative dataset/manifest paths
/// resolve against `base_dir` (normally the config file's directory).
inline PairedDataset load_data(const DataConfig& d,
                               const std::filesystem::path& base_dir) {
    d.validate();
    if (d.source == DataSource::kSynthetic) return generate(d.synthetic);
    std::filesystem::path p(d.path);
    if (p.is_relative()) p = base_dir / p;
    return d.source == DataSource::kDataset ? load_dataset(p.string())
                                            : load_manifest(p.string());
}

// ---------------------------------------------------------------------------
// Stand-alone synthetic-data spec files (for the dataset generator command).
// ---------------------------------------------------------------------------

inline SyntheticSpec parse_synthetic_spec(const std::string& text) {
    using namespace detail;
    SyntheticSpec spec;
    std::set<std::string> seen;
    for (const IniEntry& e : parse_ini(text)) {
        if (e.section != "synthetic")
            throw line_error(e.line, "unknown section [" + e.section +
                                         "] (expected [synthetic])");
        if (e.is_header) continue;
        if (!seen.insert(e.key).second)
            throw line_error(e.line, "duplicate key '" + e.key + "'");
        const std::string& k = e.key;
        if (k == "n_samples") spec.n_samples = parse_size(e);
        else if (k == "tasks") spec.tasks = parse_size_list(e);
        else if (k == "image_size") spec.image_size = parse_size(e);
        else if (k == "snr_derm") spec.snr_derm = parse_double(e);
        else if (k == "snr_clinical") spec.snr_clinical = parse_double(e);
        else if (k == "nuisance") spec.nuisance_strength = parse_double(e);
        else if (k == "seed") spec.seed = parse_u64(e);
        else if (k == "enforce_prior") spec.enforce_informative_derm = parse_bool(e);
        else throw unknown_key(e);
    }
    spec.validate();
    return spec;
}

inline std::string synthetic_to_text(const SyntheticSpec& spec) {
    using namespace detail;
    std::string o;
    o += "[synthetic]\n";
    o += "n_samples = " + std::to_string(spec.n_samples) + "\n";
    o += "tasks = " + join_sizes(spec.tasks) + "\n";
    o += "image_size = " + std::to_string(spec.image_size) + "\n";
    o += "snr_derm = " + fmt_double(spec.snr_derm) + "\n";
    o += "snr_clinical = " + fmt_double(spec.snr_clinical) + "\n";
    o += "nuisance = " + fmt_double(spec.nuisance_strength) + "\n";
    o += "seed = " + std::to_string(spec.seed) + "\n";
    o += "enforce_prior = " +
         std::string(bool_text(spec.enforce_informative_derm)) + "\n";
    return o;
}

inline SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
    return parse_synthetic_spec(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Comparison suites: a base run config plus named cells of dotted-key
// overrides, each trained over a declared list of seeds.
// ---------------------------------------------------------------------------

struct SuiteOverride {
    std::size_t line = 0;
    std::string key, value; // dotted "section.key" and raw value text
};

struct SuiteCell {
    std::string name;
    std::vector<SuiteOverride> overrides;
};

struct Suite {
    std::string name = "suite";
    std::string base;                          // run-config path, as written
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::vector<SuiteCell> cells;              // declared order = row order
};

/// Parses a suite file: one [suite] section (base, optional name/seeds) and
/// one [cell NAME] section per grid cell. Cell override keys are validated
/// later, against the base config, when the cell is instantiated.
inline Suite parse_suite(const std::string& text) {
    using namespace detail;
    Suite suite;
    bool saw_base = false;
    std::set<std::string> suite_keys, cell_names;
    SuiteCell* current = nullptr;
    for (const IniEntry& e : parse_ini(text)) {
        const bool is_cell = e.section.rfind("cell ", 0) == 0;
        if (e.is_header) {
            if (e.section == "suite") {
                current = nullptr;
                continue;
            }
            if (!is_cell)
                throw line_error(e.line, "unknown section [" + e.section +
                                             "] (expected [suite] or [cell NAME])");
            const std::string name = trim(std::string_view(e.section).substr(5));
            if (name.empty()) throw line_error(e.line, "cell needs a name");
            if (!cell_names.insert(name).second)
                throw line_error(e.line, "duplicate cell '" + name + "'");
            suite.cells.push_back({name, {}});
            current = &suite.cells.back();
            continue;
        }
        if (e.section == "suite") {
            if (!suite_keys.insert(e.key).second)
                throw line_error(e.line, "duplicate key '" + e.key + "' in [suite]");
            if (e.key == "name") suite.name = e.value;
            else if (e.key == "base") { suite.base = e.value; saw_base = true; }
            else if (e.key == "seeds") {
                suite.seeds = parse_u64_list(e);
                if (suite.seeds.empty())
                    throw line_error(e.line, "seeds must be non-empty");
            } else throw unknown_key(e);
            continue;
        }
        if (!is_cell || current == nullptr || e.section != "cell " + current->name)
            throw line_error(e.line, "unknown section [" + e.section + "]");
        current->overrides.push_back({e.line, e.key, e.value});
    }
    if (!saw_base) throw ConfigError("suite: missing required key 'base'");
    if (suite.cells.empty()) throw ConfigError("suite: declares no cells");
    return suite;
}

inline Suite load_suite(const std::filesystem::path& path) {
    return parse_suite(read_text_file(path));
}

/// Instantiates one cell: applies its dotted-key overrides to a copy of the
/// base config and revalidates. Unknown keys get the cell's line numbers.
inline RunConfig apply_cell(const RunConfig& base, const SuiteCell& cell) {
    RunConfig cfg = base;
    std::set<std::string> seen;
    for (const SuiteOverride& ov : cell.overrides) {
        const std::size_t dot = ov.key.find('.');
        if (dot == std::string::npos || dot == 0 || dot + 1 == ov.key.size())
            throw detail::line_error(
                ov.line, "cell override key must look like section.key, got '" +
                             ov.key + "'");
        if (!seen.insert(ov.key).second)
            throw detail::line_error(ov.line,
                                     "duplicate override '" + ov.key + "'");
        detail::IniEntry e;
        e.line = ov.line;
        e.section = ov.key.substr(0, dot);
        e.key = ov.key.substr(dot + 1);
        e.value = ov.value;
        detail::apply_run_key(cfg, e);
    }
    cfg.validate();
    return cfg;
}

/// Byte-stable echo of a parsed suite, written beside comparison outputs.
inline std::string suite_to_text(const Suite& suite) {
    using namespace detail;
    std::string o;
    o += "[suite]\n";
    o += "name = " + suite.name + "\n";
    o += "base = " + suite.base + "\n";
    o += "seeds = " + join_u64(suite.seeds) + "\n";
    for (const SuiteCell& cell : suite.cells) {
        o += "\n[cell " + cell.name + "]\n";
        for (const SuiteOverride& ov : cell.overrides)
            o += ov.key + " = " + ov.value + "\n";
    }
    return o;
}

} // namespace pemm
