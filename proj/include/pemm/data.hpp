#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "io.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pemm {

// ---------------------------------------------------------------------------
// Synthetic paired-modality generator
// ---------------------------------------------------------------------------

/// Recipe for a synthetic two-modality dataset. Class identity is carried by
/// fixed low-frequency spatial templates; the dermoscopy rendering receives
/// the template at a higher signal-to-noise ratio than the clinical one,
/// which additionally carries a structured nuisance pattern.
struct SyntheticSpec {
    std::size_t n_samples = 0;
    std::vector<std::size_t> tasks; // classes per task, e.g. {2, 2}
    std::size_t image_size = 32;
    // Defaults are calibrated so a small convolutional model trained on the
    // default dataset actually experiences the modality asymmetry: dermoscopy
    // is cleanly learnable while clinical stays weak enough that its branch
    // cannot catch up within a short training budget.
    double snr_derm = 4.0;
    double snr_clinical = 0.4;
    double nuisance_strength = 2.0;
    std::uint64_t seed = 0;
    /// The generator's whole point is that dermoscopy carries more signal;
    /// flip this only for falsification experiments.
    bool enforce_informative_derm = true;

    void validate() const {
        if (n_samples == 0) throw ConfigError("synthetic spec: n_samples must be positive");
        if (tasks.empty()) throw ConfigError("synthetic spec: at least one task");
        for (std::size_t k : tasks)
            if (k < 2) throw ConfigError("synthetic spec: every task needs >= 2 classes");
        if (image_size < 2) throw ConfigError("synthetic spec: image_size too small");
        if (!(snr_derm >= 0.0) || !(snr_clinical >= 0.0) || !(nuisance_strength >= 0.0))
            throw ConfigError("synthetic spec: ratios must be finite and non-negative");
        if (enforce_informative_derm && !(snr_derm > snr_clinical))
            throw ConfigError(
                "synthetic spec: snr_derm must exceed snr_clinical (disable "
                "enforce_informative_derm to experiment without the prior)");
    }
};

struct PairedSample {
    std::vector<int> labels; // one per task
    Tensor clinical;         // [1 x S x S]
    Tensor dermoscopy;       // [1 x S x S]
};

struct PairedDataset {
    SyntheticSpec spec; // generating spec, or an echo reconstructed on load
    std::vector<PairedSample> samples;

    std::size_t size() const { return samples.size(); }
    std::size_t task_count() const { return spec.tasks.size(); }
};

namespace detail {

// Stream salts keeping template and per-sample draws on disjoint streams.
inline constexpr std::uint64_t kTemplateStream = 0xda7a0001ULL;
inline constexpr std::uint64_t kSampleStreamBase = 0x100000000ULL;

/// Random low-frequency pattern: a 3x3 grid of cosine modes with Gaussian
/// coefficients, L2-normalized so scale factors mean the same thing across
/// image sizes.
inline std::vector<double> low_freq_pattern(Rng& rng, std::size_t s) {
    std::array<double, 9> coef{};
    for (double& c : coef) c = rng.normal();
    std::vector<double> img(s * s, 0.0);
    const double inv = 1.0 / static_cast<double>(s);
    constexpr double pi = 3.14159265358979323846;
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            double v = 0.0;
            for (std::size_t p = 0; p < 3; ++p)
                for (std::size_t q = 0; q < 3; ++q)
                    v += coef[p * 3 + q] *
                         std::cos(pi * static_cast<double>(p) * (static_cast<double>(y) + 0.5) * inv) *
                         std::cos(pi * static_cast<double>(q) * (static_cast<double>(x) + 0.5) * inv);
            img[y * s + x] = v;
        }
    double norm = 0.0;
    for (double v : img) norm += v * v;
    norm = std::sqrt(std::max(norm, 1e-300));
    for (double& v : img) v /= norm;
    return img;
}

} // namespace detail

/// Deterministically renders the dataset. Every sample draws from its own
/// derived stream, so sample i's content is independent of generation order.
inline PairedDataset generate(const SyntheticSpec& spec) {
    spec.validate();
    const std::size_t s = spec.image_size, px = s * s;
    const std::size_t t_count = spec.tasks.size();

    // Fixed per-(task, class) templates, drawn in task-major order.
    Rng template_rng(mix_seed(spec.seed, detail::kTemplateStream));
    std::vector<std::vector<std::vector<double>>> templates(t_count);
    for (std::size_t t = 0; t < t_count; ++t)
        for (std::size_t c = 0; c < spec.tasks[t]; ++c)
            templates[t].push_back(detail::low_freq_pattern(template_rng, s));

    PairedDataset ds;
    ds.spec = spec;
    ds.samples.reserve(spec.n_samples);
    const double task_scale = 1.0 / std::sqrt(static_cast<double>(t_count));
    for (std::size_t i = 0; i < spec.n_samples; ++i) {
        Rng rng(mix_seed(spec.seed, detail::kSampleStreamBase + i));
        PairedSample sample;
        std::vector<double> combined(px, 0.0);
        for (std::size_t t = 0; t < t_count; ++t) {
            const int label = static_cast<int>(rng.below(spec.tasks[t]));
            sample.labels.push_back(label);
            const auto& tmpl = templates[t][static_cast<std::size_t>(label)];
            for (std::size_t p = 0; p < px; ++p) combined[p] += tmpl[p] * task_scale;
        }
        const std::vector<double> nuisance = detail::low_freq_pattern(rng, s);
        std::vector<double> clinical(px), derm(px);
        for (std::size_t p = 0; p < px; ++p)
            clinical[p] = spec.snr_clinical * combined[p] +
                          spec.nuisance_strength * nuisance[p] + rng.normal();
        for (std::size_t p = 0; p < px; ++p)
            derm[p] = spec.snr_derm * combined[p] + rng.normal();
        sample.clinical = Tensor::from({1, s, s}, clinical);
        sample.dermoscopy = Tensor::from({1, s, s}, derm);
        ds.samples.push_back(std::move(sample));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct DatasetSplits {
    std::vector<std::size_t> train, val, test;
};

/// Seeded shuffle, then contiguous train/val/test cuts. Val and test sizes
/// are floors of their proportions (guarded against representation error on
/// exact products like 0.7 * 290); the remainder goes to train.
inline DatasetSplits split(std::size_t n, const std::array<double, 3>& ratios,
                           std::uint64_t seed) {
    double sum = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0)) throw ContractError("split: ratios must be non-negative");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ContractError("split: ratios must sum to 1");
    if (n < 3)
        throw DataError("split: need at least 3 samples for 3 splits, got " +
                        std::to_string(n));

    auto portion = [n](double r) {
        return static_cast<std::size_t>(
            std::floor(r * static_cast<double>(n) + 1e-9));
    };
    const std::size_t n_val = portion(ratios[1]);
    const std::size_t n_test = portion(ratios[2]);
    if (n_val + n_test > n) throw ContractError("split: val+test exceed n");
    const std::size_t n_train = n - n_val - n_test;

    Rng rng(seed);
    const std::vector<std::size_t> order = shuffled_indices(n, rng);
    DatasetSplits sp;
    sp.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    sp.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                  order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    sp.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return sp;
}

// ---------------------------------------------------------------------------
// Container format
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[5] = "PEMD";
inline constexpr std::uint32_t kDatasetVersion = 1;

/// Exact on-disk size of a dataset with this spec, in bytes.
inline std::uint64_t dataset_file_size(const SyntheticSpec& spec) {
    const std::uint64_t header = 4 + 4 + 8 + 4 + 8 + 8 + 8 + 8 + 4 + 4 +
                                 4 * static_cast<std::uint64_t>(spec.tasks.size());
    const std::uint64_t image =
        tensor_file_size({1, spec.image_size, spec.image_size});
    const std::uint64_t per_sample =
        4 * static_cast<std::uint64_t>(spec.tasks.size()) + 2 * image;
    return header + static_cast<std::uint64_t>(spec.n_samples) * per_sample;
}

inline void save_dataset(const PairedDataset& ds, const std::string& path) {
    std::ofstream out = open_binary_out(path);
    const SyntheticSpec& spec = ds.spec;
    write_magic(out, kDatasetMagic);
    write_u32_le(out, kDatasetVersion);
    write_u64_le(out, static_cast<std::uint64_t>(ds.samples.size()));
    write_u32_le(out, static_cast<std::uint32_t>(spec.image_size));
    write_f64_le(out, spec.snr_derm);
    write_f64_le(out, spec.snr_clinical);
    write_f64_le(out, spec.nuisance_strength);
    write_u64_le(out, spec.seed);
    write_u32_le(out, spec.enforce_informative_derm ? 1 : 0);
    write_u32_le(out, static_cast<std::uint32_t>(spec.tasks.size()));
    for (std::size_t k : spec.tasks) write_u32_le(out, static_cast<std::uint32_t>(k));
    for (const PairedSample& sample : ds.samples) {
        if (sample.labels.size() != spec.tasks.size())
            throw ContractError("save_dataset: sample label arity mismatch");
        for (int l : sample.labels) write_u32_le(out, static_cast<std::uint32_t>(l));
        write_tensor(out, sample.clinical);
        write_tensor(out, sample.dermoscopy);
    }
    if (!out) throw IoError("save_dataset: write failed for " + path);
}

inline PairedDataset load_dataset(const std::string& path) {
    std::ifstream in = open_binary_in(path);
    expect_magic(in, kDatasetMagic);
    const std::uint32_t version = read_u32_le(in);
    if (version != kDatasetVersion)
        throw FormatError("dataset version " + std::to_string(version) +
                          " not supported");
    PairedDataset ds;
    const std::uint64_t n = read_u64_le(in);
    ds.spec.n_samples = static_cast<std::size_t>(n);
    ds.spec.image_size = read_u32_le(in);
    ds.spec.snr_derm = read_f64_le(in);
    ds.spec.snr_clinical = read_f64_le(in);
    ds.spec.nuisance_strength = read_f64_le(in);
    ds.spec.seed = read_u64_le(in);
    ds.spec.enforce_informative_derm = read_u32_le(in) != 0;
    const std::uint32_t t_count = read_u32_le(in);
    if (t_count == 0 || t_count > 64)
        throw FormatError("dataset declares implausible task count " +
                          std::to_string(t_count));
    for (std::uint32_t t = 0; t < t_count; ++t)
        ds.spec.tasks.push_back(read_u32_le(in));
    ds.samples.reserve(static_cast<std::size_t>(n));
    for (std::uint64_t i = 0; i < n; ++i) {
        PairedSample s;
        for (std::uint32_t t = 0; t < t_count; ++t) {
            const std::uint32_t label = read_u32_le(in);
            if (label >= ds.spec.tasks[t])
                throw FormatError("sample " + std::to_string(i) +
                                  " carries out-of-range label");
            s.labels.push_back(static_cast<int>(label));
        }
        s.clinical = read_tensor(in);
        s.dermoscopy = read_tensor(in);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Plain-text manifest (pre-converted real imagery)
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline std::string resolve_relative(const std::string& base_file,
                                    const std::string& path) {
    std::filesystem::path p(path);
    if (p.is_absolute()) return path;
    return (std::filesystem::path(base_file).parent_path() / p).string();
}

} // namespace detail

/// Loads a dataset described by a CSV manifest with the header
/// `sample_id,clinical_path,derm_path,label_1,...,label_T`. Tensor paths are
/// resolved relative to the manifest file; class counts are inferred as
/// max(label)+1 per task. Lines must not contain quoted commas.
inline PairedDataset load_manifest(const std::string& path) {
    const std::string text = read_text_file(path);
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line))
        throw DataError("manifest is empty: " + path);
    const std::vector<std::string> header = detail::split_csv_line(line);
    if (header.size() < 4 || header[0] != "sample_id" ||
        header[1] != "clinical_path" || header[2] != "derm_path")
        throw DataError("manifest header must start with "
                        "sample_id,clinical_path,derm_path,label_1");
    const std::size_t t_count = header.size() - 3;
    for (std::size_t t = 0; t < t_count; ++t)
        if (header[3 + t] != "label_" + std::to_string(t + 1))
            throw DataError("manifest label columns must be label_1..label_T");

    PairedDataset ds;
    ds.spec.tasks.assign(t_count, 2); // refined below from observed labels
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::vector<std::string> f = detail::split_csv_line(line);
        if (f.size() != header.size())
            throw DataError("manifest line " + std::to_string(line_no) +
                            " has " + std::to_string(f.size()) + " fields, want " +
                            std::to_string(header.size()));
        PairedSample s;
        for (std::size_t t = 0; t < t_count; ++t) {
            long v = 0;
            try {
                v = std::stol(f[3 + t]);
            } catch (const std::exception&) {
                throw DataError("manifest line " + std::to_string(line_no) +
                                ": label '" + f[3 + t] + "' is not an integer");
            }
            if (v < 0)
                throw DataError("manifest line " + std::to_string(line_no) +
                                ": negative label");
            s.labels.push_back(static_cast<int>(v));
            ds.spec.tasks[t] = std::max(ds.spec.tasks[t],
                                        static_cast<std::size_t>(v) + 1);
        }
        {
            std::ifstream cin_ = open_binary_in(detail::resolve_relative(path, f[1]));
            s.clinical = read_tensor(cin_);
            std::ifstream din_ = open_binary_in(detail::resolve_relative(path, f[2]));
            s.dermoscopy = read_tensor(din_);
        }
        if (s.clinical.rank() != 3 || s.dermoscopy.rank() != 3)
            throw DataError("manifest line " + std::to_string(line_no) +
                            ": images must be rank-3 [C x H x W] tensors");
        if (s.clinical.shape() != s.dermoscopy.shape())
            throw DataError("manifest line " + std::to_string(line_no) +
                            ": modality shapes disagree");
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw DataError("manifest lists no samples: " + path);
    ds.spec.n_samples = ds.samples.size();
    ds.spec.image_size = ds.samples.front().clinical.dim(1);
    ds.spec.seed = 0;
    for (const PairedSample& s : ds.samples)
        if (s.clinical.shape() != ds.samples.front().clinical.shape())
            throw DataError("manifest images must share one shape");
    return ds;
}

} // namespace pemm
