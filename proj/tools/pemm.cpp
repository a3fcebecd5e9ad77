// pemm: train, evaluate, and compare paired-modality fusion models.
//
// Subcommands:
//   gen-data  --spec <file> --out <path>          write a synthetic dataset
//   train     --config <file>                     fit a model, save artifacts
//   evaluate  --config <file> --checkpoint <file> [--search-weights]
//   compare   --suite <file> [--out <csv>]        run a config grid
//   params    --config <file>                     print parameter counts
//
// Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training divergence,
// 5 checkpoint/config mismatch.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <pemm/config.hpp>

namespace fs = std::filesystem;
using namespace pemm;

namespace {

int guarded(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const MismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const TrainingDiverged& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) { // config/contract/data/shape/metric errors
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

/// The dataset's task layout must match the configured heads before any
/// forward pass; mismatches here are config mistakes, not shape accidents.
void check_tasks(const PairedDataset& ds, const ModelConfig& model) {
    if (ds.task_count() != model.heads.tasks.size())
        throw ConfigError("dataset has " + std::to_string(ds.task_count()) +
                          " tasks but heads declare " +
                          std::to_string(model.heads.tasks.size()));
    for (std::size_t t = 0; t < ds.task_count(); ++t)
        if (ds.spec.tasks[t] != model.heads.tasks[t])
            throw ConfigError("task " + std::to_string(t) + " has " +
                              std::to_string(ds.spec.tasks[t]) +
                              " classes but heads declare " +
                              std::to_string(model.heads.tasks[t]));
}

void cmd_gen_data(const std::string& spec_path, const std::string& out_path) {
    const SyntheticSpec spec = load_synthetic_spec(spec_path);
    const PairedDataset ds = generate(spec);
    save_dataset(ds, out_path);
    write_text_file(out_path + ".resolved.ini", synthetic_to_text(spec));
    std::cout << "dataset: " << out_path << " (" << ds.size()
              << " samples, tasks " << join_sizes(spec.tasks) << ")\n"
              << "digest: " << hex_u64(file_digest(out_path)) << "\n";
}

void cmd_train(const std::string& config_path) {
    const fs::path cpath(config_path);
    const RunConfig cfg = load_run_config(cpath);
    if (cfg.out_dir.empty())
        throw ConfigError("output: dir is required for train");
    const PairedDataset ds = load_data(cfg.data, cpath.parent_path());
    check_tasks(ds, cfg.model);
    const DatasetSplits sp = split(ds.size(), cfg.data.split, cfg.data.split_seed);

    Model model = Model::build(cfg.model, cfg.train.seed);
    const FitResult r = fit(model, ds, sp, cfg.train);

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    const std::string ckpt = (out / "checkpoint.pemw").string();
    const std::string hist = (out / "history.csv").string();
    const std::string resolved = (out / "resolved.ini").string();
    write_text_file(hist, history_csv(r.history));
    model.save_weights(ckpt);
    write_text_file(resolved, to_ini_text(cfg));

    const EpochStats& last = r.history.back();
    std::cout << "samples: train " << sp.train.size() << " / val "
              << sp.val.size() << " / test " << sp.test.size() << "\n"
              << "epochs: " << r.history.size() << "\n"
              << "final: L_total=" << fmt_double(last.loss_total)
              << " val_avg_acc=" << fmt_double(last.val_avg_acc)
              << " val_avg_auc=" << fmt_double(last.val_avg_auc) << "\n";
    if (cfg.train.select_best_val)
        std::cout << "restored: best-val epoch " << r.best_epoch << "\n";
    else
        std::cout << "restored: swa-mean (" << r.swa_snapshots
                  << " snapshots)\n";
    std::cout << "checkpoint: " << ckpt << " (config digest "
              << hex_u64(cfg.model.digest()) << ")\n"
              << "wrote: " << hist << " " << resolved << "\n";
}

/// Scores one trained model: late-fused val/test reports under the chosen
/// triple plus per-branch test reports (each branch is the degenerate
/// one-hot late fusion).
nlohmann::ordered_json evaluation_json(const BranchOutputs& val_out,
                                       const BranchOutputs& test_out,
                                       const std::vector<std::vector<int>>& val_labels,
                                       const std::vector<std::vector<int>>& test_labels,
                                       const FusionWeightTriple& w, bool searched) {
    nlohmann::ordered_json j;
    j["weights"] = {{"w_C", w.w_c},
                    {"w_D", w.w_d},
                    {"w_F", w.w_f},
                    {"searched", searched}};
    j["val"] = report_to_json(scored_report(val_out, val_labels, w));
    j["test"] = report_to_json(scored_report(test_out, test_labels, w));
    nlohmann::ordered_json branches;
    branches["clinical"] = report_to_json(
        scored_report(test_out, test_labels, FusionWeightTriple{1.0, 0.0, 0.0}));
    branches["dermoscopy"] = report_to_json(
        scored_report(test_out, test_labels, FusionWeightTriple{0.0, 1.0, 0.0}));
    branches["fusion"] = report_to_json(
        scored_report(test_out, test_labels, FusionWeightTriple{0.0, 0.0, 1.0}));
    j["test_branches"] = branches;
    return j;
}

void cmd_evaluate(const std::string& config_path, const std::string& ckpt_path,
                  bool force_search) {
    const fs::path cpath(config_path);
    RunConfig cfg = load_run_config(cpath);
    if (cfg.out_dir.empty())
        throw ConfigError("output: dir is required for evaluate");
    if (force_search) cfg.eval.search_weights = true;
    const PairedDataset ds = load_data(cfg.data, cpath.parent_path());
    check_tasks(ds, cfg.model);
    const DatasetSplits sp = split(ds.size(), cfg.data.split, cfg.data.split_seed);

    Model model = Model::build(cfg.model, cfg.train.seed);
    model.load_weights(ckpt_path); // digest mismatch -> MismatchError -> exit 5

    const BranchOutputs val_out = branch_outputs(model, ds, sp.val);
    const BranchOutputs test_out = branch_outputs(model, ds, sp.test);
    const auto val_labels = gather_labels(ds, sp.val);
    const auto test_labels = gather_labels(ds, sp.test);

    FusionWeightTriple w; // documented default: equal thirds
    if (cfg.eval.search_weights)
        w = search_fusion_weights(val_out, val_labels, cfg.eval.step);

    const nlohmann::ordered_json j = evaluation_json(
        val_out, test_out, val_labels, test_labels, w, cfg.eval.search_weights);
    const std::string jtext = j.dump(2) + "\n";
    std::cout << jtext;

    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    write_text_file(out / "report.json", jtext);
    std::string csv = report_to_csv(scored_report(test_out, test_labels, w));
    csv += ",,W_C," + fmt_double(w.w_c) + "\n";
    csv += ",,W_D," + fmt_double(w.w_d) + "\n";
    csv += ",,W_F," + fmt_double(w.w_f) + "\n";
    write_text_file(out / "report.csv", csv);
    write_text_file(out / "resolved.ini", to_ini_text(cfg));
}

/// CSV cells may not contain separators or line breaks; error text can.
std::string csv_safe(std::string s) {
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = c == ',' ? ';' : ' ';
    return s;
}

void cmd_compare(const std::string& suite_path, const std::string& out_csv) {
    const fs::path spath(suite_path);
    const Suite suite = load_suite(spath);
    fs::path base_path(suite.base);
    if (base_path.is_relative()) base_path = spath.parent_path() / base_path;
    const RunConfig base = load_run_config(base_path);

    std::string csv =
        "cell,seeds_ok,avg_auc_mean,avg_auc_std,avg_acc_mean,avg_acc_std,"
        "params_encoder,params_fusion,params_heads,params_total,note\n";

    for (const SuiteCell& cell : suite.cells) {
        std::vector<double> aucs, accs;
        std::string note, params_part = ",,,";
        try {
            const RunConfig cfg = apply_cell(base, cell);
            const PairedDataset ds = load_data(cfg.data, base_path.parent_path());
            check_tasks(ds, cfg.model);
            const DatasetSplits sp =
                split(ds.size(), cfg.data.split, cfg.data.split_seed);
            const Model::ParamBreakdown pb =
                Model::build(cfg.model, 0).param_breakdown();
            params_part = std::to_string(pb.encoder) + "," +
                          std::to_string(pb.fusion) + "," +
                          std::to_string(pb.heads) + "," +
                          std::to_string(pb.total);

            std::size_t failed = 0;
            std::string first_error;
            for (std::uint64_t seed : suite.seeds) {
                try {
                    TrainConfig tc = cfg.train;
                    tc.seed = seed;
                    Model model = Model::build(cfg.model, seed);
                    fit(model, ds, sp, tc);
                    const BranchOutputs val_out = branch_outputs(model, ds, sp.val);
                    const BranchOutputs test_out = branch_outputs(model, ds, sp.test);
                    const auto val_labels = gather_labels(ds, sp.val);
                    const auto test_labels = gather_labels(ds, sp.test);
                    FusionWeightTriple w;
                    if (cfg.eval.search_weights)
                        w = search_fusion_weights(val_out, val_labels, cfg.eval.step);
                    const MetricReport rep = scored_report(test_out, test_labels, w);
                    aucs.push_back(rep.avg_auc);
                    accs.push_back(rep.avg_acc);
                } catch (const std::exception& e) {
                    ++failed;
                    if (first_error.empty()) first_error = e.what();
                }
            }
            if (failed)
                note = std::to_string(failed) + " of " +
                       std::to_string(suite.seeds.size()) +
                       " seeds failed: " + first_error;
        } catch (const std::exception& e) {
            note = std::string("cell failed: ") + e.what();
        }

        const auto mean_std = [](const std::vector<double>& xs) {
            const double n = static_cast<double>(xs.size());
            double mean = 0;
            for (double x : xs) mean += x;
            mean /= n;
            double ss = 0;
            for (double x : xs) ss += (x - mean) * (x - mean);
            const double sd = xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
            return std::pair<double, double>(mean, sd);
        };
        std::string stats_part = ",,,";
        if (!aucs.empty()) {
            const auto [auc_m, auc_s] = mean_std(aucs);
            const auto [acc_m, acc_s] = mean_std(accs);
            stats_part = fmt_double(auc_m) + "," + fmt_double(auc_s) + "," +
                         fmt_double(acc_m) + "," + fmt_double(acc_s);
        }
        csv += cell.name + "," + std::to_string(aucs.size()) + "," + stats_part +
               "," + params_part + "," + csv_safe(note) + "\n";
    }

    std::cout << csv;
    if (!out_csv.empty()) {
        write_text_file(out_csv, csv);
        write_text_file(out_csv + ".suite.ini", suite_to_text(suite));
        write_text_file(out_csv + ".base.ini", to_ini_text(base));
    }
}

void cmd_params(const std::string& config_path) {
    const RunConfig cfg = load_run_config(config_path);
    const Model::ParamBreakdown pb = Model::build(cfg.model, 0).param_breakdown();
    const nlohmann::ordered_json j{{"encoder_params", pb.encoder},
                                   {"fusion_params", pb.fusion},
                                   {"head_params", pb.heads},
                                   {"total", pb.total}};
    std::cout << j.dump() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"paired-modality fusion training and evaluation"};
    app.require_subcommand(1);

    std::string spec_path, out_path, config_path, ckpt_path, suite_path, out_csv;
    bool search_weights = false;

    CLI::App* gen = app.add_subcommand("gen-data",
                                       "generate a synthetic paired-modality dataset");
    gen->add_option("--spec", spec_path, "synthetic spec file")->required();
    gen->add_option("--out", out_path, "output dataset path")->required();

    CLI::App* train = app.add_subcommand("train", "train a model from a run config");
    train->add_option("--config", config_path, "run config file")->required();

    CLI::App* eval = app.add_subcommand("evaluate",
                                        "score a checkpoint on the val/test splits");
    eval->add_option("--config", config_path, "run config file")->required();
    eval->add_option("--checkpoint", ckpt_path, "trained weights")->required();
    eval->add_flag("--search-weights", search_weights,
                   "grid-search the late-fusion triple on the validation split");

    CLI::App* compare = app.add_subcommand("compare", "run a comparison suite");
    compare->add_option("--suite", suite_path, "suite file")->required();
    compare->add_option("--out", out_csv, "also write the table to this CSV file");

    CLI::App* params = app.add_subcommand("params", "print parameter counts as JSON");
    params->add_option("--config", config_path, "run config file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e); // prints help or the usage error
        return code == 0 ? 0 : 2;     // usage problems are config errors
    }

    if (gen->parsed()) return guarded([&] { cmd_gen_data(spec_path, out_path); });
    if (train->parsed()) return guarded([&] { cmd_train(config_path); });
    if (eval->parsed())
        return guarded([&] { cmd_evaluate(config_path, ckpt_path, search_weights); });
    if (compare->parsed()) return guarded([&] { cmd_compare(suite_path, out_csv); });
    if (params->parsed()) return guarded([&] { cmd_params(config_path); });
    return 2;
}
