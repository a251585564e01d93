// Command-line front end: pretrain backbones, fine-tune weight slices, run
// diagnostic reports, execute study sweeps, and aggregate their records.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "slicefine/study.hpp"

namespace fs = std::filesystem;
using slicefine::json;

namespace {

std::string default_out() {
    const char* env = std::getenv("SLICEFINE_OUT");
    return env && *env ? env : ".";
}

json load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    try {
        return json::parse(in);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

json eval_curve(const slicefine::TrainLog& log) {
    json curve = json::array();
    for (const slicefine::EvalPoint& e : log.evals)
        curve.push_back({{"step", e.step},
                         {"train_loss", e.train_loss},
                         {"val_loss", e.val_loss},
                         {"val_accuracy", e.val_accuracy}});
    return curve;
}

slicefine::Network backbone_for(const slicefine::StudyPlan& plan,
                                const std::string& checkpoint, std::uint64_t seed,
                                slicefine::Dataset& data_out, json& pretrain_metrics) {
    data_out = slicefine::make_dataset(plan.dataset, seed);
    if (!checkpoint.empty()) {
        pretrain_metrics = json::object();
        pretrain_metrics["checkpoint"] = checkpoint;
        return slicefine::load_checkpoint(checkpoint);
    }
    slicefine::detail::PreparedRun prep = slicefine::detail::prepare_run(plan, seed);
    data_out = std::move(prep.data);
    pretrain_metrics = prep.pretrain_metrics;
    return prep.net;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir,
                 std::uint64_t seed) {
    slicefine::StudyPlan plan = slicefine::parse_study_config(load_config(config_path));
    slicefine::detail::PreparedRun prep = slicefine::detail::prepare_run(plan, seed);
    fs::create_directories(out_dir);
    slicefine::save_checkpoint(prep.net, (fs::path(out_dir) / "pretrained.json").string());

    json report;
    report["seed"] = seed;
    report["pretrain"] = prep.pretrain_metrics;
    const slicefine::Matrix& cx =
        prep.data.calib.x.cols() >= 2 ? prep.data.calib.x : prep.data.train.x;
    slicefine::ForwardTrace trace = slicefine::forward(prep.net, cx);
    json layers = json::array();
    for (std::size_t l = 0; l + 1 < prep.net.depth(); ++l) {
        slicefine::KernelReport kr =
            slicefine::kernel_report(trace.activations[l + 1].transposed());
        layers.push_back({{"layer", l},
                          {"feature_rank", slicefine::numeric_rank(kr.lambda)},
                          {"k_task_90", kr.k_task_90}});
    }
    report["hidden_layers"] = layers;
    write_json(fs::path(out_dir) / "pretrain_report.json", report);
    std::cout << "wrote " << (fs::path(out_dir) / "pretrained.json").string() << "\n";
    return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& out_dir,
                 std::uint64_t seed, const std::string& checkpoint) {
    slicefine::StudyPlan plan = slicefine::parse_study_config(load_config(config_path));
    slicefine::Dataset data;
    json pre_metrics;
    slicefine::Network net = backbone_for(plan, checkpoint, seed, data, pre_metrics);
    slicefine::TrainConfig cc =
        plan.finetune.to_train_config(slicefine::Rng::derive(seed, 0x74756e).bits());
    slicefine::TrainResult res = slicefine::slicefine_train(net, data, cc);

    fs::create_directories(out_dir);
    slicefine::save_checkpoint(res.net, (fs::path(out_dir) / "finetuned.json").string());
    json log = slicefine::detail::log_metrics(res.log);
    log["seed"] = seed;
    log["pretrain"] = pre_metrics;
    log["evals"] = eval_curve(res.log);
    write_json(fs::path(out_dir) / "finetune_log.json", log);
    std::cout << "final_val_accuracy=" << slicefine::format_double(res.log.final_val_accuracy)
              << " final_train_loss=" << slicefine::format_double(res.log.final_train_loss)
              << "\n";
    return 0;
}

int cmd_diagnose(const std::string& config_path, const std::string& out_dir,
                 std::uint64_t seed, const std::string& checkpoint,
                 const std::string& baseline) {
    json config = load_config(config_path);
    slicefine::StudyPlan plan = slicefine::parse_study_config(config);
    slicefine::Dataset data;
    json pre_metrics;
    slicefine::Network net = backbone_for(plan, checkpoint, seed, data, pre_metrics);

    std::size_t layer = plan.finetune.managed.empty() ? 0 : plan.finetune.managed.front();
    std::size_t groups = 2;
    if (config.contains("diagnose")) {
        slicefine::cfg::Reader dr(config.at("diagnose"), "diagnose");
        layer = dr.u64("layer", layer);
        groups = dr.u64("groups", groups);
    }
    if (layer >= net.depth()) throw std::runtime_error("diagnose.layer: out of range");

    const slicefine::Matrix& cx = data.calib.x.cols() >= 2 ? data.calib.x : data.train.x;
    slicefine::ForwardTrace trace = slicefine::forward(net, cx);

    json out;
    out["seed"] = seed;
    out["layer"] = layer;

    slicefine::SpectralBalanceReport sb = slicefine::spectral_balance(
        net.layers[layer].W, groups, slicefine::SliceMode::Row);
    out["spectral_balance"] = {{"groups", groups},
                               {"rho", sb.rho},
                               {"max_mean_energy_ratio", sb.max_mean_energy_ratio},
                               {"mean_energy", sb.mean_energy}};

    slicefine::KernelReport kr =
        slicefine::kernel_report(trace.activations[layer + 1].transposed());
    json lam = json::array();
    for (std::size_t i = 0; i < kr.lambda.size() && i < 10; ++i) lam.push_back(kr.lambda[i]);
    out["kernel"] = {{"k_task_90", kr.k_task_90},
                     {"identity_error_max", kr.identity_error_max},
                     {"top_eigenvalues", lam}};

    const slicefine::Matrix& W = net.layers[layer].W;
    slicefine::SliceMode mode = slicefine::slice_mode_from_string(plan.finetune.mode);
    slicefine::SliceMask mask{layer, mode,
                              slicefine::clamp_position(plan.finetune.initial_position,
                                                        slicefine::slice_dim(W, mode),
                                                        plan.finetune.rank),
                              plan.finetune.rank};
    slicefine::AlignmentReport ar = slicefine::alignment_report(
        net, cx, data.targets_for(data.calib.x.cols() >= 2 ? data.calib : data.train), layer,
        slicefine::mask_entries(mask, W), plan.tau);
    out["alignment"] = {{"k_task", ar.k_task},
                        {"vanishing_guarantee", ar.vanishing_guarantee},
                        {"gamma_min", ar.gamma_min},
                        {"beta", ar.beta},
                        {"rho_align", ar.rho_align},
                        {"restricted_grad_norm", ar.restricted_grad_norm},
                        {"lower_bound", ar.lower_bound},
                        {"smoothness", ar.smoothness},
                        {"predicted_decrease", ar.predicted_decrease}};

    slicefine::Matrix S = slicefine::wanda_scores(W, trace.activations[layer].transposed());
    slicefine::WandaRanking ranking =
        slicefine::wanda_slice_ranking(S, mode, plan.finetune.rank);
    json order = json::array();
    for (std::size_t i = 0; i < ranking.order.size() && i < 10; ++i)
        order.push_back(ranking.order[i]);
    out["salience"] = {{"rank", plan.finetune.rank}, {"best_positions", order}};

    if (!baseline.empty()) {
        slicefine::Network base = slicefine::load_checkpoint(baseline);
        slicefine::ForwardTrace bt = slicefine::forward(base, cx);
        out["drift"] = {
            {"cka", slicefine::cka(trace.activations[layer + 1].transposed(),
                                   bt.activations[layer + 1].transposed())},
            {"kl_shift", data.loss == slicefine::LossKind::CrossEntropy
                             ? slicefine::kl_shift(net, base, cx)
                             : 0.0}};
    }

    fs::create_directories(out_dir);
    write_json(fs::path(out_dir) / "diagnostics.json", out);
    std::cout << "wrote " << (fs::path(out_dir) / "diagnostics.json").string() << "\n";
    return 0;
}

int cmd_study(const std::string& config_path, const std::string& out_dir,
              const std::string& study_override, const std::vector<std::uint64_t>& seeds,
              std::size_t parallel) {
    json config = load_config(config_path);
    if (!study_override.empty()) config["study"] = study_override;
    if (!seeds.empty()) config["seeds"] = seeds;
    slicefine::StudyPlan plan = slicefine::parse_study_config(config);

    std::vector<slicefine::StudyRecord> records = slicefine::run_study(plan, parallel);
    fs::create_directories(out_dir);
    const fs::path jsonl = fs::path(out_dir) / "records.jsonl";
    slicefine::write_records_jsonl(jsonl.string(), records);
    slicefine::write_report_csv((fs::path(out_dir) / "report.csv").string(), records);

    std::size_t failures = 0;
    for (const slicefine::StudyRecord& r : records)
        if (r.metrics.contains("error")) ++failures;
    std::cout << "study=" << plan.study << " records=" << records.size()
              << " failures=" << failures << " -> " << jsonl.string() << "\n";
    return failures == 0 ? 0 : 2;
}

int cmd_report(const std::string& in_path, const std::string& out_path) {
    std::vector<slicefine::StudyRecord> records = slicefine::read_records_jsonl(in_path);
    slicefine::write_report_csv(out_path, records);
    std::cout << "wrote " << out_path << " (" << records.size() << " records)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"slice-based fine-tuning laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_dir = default_out();
    std::uint64_t seed = 1;
    std::string checkpoint, baseline, study_override;
    std::vector<std::uint64_t> seeds;
    std::size_t parallel = 1;
    std::string report_in, report_out = "report.csv";

    CLI::App* pre = app.add_subcommand("pretrain", "train a backbone and save a checkpoint");
    pre->add_option("--config", config_path, "JSON run configuration")->required();
    pre->add_option("--out", out_dir, "output directory");
    pre->add_option("--seed", seed, "run seed");

    CLI::App* fin = app.add_subcommand("finetune", "train weight slices of a backbone");
    fin->add_option("--config", config_path, "JSON run configuration")->required();
    fin->add_option("--out", out_dir, "output directory");
    fin->add_option("--seed", seed, "run seed");
    fin->add_option("--checkpoint", checkpoint, "backbone checkpoint to start from");

    CLI::App* dia = app.add_subcommand("diagnose", "feature-geometry and salience report");
    dia->add_option("--config", config_path, "JSON run configuration")->required();
    dia->add_option("--out", out_dir, "output directory");
    dia->add_option("--seed", seed, "run seed");
    dia->add_option("--checkpoint", checkpoint, "network checkpoint to inspect");
    dia->add_option("--baseline", baseline, "second checkpoint for drift comparison");

    CLI::App* stu = app.add_subcommand("study", "run a (grid point x seed) sweep");
    stu->add_option("--config", config_path, "JSON study configuration")->required();
    stu->add_option("--out", out_dir, "output directory");
    stu->add_option("--study", study_override, "override the study kind");
    stu->add_option("--seed", seeds, "override the seed list (repeatable)");
    stu->add_option("--parallel", parallel, "worker threads for grid cells");

    CLI::App* rep = app.add_subcommand("report", "aggregate a records file into CSV");
    rep->add_option("--in", report_in, "records.jsonl produced by `study`")->required();
    rep->add_option("--out", report_out, "CSV output path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) return cmd_pretrain(config_path, out_dir, seed);
        if (fin->parsed()) return cmd_finetune(config_path, out_dir, seed, checkpoint);
        if (dia->parsed())
            return cmd_diagnose(config_path, out_dir, seed, checkpoint, baseline);
        if (stu->parsed())
            return cmd_study(config_path, out_dir, study_override, seeds, parallel);
        if (rep->parsed()) return cmd_report(report_in, report_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
