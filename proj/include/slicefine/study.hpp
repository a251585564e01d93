#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <future>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>
#include "slicefine/data.hpp"
#include "slicefine/diagnostics.hpp"
#include "slicefine/nn.hpp"
#include "slicefine/rng.hpp"
#include "slicefine/slice.hpp"
#include "slicefine/trainer.hpp"

namespace slicefine {

using nlohmann::json;

// ---- small statistics -------------------------------------------------------

namespace stats {

inline double mean(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("stats::mean: empty sample");
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean(v), s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / double(v.size() - 1));
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("stats::median: empty sample");
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Plain concordant-minus-discordant rank correlation; tied pairs count zero.
inline double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("stats::kendall_tau: need two aligned samples");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = i + 1; j < x.size(); ++j) {
            double prod = (x[j] - x[i]) * (y[j] - y[i]);
            if (prod > 0.0) s += 1.0;
            else if (prod < 0.0) s -= 1.0;
        }
    return s / (0.5 * double(x.size()) * double(x.size() - 1));
}

}  // namespace stats

// ---- config hashing ---------------------------------------------------------

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string fnv1a64_hex(const std::string& s) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fnv1a64(s);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[std::size_t(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

// ---- config reading with field-path errors ---------------------------------

namespace cfg {

inline std::string join(const std::string& prefix, const std::string& key) {
    return prefix.empty() ? key : prefix + "." + key;
}

class Reader {
   public:
    Reader(const json& j, std::string prefix = "") : j_(j), prefix_(std::move(prefix)) {
        if (!j.is_object())
            throw std::invalid_argument((prefix_.empty() ? std::string("config") : prefix_) +
                                        ": expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    Reader section(const std::string& key) const {
        if (!j_.contains(key)) fail(key, "missing required section");
        return Reader(j_.at(key), join(prefix_, key));
    }

    std::uint64_t u64(const std::string& key, std::uint64_t fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        // Accept signed storage too: programmatically built json holds small
        // literals as signed integers even when nonnegative.
        if (!v.is_number_integer() ||
            (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
            fail(key, "expected a nonnegative integer");
        return v.get<std::uint64_t>();
    }

    double number(const std::string& key, double fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        if (!v.is_number()) fail(key, "expected a number");
        return v.get<double>();
    }

    bool boolean(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        if (!v.is_boolean()) fail(key, "expected true or false");
        return v.get<bool>();
    }

    std::string text(const std::string& key, const std::string& fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        if (!v.is_string()) fail(key, "expected a string");
        return v.get<std::string>();
    }

    std::vector<std::uint64_t> u64_list(const std::string& key,
                                        std::vector<std::uint64_t> fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        if (!v.is_array()) fail(key, "expected an array");
        std::vector<std::uint64_t> out;
        for (const json& e : v) {
            if (!e.is_number_integer() ||
                (!e.is_number_unsigned() && e.get<std::int64_t>() < 0))
                fail(key, "expected nonnegative integers");
            out.push_back(e.get<std::uint64_t>());
        }
        return out;
    }

    std::vector<double> number_list(const std::string& key,
                                    std::vector<double> fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        if (!v.is_array()) fail(key, "expected an array");
        std::vector<double> out;
        for (const json& e : v) {
            if (!e.is_number()) fail(key, "expected numbers");
            out.push_back(e.get<double>());
        }
        return out;
    }

    std::vector<std::string> text_list(const std::string& key,
                                       std::vector<std::string> fallback) const {
        if (!has(key)) return fallback;
        const json& v = j_.at(key);
        if (!v.is_array()) fail(key, "expected an array");
        std::vector<std::string> out;
        for (const json& e : v) {
            if (!e.is_string()) fail(key, "expected strings");
            out.push_back(e.get<std::string>());
        }
        return out;
    }

    [[noreturn]] void fail(const std::string& key, const std::string& what) const {
        throw std::invalid_argument(join(prefix_, key) + ": " + what);
    }

   private:
    const json& j_;
    std::string prefix_;
};

}  // namespace cfg

// ---- declarative run pieces -------------------------------------------------

struct DatasetSpec {
    std::string kind = "gaussian_clusters";
    std::size_t dim = 16;
    std::size_t classes = 3;
    std::size_t per_class = 60;
    double separation = 6.0;
    double noise = 0.5;
    std::size_t k_true = 2;      // low_rank_task
    std::size_t samples = 240;   // low_rank_task / teacher_student
    std::size_t hidden = 8;      // teacher_student
    std::string path;            // csv
    std::size_t label_col = 0;   // csv
    bool classification = true;  // csv
};

struct NetSpec {
    std::vector<std::size_t> dims{16, 12, 3};
    std::vector<std::string> activations{"tanh", "identity"};
};

// JSON-facing mirror of TrainConfig plus the schedule policy.
struct TrainSettings {
    std::size_t steps = 400;
    std::size_t batch_size = 32;
    std::size_t eval_every = 0;
    double lr = 1e-2, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
    std::string policy = "static";
    std::size_t rank = 1, rank_row = 1, rank_col = 1;
    std::string mode = "row";
    std::size_t initial_position = 0;
    std::size_t switch_every = 100;
    std::size_t max_switches = 1000000000;  // effectively unlimited
    double budget_fraction = 0.05;
    std::vector<std::size_t> managed{0};
    bool head_trainable = true;

    TrainConfig to_train_config(std::uint64_t seed) const {
        TrainConfig cc;
        cc.steps = steps;
        cc.batch_size = batch_size;
        cc.eval_every = eval_every;
        cc.opt = AdamWParams{lr, beta1, beta2, eps, weight_decay};
        cc.policy.kind = policy_from_string(policy);
        cc.policy.rank = rank;
        cc.policy.rank_row = rank_row;
        cc.policy.rank_col = rank_col;
        cc.policy.mode = slice_mode_from_string(mode);
        cc.policy.initial_position = initial_position;
        cc.policy.switch_every = switch_every;
        cc.policy.max_switches = max_switches;
        cc.policy.budget_fraction = budget_fraction;
        cc.managed = managed;
        cc.head_trainable = head_trainable;
        cc.seed = seed;
        return cc;
    }
};

struct GridSpec {
    std::vector<std::uint64_t> ranks;
    std::vector<std::uint64_t> intervals;
    std::vector<std::uint64_t> positions;
    std::vector<double> fractions;
    std::vector<double> budgets;
    std::vector<std::string> schemes;
    std::vector<std::string> policies;
    std::vector<std::string> categories;
    bool include_full_baseline = true;
};

struct StudyPlan {
    std::string study = "rank_sweep";
    DatasetSpec dataset;
    NetSpec network;
    bool pretrain_enabled = true;
    std::string pretrain_task = "target";  // or "source_sign"
    TrainSettings pretrain;
    TrainSettings finetune;
    GridSpec grid;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    double tau = 0.9;
    json raw = json::object();  // canonical config the hash is computed over
};

inline DatasetSpec parse_dataset_spec(const cfg::Reader& r) {
    DatasetSpec d;
    d.kind = r.text("kind", d.kind);
    d.dim = r.u64("dim", d.dim);
    d.classes = r.u64("classes", d.classes);
    d.per_class = r.u64("per_class", d.per_class);
    d.separation = r.number("separation", d.separation);
    d.noise = r.number("noise", d.noise);
    d.k_true = r.u64("k_true", d.k_true);
    d.samples = r.u64("samples", d.samples);
    d.hidden = r.u64("hidden", d.hidden);
    d.path = r.text("path", d.path);
    d.label_col = r.u64("label_col", d.label_col);
    d.classification = r.boolean("classification", d.classification);
    if (d.kind != "gaussian_clusters" && d.kind != "low_rank_task" &&
        d.kind != "teacher_student" && d.kind != "csv")
        r.fail("kind", "unknown dataset kind '" + d.kind + "'");
    return d;
}

inline NetSpec parse_net_spec(const cfg::Reader& r) {
    NetSpec n;
    std::vector<std::uint64_t> dims =
        r.u64_list("dims", std::vector<std::uint64_t>(n.dims.begin(), n.dims.end()));
    n.dims.assign(dims.begin(), dims.end());
    n.activations = r.text_list("activations", n.activations);
    if (n.dims.size() < 2) r.fail("dims", "need at least an input and an output size");
    if (n.activations.size() != n.dims.size() - 1)
        r.fail("activations", "need exactly one activation per layer");
    for (const std::string& a : n.activations) activation_from_string(a);  // validates
    return n;
}

inline TrainSettings parse_train_settings(const cfg::Reader& r, const TrainSettings& base) {
    TrainSettings t = base;
    t.steps = r.u64("steps", t.steps);
    t.batch_size = r.u64("batch_size", t.batch_size);
    t.eval_every = r.u64("eval_every", t.eval_every);
    t.lr = r.number("lr", t.lr);
    t.beta1 = r.number("beta1", t.beta1);
    t.beta2 = r.number("beta2", t.beta2);
    t.eps = r.number("eps", t.eps);
    t.weight_decay = r.number("weight_decay", t.weight_decay);
    t.policy = r.text("policy", t.policy);
    t.rank = r.u64("rank", t.rank);
    t.rank_row = r.u64("rank_row", t.rank_row);
    t.rank_col = r.u64("rank_col", t.rank_col);
    t.mode = r.text("mode", t.mode);
    t.initial_position = r.u64("initial_position", t.initial_position);
    t.switch_every = r.u64("switch_every", t.switch_every);
    t.max_switches = r.u64("max_switches", t.max_switches);
    t.budget_fraction = r.number("budget_fraction", t.budget_fraction);
    std::vector<std::uint64_t> managed =
        r.u64_list("managed", std::vector<std::uint64_t>(t.managed.begin(), t.managed.end()));
    t.managed.assign(managed.begin(), managed.end());
    t.head_trainable = r.boolean("head_trainable", t.head_trainable);
    policy_from_string(t.policy);    // validates
    slice_mode_from_string(t.mode);  // validates
    if (t.steps == 0) r.fail("steps", "must be positive");
    if (t.batch_size == 0) r.fail("batch_size", "must be positive");
    if (t.switch_every == 0) r.fail("switch_every", "must be positive");
    return t;
}

inline GridSpec parse_grid_spec(const cfg::Reader& r) {
    GridSpec g;
    g.ranks = r.u64_list("ranks", g.ranks);
    g.intervals = r.u64_list("intervals", g.intervals);
    g.positions = r.u64_list("positions", g.positions);
    g.fractions = r.number_list("fractions", g.fractions);
    g.budgets = r.number_list("budgets", g.budgets);
    g.schemes = r.text_list("schemes", g.schemes);
    g.policies = r.text_list("policies", g.policies);
    g.categories = r.text_list("categories", g.categories);
    g.include_full_baseline = r.boolean("include_full_baseline", g.include_full_baseline);
    return g;
}

inline const std::vector<std::string>& known_studies() {
    static const std::vector<std::string> kinds{
        "rank_sweep",        "interval_sweep", "position_sweep", "wanda_categories",
        "static_vs_dynamic", "pruning_curve",  "reinit_curve",   "random_mask_budget"};
    return kinds;
}

inline StudyPlan parse_study_config(const json& config) {
    cfg::Reader root(config);
    StudyPlan plan;
    plan.raw = config;
    plan.study = root.text("study", plan.study);
    if (std::find(known_studies().begin(), known_studies().end(), plan.study) ==
        known_studies().end())
        root.fail("study", "unknown study kind '" + plan.study + "'");
    if (root.has("dataset")) plan.dataset = parse_dataset_spec(root.section("dataset"));
    if (root.has("network")) plan.network = parse_net_spec(root.section("network"));
    if (root.has("pretrain")) {
        cfg::Reader pre = root.section("pretrain");
        plan.pretrain_enabled = pre.boolean("enabled", true);
        plan.pretrain_task = pre.text("task", plan.pretrain_task);
        if (plan.pretrain_task != "target" && plan.pretrain_task != "source_sign")
            pre.fail("task", "expected 'target' or 'source_sign'");
        plan.pretrain = parse_train_settings(pre, plan.pretrain);
    }
    if (root.has("finetune"))
        plan.finetune = parse_train_settings(root.section("finetune"), plan.finetune);
    if (root.has("grid")) plan.grid = parse_grid_spec(root.section("grid"));
    plan.seeds = root.u64_list("seeds", plan.seeds);
    if (plan.seeds.empty()) root.fail("seeds", "need at least one seed");
    plan.tau = root.number("tau", plan.tau);
    if (!(plan.tau > 0.0) || plan.tau > 1.0) root.fail("tau", "must lie in (0, 1]");
    return plan;
}

// ---- dataset / network construction ----------------------------------------

inline Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed) {
    if (spec.kind == "gaussian_clusters")
        return gaussian_clusters(spec.dim, spec.classes, spec.per_class, spec.separation,
                                 spec.noise, seed);
    if (spec.kind == "low_rank_task")
        return low_rank_task(spec.dim, spec.k_true, spec.samples, spec.noise, seed);
    if (spec.kind == "teacher_student")
        return teacher_student(spec.dim, spec.hidden, spec.samples, seed).first;
    if (spec.kind == "csv")
        return load_csv(spec.path, spec.label_col, spec.classification, seed);
    throw std::invalid_argument("make_dataset: unknown kind " + spec.kind);
}

inline Network make_network(const NetSpec& spec, std::uint64_t seed) {
    std::vector<Activation> acts;
    for (const std::string& a : spec.activations) acts.push_back(activation_from_string(a));
    Rng rng = Rng::derive(seed, 0x6e6574);
    return Network::init(spec.dims, acts, rng);
}

// Swap the classifier head for a freshly initialized one with `classes`
// outputs, keeping every backbone layer bit-exact.
inline void replace_head(Network& net, std::size_t classes, std::uint64_t seed) {
    Layer& head = net.layers.back();
    const std::size_t in = head.in_dim();
    Rng rng = Rng::derive(seed, 0x686561);
    Matrix W(classes, in);
    const double stddev = std::sqrt(1.0 / double(in));
    for (std::size_t i = 0; i < W.size(); ++i) W.data()[i] = rng.normal(0.0, stddev);
    head.W = std::move(W);
    head.b.assign(classes, 0.0);
}

// Relabel a low-rank dataset by the sign of its first latent coordinate: a
// deliberately narrow binary source task over the same inputs, used to
// pretrain backbones whose useful feature directions are few.
inline Dataset source_sign_dataset(const Dataset& target) {
    if (target.latent_dim == 0)
        throw std::invalid_argument("source_sign_dataset: dataset has no latent record");
    Dataset src = target;
    src.num_classes = 2;
    auto relabel = [](Split& split, const Matrix& z) {
        split.labels.resize(z.cols());
        for (std::size_t s = 0; s < z.cols(); ++s) split.labels[s] = z(0, s) > 0.0 ? 1 : 0;
    };
    relabel(src.train, target.latent_train);
    relabel(src.val, target.latent_val);
    relabel(src.calib, target.latent_calib);
    return src;
}

// ---- study records ----------------------------------------------------------

struct StudyRecord {
    std::string study;
    std::string grid;  // grid point label, e.g. "rank=2"
    std::uint64_t seed = 0;
    json metrics;  // flat object of numbers, strings, small arrays
    double wall_time_s = 0.0;
    std::string config_hash;
};

inline json record_to_json(const StudyRecord& r) {
    json j;
    j["config_hash"] = r.config_hash;
    j["grid"] = r.grid;
    j["metrics"] = r.metrics;
    j["seed"] = r.seed;
    j["study"] = r.study;
    j["wall_time_s"] = r.wall_time_s;
    return j;
}

inline StudyRecord record_from_json(const json& j) {
    StudyRecord r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.grid = j.at("grid").get<std::string>();
    r.metrics = j.at("metrics");
    r.seed = j.at("seed").get<std::uint64_t>();
    r.study = j.at("study").get<std::string>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
    return r;
}

inline void write_records_jsonl(const std::string& path,
                                const std::vector<StudyRecord>& records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const StudyRecord& r : records) out << record_to_json(r).dump() << "\n";
}

inline std::vector<StudyRecord> read_records_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::vector<StudyRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(record_from_json(json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + " line " + std::to_string(lineno) + ": " +
                                     e.what());
        }
    }
    return records;
}

// Equality of two JSONL payloads with the timing field ignored.
inline bool records_equal_modulo_time(const std::string& a, const std::string& b) {
    auto canon = [](const std::string& text) {
        std::vector<std::string> lines;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            j.erase("wall_time_s");
            lines.push_back(j.dump());
        }
        return lines;
    };
    return canon(a) == canon(b);
}

// Aggregate rows for the CSV report: one line per (study, grid, metric) with
// the across-seed sample count, mean, and standard deviation.
struct ReportRow {
    std::string study, grid, metric;
    std::size_t seeds = 0;
    double mean = 0.0, stddev = 0.0;
};

inline std::vector<ReportRow> aggregate_records(const std::vector<StudyRecord>& records) {
    std::vector<std::tuple<std::string, std::string, std::string>> order;
    for (const StudyRecord& r : records)
        for (auto it = r.metrics.begin(); it != r.metrics.end(); ++it) {
            if (!it.value().is_number()) continue;
            auto key = std::make_tuple(r.study, r.grid, it.key());
            if (std::find(order.begin(), order.end(), key) == order.end())
                order.push_back(key);
        }
    std::vector<ReportRow> rows;
    for (const auto& key : order) {
        std::vector<double> vals;
        for (const StudyRecord& r : records) {
            if (r.study != std::get<0>(key) || r.grid != std::get<1>(key)) continue;
            auto it = r.metrics.find(std::get<2>(key));
            if (it != r.metrics.end() && it->is_number()) vals.push_back(it->get<double>());
        }
        rows.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), vals.size(),
                        stats::mean(vals), stats::sample_std(vals)});
    }
    return rows;
}

inline void write_report_csv(const std::string& path,
                             const std::vector<StudyRecord>& records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "study,grid,metric,seeds,mean,std\n";
    for (const ReportRow& row : aggregate_records(records))
        out << row.study << "," << row.grid << "," << row.metric << "," << row.seeds << ","
            << format_double(row.mean) << "," << format_double(row.stddev) << "\n";
}

// ---- study execution --------------------------------------------------------

namespace detail {

inline json log_metrics(const TrainLog& log) {
    json m;
    m["initial_train_loss"] = log.initial_train_loss;
    m["final_train_loss"] = log.final_train_loss;
    m["final_val_loss"] = log.final_val_loss;
    m["final_val_accuracy"] = log.final_val_accuracy;
    m["committed_delta_sq"] = log.committed_delta_sq;
    m["switches"] = log.switches_done;
    m["degraded_to_static"] = log.degraded_to_static;
    return m;
}

// Dataset, backbone, and (optionally) pretraining shared by every grid cell
// of one seed. Cells recompute it independently, which costs time but keeps
// them trivially parallel and order-independent.
struct PreparedRun {
    Dataset data;
    Network net;
    json pretrain_metrics;
};

inline PreparedRun prepare_run(const StudyPlan& plan, std::uint64_t seed) {
    PreparedRun prep{make_dataset(plan.dataset, seed), make_network(plan.network, seed),
                     json::object()};
    if (!plan.pretrain_enabled) return prep;
    TrainConfig pcfg = plan.pretrain.to_train_config(Rng::derive(seed, 0x707265).bits());
    if (plan.pretrain_task == "source_sign") {
        Dataset source = source_sign_dataset(prep.data);
        Network src_net = prep.net;
        if (src_net.layers.back().out_dim() != 2)
            replace_head(src_net, 2, Rng::derive(seed, 0x737263).bits());
        TrainResult pres = full_finetune(src_net, source, pcfg);
        prep.net = pres.net;
        replace_head(prep.net, prep.data.num_classes, Rng::derive(seed, 0x686432).bits());
        prep.pretrain_metrics = log_metrics(pres.log);
        prep.pretrain_metrics["task"] = "source_sign";
    } else {
        TrainResult pres = full_finetune(prep.net, prep.data, pcfg);
        prep.net = pres.net;
        prep.pretrain_metrics = log_metrics(pres.log);
        prep.pretrain_metrics["task"] = "target";
    }
    return prep;
}

// 90%-variance rank of the first managed layer's calibration features.
inline std::size_t measured_k_task(const Network& net, const Dataset& data,
                                   const TrainSettings& tune, double tau) {
    if (tune.managed.empty()) return 0;
    const Matrix& cx = data.calib.x.cols() >= 2 ? data.calib.x : data.train.x;
    ForwardTrace trace = forward(net, cx);
    const Matrix& phi = trace.activations[tune.managed.front() + 1];
    KernelReport kr = kernel_report(phi.transposed());
    double total = 0.0;
    for (double l : kr.lambda) total += std::max(0.0, l);
    if (total <= 0.0) return 0;
    return k_task_tau(kr.lambda, tau);
}

inline json attach_context(json m, const StudyPlan& plan, const PreparedRun& prep,
                           const TrainSettings& tune) {
    m["k_task"] = measured_k_task(prep.net, prep.data, tune, plan.tau);
    m["pretrain"] = prep.pretrain_metrics;
    return m;
}

inline json tuned_cell(const StudyPlan& plan, const TrainSettings& tune,
                       std::uint64_t seed) {
    PreparedRun prep = prepare_run(plan, seed);
    TrainConfig cc = tune.to_train_config(Rng::derive(seed, 0x74756e).bits());
    TrainResult res = slicefine_train(prep.net, prep.data, cc);
    return attach_context(log_metrics(res.log), plan, prep, tune);
}

inline json full_baseline_cell(const StudyPlan& plan, std::uint64_t seed) {
    PreparedRun prep = prepare_run(plan, seed);
    TrainConfig cc = plan.finetune.to_train_config(Rng::derive(seed, 0x74756e).bits());
    TrainResult res = full_finetune(prep.net, prep.data, cc);
    return attach_context(log_metrics(res.log), plan, prep, plan.finetune);
}

// Static slice training restarted at an explicit sequence of band positions,
// one segment of switch_every steps per position. Fresh optimizer and batch
// stream per segment: the same contract a commit boundary provides.
inline TrainResult train_position_sequence(const Network& net0, const Dataset& data,
                                           const TrainSettings& tune, std::uint64_t seed,
                                           const std::vector<std::size_t>& positions) {
    if (positions.empty())
        throw std::invalid_argument("train_position_sequence: no positions");
    Network net = net0;
    TrainLog last;
    double committed = 0.0, initial = 0.0;
    for (std::size_t i = 0; i < positions.size(); ++i) {
        TrainSettings seg = tune;
        seg.policy = "static";
        seg.initial_position = positions[i];
        seg.steps = tune.switch_every;
        TrainConfig cc = seg.to_train_config(Rng::derive(seed, 0x736567 + i).bits());
        TrainResult res = slicefine_train(net, data, cc);
        net = std::move(res.net);
        committed += res.log.committed_delta_sq;
        if (i == 0) initial = res.log.initial_train_loss;
        last = res.log;
    }
    last.initial_train_loss = initial;
    last.committed_delta_sq = committed;
    last.switches_done = positions.size() - 1;
    TrainResult out;
    out.net = std::move(net);
    out.log = last;
    return out;
}

inline json wanda_category_cell(const StudyPlan& plan, const std::string& category,
                                std::uint64_t seed) {
    const TrainSettings& tune = plan.finetune;
    if (tune.managed.empty())
        throw std::invalid_argument("finetune.managed: wanda_categories needs a layer");
    PreparedRun prep = prepare_run(plan, seed);
    const std::size_t layer = tune.managed.front();
    const Matrix& cx = prep.data.calib.x.cols() > 0 ? prep.data.calib.x : prep.data.train.x;
    ForwardTrace trace = forward(prep.net, cx);
    Matrix S = wanda_scores(prep.net.layers[layer].W, trace.activations[layer].transposed());
    WandaRanking ranking =
        wanda_slice_ranking(S, slice_mode_from_string(tune.mode), tune.rank);

    std::size_t segments = std::max<std::size_t>(1, tune.steps / tune.switch_every);
    segments = std::min(segments, ranking.order.size());
    Rng cat_rng = Rng::derive(seed, 0x636174);
    std::vector<std::size_t> positions =
        wanda_category_positions(ranking, wanda_category_from_string(category), segments,
                                 cat_rng);

    TrainResult res = train_position_sequence(prep.net, prep.data, tune, seed, positions);
    json m = attach_context(log_metrics(res.log), plan, prep, tune);
    m["category"] = category;
    m["positions"] = positions;
    return m;
}

inline json pruning_cell(const StudyPlan& plan, double fraction, std::uint64_t seed) {
    PreparedRun prep = prepare_run(plan, seed);
    Network pruned = prep.net;
    const Matrix& cx = prep.data.calib.x.cols() > 0 ? prep.data.calib.x : prep.data.train.x;
    std::size_t removed = prune_backbone(pruned, fraction, cx);
    double acc_pruned =
        prep.data.loss == LossKind::CrossEntropy
            ? accuracy(forward(pruned, prep.data.val.x).logits(), prep.data.val.labels)
            : 0.0;
    TrainConfig cc = plan.finetune.to_train_config(Rng::derive(seed, 0x74756e).bits());
    TrainResult res = slicefine_train(pruned, prep.data, cc);
    json m = attach_context(log_metrics(res.log), plan, prep, plan.finetune);
    m["fraction"] = fraction;
    m["pruned_entries"] = removed;
    m["val_accuracy_pruned"] = acc_pruned;
    return m;
}

inline json reinit_cell(const StudyPlan& plan, const std::string& scheme,
                        std::uint64_t seed) {
    const TrainSettings& tune = plan.finetune;
    if (tune.managed.empty())
        throw std::invalid_argument("finetune.managed: reinit_curve needs a layer");
    PreparedRun prep = prepare_run(plan, seed);
    const std::size_t layer = tune.managed.front();
    const Matrix& W = prep.net.layers[layer].W;
    SliceMask mask{layer, slice_mode_from_string(tune.mode),
                   clamp_position(tune.initial_position, slice_dim(W, slice_mode_from_string(tune.mode)),
                                  tune.rank),
                   tune.rank};
    Network net = prep.net;
    reinit_slice(net, mask, reinit_from_string(scheme), Rng::derive(seed, 0x7269).bits());
    TrainSettings st = tune;
    st.policy = "static";
    TrainConfig cc = st.to_train_config(Rng::derive(seed, 0x74756e).bits());
    TrainResult res = slicefine_train(net, prep.data, cc);
    json m = attach_context(log_metrics(res.log), plan, prep, st);
    m["scheme"] = scheme;
    return m;
}

struct StudyCell {
    std::string grid;
    std::uint64_t seed;
    std::function<json()> run;
};

inline std::vector<StudyCell> build_cells(const StudyPlan& plan) {
    std::vector<StudyCell> cells;
    if (plan.study == "rank_sweep") {
        if (plan.grid.ranks.empty())
            throw std::invalid_argument("grid.ranks: rank_sweep needs at least one rank");
        for (std::uint64_t rank : plan.grid.ranks)
            for (std::uint64_t seed : plan.seeds)
                cells.push_back({"rank=" + std::to_string(rank), seed, [&plan, rank, seed] {
                                     TrainSettings tune = plan.finetune;
                                     tune.rank = rank;
                                     return tuned_cell(plan, tune, seed);
                                 }});
        if (plan.grid.include_full_baseline)
            for (std::uint64_t seed : plan.seeds)
                cells.push_back(
                    {"full", seed, [&plan, seed] { return full_baseline_cell(plan, seed); }});
    } else if (plan.study == "static_vs_dynamic") {
        std::vector<std::string> policies =
            plan.grid.policies.empty() ? std::vector<std::string>{"static", "cyclic_row"}
                                       : plan.grid.policies;
        for (const std::string& pol : policies)
            for (std::uint64_t seed : plan.seeds)
                cells.push_back({"policy=" + pol, seed, [&plan, pol, seed] {
                                     TrainSettings tune = plan.finetune;
                                     tune.policy = pol;
                                     return tuned_cell(plan, tune, seed);
                                 }});
    } else if (plan.study == "interval_sweep") {
        if (plan.grid.intervals.empty())
            throw std::invalid_argument("grid.intervals: interval_sweep needs values");
        for (std::uint64_t every : plan.grid.intervals)
            for (std::uint64_t seed : plan.seeds)
                cells.push_back(
                    {"switch_every=" + std::to_string(every), seed, [&plan, every, seed] {
                         TrainSettings tune = plan.finetune;
                         tune.switch_every = every;
                         return tuned_cell(plan, tune, seed);
                     }});
    } else if (plan.study == "position_sweep") {
        if (plan.grid.positions.empty())
            throw std::invalid_argument("grid.positions: position_sweep needs values");
        for (std::uint64_t pos : plan.grid.positions)
            for (std::uint64_t seed : plan.seeds)
                cells.push_back({"position=" + std::to_string(pos), seed, [&plan, pos, seed] {
                                     TrainSettings tune = plan.finetune;
                                     tune.policy = "static";
                                     tune.initial_position = pos;
                                     return tuned_cell(plan, tune, seed);
                                 }});
    } else if (plan.study == "wanda_categories") {
        std::vector<std::string> cats =
            plan.grid.categories.empty()
                ? std::vector<std::string>{"most", "least", "mixed", "random"}
                : plan.grid.categories;
        for (const std::string& cat : cats)
            for (std::uint64_t seed : plan.seeds)
                cells.push_back({"category=" + cat, seed, [&plan, cat, seed] {
                                     return wanda_category_cell(plan, cat, seed);
                                 }});
    } else if (plan.study == "pruning_curve") {
        std::vector<double> fractions =
            plan.grid.fractions.empty() ? std::vector<double>{0.0, 0.2, 0.4, 0.6, 0.8, 1.0}
                                        : plan.grid.fractions;
        for (double frac : fractions)
            for (std::uint64_t seed : plan.seeds)
                cells.push_back({"fraction=" + format_double(frac), seed,
                                 [&plan, frac, seed] { return pruning_cell(plan, frac, seed); }});
    } else if (plan.study == "reinit_curve") {
        std::vector<std::string> schemes =
            plan.grid.schemes.empty()
                ? std::vector<std::string>{"keep_pretrained", "zero", "xavier", "kaiming",
                                           "lecun"}
                : plan.grid.schemes;
        for (const std::string& scheme : schemes)
            for (std::uint64_t seed : plan.seeds)
                cells.push_back({"scheme=" + scheme, seed, [&plan, scheme, seed] {
                                     return reinit_cell(plan, scheme, seed);
                                 }});
    } else if (plan.study == "random_mask_budget") {
        if (plan.grid.budgets.empty())
            throw std::invalid_argument("grid.budgets: random_mask_budget needs values");
        for (double budget : plan.grid.budgets)
            for (std::uint64_t seed : plan.seeds)
                cells.push_back({"budget=" + format_double(budget), seed,
                                 [&plan, budget, seed] {
                                     TrainSettings tune = plan.finetune;
                                     tune.policy = "random_unstructured";
                                     tune.budget_fraction = budget;
                                     return tuned_cell(plan, tune, seed);
                                 }});
    } else {
        throw std::invalid_argument("run_study: unknown study kind " + plan.study);
    }
    return cells;
}

}  // namespace detail

// Execute every (grid point, seed) cell of the plan. Cell results depend only
// on the plan and the seed, so the record stream is deterministic no matter
// how many workers run; a failing cell contributes an "error" metric instead
// of aborting the sweep.
inline std::vector<StudyRecord> run_study(const StudyPlan& plan, std::size_t parallel = 1) {
    std::vector<detail::StudyCell> cells = detail::build_cells(plan);
    const std::string hash = fnv1a64_hex(plan.raw.dump());
    std::vector<StudyRecord> records(cells.size());
    auto execute = [&](std::size_t i) {
        auto t0 = std::chrono::steady_clock::now();
        json metrics;
        try {
            metrics = cells[i].run();
        } catch (const std::exception& e) {
            metrics = json{{"error", e.what()}};
        }
        auto t1 = std::chrono::steady_clock::now();
        records[i] = StudyRecord{plan.study, cells[i].grid, cells[i].seed, std::move(metrics),
                                 std::chrono::duration<double>(t1 - t0).count(), hash};
    };
    if (parallel <= 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) execute(i);
    } else {
        std::size_t next = 0;
        while (next < cells.size()) {
            std::size_t stop = std::min(cells.size(), next + parallel);
            std::vector<std::future<void>> wave;
            for (std::size_t i = next; i < stop; ++i)
                wave.push_back(std::async(std::launch::async, execute, i));
            for (auto& f : wave) f.get();
            next = stop;
        }
    }
    return records;
}

}  // namespace slicefine
