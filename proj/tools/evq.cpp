// evq: command-line front end for the quantized tiny-ViT toolkit.
//
// Subcommands: synth-data, init-model, quantize, search, landscape,
// compare-opt, eval. Every command accepts --config <json>; flags win over
// config keys, and EVQ_SEED (env) overrides a config-supplied seed. Exit
// codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "evolq/landscape.hpp"
#include "evolq/model_io.hpp"
#include "evolq/search.hpp"

#ifndef EVQ_VERSION
#define EVQ_VERSION "unknown"
#endif

using json = nlohmann::ordered_json;
using namespace evolq;

namespace {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& w) : std::runtime_error(w) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& w) : std::runtime_error(w) {}
};

std::string hash_hex(const std::string& bytes) {
    std::ostringstream out;
    out << "fnv1a64:" << std::hex << std::setfill('0') << std::setw(16)
        << fnv1a64(bytes);
    return out.str();
}

// ---- config plumbing --------------------------------------------------------

// Loads the --config file and extracts this command's view of it: either the
// whole (flat) document, or the sub-object named after the command when the
// file is organized into per-command sections (one file driving a pipeline).
json command_config(const std::string& path, const std::string& command) {
    if (path.empty()) return json::object();
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError(path + ": config must be an object");
    static const std::set<std::string> kCommands = {
        "synth-data", "init-model",  "quantize", "search",
        "landscape",  "compare-opt", "eval"};
    bool sectioned = false;
    for (const auto& [key, value] : doc.items())
        if (kCommands.count(key)) {
            sectioned = true;
            if (!value.is_object())
                throw ConfigError(path + ": section '" + key + "' must be an object");
        }
    if (sectioned) {
        for (const auto& [key, value] : doc.items())
            if (!kCommands.count(key))
                throw ConfigError(path + ": unknown section '" + key + "'");
        return doc.contains(command) ? doc[command] : json::object();
    }
    return doc;
}

void check_keys(const json& cfg, const std::set<std::string>& allowed,
                const std::string& command) {
    for (const auto& [key, value] : cfg.items())
        if (!allowed.count(key))
            throw ConfigError(command + ": unknown config key '" + key + "'");
}

// flag wins over config key wins over the compiled default
template <class T>
void apply(const json& cfg, const std::string& key, const CLI::App* app, T& value) {
    const CLI::Option* opt = app->get_option_no_throw("--" + key);
    if (!opt) { // flag spelled with dashes where the key has underscores
        std::string flag = key;
        for (char& c : flag)
            if (c == '_') c = '-';
        opt = app->get_option_no_throw("--" + flag);
    }
    if (opt && opt->count() > 0) return; // explicit flag already holds the value
    if (cfg.contains(key)) {
        try {
            value = cfg[key].get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("config key '" + key + "': " + e.what());
        }
    }
}

bool given(const json& cfg, const std::string& key, const CLI::App* app) {
    const CLI::Option* opt = app->get_option_no_throw("--" + key);
    return (opt && opt->count() > 0) || cfg.contains(key);
}

// EVQ_SEED (env) overrides the config key but not an explicit flag
void apply_seed(const json& cfg, const CLI::App* app, uint64_t& seed) {
    const CLI::Option* opt = app->get_option_no_throw("--seed");
    if (opt && opt->count() > 0) return;
    if (const char* env = std::getenv("EVQ_SEED")) {
        try {
            seed = std::stoull(env);
            return;
        } catch (const std::exception&) {
            throw ConfigError("EVQ_SEED: not an unsigned integer");
        }
    }
    if (cfg.contains("seed")) apply(cfg, "seed", app, seed);
}

// Every command writes <primary-output>.manifest.json: effective config echo,
// build version, and content hashes of all inputs. No timestamps, so the
// manifest is byte-reproducible.
void write_manifest(const std::string& primary_output, const std::string& command,
                    const json& effective,
                    const std::vector<std::string>& input_paths) {
    json m;
    m["command"] = command;
    m["version"] = EVQ_VERSION;
    m["config"] = effective;
    json inputs = json::object();
    for (const std::string& p : input_paths) inputs[p] = hash_hex(read_file(p));
    m["inputs"] = inputs;
    write_file(primary_output + ".manifest.json", m.dump(2) + "\n");
}

void require_finite(double v, const std::string& what) {
    if (!std::isfinite(v)) throw NumericError(what + " is not finite");
}

Dataset head_subset(const Dataset& ds, uint32_t n) {
    if (n > ds.count)
        throw ConfigError("calibration subset " + std::to_string(n) +
                          " exceeds dataset size " + std::to_string(ds.count));
    Dataset out = ds;
    out.count = n;
    out.data.resize(size_t(n) * ds.sample_size());
    if (!out.labels.empty()) out.labels.resize(n);
    return out;
}

std::string trace_to_csv(const std::vector<CycleRecord>& trace) {
    std::ostringstream out;
    out.precision(17);
    out << "pass,block,cycle,candidate_id,fitness,best_fitness,wall_ms\n";
    for (const CycleRecord& r : trace)
        out << r.pass << "," << r.block << "," << r.cycle << "," << r.candidate_id
            << "," << r.fitness << "," << r.best_fitness << "," << r.wall_ms
            << "\n";
    return out.str();
}

// per-output-channel scale init for schemes whose library entry point is
// per-tensor
void per_channel_scales(const Tensor& w, QuantParams& p, const std::string& scheme,
                        double pct) {
    for (size_t c = 0; c < w.cols(); ++c) {
        Tensor col({w.rows(), 1});
        for (size_t r = 0; r < w.rows(); ++r) col.data[r] = w.at(r, c);
        QuantParams q;
        if (scheme == "percentile")
            q = init_scale_percentile(col, p.bitwidth, pct);
        else
            q = init_scale_omse(col, p.bitwidth);
        p.scale[c] = q.scale[0];
    }
}

// ---- synth-data ---------------------------------------------------------------

struct SynthArgs {
    std::string out;
    uint32_t count = 256, tokens = 16, dim = 32, classes = 10, threads = 0;
    uint64_t seed = 0;
    double separation = 4.0;
};

int cmd_synth_data(const json& cfg, const CLI::App* app, SynthArgs& a) {
    check_keys(cfg, {"out", "count", "tokens", "dim", "classes", "seed",
                     "separation", "threads"}, "synth-data");
    apply(cfg, "out", app, a.out);
    apply(cfg, "count", app, a.count);
    apply(cfg, "tokens", app, a.tokens);
    apply(cfg, "dim", app, a.dim);
    apply(cfg, "classes", app, a.classes);
    apply(cfg, "separation", app, a.separation);
    apply(cfg, "threads", app, a.threads);
    apply_seed(cfg, app, a.seed);
    if (a.out.empty()) throw ConfigError("synth-data: --out is required");

    Dataset ds = synth_dataset(a.count, a.tokens, a.dim, a.classes, a.seed,
                               a.separation);
    save_dataset(ds, a.out);
    json eff = {{"out", a.out},         {"count", a.count},
                {"tokens", a.tokens},   {"dim", a.dim},
                {"classes", a.classes}, {"seed", a.seed},
                {"separation", a.separation}, {"threads", a.threads}};
    write_manifest(a.out, "synth-data", eff, {});
    std::printf("synth-data: wrote %u samples to %s\n", a.count, a.out.c_str());
    return 0;
}

// ---- init-model ---------------------------------------------------------------

struct InitArgs {
    std::string out, calib;
    ViTConfig vc;
    uint64_t seed = 0;
    uint32_t threads = 0;
};

int cmd_init_model(const json& cfg, const CLI::App* app, InitArgs& a) {
    check_keys(cfg, {"out", "calib", "dim", "heads", "blocks", "tokens",
                     "classes", "mlp_ratio", "weight_bits", "activation_bits",
                     "seed", "threads"}, "init-model");
    apply(cfg, "out", app, a.out);
    apply(cfg, "calib", app, a.calib);
    apply(cfg, "dim", app, a.vc.embed_dim);
    apply(cfg, "heads", app, a.vc.heads);
    apply(cfg, "blocks", app, a.vc.blocks);
    apply(cfg, "tokens", app, a.vc.tokens);
    apply(cfg, "classes", app, a.vc.classes);
    apply(cfg, "mlp_ratio", app, a.vc.mlp_ratio);
    apply(cfg, "weight_bits", app, a.vc.weight_bits);
    apply(cfg, "activation_bits", app, a.vc.activation_bits);
    apply(cfg, "threads", app, a.threads);
    apply_seed(cfg, app, a.seed);
    if (a.out.empty() || a.calib.empty())
        throw ConfigError("init-model: --out and --calib are required");
    try {
        a.vc.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    Dataset calib = load_dataset(a.calib);
    if (calib.tokens != a.vc.tokens || calib.dim != a.vc.embed_dim)
        throw ConfigError("init-model: calibration shape mismatch");
    Model m = init_model(a.vc, a.seed, calib);
    save_model(m, a.out);
    json eff = {{"out", a.out},            {"calib", a.calib},
                {"dim", a.vc.embed_dim},   {"heads", a.vc.heads},
                {"blocks", a.vc.blocks},   {"tokens", a.vc.tokens},
                {"classes", a.vc.classes}, {"mlp_ratio", a.vc.mlp_ratio},
                {"weight_bits", a.vc.weight_bits},
                {"activation_bits", a.vc.activation_bits},
                {"seed", a.seed},          {"threads", a.threads}};
    write_manifest(a.out, "init-model", eff, {a.calib});
    std::printf("init-model: wrote %s (hash %s)\n", a.out.c_str(),
                hash_hex(serialize_model(m)).c_str());
    return 0;
}

// ---- quantize -----------------------------------------------------------------

struct QuantArgs {
    std::string model, calib, scheme = "minmax", out, report;
    int bits = 8, act_bits = -1;
    double pct = 99.9;
    uint32_t threads = 0;
};

int cmd_quantize(const json& cfg, const CLI::App* app, QuantArgs& a) {
    check_keys(cfg, {"model", "calib", "bits", "act_bits", "scheme", "pct",
                     "out", "report", "threads"}, "quantize");
    apply(cfg, "model", app, a.model);
    apply(cfg, "calib", app, a.calib);
    apply(cfg, "bits", app, a.bits);
    apply(cfg, "act_bits", app, a.act_bits);
    apply(cfg, "scheme", app, a.scheme);
    apply(cfg, "pct", app, a.pct);
    apply(cfg, "out", app, a.out);
    apply(cfg, "report", app, a.report);
    apply(cfg, "threads", app, a.threads);
    if (a.model.empty() || a.calib.empty() || a.out.empty())
        throw ConfigError("quantize: --model, --calib and --out are required");
    if (a.act_bits < 0) a.act_bits = a.bits;
    if (a.scheme != "minmax" && a.scheme != "percentile" && a.scheme != "omse")
        throw ConfigError("quantize: unknown scheme '" + a.scheme + "'");

    Model m = load_model(a.model);
    Dataset calib = load_dataset(a.calib);
    m.config.weight_bits = a.bits;
    m.config.activation_bits = a.act_bits;
    try {
        m.config.validate(); // rejects b=1 and other unsupported widths
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    for (ViTBlock& b : m.blocks) {
        auto weight_of = [&](uint32_t point) -> const Tensor& {
            for (uint32_t i = 0; i < b.n_heads(); ++i) {
                if (point == ViTBlock::pt_wq(i)) return b.wq[i];
                if (point == ViTBlock::pt_wk(i)) return b.wk[i];
                if (point == ViTBlock::pt_wv(i)) return b.wv[i];
            }
            if (point == b.pt_wo()) return b.wo;
            if (point == b.pt_fc1w()) return b.fc1_w;
            return b.fc2_w;
        };
        for (uint32_t p = 0; p < b.points.size(); ++p) {
            QuantPoint& pt = b.points[p];
            if (pt.is_weight) {
                const Tensor& w = weight_of(p);
                pt.params = init_scale_minmax(w, a.bits, Granularity::PerChannel, 1);
                if (a.scheme != "minmax")
                    per_channel_scales(w, pt.params, a.scheme, a.pct);
            } else {
                pt.params.bitwidth = a.act_bits;
            }
        }
        b.cache_dirty = true;
    }
    calibrate_activations(m, calib);
    save_model(m, a.out);

    double agreement = fp_agreement(m, calib);
    require_finite(agreement, "fp agreement");
    json points = json::array();
    for (size_t bi = 0; bi < m.blocks.size(); ++bi)
        for (const QuantPoint& pt : m.blocks[bi].points) {
            const auto& s = pt.params.scale;
            float lo = s[0], hi = s[0];
            double mean = 0.0;
            for (float v : s) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
                mean += v;
            }
            points.push_back({{"block", bi},
                              {"name", pt.name},
                              {"channels", s.size()},
                              {"min", lo},
                              {"mean", mean / double(s.size())},
                              {"max", hi}});
        }
    json report = {{"weight_bits", a.bits},
                   {"activation_bits", a.act_bits},
                   {"scheme", a.scheme},
                   {"fp_agreement", agreement},
                   {"points", points}};
    if (!a.report.empty()) write_file(a.report, report.dump(2) + "\n");
    json eff = {{"model", a.model},   {"calib", a.calib},
                {"bits", a.bits},     {"act_bits", a.act_bits},
                {"scheme", a.scheme}, {"pct", a.pct},
                {"out", a.out},       {"report", a.report},
                {"threads", a.threads}};
    write_manifest(a.out, "quantize", eff, {a.model, a.calib});
    std::printf("quantize: bits=%d scheme=%s fp-agreement=%.4f -> %s\n", a.bits,
                a.scheme.c_str(), agreement, a.out.c_str());
    return 0;
}

// ---- search -------------------------------------------------------------------

struct SearchArgs {
    std::string model, out, calib, heldout, trace, summary, loss = "infonce";
    SearchSettings s; // Table-1 defaults: P=10, K=15, C=3, S=10
    double tau = 0.1;
    uint32_t batch = 32, threads = 0;
    std::vector<uint32_t> sweep_passes, sweep_calib;
};

int cmd_search(const json& cfg, const CLI::App* app, SearchArgs& a) {
    check_keys(cfg, {"model", "out", "calib", "heldout", "trace", "summary",
                     "passes", "population", "cycles", "samples", "epsilon",
                     "seed", "loss", "tau", "batch", "threads", "sweep_passes",
                     "sweep_calib"}, "search");
    apply(cfg, "model", app, a.model);
    apply(cfg, "out", app, a.out);
    apply(cfg, "calib", app, a.calib);
    apply(cfg, "heldout", app, a.heldout);
    apply(cfg, "trace", app, a.trace);
    apply(cfg, "summary", app, a.summary);
    apply(cfg, "passes", app, a.s.passes);
    apply(cfg, "population", app, a.s.population);
    apply(cfg, "cycles", app, a.s.cycles);
    apply(cfg, "samples", app, a.s.samples);
    const bool epsilon_given = given(cfg, "epsilon", app);
    apply(cfg, "epsilon", app, a.s.epsilon);
    apply(cfg, "loss", app, a.loss);
    apply(cfg, "tau", app, a.tau);
    apply(cfg, "batch", app, a.batch);
    apply(cfg, "threads", app, a.threads);
    apply(cfg, "sweep_passes", app, a.sweep_passes);
    apply(cfg, "sweep_calib", app, a.sweep_calib);
    apply_seed(cfg, app, a.s.seed);
    if (a.model.empty() || a.calib.empty())
        throw ConfigError("search: --model and --calib are required");

    LossKind kind;
    try {
        kind = loss_kind_from_string(a.loss);
        a.s.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    Model fp = load_model(a.model);
    Dataset calib_full = load_dataset(a.calib);
    if (!epsilon_given)
        a.s.epsilon = SearchSettings::default_epsilon(fp.config.weight_bits);
    BatchPlan plan;
    plan.batch_size = a.batch;

    json eff = {{"model", a.model},       {"out", a.out},
                {"calib", a.calib},       {"heldout", a.heldout},
                {"trace", a.trace},       {"summary", a.summary},
                {"passes", a.s.passes},   {"population", a.s.population},
                {"cycles", a.s.cycles},   {"samples", a.s.samples},
                {"epsilon", a.s.epsilon}, {"seed", a.s.seed},
                {"loss", a.loss},         {"tau", a.tau},
                {"batch", a.batch},       {"threads", a.threads},
                {"sweep_passes", a.sweep_passes},
                {"sweep_calib", a.sweep_calib}};

    if (!a.sweep_passes.empty() || !a.sweep_calib.empty()) {
        // ablation harness: every (passes x calib-size) combination from a
        // fresh copy of the input model; per-combination traces plus one
        // summary table
        if (a.sweep_passes.empty()) a.sweep_passes.push_back(a.s.passes);
        if (a.sweep_calib.empty()) a.sweep_calib.push_back(calib_full.count);
        if (a.summary.empty())
            throw ConfigError("search: sweep mode requires --summary");
        json rows = json::array();
        for (uint32_t p : a.sweep_passes)
            for (uint32_t n : a.sweep_calib) {
                Dataset calib = head_subset(calib_full, n);
                Model q = fp;
                SearchSettings ss = a.s;
                ss.passes = p;
                SearchResult res = run_search(q, fp, calib, plan, ss, kind, a.tau);
                require_finite(res.final_loss, "final loss");
                if (!a.trace.empty())
                    write_file(a.trace + ".p" + std::to_string(p) + ".n" +
                                   std::to_string(n) + ".csv",
                               trace_to_csv(res.trace));
                rows.push_back({{"passes", p},
                                {"calib", n},
                                {"fitness_evals", res.fitness_evals},
                                {"trace_rows", res.trace.size()},
                                {"initial_loss", res.initial_loss},
                                {"final_loss", res.final_loss}});
            }
        json summary = {{"sweep", rows}};
        write_file(a.summary, summary.dump(2) + "\n");
        write_manifest(a.summary, "search", eff, {a.model, a.calib});
        std::printf("search: sweep complete, %zu combinations -> %s\n",
                    size_t(a.sweep_passes.size()) * a.sweep_calib.size(),
                    a.summary.c_str());
        return 0;
    }

    if (a.out.empty()) throw ConfigError("search: --out is required");
    Model q = fp;
    Dataset heldout;
    double agree_before = 0.0;
    if (!a.heldout.empty()) {
        heldout = load_dataset(a.heldout);
        agree_before = fp_agreement(q, heldout);
    }
    SearchResult res = run_search(q, fp, calib_full, plan, a.s, kind, a.tau);
    require_finite(res.initial_loss, "initial loss");
    require_finite(res.final_loss, "final loss");
    save_model(q, a.out);
    if (!a.trace.empty()) write_file(a.trace, trace_to_csv(res.trace));

    json summary = {{"loss", a.loss},
                    {"initial_loss", res.initial_loss},
                    {"final_loss", res.final_loss},
                    {"fitness_evals", res.fitness_evals},
                    {"trace_rows", res.trace.size()}};
    if (!a.heldout.empty()) {
        double agree_after = fp_agreement(q, heldout);
        summary["heldout_agreement_before"] = agree_before;
        summary["heldout_agreement_after"] = agree_after;
    }
    if (!a.summary.empty()) write_file(a.summary, summary.dump(2) + "\n");
    std::vector<std::string> inputs = {a.model, a.calib};
    if (!a.heldout.empty()) inputs.push_back(a.heldout);
    write_manifest(a.out, "search", eff, inputs);
    std::printf("search: loss %.6f -> %.6f (%zu evals) -> %s\n", res.initial_loss,
                res.final_loss, res.fitness_evals, a.out.c_str());
    return 0;
}

// ---- landscape ----------------------------------------------------------------

struct LandArgs {
    std::string model, data, loss = "infonce", out_csv, out_pgm;
    ProbeSpec spec;
    uint32_t batch = 32, threads = 0;
};

int cmd_landscape(const json& cfg, const CLI::App* app, LandArgs& a) {
    check_keys(cfg, {"model", "data", "block", "steps", "range", "dir_a",
                     "dir_b", "loss", "tau", "batch", "out_csv", "out_pgm",
                     "threads"}, "landscape");
    apply(cfg, "model", app, a.model);
    apply(cfg, "data", app, a.data);
    apply(cfg, "block", app, a.spec.block_index);
    apply(cfg, "steps", app, a.spec.grid_steps);
    const bool range_given = given(cfg, "range", app);
    apply(cfg, "range", app, a.spec.half_range);
    apply(cfg, "dir_a", app, a.spec.direction_a);
    apply(cfg, "dir_b", app, a.spec.direction_b);
    apply(cfg, "loss", app, a.loss);
    apply(cfg, "tau", app, a.spec.tau);
    apply(cfg, "batch", app, a.batch);
    apply(cfg, "out_csv", app, a.out_csv);
    apply(cfg, "out_pgm", app, a.out_pgm);
    apply(cfg, "threads", app, a.threads);
    if (a.model.empty() || a.data.empty() || a.out_csv.empty())
        throw ConfigError("landscape: --model, --data and --out-csv are required");

    Model m = load_model(a.model);
    Dataset eval_set = load_dataset(a.data);
    if (!range_given)
        a.spec.half_range =
            10.0 * SearchSettings::default_epsilon(m.config.weight_bits);
    try {
        a.spec.loss_kind = loss_kind_from_string(a.loss);
        a.spec.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    Model fp = m;
    BatchPlan plan;
    plan.batch_size = a.batch;
    LandscapeGrid grid = probe(m, fp, eval_set, plan, a.spec);
    for (double v : grid.losses) require_finite(v, "grid cell");
    std::ostringstream meta;
    meta << "model_hash=" << std::hex << grid.model_hash;
    write_file(a.out_csv, grid_to_csv(grid, {meta.str()}));
    if (!a.out_pgm.empty()) write_file(a.out_pgm, grid_to_pgm(grid));
    json eff = {{"model", a.model},          {"data", a.data},
                {"block", a.spec.block_index}, {"steps", a.spec.grid_steps},
                {"range", a.spec.half_range}, {"dir_a", a.spec.direction_a},
                {"dir_b", a.spec.direction_b}, {"loss", a.loss},
                {"tau", a.spec.tau},          {"batch", a.batch},
                {"out_csv", a.out_csv},       {"out_pgm", a.out_pgm},
                {"threads", a.threads}};
    write_manifest(a.out_csv, "landscape", eff, {a.model, a.data});
    std::printf("landscape: %ux%u grid, center loss %.6f, roughness %.4f -> %s\n",
                grid.n, grid.n, grid.center(), roughness(grid), a.out_csv.c_str());
    return 0;
}

// ---- compare-opt --------------------------------------------------------------

struct CompArgs {
    uint64_t budget = 2000;
    uint32_t seeds = 10, dim = 50, block_size = 1, threads = 0;
    double omega = 40.0, amplitude = 1.0, quad = 0.1, lr = 0.01, epsilon = 0.1;
    SearchSettings es;
    std::string out;
};

int cmd_compare_opt(const json& cfg, const CLI::App* app, CompArgs& a) {
    check_keys(cfg, {"budget", "seeds", "dim", "omega", "amplitude", "quad",
                     "lr", "epsilon", "population", "samples", "block_size",
                     "out", "threads"},
               "compare-opt");
    apply(cfg, "budget", app, a.budget);
    apply(cfg, "seeds", app, a.seeds);
    apply(cfg, "dim", app, a.dim);
    apply(cfg, "omega", app, a.omega);
    apply(cfg, "amplitude", app, a.amplitude);
    apply(cfg, "quad", app, a.quad);
    apply(cfg, "lr", app, a.lr);
    apply(cfg, "epsilon", app, a.epsilon);
    apply(cfg, "population", app, a.es.population);
    apply(cfg, "samples", app, a.es.samples);
    apply(cfg, "block_size", app, a.block_size);
    apply(cfg, "out", app, a.out);
    apply(cfg, "threads", app, a.threads);
    if (a.out.empty()) throw ConfigError("compare-opt: --out is required");
    if (a.block_size < 1 || a.block_size > a.dim)
        throw ConfigError("compare-opt: block_size must be in [1, dim]");

    // The ES side mirrors the block-wise scale search: one pass over
    // coordinate blocks, each block evolved with every other coordinate
    // frozen. Equal budgets: ES spends 1 bootstrap eval plus (K-1+C) evals
    // per block; the finite-difference optimizers spend 2*dim probes per
    // step.
    a.es.epsilon = a.epsilon;
    const uint32_t nblocks = (a.dim + a.block_size - 1) / a.block_size;
    const uint64_t per_block = (a.budget - 1) / nblocks;
    if (per_block < a.es.population)
        throw ConfigError("compare-opt: budget too small for ES population");
    a.es.cycles = uint32_t(per_block) - (a.es.population - 1);
    const uint32_t steps = uint32_t(a.budget / (2ull * a.dim));
    if (steps < 1) throw ConfigError("compare-opt: budget too small for gradients");

    std::ostringstream csv;
    csv.precision(17);
    csv << "seed,es,sgd,adam,adamw\n";
    int es_wins_sgd = 0, es_wins_adam = 0, es_wins_adamw = 0;
    for (uint32_t seed = 0; seed < a.seeds; ++seed) {
        EggCarton f(a.dim, a.omega, a.amplitude, a.quad, seed);
        Rng start_rng(seed + 1000);
        std::vector<float> x0(a.dim);
        for (float& v : x0) v = float(start_rng.uniform());

        SearchSettings ss = a.es;
        ss.seed = seed;
        Rng rng(seed);
        std::vector<float> x = x0;
        double best = -f(x); // one bootstrap eval
        for (uint32_t b = 0; b < nblocks; ++b) {
            const uint32_t lo = b * a.block_size;
            const uint32_t hi = std::min(a.dim, lo + a.block_size);
            std::vector<float> sub(x.begin() + lo, x.begin() + hi);
            auto fit = [&](const std::vector<float>& s) {
                std::copy(s.begin(), s.end(), x.begin() + lo);
                return -f(x);
            };
            auto [bs, bf] = evolve(sub, best, fit, ss, rng);
            std::copy(bs.begin(), bs.end(), x.begin() + lo);
            best = bf;
        }
        double es_loss = -best;

        auto loss = [&](const std::vector<float>& x) { return f(x); };
        double g_loss[3];
        const OptKind kinds[3] = {OptKind::Sgd, OptKind::Adam, OptKind::AdamW};
        for (int k = 0; k < 3; ++k) {
            GradientSettings gs;
            gs.optimizer = kinds[k];
            gs.steps = steps;
            gs.lr = a.lr;
            gs.seed = seed;
            gs.clamp_positive = false;
            GradientResult r = gradient_descent(x0, loss, gs);
            g_loss[k] = f(r.x);
        }
        if (es_loss < g_loss[0]) ++es_wins_sgd;
        if (es_loss < g_loss[1]) ++es_wins_adam;
        if (es_loss < g_loss[2]) ++es_wins_adamw;
        csv << seed << "," << es_loss << "," << g_loss[0] << "," << g_loss[1]
            << "," << g_loss[2] << "\n";
    }
    csv << "# es_wins sgd=" << es_wins_sgd << " adam=" << es_wins_adam
        << " adamw=" << es_wins_adamw << " of " << a.seeds << "\n";
    write_file(a.out, csv.str());
    json eff = {{"budget", a.budget}, {"seeds", a.seeds}, {"dim", a.dim},
                {"omega", a.omega},   {"amplitude", a.amplitude},
                {"quad", a.quad},     {"lr", a.lr},       {"epsilon", a.epsilon},
                {"population", a.es.population}, {"samples", a.es.samples},
                {"block_size", a.block_size},
                {"out", a.out},       {"threads", a.threads}};
    write_manifest(a.out, "compare-opt", eff, {});
    std::printf(
        "compare-opt: es wins vs sgd %d/%u, adam %d/%u, adamw %d/%u -> %s\n",
        es_wins_sgd, a.seeds, es_wins_adam, a.seeds, es_wins_adamw, a.seeds,
        a.out.c_str());
    return 0;
}

// ---- eval ---------------------------------------------------------------------

struct EvalArgs {
    std::string model, data, loss = "infonce", out;
    double tau = 0.1;
    uint32_t batch = 32, threads = 0;
};

int cmd_eval(const json& cfg, const CLI::App* app, EvalArgs& a) {
    check_keys(cfg, {"model", "data", "batch", "loss", "tau", "out", "threads"},
               "eval");
    apply(cfg, "model", app, a.model);
    apply(cfg, "data", app, a.data);
    apply(cfg, "batch", app, a.batch);
    apply(cfg, "loss", app, a.loss);
    apply(cfg, "tau", app, a.tau);
    apply(cfg, "out", app, a.out);
    apply(cfg, "threads", app, a.threads);
    if (a.model.empty() || a.data.empty())
        throw ConfigError("eval: --model and --data are required");

    LossKind kind;
    try {
        kind = loss_kind_from_string(a.loss);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    Model m = load_model(a.model);
    Dataset ds = load_dataset(a.data);
    BatchPlan plan;
    plan.batch_size = a.batch;
    double loss = fitness(m, m, ds, plan, kind, a.tau);
    double agreement = fp_agreement(m, ds);
    require_finite(loss, "loss");
    json report = {{"loss_kind", a.loss},  {"loss", loss},
                   {"tau", a.tau},         {"fp_agreement", agreement},
                   {"samples", ds.count},  {"batch_size", a.batch}};
    if (!a.out.empty()) {
        write_file(a.out, report.dump(2) + "\n");
        json eff = {{"model", a.model}, {"data", a.data}, {"batch", a.batch},
                    {"loss", a.loss},   {"tau", a.tau},   {"out", a.out},
                    {"threads", a.threads}};
        write_manifest(a.out, "eval", eff, {a.model, a.data});
    }
    std::printf("eval: %s loss %.6f, fp-agreement %.4f on %u samples\n",
                a.loss.c_str(), loss, agreement, ds.count);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantized tiny-ViT evolutionary scale search"};
    app.require_subcommand(1);

    std::string config_path;
    auto add_common = [&](CLI::App* c, uint32_t& threads) {
        c->add_option("--config", config_path, "JSON config file");
        c->add_option("--threads", threads, "worker cap");
    };

    SynthArgs sa;
    CLI::App* synth = app.add_subcommand("synth-data", "generate a synthetic dataset");
    add_common(synth, sa.threads);
    synth->add_option("--out", sa.out);
    synth->add_option("--count", sa.count);
    synth->add_option("--tokens", sa.tokens);
    synth->add_option("--dim", sa.dim);
    synth->add_option("--classes", sa.classes);
    synth->add_option("--seed", sa.seed);
    synth->add_option("--separation", sa.separation);

    InitArgs ia;
    CLI::App* init = app.add_subcommand("init-model", "initialize a tiny ViT model");
    add_common(init, ia.threads);
    init->add_option("--out", ia.out);
    init->add_option("--calib", ia.calib);
    init->add_option("--dim", ia.vc.embed_dim);
    init->add_option("--heads", ia.vc.heads);
    init->add_option("--blocks", ia.vc.blocks);
    init->add_option("--tokens", ia.vc.tokens);
    init->add_option("--classes", ia.vc.classes);
    init->add_option("--mlp-ratio", ia.vc.mlp_ratio);
    init->add_option("--weight-bits", ia.vc.weight_bits);
    init->add_option("--activation-bits", ia.vc.activation_bits);
    init->add_option("--seed", ia.seed);

    QuantArgs qa;
    CLI::App* quant = app.add_subcommand("quantize", "re-initialize quantization scales");
    add_common(quant, qa.threads);
    quant->add_option("--model", qa.model);
    quant->add_option("--calib", qa.calib);
    quant->add_option("--bits", qa.bits);
    quant->add_option("--act-bits", qa.act_bits);
    quant->add_option("--scheme", qa.scheme);
    quant->add_option("--pct", qa.pct);
    quant->add_option("--out", qa.out);
    quant->add_option("--report", qa.report);

    SearchArgs ra;
    CLI::App* search = app.add_subcommand("search", "block-wise evolutionary scale search");
    add_common(search, ra.threads);
    search->add_option("--model", ra.model);
    search->add_option("--out", ra.out);
    search->add_option("--calib", ra.calib);
    search->add_option("--heldout", ra.heldout);
    search->add_option("--trace", ra.trace);
    search->add_option("--summary", ra.summary);
    search->add_option("--passes", ra.s.passes);
    search->add_option("--population", ra.s.population);
    search->add_option("--cycles", ra.s.cycles);
    search->add_option("--samples", ra.s.samples);
    search->add_option("--epsilon", ra.s.epsilon);
    search->add_option("--seed", ra.s.seed);
    search->add_option("--loss", ra.loss);
    search->add_option("--tau", ra.tau);
    search->add_option("--batch", ra.batch);
    search->add_option("--sweep-passes", ra.sweep_passes)->delimiter(',');
    search->add_option("--sweep-calib", ra.sweep_calib)->delimiter(',');

    LandArgs la;
    CLI::App* land = app.add_subcommand("landscape", "probe a 2-D loss landscape grid");
    add_common(land, la.threads);
    land->add_option("--model", la.model);
    land->add_option("--data", la.data);
    land->add_option("--block", la.spec.block_index);
    land->add_option("--steps", la.spec.grid_steps);
    land->add_option("--range", la.spec.half_range);
    land->add_option("--dir-a", la.spec.direction_a);
    land->add_option("--dir-b", la.spec.direction_b);
    land->add_option("--loss", la.loss);
    land->add_option("--tau", la.spec.tau);
    land->add_option("--batch", la.batch);
    land->add_option("--out-csv", la.out_csv);
    land->add_option("--out-pgm", la.out_pgm);

    CompArgs ca;
    CLI::App* comp = app.add_subcommand(
        "compare-opt", "ES vs gradient baselines on egg-carton surfaces");
    add_common(comp, ca.threads);
    comp->add_option("--budget", ca.budget);
    comp->add_option("--seeds", ca.seeds);
    comp->add_option("--dim", ca.dim);
    comp->add_option("--omega", ca.omega);
    comp->add_option("--amplitude", ca.amplitude);
    comp->add_option("--quad", ca.quad);
    comp->add_option("--lr", ca.lr);
    comp->add_option("--epsilon", ca.epsilon);
    comp->add_option("--population", ca.es.population);
    comp->add_option("--samples", ca.es.samples);
    comp->add_option("--block-size", ca.block_size);
    comp->add_option("--out", ca.out);

    EvalArgs ea;
    CLI::App* ev = app.add_subcommand("eval", "loss and agreement metrics for a model");
    add_common(ev, ea.threads);
    ev->add_option("--model", ea.model);
    ev->add_option("--data", ea.data);
    ev->add_option("--batch", ea.batch);
    ev->add_option("--loss", ea.loss);
    ev->add_option("--tau", ea.tau);
    ev->add_option("--out", ea.out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        json cfg = command_config(config_path, sub->get_name());
        if (sub == synth) return cmd_synth_data(cfg, sub, sa);
        if (sub == init) return cmd_init_model(cfg, sub, ia);
        if (sub == quant) return cmd_quantize(cfg, sub, qa);
        if (sub == search) return cmd_search(cfg, sub, ra);
        if (sub == land) return cmd_landscape(cfg, sub, la);
        if (sub == comp) return cmd_compare_opt(cfg, sub, ca);
        if (sub == ev) return cmd_eval(cfg, sub, ea);
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    }
}
