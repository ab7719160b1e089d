#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lcmae/analysis.hpp"
#include "lcmae/checkpoint.hpp"
#include "lcmae/config.hpp"
#include "lcmae/dataset.hpp"
#include "lcmae/errors.hpp"
#include "lcmae/grad_suite.hpp"
#include "lcmae/trainer.hpp"

namespace fs = std::filesystem;
using namespace lcmae;

namespace {

constexpr double kGradTolerance = 1e-4;

struct DataArgs {
    std::string path;
    std::uint64_t synthetic_seed = 0;
};

void add_data_options(CLI::App* cmd, DataArgs& args) {
    cmd->add_option("--data", args.path, "LCIMG1 dataset; the default synthetic set when omitted");
    cmd->add_option("--synthetic-seed", args.synthetic_seed, "Seed of the default synthetic set");
}

Dataset load_data(const DataArgs& args) {
    if (!args.path.empty()) return load_dataset(args.path);
    return generate_synthetic(SyntheticSpec{}, args.synthetic_seed);
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// ---- pretrain ----

struct PretrainArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string out = "run";
    std::string resume;
    DataArgs data;
    bool quiet = false;
};

int run_pretrain(const PretrainArgs& a) {
    TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config(a.config);
    for (const auto& o : a.overrides) apply_override(cfg, o);
    cfg.validate();
    const Dataset data = load_data(a.data);

    const fs::path dir(a.out);
    fs::create_directories(dir);
    open_out(dir / "config.txt") << dump_config(cfg);
    auto log = open_out(dir / "log.csv");
    log << "step,lr,l_mim,l_gg,total\n";

    PretrainHooks hooks;
    hooks.on_step = [&](const LogRecord& r) {
        if (cfg.log_every == 0 || r.step % cfg.log_every != 0) return;
        log << r.step << ',' << fmt(r.lr) << ',' << fmt(r.l_mim) << ',' << fmt(r.l_gg) << ',' << fmt(r.total)
            << '\n';
    };
    hooks.on_epoch = [&](std::size_t epoch, double mean_total) {
        if (!a.quiet) std::printf("epoch %zu  mean total %.6f\n", epoch + 1, mean_total);
        std::fflush(stdout);
        log.flush();
        return true;
    };
    hooks.on_checkpoint = [&](const ModelState& st, const AdamW& opt, std::size_t epoch) {
        ModelState copy = st;
        save_checkpoint((dir / ("epoch_" + std::to_string(epoch) + ".ckpt")).string(), cfg, epoch, copy, opt);
    };

    PretrainResult res = [&] {
        if (a.resume.empty()) return pretrain(cfg, data, hooks);
        Checkpoint ck = load_checkpoint(a.resume);
        return pretrain_from(cfg, data, std::move(ck.state), std::move(ck.optimizer), ck.epoch, hooks);
    }();
    save_checkpoint((dir / "final.ckpt").string(), cfg, res.epochs_run, res.state, res.optimizer);
    if (!a.quiet) std::printf("wrote %s\n", (dir / "final.ckpt").c_str());
    return 0;
}

// ---- probe ----

struct ProbeArgs {
    std::string checkpoint;
    std::vector<std::string> overrides;
    DataArgs data;
};

int run_probe(const ProbeArgs& a) {
    Checkpoint ck = load_checkpoint(a.checkpoint);
    TrainConfig cfg = ck.config;
    for (const auto& o : a.overrides) apply_override(cfg, o);
    const Dataset data = load_data(a.data);
    const ProbeResult r = linear_probe(ck.state.online, data, cfg.probe);
    std::printf("train_acc,test_acc,n_train,n_test\n%.6f,%.6f,%zu,%zu\n", r.train_accuracy, r.test_accuracy,
                r.n_train, r.n_test);
    return 0;
}

// ---- analyze-attn ----

struct AttnArgs {
    std::string checkpoint;
    std::string query = "0";
    std::size_t image = 0;
    std::optional<std::size_t> layer;
    std::string out = "attn";
    DataArgs data;
};

std::size_t resolve_query(const std::string& spec, std::size_t n_tokens) {
    const std::string prefix = "random:";
    if (spec.rfind(prefix, 0) == 0) {
        std::uint64_t seed = 0;
        try {
            seed = std::stoull(spec.substr(prefix.size()));
        } catch (const std::exception&) {
            throw CLI::ValidationError("--query", "bad seed in '" + spec + "'");
        }
        Rng rng(seed);
        return static_cast<std::size_t>(rng.below(n_tokens));
    }
    try {
        std::size_t pos = 0;
        const auto v = std::stoull(spec, &pos);
        if (pos != spec.size()) throw std::invalid_argument(spec);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw CLI::ValidationError("--query", "expected N or random:SEED, got '" + spec + "'");
    }
}

int run_attn(const AttnArgs& a) {
    Checkpoint ck = load_checkpoint(a.checkpoint);
    const Encoder& enc = ck.state.online;
    const Dataset data = load_data(a.data);
    if (a.image >= data.size()) {
        throw IndexError("image index " + std::to_string(a.image) + " out of range for " +
                         std::to_string(data.size()) + " images");
    }
    const std::size_t query = resolve_query(a.query, enc.config.n_tokens());
    const std::size_t layer = a.layer.value_or(enc.config.depth - 1);
    const AttentionMapResult r = attention_maps(enc, data.images[a.image], query, layer);

    auto csv = open_out(a.out + ".csv");
    csv << "head,row,col,weight\n";
    for (std::size_t h = 0; h < r.maps.size(); ++h) {
        for (std::size_t y = 0; y < r.grid_h; ++y) {
            for (std::size_t x = 0; x < r.grid_w; ++x) {
                csv << h << ',' << y << ',' << x << ',' << fmt(r.maps[h][y * r.grid_w + x]) << '\n';
            }
        }
    }

    // Heads side by side, one pixel column between them, each scaled to its
    // own maximum.
    const std::size_t heads = r.maps.size();
    const std::size_t width = heads * r.grid_w + (heads ? heads - 1 : 0);
    auto pgm = open_out(a.out + ".pgm");
    pgm << "P2\n" << width << ' ' << r.grid_h << "\n255\n";
    for (std::size_t y = 0; y < r.grid_h; ++y) {
        for (std::size_t h = 0; h < heads; ++h) {
            double mx = 0.0;
            for (double v : r.maps[h]) mx = std::max(mx, v);
            if (h) pgm << "0 ";
            for (std::size_t x = 0; x < r.grid_w; ++x) {
                const double v = mx > 0.0 ? r.maps[h][y * r.grid_w + x] / mx : 0.0;
                pgm << static_cast<int>(std::lround(255.0 * v)) << ' ';
            }
        }
        pgm << '\n';
    }
    std::printf("query %zu (row %zu, col %zu), layer %zu -> %s.pgm, %s.csv\n", query, query / r.grid_w,
                query % r.grid_w, layer, a.out.c_str(), a.out.c_str());
    return 0;
}

// ---- analyze-spectrum ----

struct SpectrumArgs {
    std::string a;
    std::string b;
    std::optional<std::size_t> layer;
    std::size_t count = 1024;
    std::string out = "spectrum.csv";
    DataArgs data;
};

int run_spectrum(const SpectrumArgs& s) {
    Checkpoint ca = load_checkpoint(s.a);
    Checkpoint cb = load_checkpoint(s.b);
    const Dataset data = load_data(s.data);
    const std::size_t n = std::min(s.count, data.size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const std::size_t layer = s.layer.value_or(ca.state.online.config.depth);
    const auto curve = sv_gap_curve(ca.state.online, cb.state.online, data.pointers(idx), layer);
    auto out = open_out(s.out);
    out << "rank,log_gap\n";
    double total = 0.0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        out << i << ',' << fmt(curve[i]) << '\n';
        total += curve[i];
    }
    std::printf("layer %zu: %zu ranks, mean log gap %.6f -> %s\n", layer, curve.size(),
                curve.empty() ? 0.0 : total / static_cast<double>(curve.size()), s.out.c_str());
    return 0;
}

// ---- gradcheck ----

int run_gradcheck(std::uint64_t seed, bool ops_only) {
    auto results = op_grad_checks(seed);
    if (!ops_only) {
        auto obj = objective_grad_checks(seed);
        results.insert(results.end(), obj.begin(), obj.end());
    }
    double worst = 0.0;
    std::printf("%-34s %12s  %s\n", "case", "rel_error", "worst at");
    for (const auto& r : results) {
        std::printf("%-34s %12.3e  %s%s\n", r.name.c_str(), r.max_rel_error, r.worst_input.c_str(),
                    r.max_rel_error > kGradTolerance ? "  FAIL" : "");
        worst = std::max(worst, r.max_rel_error);
    }
    std::printf("worst relative error %.3e (tolerance %.0e)\n", worst, kGradTolerance);
    return worst > kGradTolerance ? 1 : 0;
}

// ---- gen-data ----

struct GenArgs {
    std::string out = "synthetic.lcimg";
    SyntheticSpec spec;
    std::uint64_t seed = 0;
};

int run_gen(const GenArgs& g) {
    const Dataset d = generate_synthetic(g.spec, g.seed);
    save_dataset(d, g.out);
    std::printf("wrote %zu images (%zux%zu, %zu classes) to %s\n", d.size(), g.spec.size, g.spec.size,
                g.spec.classes, g.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked-autoencoder pre-training with global guidance"};
    app.require_subcommand(1);

    PretrainArgs pre;
    auto* c_pre = app.add_subcommand("pretrain", "Pre-train a model; writes log.csv, config.txt and checkpoints");
    c_pre->add_option("--config", pre.config, "key = value config file")->check(CLI::ExistingFile);
    c_pre->add_option("--override", pre.overrides, "key=value, repeatable")->take_all();
    c_pre->add_option("--out", pre.out, "Output directory");
    c_pre->add_option("--resume", pre.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
    c_pre->add_flag("--quiet", pre.quiet);
    add_data_options(c_pre, pre.data);

    ProbeArgs probe;
    auto* c_probe = app.add_subcommand("probe", "Linear probe on a checkpoint's frozen encoder");
    c_probe->add_option("--checkpoint", probe.checkpoint)->required()->check(CLI::ExistingFile);
    c_probe->add_option("--override", probe.overrides, "key=value, e.g. probe.epochs=50")->take_all();
    add_data_options(c_probe, probe.data);

    AttnArgs attn;
    auto* c_attn = app.add_subcommand("analyze-attn", "Attention maps of one query patch (PGM + CSV)");
    c_attn->add_option("--checkpoint", attn.checkpoint)->required()->check(CLI::ExistingFile);
    c_attn->add_option("--query", attn.query, "Patch index N or random:SEED");
    c_attn->add_option("--image", attn.image, "Dataset image index");
    c_attn->add_option("--layer", attn.layer, "Block index, default last");
    c_attn->add_option("--out", attn.out, "Output prefix");
    add_data_options(c_attn, attn.data);

    SpectrumArgs spec;
    auto* c_spec = app.add_subcommand("analyze-spectrum", "Log singular-value gap curve of two checkpoints");
    c_spec->add_option("--a", spec.a, "Checkpoint A (e.g. guided)")->required()->check(CLI::ExistingFile);
    c_spec->add_option("--b", spec.b, "Checkpoint B (e.g. baseline)")->required()->check(CLI::ExistingFile);
    c_spec->add_option("--layer", spec.layer, "Feature layer in [0, depth], default depth");
    c_spec->add_option("--count", spec.count, "Number of images");
    c_spec->add_option("--out", spec.out, "CSV path");
    add_data_options(c_spec, spec.data);

    std::uint64_t gc_seed = 1;
    bool gc_ops_only = false;
    auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference oracle suite; exit 1 if any error > 1e-4");
    c_gc->add_option("--seed", gc_seed);
    c_gc->add_flag("--ops-only", gc_ops_only, "Skip the full-objective cases");

    GenArgs gen;
    auto* c_gen = app.add_subcommand("gen-data", "Write the synthetic shape dataset");
    c_gen->add_option("--out", gen.out);
    c_gen->add_option("--count", gen.spec.count);
    c_gen->add_option("--size", gen.spec.size);
    c_gen->add_option("--classes", gen.spec.classes);
    c_gen->add_option("--seed", gen.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*c_pre) return run_pretrain(pre);
        if (*c_probe) return run_probe(probe);
        if (*c_attn) return run_attn(attn);
        if (*c_spec) return run_spectrum(spec);
        if (*c_gc) return run_gradcheck(gc_seed, gc_ops_only);
        if (*c_gen) return run_gen(gen);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        // Bad keys or values in --override / --config are usage errors.
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
