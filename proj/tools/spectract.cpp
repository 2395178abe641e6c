// spectract: command-line front end for simulation, staged training,
// reconstruction, evaluation and figure output. Every subcommand writes a
// manifest into its output directory; `rerun` replays one.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spectract/errors.hpp"
#include "spectract/io.hpp"
#include "spectract/pipeline.hpp"

using namespace spectract;

namespace {

AcquisitionProfile load_profile(const fs::path& slices_dir) {
    return read_json(slices_dir / "profile.json").get<AcquisitionProfile>();
}

std::vector<Slice> load_data(const fs::path& dir, const AcquisitionProfile& expected) {
    if (nlohmann::json(load_profile(dir)) != nlohmann::json(expected))
        throw ConfigError(dir.string() + " was simulated with a different acquisition profile");
    return load_slices(dir);
}

std::vector<std::string> list_outputs(const fs::path& dir) {
    std::vector<std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && !e.path().filename().string().starts_with("manifest"))
            out.push_back(fs::relative(e.path(), dir).generic_string());
    std::sort(out.begin(), out.end());
    return out;
}

std::string join(const std::vector<std::string>& v, const char* sep) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
    return s;
}

std::vector<Variant> parse_variants(const std::vector<std::string>& names) {
    std::vector<Variant> out;
    for (const auto& n : names) out.push_back(parse_variant(n));
    return out;
}

std::string fixed(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

nlohmann::json summary(const MetricReport& r) {
    nlohmann::json bins = nlohmann::json::array();
    for (std::size_t b = 0; b < r.bins(); ++b)
        bins.push_back({{"median_psnr_db", r.median_psnr(b)}, {"median_ssim", r.median_ssim(b)},
                        {"mean_psnr_db", r.mean_psnr(b)}, {"mean_ssim", r.mean_ssim(b)}});
    return {{"method", r.method}, {"median_psnr_db", r.median_psnr()}, {"median_ssim", r.median_ssim()}, {"bins", bins}};
}

// Per-bin median PSNR and SSIM charts of a set of reports.
void write_bin_charts(const fs::path& out, const std::string& title, const std::vector<MetricReport>& reports) {
    std::vector<PlotSeries> psnr_series, ssim_series;
    for (const auto& r : reports) {
        PlotSeries p{r.method, {}, {}}, s{r.method, {}, {}};
        for (std::size_t b = 0; b < r.bins(); ++b) {
            p.x.push_back(static_cast<double>(b + 1));
            s.x.push_back(static_cast<double>(b + 1));
            p.y.push_back(r.median_psnr(b));
            s.y.push_back(r.median_ssim(b));
        }
        psnr_series.push_back(p);
        ssim_series.push_back(s);
    }
    write_text(out / "psnr_by_bin.svg", line_chart_svg(title + ": median PSNR", "energy bin", "PSNR (dB)", psnr_series));
    write_text(out / "ssim_by_bin.svg", line_chart_svg(title + ": median SSIM", "energy bin", "SSIM", ssim_series));
}

void write_reports(const fs::path& out, const std::vector<MetricReport>& reports) {
    nlohmann::json j = nlohmann::json::array();
    std::string csv;
    for (const auto& r : reports) {
        j.push_back(summary(r));
        const auto rows = r.to_csv();
        csv += csv.empty() ? rows : rows.substr(rows.find('\n') + 1);
    }
    write_json(out / "metrics.json", j);
    write_text(out / "samples.csv", csv);
    write_text(out / "table.txt", format_metric_table(reports));
}

// ---------------------------------------------------------------------------
// Model directories built up stage by stage.

enum class StageKind { Codec, Diffusion, Joint };

const char* stage_name(StageKind k) {
    switch (k) {
        case StageKind::Codec: return "codec";
        case StageKind::Diffusion: return "diffusion";
        case StageKind::Joint: return "joint";
    }
    return "?";
}

struct StageArgs {
    fs::path train;
    fs::path models;
    std::string domain = "projection";
    std::string variant = "FSP";
    std::string recipe;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
};

TrainingRecipe stage_recipe(const StageArgs& a, bool creating) {
    TrainingRecipe r = TrainingRecipe::toy();
    const fs::path stored = a.models / "recipe.json";
    if (!a.recipe.empty()) r = read_json(a.recipe).get<TrainingRecipe>();
    else if (fs::exists(stored)) r = read_json(stored).get<TrainingRecipe>();
    if (a.seed) {
        if (!creating && r.seed != *a.seed)
            throw ConfigError("--seed differs from the seed the model directory was created with");
        r.seed = *a.seed;
    }
    return r;
}

// Returns the manifest file name: one per domain and stage, so a model
// directory keeps the whole chain.
std::string run_stage(StageKind kind, const StageArgs& a, RunManifest& manifest) {
    const bool creating = !fs::exists(a.models / "models.json");
    if (creating && kind != StageKind::Codec)
        throw ConfigError(a.models.string() + " has no models yet; run pretrain-codec first");
    TrainingRecipe recipe = stage_recipe(a, creating);
    if (a.epochs) {
        auto& cfg = kind == StageKind::Codec ? recipe.codec : kind == StageKind::Diffusion ? recipe.diffusion : recipe.joint;
        cfg.epochs = *a.epochs;
    }
    recipe.validate();
    manifest.seeds.push_back(recipe.seed);
    if (!a.recipe.empty()) manifest.config_paths.push_back(a.recipe);

    ModelSet m;
    if (creating) {
        m.profile = load_profile(a.train);
    } else {
        m = load_models(a.models);
    }
    const auto train = load_data(a.train, m.profile);
    if (creating) m.norm = Normalization::fit(train, m.profile);

    const Domain domain = parse_domain(a.domain);
    const Variant v = parse_variant(a.variant);
    std::string key = "projection";
    DomainTask task;
    if (domain == Domain::Projection) {
        task = projection_task(train, m.norm, recipe);
    } else {
        if (v == Variant::P) throw ConfigError("variant P has no image-domain model");
        if (uses_projection_stage(v) && !m.projection)
            throw ConfigError("variant " + to_string(v) + " needs the projection-domain model; train it first");
        key = "image_" + to_string(v);
        task = image_task(train, m.profile, m.norm, recipe, v, m.projection);
    }

    std::string previous;
    if (m.logs.is_object() && m.logs.contains("stages") && m.logs["stages"].contains(key))
        previous = m.logs["stages"][key].get<std::string>();
    const auto require_previous = [&](const char* stage) {
        if (previous != stage)
            throw ConfigError(key + " is at stage '" + (previous.empty() ? "none" : previous) + "', expected '" +
                              stage + "'");
    };
    auto find_model = [&]() -> DomainModel& {
        if (domain == Domain::Projection) return *m.projection;
        return m.image.at(v);
    };

    TrainingLog log;
    switch (kind) {
        case StageKind::Codec: {
            Codec codec = pretrain_codec(task.data, task.codec, stage_config(recipe.codec, task, 1), &log);
            // Placeholder denoiser until train-diffusion replaces it.
            const NoiseSchedule schedule = make_schedule(recipe.steps);
            DomainModel dm{std::move(codec), Denoiser::create(recipe.denoiser.for_schedule(schedule), derive_seed(task.seed, {2})),
                           schedule, task.data.weights};
            if (domain == Domain::Projection) m.projection = std::move(dm);
            else m.image.insert_or_assign(v, std::move(dm));
            break;
        }
        case StageKind::Diffusion: {
            require_previous("codec");
            DomainModel& dm = find_model();
            dm.schedule = make_schedule(recipe.steps);
            dm.denoiser = train_diffusion(task.data, dm.codec, dm.schedule, recipe.denoiser,
                                          stage_config(recipe.diffusion, task, 2), &log);
            break;
        }
        case StageKind::Joint: {
            require_previous("diffusion");
            DomainModel& dm = find_model();
            if (recipe.joint.epochs > 0) {
                auto jm = joint_finetune(dm.codec, dm.denoiser, task.data, dm.schedule,
                                         stage_config(recipe.joint, task, 3), &log);
                dm.codec = std::move(jm.codec);
                dm.denoiser = std::move(jm.denoiser);
            }
            break;
        }
    }
    m.logs["stages"][key] = stage_name(kind);
    m.logs[key][stage_name(kind)] = log.to_json();
    save_models(a.models, m);
    write_json(a.models / "recipe.json", recipe);
    if (!log.loss.empty())
        std::cout << key << " " << stage_name(kind) << ": loss " << log.loss.front() << " -> " << log.loss.back()
                  << " over " << log.loss.size() - 1 << " epochs\n";
    return "manifest_" + key + "_" + stage_name(kind) + ".json";
}

// ---------------------------------------------------------------------------

struct Cli {
    CLI::App app{"Dual-domain spectral CT reconstruction with latent diffusion", "spectract"};

    // simulate
    fs::path sim_out;
    std::size_t sim_size = 64, sim_count = 1, sim_first = 0, sim_views = 96, sim_detectors = 80;
    double sim_photons = kPhotonsUltraLow;
    std::string sim_bins = "paper6", sim_window = "hann";
    std::uint64_t sim_seed = 1;

    // staged training
    StageArgs stage[3];
    std::uint64_t stage_seed[3] = {0, 0, 0};
    std::size_t stage_epochs[3] = {0, 0, 0};

    // shared evaluation flags
    fs::path models, input, out, train, test, validation, manifest_path;
    std::uint64_t seed = 7;
    std::vector<std::string> variants{"FSP"};
    std::vector<std::string> baselines{"fbp", "tv"};
    std::vector<double> tv_lambdas{3, 10, 30, 100, 300};
    int tv_iterations = 100;
    std::string slices = "all";
    std::string variant = "FSP";
    std::vector<std::size_t> sweep_values{1, 2, 4, 8, 16, 32};
    std::string recipe;
    std::size_t render_slice = 0, render_bin = 0;
    double render_tv_lambda = 100.0;
    std::string window = "0,1", residual_window = "0,0.2";

    Cli();
};

Cli::Cli() {
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    auto* sim = app.add_subcommand("simulate", "Simulate noisy and clean sinogram stacks of random phantoms");
    sim->add_option("--out", sim_out, "Output directory")->required();
    sim->add_option("--size", sim_size, "Image side in pixels (field of view 192 mm)")->capture_default_str();
    sim->add_option("--photons", sim_photons, "Incident photons per detector over the whole spectrum")->capture_default_str();
    sim->add_option("--bins", sim_bins, "'paper6' or comma-separated keV edges")->capture_default_str();
    sim->add_option("--count", sim_count, "Number of slices")->capture_default_str();
    sim->add_option("--first", sim_first, "Index of the first slice")->capture_default_str();
    sim->add_option("--seed", sim_seed, "Root seed")->capture_default_str();
    sim->add_option("--views", sim_views, "Projection views over 360 degrees")->capture_default_str();
    sim->add_option("--detectors", sim_detectors, "Detector elements")->capture_default_str();
    sim->add_option("--window", sim_window, "FBP filter window used downstream: hann or ramp")->capture_default_str();

    const char* names[3] = {"pretrain-codec", "train-diffusion", "finetune"};
    const char* help[3] = {"Pretrain a domain's prior encoder and decoder",
                           "Train a domain's latent denoiser with the codec frozen",
                           "Jointly fine-tune a domain's codec and denoiser"};
    for (int k = 0; k < 3; ++k) {
        auto* s = app.add_subcommand(names[k], help[k]);
        s->add_option("--train", stage[k].train, "Training slices from simulate")->required();
        s->add_option("--models", stage[k].models, "Model directory (created by pretrain-codec)")->required();
        s->add_option("--domain", stage[k].domain, "projection or image")->capture_default_str();
        s->add_option("--variant", stage[k].variant, "Image-domain variant: I, IP or FSP")->capture_default_str();
        s->add_option("--recipe", stage[k].recipe, "Training recipe JSON (default: stored recipe or toy)");
        s->add_option("--seed", stage_seed[k], "Recipe seed (only when creating the model directory)");
        s->add_option("--epochs", stage_epochs[k], "Override this stage's epoch count");
    }

    auto* rec = app.add_subcommand("reconstruct", "Reconstruct every bin of noisy slices");
    rec->add_option("--models", models, "Model directory")->required();
    rec->add_option("--input", input, "Slices from simulate")->required();
    rec->add_option("--out", out, "Output directory")->required();
    rec->add_option("--variant", variant, "I, P, IP or FSP")->capture_default_str();
    rec->add_option("--slices", slices, "'all' or comma-separated slice indices")->capture_default_str();
    rec->add_option("--seed", seed, "Sampling seed")->capture_default_str();

    auto* fuse = app.add_subcommand("fuse", "Fuse the bins of each slice into a full-spectrum sinogram and its FBP");
    fuse->add_option("--input", input, "Slices from simulate")->required();
    fuse->add_option("--out", out, "Output directory")->required();

    auto* ev = app.add_subcommand("evaluate", "PSNR and SSIM of variants and baselines on held-out slices");
    ev->add_option("--models", models, "Model directory (needed for learned variants)");
    ev->add_option("--test", test, "Held-out slices")->required();
    ev->add_option("--validation", validation, "Slices for choosing the TV weight per bin");
    ev->add_option("--out", out, "Output directory")->required();
    ev->add_option("--variants", variants, "Learned variants to score")->delimiter(',')->capture_default_str();
    ev->add_option("--baselines", baselines, "Subset of fbp,tv")->delimiter(',')->capture_default_str();
    ev->add_option("--tv-lambdas", tv_lambdas, "TV weights (tuned per bin with --validation, else the first)")
        ->delimiter(',')
        ->capture_default_str();
    ev->add_option("--tv-iterations", tv_iterations, "TV iterations")->capture_default_str();
    ev->add_option("--seed", seed, "Sampling seed")->capture_default_str();

    auto* ab = app.add_subcommand("ablate", "Compare the I, P, IP and FSP variants");
    ab->add_option("--models", models, "Model directory with every variant")->required();
    ab->add_option("--test", test, "Held-out slices")->required();
    ab->add_option("--out", out, "Output directory")->required();
    ab->add_option("--seed", seed, "Sampling seed")->capture_default_str();

    auto* sw = app.add_subcommand("sweep-t", "Retrain the denoisers for several step counts and score the full variant");
    sw->add_option("--models", models, "Model directory with the projection and FSP models")->required();
    sw->add_option("--train", train, "Training slices")->required();
    sw->add_option("--test", test, "Held-out slices")->required();
    sw->add_option("--out", out, "Output directory")->required();
    sw->add_option("--values", sweep_values, "Step counts")->delimiter(',')->capture_default_str();
    sw->add_option("--recipe", recipe, "Training recipe JSON (default: the model directory's)");
    sw->add_option("--seed", seed, "Sampling seed")->capture_default_str();

    auto* rd = app.add_subcommand("render", "Write windowed PNG panels and residual maps for one slice and bin");
    rd->add_option("--models", models, "Model directory (learned panels are skipped without it)");
    rd->add_option("--input", input, "Slices from simulate")->required();
    rd->add_option("--out", out, "Output directory")->required();
    rd->add_option("--slice", render_slice, "Slice index")->capture_default_str();
    rd->add_option("--bin", render_bin, "Energy bin index")->capture_default_str();
    rd->add_option("--window", window, "Display window lo,hi")->capture_default_str();
    rd->add_option("--residual-window", residual_window, "Residual display window lo,hi")->capture_default_str();
    rd->add_option("--tv-lambda", render_tv_lambda, "TV weight of the TV panel")->capture_default_str();
    rd->add_option("--seed", seed, "Sampling seed")->capture_default_str();

    auto* rr = app.add_subcommand("rerun", "Replay the command recorded in a manifest");
    rr->add_option("--manifest", manifest_path, "manifest.json of an earlier run")->required()->check(CLI::ExistingFile);
    rr->add_option("--out", out, "Write to this directory instead of the recorded one");
}

// Output directory flag of each subcommand.
std::string out_flag(const std::string& command) {
    if (command == "pretrain-codec" || command == "train-diffusion" || command == "finetune") return "--models";
    return "--out";
}

std::vector<std::size_t> slice_indices(const std::string& spec, std::size_t count) {
    std::vector<std::size_t> idx;
    if (spec == "all") {
        for (std::size_t i = 0; i < count; ++i) idx.push_back(i);
        return idx;
    }
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t pos = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != item.size() || item.empty()) throw ConfigError("bad slice index '" + item + "'");
        if (v >= count) throw DimensionError("slice " + item + " out of range (" + std::to_string(count) + " slices)");
        idx.push_back(v);
    }
    return idx;
}

int dispatch(const std::vector<std::string>& args);

int execute(Cli& c, CLI::App* sub, const std::vector<std::string>& args) {
    const std::string command = sub->get_name();
    if (command == "rerun") {
        const auto recorded = RunManifest::from_json(read_json(c.manifest_path));
        std::vector<std::string> replay{recorded.command};
        const std::string flag = out_flag(recorded.command);
        for (std::size_t i = 0; i < recorded.arguments.size(); ++i) {
            replay.push_back(recorded.arguments[i]);
            if (!c.out.empty() && recorded.arguments[i] == flag && i + 1 < recorded.arguments.size()) {
                replay.push_back(c.out.string());
                ++i;
            }
        }
        std::cout << "replaying: " << join(replay, " ") << "\n";
        return dispatch(replay);
    }

    RunManifest manifest;
    manifest.command = command;
    manifest.arguments.assign(args.begin() + 1, args.end());
    manifest.git_describe = build_describe();
    manifest.started = utc_timestamp();
    fs::path out_dir = c.out;
    std::string manifest_name = "manifest.json";

    if (command == "simulate") {
        auto p = AcquisitionProfile::toy(c.sim_size);
        p.photons = c.sim_photons;
        p.bins = EnergyBinSet::parse(c.sim_bins);
        p.geometry.n_views = c.sim_views;
        p.geometry.n_detectors = c.sim_detectors;
        if (c.sim_window != "hann" && c.sim_window != "ramp") throw ConfigError("--window must be hann or ramp");
        p.window = c.sim_window == "ramp" ? RampWindow::Ramp : RampWindow::Hann;
        p.validate();
        const auto slices = simulate_slices(p, c.sim_seed, c.sim_first, c.sim_count);
        save_slices(c.sim_out, slices, c.sim_seed);
        write_json(c.sim_out / "profile.json", p);
        manifest.seeds = {c.sim_seed};
        out_dir = c.sim_out;
        std::cout << "simulated " << slices.size() << " slices of " << p.bins.size() << " bins into " << c.sim_out
                  << "\n";
    } else if (command == "pretrain-codec" || command == "train-diffusion" || command == "finetune") {
        const int k = command == "pretrain-codec" ? 0 : command == "train-diffusion" ? 1 : 2;
        StageArgs a = c.stage[k];
        if (sub->count("--seed")) a.seed = c.stage_seed[k];
        if (sub->count("--epochs")) a.epochs = c.stage_epochs[k];
        manifest_name = run_stage(static_cast<StageKind>(k), a, manifest);
        out_dir = a.models;
    } else if (command == "reconstruct") {
        const ModelSet m = load_models(c.models);
        const auto bundle = m.bundle(parse_variant(c.variant));
        const auto data = load_data(c.input, m.profile);
        manifest.seeds = {c.seed};
        for (std::size_t i : slice_indices(c.slices, data.size())) {
            const auto stack = reconstruct_full(data[i].noisy, bundle, derive_seed(c.seed, {i}));
            const std::vector<std::string> axes{"bin", "row", "col"};
            auto save = [&](const std::string& name, const std::vector<Image>& images) {
                if (images.empty()) return;
                auto a = stack_array(images, axes, "normalized");
                a.seed = c.seed;
                a.attributes["slice"] = i;
                a.attributes["variant"] = to_string(bundle.variant);
                save_array(c.out / (name + "_" + std::to_string(i)), a);
            };
            save("final", stack.final_images);
            save("noisy_fbp", stack.noisy_fbp);
            save("projection_fbp", stack.projection_fbp);
            save("full_spectrum", {stack.full_spectrum});
            std::cout << "slice " << i << " reconstructed\n";
        }
    } else if (command == "fuse") {
        const auto profile = load_profile(c.input);
        const auto data = load_data(c.input, profile);
        for (std::size_t i = 0; i < data.size(); ++i) {
            const Image fused = fuse_full_spectrum(data[i].noisy);
            auto a = stack_array({fused}, {"channel", "view", "detector"}, "line integral");
            save_array(c.out / ("fused_" + std::to_string(i)), a);
            const Image img = fbp_reconstruct(fused, profile.grid, profile.geometry, profile.window);
            save_array(c.out / ("fused_fbp_" + std::to_string(i)), stack_array({img}, {"channel", "row", "col"}, "1/mm"));
        }
        std::cout << "fused " << data.size() << " slices\n";
    } else if (command == "evaluate") {
        std::optional<ModelSet> m;
        AcquisitionProfile profile;
        Normalization norm;
        const auto learned = parse_variants(c.variants);
        if (!c.models.empty()) {
            m = load_models(c.models);
            profile = m->profile;
            norm = m->norm;
        } else {
            if (!learned.empty() && sub->count("--variants"))
                throw ConfigError("learned variants need --models");
            profile = load_profile(c.test);
        }
        const auto test = load_data(c.test, profile);
        if (!m) norm = Normalization::fit(test, profile);
        manifest.seeds = {c.seed};
        std::vector<MetricReport> reports;
        nlohmann::json extra;
        for (const auto& b : c.baselines) {
            if (b == "fbp") {
                reports.push_back(evaluate_fbp(test, profile, norm, RampWindow::Ramp));
                reports.push_back(evaluate_fbp(test, profile, norm, RampWindow::Hann));
            } else if (b == "tv") {
                if (c.tv_lambdas.empty()) throw ConfigError("--tv-lambdas is empty");
                TvSettings tv{std::vector<double>(profile.bins.size(), c.tv_lambdas.front()), c.tv_iterations, 1e-4};
                if (!c.validation.empty()) tv = tune_tv(load_data(c.validation, profile), profile, norm, c.tv_lambdas, c.tv_iterations);
                extra["tv"] = tv;
                reports.push_back(evaluate_tv(test, profile, norm, tv));
            } else if (b != "none") {
                throw ConfigError("unknown baseline '" + b + "' (expected fbp or tv)");
            }
        }
        if (m)
            for (Variant v : learned) reports.push_back(evaluate_variant(test, m->bundle(v), c.seed));
        write_reports(c.out, reports);
        if (!extra.empty()) write_json(c.out / "baseline_settings.json", extra);
        write_bin_charts(c.out, "Held-out slices", reports);
        std::cout << format_metric_table(reports);
        for (const auto& r : reports)
            std::cout << r.method << ": median PSNR " << fixed(r.median_psnr()) << " dB, median SSIM "
                      << fixed(r.median_ssim(), 4) << "\n";
    } else if (command == "ablate") {
        const ModelSet m = load_models(c.models);
        const auto test = load_data(c.test, m.profile);
        manifest.seeds = {c.seed};
        std::map<Variant, PipelineBundle> bundles;
        for (Variant v : all_variants()) bundles.emplace(v, m.bundle(v));
        std::vector<MetricReport> reports;
        for (Variant v : all_variants()) reports.push_back(ablate(v, test, bundles, c.seed));
        write_reports(c.out, reports);
        write_bin_charts(c.out, "Ablation", reports);
        std::cout << format_metric_table(reports);
        for (const auto& r : reports)
            std::cout << r.method << ": median PSNR " << fixed(r.median_psnr()) << " dB, median SSIM "
                      << fixed(r.median_ssim(), 4) << "\n";
    } else if (command == "sweep-t") {
        const ModelSet m = load_models(c.models);
        const auto train = load_data(c.train, m.profile);
        const auto test = load_data(c.test, m.profile);
        TrainingRecipe recipe = TrainingRecipe::toy();
        if (!c.recipe.empty()) {
            recipe = read_json(c.recipe).get<TrainingRecipe>();
            manifest.config_paths.push_back(c.recipe);
        } else if (fs::exists(c.models / "recipe.json")) {
            recipe = read_json(c.models / "recipe.json").get<TrainingRecipe>();
        }
        manifest.seeds = {recipe.seed, c.seed};
        const auto points = sweep_steps(m, train, test, recipe, c.sweep_values, c.seed);
        std::string csv = "steps,median_psnr_db,median_ssim,seconds_per_slice\n";
        PlotSeries psnr_series{"FSP", {}, {}}, ssim_series{"FSP", {}, {}};
        std::vector<MetricReport> reports;
        for (const auto& p : points) {
            csv += std::to_string(p.steps) + "," + fixed(p.report.median_psnr(), 4) + "," +
                   fixed(p.report.median_ssim(), 5) + "," + fixed(p.seconds_per_slice, 3) + "\n";
            psnr_series.x.push_back(static_cast<double>(p.steps));
            psnr_series.y.push_back(p.report.median_psnr());
            ssim_series.x.push_back(static_cast<double>(p.steps));
            ssim_series.y.push_back(p.report.median_ssim());
            reports.push_back(p.report);
        }
        write_text(c.out / "sweep.csv", csv);
        write_reports(c.out, reports);
        write_text(c.out / "psnr_vs_steps.svg",
                   line_chart_svg("Median PSNR vs sampling steps", "steps T", "PSNR (dB)", {psnr_series}, true));
        write_text(c.out / "ssim_vs_steps.svg",
                   line_chart_svg("Median SSIM vs sampling steps", "steps T", "SSIM", {ssim_series}, true));
        std::cout << csv;
    } else if (command == "render") {
        const auto w = DisplayWindow::parse(c.window);
        const auto rw = DisplayWindow::parse(c.residual_window);
        std::optional<ModelSet> m;
        AcquisitionProfile profile;
        Normalization norm;
        if (!c.models.empty()) {
            m = load_models(c.models);
            profile = m->profile;
            norm = m->norm;
        } else {
            profile = load_profile(c.input);
        }
        const auto data = load_data(c.input, profile);
        if (!m) norm = Normalization::fit(data, profile);
        if (c.render_slice >= data.size()) throw DimensionError("--slice out of range");
        if (c.render_bin >= profile.bins.size()) throw DimensionError("--bin out of range");
        const auto& slice = data[c.render_slice];
        const std::size_t b = c.render_bin;
        const Image ref = reference_images(slice, profile, norm)[b];
        std::vector<std::pair<std::string, Image>> panels;
        Image fbp = fbp_reconstruct(slice.noisy.bins[b], profile.grid, profile.geometry, profile.window);
        for (double& v : fbp.data) v *= norm.image[b];
        panels.emplace_back("fbp", fbp);
        const SystemMatrix A(profile.grid, profile.geometry);
        Image tv = tv_bin(slice.noisy.bins[b], A, profile, c.render_tv_lambda, 100, 1e-4);
        for (double& v : tv.data) v *= norm.image[b];
        panels.emplace_back("tv", tv);
        manifest.seeds = {c.seed};
        if (m) {
            for (Variant v : all_variants()) {
                if (v != Variant::P && !m->image.count(v)) continue;
                if (uses_projection_stage(v) && !m->projection) continue;
                const auto stack = reconstruct_full(slice.noisy, m->bundle(v), derive_seed(c.seed, {c.render_slice}));
                panels.emplace_back(to_string(v), stack.final_images[b]);
            }
        }
        const auto figs = render_figures(c.out, ref, panels, w, rw);
        std::vector<std::string> names;
        for (const auto& [name, img] : panels) names.push_back(name + " " + fixed(psnr(img, ref, 1.0).db) + " dB");
        std::cout << "rendered " << figs.size() << " panels: " << join(names, ", ") << "\n";
    }

    manifest.finished = utc_timestamp();
    manifest.outputs = list_outputs(out_dir);
    write_json(out_dir / manifest_name, manifest.to_json());
    return 0;
}

int dispatch(const std::vector<std::string>& args) {
    Cli c;
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        c.app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return c.app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return c.app.exit(e);
    } catch (const CLI::ParseError& e) {
        c.app.exit(e);
        return 2;
    }
    CLI::App* sub = c.app.get_subcommands().front();
    try {
        return execute(c, sub, args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dispatch(args);
}
