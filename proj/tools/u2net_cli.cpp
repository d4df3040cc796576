// u2net: command-line front end (synth, preprocess, train, adapt, eval, params).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <u2net/checkpoint.hpp>
#include <u2net/infer.hpp>
#include <u2net/manifest.hpp>
#include <u2net/synth.hpp>
#include <u2net/trainer.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace u2net;

namespace {

json read_json(const fs::path& p) {
    if (!fs::exists(p)) throw Error("no such file: " + p.string());
    try {
        return json::parse(read_file(p));
    } catch (const json::exception& e) {
        throw Error(p.string() + ": " + e.what());
    }
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() ? q : base / q;
}

std::string hex(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void print_epoch(const std::string& tag, const EpochStats& st, const ScheduleState& s) {
    std::printf("%s epoch %zu  lr %.3e  l_ma %.5f  loss %.5f\n", tag.c_str(), st.epoch, s.lr, s.l_ma, st.mean_loss);
    std::fflush(stdout);
}

// ---- synth ---------------------------------------------------------------

struct SynthArgs {
    std::string config, out;
    std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a) {
    const json cfg = read_json(a.config);
    const auto domains = cfg.at("domains").get<std::vector<DomainSpec>>();
    const SynthOptions opts = cfg.value("synth", SynthOptions{});
    const std::size_t n = cfg.value("n_cases", std::size_t{10});
    const std::uint64_t seed = a.seed ? *a.seed : cfg.value("seed", std::uint64_t{0});
    for (const auto& d : domains) {
        const auto m = synth_generate(d, n, seed, fs::path(a.out) / d.id, opts);
        std::printf("%s: %zu train, %zu test -> %s\n", d.id.c_str(), m.count(Split::train), m.count(Split::test),
                    (fs::path(a.out) / d.id / "manifest.json").c_str());
    }
    return 0;
}

// ---- preprocess ----------------------------------------------------------

int run_preprocess(const std::string& manifest, const std::string& out) {
    const auto m = load_manifest(manifest);
    const auto p = preprocess_dataset(m, out, &std::cout);
    std::vector<std::size_t> ext[3];
    for (const auto* c : p.select(Split::train)) {
        const auto e = read_volume(p.resolve(c->image)).extent();
        for (std::size_t a = 0; a < 3; ++a) ext[a].push_back(e[a]);
    }
    Extent3 median;
    for (std::size_t a = 0; a < 3; ++a) {
        std::sort(ext[a].begin(), ext[a].end());
        median[a] = ext[a][(ext[a].size() - 1) / 2];
    }
    const auto plan = independent_patch_plan(median);
    const auto& sp = *p.median_spacing;
    std::printf("median spacing %.4g x %.4g x %.4g; median extent %zux%zux%zu; independent patch plan %zux%zux%zu (%zu levels)\n",
                sp[0], sp[1], sp[2], median.d, median.h, median.w, plan.patch.d, plan.patch.h, plan.patch.w, plan.levels);
    return 0;
}

// ---- train ---------------------------------------------------------------

struct RunConfig {
    NetworkConfig network;
    TrainConfig train;
    std::vector<fs::path> manifests;
    fs::path run_dir;
    std::string patch_extraction = "network";  // or "independent-plan"
};

RunConfig load_run_config(const fs::path& path) {
    const json j = read_json(path);
    const fs::path base = path.parent_path();
    RunConfig rc;
    rc.network = j.value("network", NetworkConfig{});
    rc.train = j.value("train", TrainConfig{});
    for (const auto& m : j.value("manifests", std::vector<std::string>{})) rc.manifests.push_back(resolve(base, m));
    if (j.contains("run_dir")) rc.run_dir = resolve(base, j.at("run_dir").get<std::string>());
    rc.patch_extraction = j.value("patch_extraction", rc.patch_extraction);
    if (rc.patch_extraction != "network" && rc.patch_extraction != "independent-plan")
        throw Error("patch_extraction must be 'network' or 'independent-plan'");
    return rc;
}

json to_json(const RunConfig& rc) {
    std::vector<std::string> ms;
    for (const auto& m : rc.manifests) ms.push_back(fs::absolute(m).lexically_normal().string());
    return {{"network", rc.network},
            {"train", rc.train},
            {"manifests", ms},
            {"run_dir", fs::absolute(rc.run_dir).lexically_normal().string()},
            {"patch_extraction", rc.patch_extraction}};
}

Extent3 plan_extract(const DomainData& d) {
    std::vector<std::size_t> ext[3];
    for (const auto& c : d.cases)
        for (std::size_t a = 0; a < 3; ++a) ext[a].push_back(c.image.extent()[a]);
    Extent3 median;
    for (std::size_t a = 0; a < 3; ++a) {
        std::sort(ext[a].begin(), ext[a].end());
        median[a] = ext[a][(ext[a].size() - 1) / 2];
    }
    return independent_patch_plan(median).patch;
}

struct TrainArgs {
    std::string config, mode, run_dir;
    bool resume = false;
};

int run_train(const TrainArgs& a) {
    RunConfig rc = load_run_config(a.config);
    if (!a.mode.empty()) rc.network.mode = parse_mode(a.mode);
    if (!a.run_dir.empty()) rc.run_dir = a.run_dir;
    if (rc.run_dir.empty()) throw Error("no run directory: set run_dir in the config or pass --run-dir");
    if (rc.manifests.empty()) throw Error("config lists no manifests");
    rc.network.validate();
    rc.train.validate();

    std::vector<DomainData> data;
    for (const auto& m : rc.manifests) {
        data.push_back(load_domain_data(load_manifest(m)));
        if (rc.patch_extraction == "independent-plan") data.back().extract_patch = plan_extract(data.back());
    }
    std::vector<DomainSpec> specs;
    for (const auto& d : data) specs.push_back(d.spec);

    const fs::path ckdir = rc.run_dir / "checkpoints";
    const fs::path log = rc.run_dir / "logs.jsonl";
    fs::create_directories(ckdir);
    fs::create_directories(rc.run_dir / "reports");
    if (!a.resume && fs::exists(log)) fs::remove(log);
    write_file_atomic(rc.run_dir / "config.json", to_json(rc).dump(2) + "\n");

    auto train_one = [&](const std::string& tag, const std::vector<DomainData>& dd, const fs::path& ckpt) {
        std::vector<DomainSpec> ds;
        for (const auto& d : dd) ds.push_back(d.spec);
        ModelState<float> model;
        OptimizerState<float> opt;
        ScheduleState sched = ScheduleState::fresh(rc.train);
        if (a.resume) {
            if (!fs::exists(ckpt)) throw Error("--resume: no checkpoint at " + ckpt.string());
            auto st = load_training_checkpoint<float>(ckpt);
            if (st.model.domains.size() != ds.size()) throw Error("--resume: checkpoint domains differ from the config");
            for (std::size_t i = 0; i < ds.size(); ++i)
                if (st.model.domains[i].id != ds[i].id) throw Error("--resume: checkpoint domains differ from the config");
            model = std::move(st.model);
            opt = std::move(st.opt);
            sched = st.sched;
            std::printf("%s: resuming at epoch %zu, lr %.3e\n", tag.c_str(), sched.epoch, sched.lr);
        } else {
            NetworkConfig nc = rc.network;
            model = build_model<float>(nc, ds);
        }
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = train_loop(model, opt, sched, dd, rc.train, ckpt, log,
                                  [&](const EpochStats& st, const ScheduleState& s) { print_epoch(tag, st, s); }, tag);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s: %zu epochs, %s, %.1f s -> %s\n", tag.c_str(), r.epochs,
                    r.terminated ? "learning rate below floor" : "epoch limit reached", secs, ckpt.c_str());
    };

    if (rc.network.mode == Mode::independent) {
        for (const auto& d : data) train_one(d.spec.id, {d}, ckdir / (d.spec.id + ".ckpt"));
    } else {
        train_one(to_string(rc.network.mode), data, ckdir / "model.ckpt");
    }
    return 0;
}

// ---- adapt ---------------------------------------------------------------

struct AdaptArgs {
    std::string checkpoint, manifest, config, out, report;
};

int run_adapt(const AdaptArgs& a) {
    const auto data_ck = decode_checkpoint(read_file(a.checkpoint));
    auto model = model_from_checkpoint<float>(data_ck);
    TrainConfig cfg = data_ck.meta.value("train", TrainConfig{});
    if (!a.config.empty()) cfg = load_run_config(a.config).train;
    const auto m = load_manifest(a.manifest);
    if (model.has_domain(m.domain.id)) throw Error("domain id '" + m.domain.id + "' already exists in the checkpoint");
    auto data = load_domain_data(m);

    const std::uint64_t before = fnv1a(serialize_partition(model, "shared"));
    const std::size_t comparable_before = count_parameters(model, CountScope::comparable);
    const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / ("adapted-" + m.domain.id + ".ckpt")
                                       : fs::path(a.out);
    const fs::path log = out.parent_path() / ("adapt-" + m.domain.id + ".jsonl");
    if (fs::exists(log)) fs::remove(log);
    const std::size_t added = adapt_new_domain(model, data, cfg, out, log, [&](const EpochStats& st, const ScheduleState& s) {
        print_epoch("adapt " + m.domain.id, st, s);
    });
    const std::uint64_t after = fnv1a(serialize_partition(model, "shared"));

    const json report = {{"domain", m.domain.id},
                         {"mode", to_string(model.config.mode)},
                         {"added_parameters", added},
                         {"comparable_parameters", comparable_before},
                         {"added_fraction_of_comparable", double(added) / double(comparable_before)},
                         {"shared_checksum_before", hex(before)},
                         {"shared_checksum_after", hex(after)},
                         {"shared_unchanged", before == after},
                         {"checkpoint", out.string()}};
    const fs::path rp = a.report.empty() ? fs::path(out).replace_extension(".json") : fs::path(a.report);
    write_file_atomic(rp, report.dump(2) + "\n");
    std::printf("#Added Par %zu (%.3f%% of %zu comparable); shared checksum %s -> %s\n", added,
                100.0 * double(added) / double(comparable_before), comparable_before, hex(before).c_str(), hex(after).c_str());
    return before == after ? 0 : 1;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
    std::vector<std::string> checkpoints, manifests;
    std::string report, name;
};

int run_eval(const EvalArgs& a) {
    std::vector<ModelState<float>> models;
    for (const auto& c : a.checkpoints) models.push_back(load_checkpoint<float>(c));
    EvalReport rep;
    rep.model = a.name.empty() ? to_string(models.front().config.mode) : a.name;
    const fs::path dir = a.report;
    for (const auto& mp : a.manifests) {
        const auto m = load_manifest(mp);
        if (m.count(Split::test) == 0) throw Error(mp + ": no test split");
        const ModelState<float>* model = nullptr;
        for (const auto& cand : models)
            if (cand.has_domain(m.domain.id)) model = &cand;
        if (!model) throw Error("no checkpoint covers domain " + m.domain.id);
        rep.domains.push_back(evaluate_dataset(*model, m, dir / "predictions"));
        std::printf("%s: %zu test cases evaluated\n", m.domain.id.c_str(), rep.domains.back().cases.size());
    }
    const std::string table = format_table({rep});
    write_file_atomic(dir / "report.json", to_json(rep).dump(2) + "\n");
    write_file_atomic(dir / "report.txt", table);
    std::cout << table;
    return 0;
}

// ---- params --------------------------------------------------------------

struct ParamsArgs {
    std::string config, checkpoint, scope = "comparable";
};

/// Element count over the union of every domain's parameter slots.
std::size_t enumerate(const NetworkConfig& cfg, const std::vector<DomainSpec>& domains, CountScope scope) {
    std::map<std::string, std::size_t> slots;
    for (const auto& d : domains)
        for (const auto& s : parameter_slots(cfg, d)) slots[s.name] = numel(s.shape);
    std::size_t n = 0;
    for (const auto& [name, size] : slots) {
        if (scope == CountScope::comparable && !in_comparable_scope(role_of(name))) continue;
        if (scope == CountScope::per_domain_added && partition_of(name) != domains.back().id) continue;
        n += size;
    }
    return n;
}

std::size_t closed_form(const NetworkConfig& cfg, const std::vector<DomainSpec>& domains, CountScope scope) {
    const auto all = closed_form_counts(cfg, domains);
    switch (scope) {
        case CountScope::comparable: return all.comparable();
        case CountScope::total: return all.total();
        case CountScope::per_domain_added: {
            if (domains.size() == 1) return all.total();
            const std::vector<DomainSpec> base(domains.begin(), domains.end() - 1);
            return all.total() - closed_form_counts(cfg, base).total();
        }
    }
    return 0;
}

int run_params(const ParamsArgs& a) {
    const CountScope scope = parse_scope(a.scope);
    NetworkConfig cfg;
    std::vector<DomainSpec> domains;
    std::optional<std::size_t> from_checkpoint;
    if (!a.checkpoint.empty()) {
        const auto model = load_checkpoint<float>(a.checkpoint);
        cfg = model.config;
        domains = model.domains;
        from_checkpoint = count_parameters(model, scope);
    } else {
        const json j = read_json(a.config);
        cfg = j.value("network", NetworkConfig{});
        if (j.contains("domains")) domains = j.at("domains").get<std::vector<DomainSpec>>();
        for (const auto& m : j.value("manifests", std::vector<std::string>{}))
            domains.push_back(load_manifest(resolve(fs::path(a.config).parent_path(), m)).domain);
    }
    if (domains.empty()) throw Error("no domains to count");
    cfg.validate();

    std::map<Mode, std::pair<std::size_t, std::size_t>> counts;
    bool agree = true;
    for (Mode mode : {Mode::independent, Mode::shared, Mode::universal}) {
        NetworkConfig c = cfg;
        c.mode = mode;
        counts[mode] = {enumerate(c, domains, scope), closed_form(c, domains, scope)};
        agree = agree && counts[mode].first == counts[mode].second;
    }
    const double shared = double(counts[Mode::shared].first);
    std::printf("scope %s, %zu domains, base %zu, %zu levels\n", a.scope.c_str(), domains.size(), cfg.base_filters,
                cfg.levels);
    std::printf("%-12s %14s %14s %10s\n", "Model", "#Par", "closed form", "Ratio");
    for (Mode mode : {Mode::independent, Mode::shared, Mode::universal}) {
        const auto [e, f] = counts[mode];
        std::printf("%-12s %14zu %14zu %9.4fx\n", to_string(mode).c_str(), e, f, double(e) / shared);
    }
    if (from_checkpoint) {
        const std::size_t expect = counts[cfg.mode].first;
        std::printf("checkpoint (%s): %zu allocated\n", to_string(cfg.mode).c_str(), *from_checkpoint);
        agree = agree && *from_checkpoint == expect;
    }
    std::printf("enumeration %s closed form\n", agree ? "equals" : "DIFFERS FROM");
    return agree ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"u2net: multi-domain 3D segmentation engine"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "generate synthetic multi-domain datasets");
    synth->add_option("--config", sa.config, "JSON with domains, n_cases, synth options")->required()->check(CLI::ExistingFile);
    synth->add_option("--out", sa.out, "output directory (one subdirectory per domain)")->required();
    synth->add_option("--seed", sa.seed, "style seed (overrides the config)");

    std::string pp_manifest, pp_out;
    auto* pre = app.add_subcommand("preprocess", "crop, resample and normalize a dataset");
    pre->add_option("--manifest", pp_manifest, "input manifest.json")->required()->check(CLI::ExistingFile);
    pre->add_option("--out", pp_out, "output directory")->required();

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train independent, shared or universal models");
    train->add_option("--config", ta.config, "run config JSON")->required()->check(CLI::ExistingFile);
    train->add_option("--mode", ta.mode, "override the network mode")
        ->check(CLI::IsMember({"independent", "shared", "universal"}));
    train->add_option("--run-dir", ta.run_dir, "override run_dir");
    train->add_flag("--resume", ta.resume, "continue from the run's checkpoints");

    AdaptArgs aa;
    auto* adapt = app.add_subcommand("adapt", "add and train a new domain on a trained model");
    adapt->add_option("--checkpoint", aa.checkpoint, "trained shared/universal checkpoint")->required()->check(CLI::ExistingFile);
    adapt->add_option("--new-manifest", aa.manifest, "preprocessed manifest of the new domain")->required()->check(CLI::ExistingFile);
    adapt->add_option("--config", aa.config, "run config whose train section is used");
    adapt->add_option("--out", aa.out, "adapted checkpoint path");
    adapt->add_option("--report", aa.report, "added-parameter report path");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "sliding-window inference and Dice report on test splits");
    eval->add_option("--checkpoint", ea.checkpoints, "checkpoint(s); independent runs pass one per domain")->required()->check(CLI::ExistingFile);
    eval->add_option("--manifest", ea.manifests, "preprocessed manifest(s)")->required()->check(CLI::ExistingFile);
    eval->add_option("--report", ea.report, "report directory")->required();
    eval->add_option("--name", ea.name, "row label in the table");

    ParamsArgs pa;
    auto* params = app.add_subcommand("params", "parameter counts and ratios");
    auto* pcfg = params->add_option("--config", pa.config, "run or network config JSON")->check(CLI::ExistingFile);
    auto* pck = params->add_option("--checkpoint", pa.checkpoint, "checkpoint")->check(CLI::ExistingFile);
    pcfg->excludes(pck);
    params->add_option("--scope", pa.scope, "comparable | total | per-domain-added")
        ->check(CLI::IsMember({"comparable", "total", "per-domain-added"}));

    CLI11_PARSE(app, argc, argv);
    if (params->parsed() && pa.config.empty() && pa.checkpoint.empty()) {
        std::cerr << "params: one of --config or --checkpoint is required\n" << app.help();
        return 2;
    }
    try {
        if (synth->parsed()) return run_synth(sa);
        if (pre->parsed()) return run_preprocess(pp_manifest, pp_out);
        if (train->parsed()) return run_train(ta);
        if (adapt->parsed()) return run_adapt(aa);
        if (eval->parsed()) return run_eval(ea);
        if (params->parsed()) return run_params(pa);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
