#include <gtest/gtest.h>

#include <filesystem>

#include <u2net/checkpoint.hpp>
#include <u2net/trainer.hpp>

using namespace u2net;
namespace fs = std::filesystem;

namespace {

DomainSpec spec(std::string id, std::size_t modalities = 1, std::size_t classes = 2, std::size_t patch = 8) {
    DomainSpec d;
    d.id = std::move(id);
    d.modalities = modalities;
    d.classes = classes;
    d.patch_shape = {patch, patch, patch};
    d.levels = 2;
    return d;
}

NetworkConfig tiny(Mode mode = Mode::universal, std::size_t base = 2) {
    NetworkConfig c;
    c.mode = mode;
    c.base_filters = base;
    c.levels = 3;
    c.seed = 11;
    return c;
}

/// A cube of class 1 (and class 2 for three-class specs) on a noisy background.
DomainData blob_data(const DomainSpec& s, std::size_t cases, std::uint64_t seed, std::size_t extent = 10) {
    DomainData d{s, {}, {}};
    Rng rng(seed);
    for (std::size_t i = 0; i < cases; ++i) {
        const Extent3 e{extent, extent, extent};
        Volume img{Tensor<float>(volume_shape(s.modalities, e)), {1, 1, 1}, VolumeKind::image};
        Volume lab{Tensor<float>(volume_shape(1, e)), {1, 1, 1}, VolumeKind::label};
        const std::size_t o = 1 + uniform_index(rng, extent - 6);
        for (std::size_t z = 0; z < extent; ++z)
            for (std::size_t y = 0; y < extent; ++y)
                for (std::size_t x = 0; x < extent; ++x) {
                    std::size_t cls = 0;
                    if (z >= o && z < o + 4 && y >= o && y < o + 4 && x >= o && x < o + 4) cls = 1;
                    if (s.classes > 2 && cls && z == o && y == o) cls = 2;
                    lab.data.at(0, z, y, x) = float(cls);
                    for (std::size_t c = 0; c < s.modalities; ++c)
                        img.data.at(c, z, y, x) = float(2.0 * cls - 1.0 + 0.3 * normal(rng));
                }
        d.cases.push_back({"case" + std::to_string(i), img, lab});
    }
    return d;
}

TrainConfig quick(std::size_t bpe = 4) {
    TrainConfig c;
    c.batches_per_epoch = bpe;
    c.batch_size = 2;
    c.initial_lr = 3e-3;
    c.ema_check_every = 2;
    c.sampling.augment = AugmentConfig::none();
    c.seed = 5;
    return c;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("u2net_trainer_" + name);
    fs::remove_all(p);
    return p;
}

std::string first_param_name(const ModelState<float>& m, const std::string& prefix) {
    for (const auto& [name, p] : m.params)
        if (name.rfind(prefix, 0) == 0) return name;
    return {};
}

}  // namespace

TEST(Adam, FirstStepIsSignedLearningRate) {
    ModelState<double> m;
    m.params.emplace("shared/enc0/conv1/pointwise", Var<double>::parameter(Tensor<double>({3}, std::vector<double>{1, 2, 3})));
    auto& p = m.params.at("shared/enc0/conv1/pointwise");
    p.grad() = {0.5, -4.0, 1e-3};
    OptimizerState<double> opt;
    adam_step(m, opt, 0.1, 0.0);
    // t = 1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps).
    const std::vector<double> g{0.5, -4.0, 1e-3}, start{1, 2, 3};
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(p.value()[i], start[i] - 0.1 * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
        EXPECT_NEAR(std::abs(p.value()[i] - start[i]), 0.1, 1e-5);
    }
    EXPECT_FALSE(p.has_grad());
}

TEST(Adam, TwoStepsMatchReference) {
    ModelState<double> m;
    m.params.emplace("shared/x/conv", Var<double>::parameter(Tensor<double>({1}, 1.5)));
    auto& p = m.params.at("shared/x/conv");
    OptimizerState<double> opt;
    double theta = 1.5, mm = 0, vv = 0;
    const double lr = 0.01, wd = 0.1;
    for (int t = 1; t <= 2; ++t) {
        const double g = t == 1 ? 0.3 : -0.7;
        p.grad() = {g};
        adam_step(m, opt, lr, wd);
        mm = 0.9 * mm + 0.1 * g;
        vv = 0.999 * vv + 0.001 * g * g;
        const double mh = mm / (1 - std::pow(0.9, t)), vh = vv / (1 - std::pow(0.999, t));
        theta -= lr * (mh / (std::sqrt(vh) + 1e-8) + wd * theta);
        EXPECT_NEAR(p.value()[0], theta, 1e-14);
    }
}

TEST(Adam, ZeroGradientAndFrozenAreUnchanged) {
    ModelState<double> m;
    m.params.emplace("shared/a/conv", Var<double>::parameter(Tensor<double>({2}, 0.7)));
    m.params.emplace("shared/b/conv", Var<double>::parameter(Tensor<double>({2}, 0.9)));
    m.params.at("shared/a/conv").grad() = {0, 0};
    m.params.at("shared/b/conv").grad() = {5, -5};
    OptimizerState<double> opt;
    opt.frozen.insert("shared/b/conv");
    adam_step(m, opt, 0.1, 0.0);
    EXPECT_EQ(m.params.at("shared/a/conv").value(), Tensor<double>({2}, 0.7));
    EXPECT_EQ(m.params.at("shared/b/conv").value(), Tensor<double>({2}, 0.9));
    EXPECT_FALSE(opt.m.count("shared/b/conv"));
}

TEST(Adam, NormsAndHeadsSkipWeightDecay) {
    EXPECT_FALSE(decays("domain/a/enc0/norm1/gain"));
    EXPECT_FALSE(decays("domain/a/head0/weight"));
    EXPECT_TRUE(decays("shared/enc0/conv1/pointwise"));
    EXPECT_TRUE(decays("domain/a/input/weight"));
    ModelState<double> m;
    m.params.emplace("domain/a/enc0/norm1/gain", Var<double>::parameter(Tensor<double>({1}, 2.0)));
    m.params.at("domain/a/enc0/norm1/gain").grad() = {0.0};
    OptimizerState<double> opt;
    adam_step(m, opt, 0.1, 0.5);
    EXPECT_EQ(m.params.at("domain/a/enc0/norm1/gain").value()[0], 2.0);
}

TEST(Schedule, EmaInitialisesToFirstLoss) {
    TrainConfig cfg;
    auto s = ScheduleState::fresh(cfg);
    EXPECT_EQ(s.lr, 3e-4);
    update_ema(s, 2.0, cfg);
    EXPECT_EQ(s.l_ma, 2.0);
    EXPECT_EQ(s.best_l_ma, 2.0);
    update_ema(s, 1.0, cfg);
    EXPECT_DOUBLE_EQ(s.l_ma, 0.95 * 2.0 + 0.05 * 1.0);
}

TEST(Schedule, ImprovementKeepsRate) {
    TrainConfig cfg;
    auto s = ScheduleState::fresh(cfg);
    s.best_l_ma = 1.0;
    s.l_ma = 0.99;
    update_schedule(s, cfg);
    EXPECT_EQ(s.lr, 3e-4);
    EXPECT_EQ(s.best_l_ma, 0.99);
}

TEST(Schedule, ExactDeltaImprovementDoesNotReduce) {
    TrainConfig cfg;
    auto s = ScheduleState::fresh(cfg);
    // 2d - d is exact in floating point, so the improvement equals delta exactly.
    s.best_l_ma = 2 * cfg.plateau_delta;
    s.l_ma = cfg.plateau_delta;
    ASSERT_EQ(s.best_l_ma - s.l_ma, cfg.plateau_delta);
    update_schedule(s, cfg);
    EXPECT_EQ(s.lr, 3e-4);

    s.best_l_ma = 2 * cfg.plateau_delta;
    s.l_ma = std::nextafter(cfg.plateau_delta, 1.0);
    update_schedule(s, cfg);
    EXPECT_EQ(s.lr, 3e-4 / 5);
}

TEST(Schedule, StagnantLossTerminatesAfterSeventhReduction) {
    TrainConfig cfg;
    auto s = ScheduleState::fresh(cfg);
    update_ema(s, 1.0, cfg);
    std::vector<double> lrs;
    int checks = 0;
    while (!should_terminate(s, cfg)) {
        update_schedule(s, cfg);
        lrs.push_back(s.lr);
        ASSERT_LT(++checks, 100);
    }
    ASSERT_EQ(lrs.size(), 7u);
    for (std::size_t k = 0; k < 7; ++k) EXPECT_EQ(lrs[k], 3e-4 / std::pow(5.0, double(k + 1)));
    EXPECT_NEAR(lrs.back(), 3.84e-9, 1e-12);
    EXPECT_GE(lrs[5], 1e-8);
}

TEST(Schedule, TerminationIsStrict) {
    TrainConfig cfg;
    ScheduleState s = ScheduleState::fresh(cfg);
    EXPECT_FALSE(should_terminate(s, cfg));
    s.lr = 1e-8;
    EXPECT_FALSE(should_terminate(s, cfg));
    s.lr = 9.9e-9;
    EXPECT_TRUE(should_terminate(s, cfg));
}

TEST(Training, OneBatchOverfit) {
    const auto s = spec("a", 1, 3);
    auto model = build_model<float>(tiny(Mode::universal, 4), {s});
    const auto data = blob_data(s, 1, 3);
    TrainConfig cfg = quick();
    cfg.sampling.fg_bias = 1.0;
    const auto batch = make_batch(data, cfg.sampling, 1, 0, 0, 2, 1);
    OptimizerState<float> opt;
    const double first = train_batch(model, opt, "a", batch, 1e-2, cfg);
    double last = first;
    for (int i = 1; i < 200; ++i) last = train_batch(model, opt, "a", batch, 1e-2, cfg);
    EXPECT_LT(last * 10, first) << "first " << first << " last " << last;
}

TEST(Training, RoundRobinEpochCounts) {
    std::vector<DomainData> data;
    for (int t = 0; t < 5; ++t) data.push_back(blob_data(spec("d" + std::to_string(t)), 2, 10 + t));
    std::vector<DomainSpec> specs;
    for (const auto& d : data) specs.push_back(d.spec);
    auto model = build_model<float>(tiny(Mode::universal, 2), specs);
    TrainConfig cfg = quick(250);
    cfg.batch_size = 1;
    OptimizerState<float> opt;
    auto sched = ScheduleState::fresh(cfg);
    const auto st = train_epoch(model, opt, sched, data, cfg);
    double weighted = 0;
    for (const auto& [id, n] : st.batches) {
        EXPECT_EQ(n, 50u);
        weighted += st.domain_loss.at(id) * double(n);
    }
    EXPECT_NEAR(weighted / 250.0, st.mean_loss, 1e-12);
    EXPECT_EQ(sched.epoch, 1u);
    EXPECT_EQ(sched.batches, 250u);
}

TEST(Training, DeterministicAcrossRunsAndWorkers) {
    const auto d = blob_data(spec("a"), 3, 4);
    auto run = [&](const char* workers) {
        setenv("U2_NUM_WORKERS", workers, 1);
        auto model = build_model<float>(tiny(), {d.spec});
        TrainConfig cfg = quick();
        cfg.sampling.augment = AugmentConfig{};
        OptimizerState<float> opt;
        auto sched = ScheduleState::fresh(cfg);
        std::vector<double> losses;
        for (int e = 0; e < 2; ++e) losses.push_back(train_epoch(model, opt, sched, {d}, cfg).mean_loss);
        return std::make_pair(losses, encode_training_checkpoint(model, opt, sched, cfg));
    };
    const auto a = run("1"), b = run("1"), c = run("3");
    unsetenv("U2_NUM_WORKERS");
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    EXPECT_EQ(a.second, c.second);
}

TEST(Training, NonFiniteLossAborts) {
    const auto d = blob_data(spec("a"), 1, 4);
    auto model = build_model<float>(tiny(), {d.spec});
    for (auto& [name, p] : model.params) p.mutable_value().fill(std::numeric_limits<float>::quiet_NaN());
    OptimizerState<float> opt;
    auto sched = ScheduleState::fresh(quick());
    EXPECT_THROW(train_epoch(model, opt, sched, {d}, quick()), Error);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
    const auto d = blob_data(spec("a"), 3, 6);
    TrainConfig cfg = quick(3);
    cfg.max_epochs = 4;
    const auto full = scratch("full"), part = scratch("part");

    auto model = build_model<float>(tiny(), {d.spec});
    OptimizerState<float> opt;
    auto sched = ScheduleState::fresh(cfg);
    train_loop(model, opt, sched, {d}, cfg, full / "model.ckpt", full / "logs.jsonl");

    TrainConfig half = cfg;
    half.max_epochs = 2;
    auto model2 = build_model<float>(tiny(), {d.spec});
    OptimizerState<float> opt2;
    auto sched2 = ScheduleState::fresh(half);
    train_loop(model2, opt2, sched2, {d}, half, part / "model.ckpt", part / "logs.jsonl");
    auto state = load_training_checkpoint<float>(part / "model.ckpt");
    EXPECT_EQ(state.sched.epoch, 2u);
    train_loop(state.model, state.opt, state.sched, {d}, cfg, part / "model.ckpt", part / "logs.jsonl");

    // The stored train config differs only in max_epochs; compare the rest byte for byte.
    auto strip = [](const fs::path& p) {
        auto data = decode_checkpoint(read_file(p));
        data.meta.erase("train");
        return std::make_pair(data.meta.dump(), data.tensors);
    };
    const auto a = strip(full / "model.ckpt"), b = strip(part / "model.ckpt");
    EXPECT_EQ(a.first, b.first);
    EXPECT_TRUE(a.second == b.second);
    EXPECT_EQ(read_file(full / "logs.jsonl"), read_file(part / "logs.jsonl"));
    fs::remove_all(full);
    fs::remove_all(part);
}

TEST(Training, CheckpointRoundTripGivesIdenticalLogits) {
    const auto d = blob_data(spec("a", 2, 3), 2, 8);
    auto model = build_model<float>(tiny(), {d.spec});
    TrainConfig cfg = quick(2);
    OptimizerState<float> opt;
    auto sched = ScheduleState::fresh(cfg);
    train_epoch(model, opt, sched, {d}, cfg);
    const auto back = decode_checkpoint(encode_training_checkpoint(model, opt, sched, cfg));
    const auto loaded = model_from_checkpoint<float>(back);
    const Tensor<float> x = crop(d.cases[0].image, {{0, 0, 0}, {8, 8, 8}}).data;
    auto t1 = Tape<float>::inference();
    auto t2 = Tape<float>::inference();
    EXPECT_EQ(forward(model, "a", Var<float>(x), t1).value(), forward(loaded, "a", Var<float>(x), t2).value());
}

TEST(Adaptation, FreezesSharedAndKeepsBaseDomainsExact) {
    for (Mode mode : {Mode::universal, Mode::shared}) {
        const auto a = blob_data(spec("a"), 2, 1), b = blob_data(spec("b", 2, 2), 2, 2);
        auto model = build_model<float>(tiny(mode), {a.spec, b.spec});
        TrainConfig cfg = quick(2);
        cfg.max_epochs = 2;
        OptimizerState<float> opt;
        auto sched = ScheduleState::fresh(cfg);
        train_loop(model, opt, sched, {a, b}, cfg, {}, {});

        const auto probe = crop(a.cases[0].image, {{1, 1, 1}, {9, 9, 9}}).data;
        auto tape = Tape<float>::inference();
        const auto before_logits = forward(model, "a", Var<float>(probe), tape).value();
        const auto shared_before = serialize_partition(model, "shared");
        const auto domain_a_before = model.param(first_param_name(model, "domain/a/")).value();

        const auto c = blob_data(spec("c", 1, 3), 2, 3);
        const std::size_t added = adapt_new_domain(model, c, cfg);
        EXPECT_GT(added, 0u);
        EXPECT_EQ(serialize_partition(model, "shared"), shared_before);
        EXPECT_EQ(model.param(first_param_name(model, "domain/a/")).value(), domain_a_before);
        auto tape2 = Tape<float>::inference();
        EXPECT_EQ(forward(model, "a", Var<float>(probe), tape2).value(), before_logits);
        EXPECT_THROW(adapt_new_domain(model, c, cfg), Error);
    }
}

TEST(Adaptation, RejectsIndependentModels) {
    const auto a = blob_data(spec("a"), 1, 1);
    auto model = build_model<float>(tiny(Mode::independent), {a.spec});
    EXPECT_THROW(adapt_new_domain(model, blob_data(spec("b"), 1, 2), quick()), Error);
}

TEST(TrainConfigJson, RoundTrip) {
    TrainConfig c = quick(7);
    c.sampling.fg_bias = 0.25;
    c.loss.focal_alpha = {1, 2};
    const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
    TrainConfig bad;
    bad.lr_factor = 1.0;
    EXPECT_THROW(bad.validate(), Error);
}
