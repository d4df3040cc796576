#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "losses.hpp"
#include "netarch.hpp"
#include "sampling.hpp"

namespace u2net {

struct TrainConfig {
    double initial_lr = 3e-4;
    double weight_decay = 1e-5;
    std::size_t batch_size = 2;
    std::size_t batches_per_epoch = 250;
    double ema_alpha = 0.95;  // l_MA <- alpha * l_MA + (1 - alpha) * batch loss
    std::size_t ema_check_every = 30;
    double plateau_delta = 5e-4;
    double lr_factor = 5.0;
    double lr_floor = 1e-8;
    std::size_t max_epochs = 0;  // 0: run until the learning rate falls below the floor
    std::uint64_t seed = 0;
    SamplingConfig sampling;
    LossConfig loss;

    void validate() const {
        if (!(initial_lr > 0) || weight_decay < 0 || batch_size == 0 || batches_per_epoch == 0 || ema_check_every == 0 ||
            !(plateau_delta > 0) || !(lr_floor > 0))
            throw Error("train config values must be positive");
        if (!(ema_alpha >= 0 && ema_alpha < 1)) throw Error("ema_alpha must lie in [0, 1)");
        if (!(lr_factor > 1)) throw Error("lr_factor must exceed 1");
        sampling.augment.validate();
        loss.validate();
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"initial_lr", c.initial_lr},
         {"weight_decay", c.weight_decay},
         {"batch_size", c.batch_size},
         {"batches_per_epoch", c.batches_per_epoch},
         {"ema_alpha", c.ema_alpha},
         {"ema_check_every", c.ema_check_every},
         {"plateau_delta", c.plateau_delta},
         {"lr_factor", c.lr_factor},
         {"lr_floor", c.lr_floor},
         {"max_epochs", c.max_epochs},
         {"seed", c.seed},
         {"augment", c.sampling.augment},
         {"fg_bias", c.sampling.fg_bias},
         {"focal_gamma", c.loss.focal_gamma},
         {"focal_alpha", c.loss.focal_alpha}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.initial_lr = j.value("initial_lr", d.initial_lr);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.batches_per_epoch = j.value("batches_per_epoch", d.batches_per_epoch);
    c.ema_alpha = j.value("ema_alpha", d.ema_alpha);
    c.ema_check_every = j.value("ema_check_every", d.ema_check_every);
    c.plateau_delta = j.value("plateau_delta", d.plateau_delta);
    c.lr_factor = j.value("lr_factor", d.lr_factor);
    c.lr_floor = j.value("lr_floor", d.lr_floor);
    c.max_epochs = j.value("max_epochs", d.max_epochs);
    c.seed = j.value("seed", d.seed);
    c.sampling.augment = j.value("augment", d.sampling.augment);
    c.sampling.fg_bias = j.value("fg_bias", d.sampling.fg_bias);
    c.loss.focal_gamma = j.value("focal_gamma", d.loss.focal_gamma);
    c.loss.focal_alpha = j.value("focal_alpha", d.loss.focal_alpha);
}

template <class T>
struct OptimizerState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::map<std::string, std::vector<T>> m, v;
    std::map<std::string, std::uint64_t> steps;  // per-parameter update count
    std::set<std::string> frozen;
};

/// Norm affines and heads are exempt from weight decay.
inline bool decays(const std::string& name) {
    const auto role = role_of(name);
    return role != ParamRole::norm && role != ParamRole::head;
}

/// One Adam update over every parameter that received a gradient, then clears
/// gradients. Frozen parameters are skipped entirely.
template <class T>
void adam_step(ModelState<T>& model, OptimizerState<T>& opt, double lr, double weight_decay) {
    for (auto& [name, p] : model.params) {
        if (opt.frozen.count(name) || model.frozen.count(name) || !p.has_grad()) {
            p.zero_grad();
            continue;
        }
        auto& theta = p.mutable_value().storage();
        const auto& g = p.grad();
        auto& m = opt.m[name];
        auto& v = opt.v[name];
        if (m.size() != theta.size()) m.assign(theta.size(), T(0)), v.assign(theta.size(), T(0));
        const std::uint64_t t = ++opt.steps[name];
        const double c1 = 1.0 - std::pow(opt.beta1, double(t));
        const double c2 = 1.0 - std::pow(opt.beta2, double(t));
        const double wd = decays(name) ? weight_decay : 0.0;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = g[i];
            const double mi = opt.beta1 * double(m[i]) + (1 - opt.beta1) * gi;
            const double vi = opt.beta2 * double(v[i]) + (1 - opt.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / c1, vhat = vi / c2;
            theta[i] = static_cast<T>(double(theta[i]) - lr * (mhat / (std::sqrt(vhat) + opt.eps) + wd * double(theta[i])));
        }
        p.zero_grad();
    }
}

struct ScheduleState {
    double lr = 0;
    double l_ma = 0;
    double best_l_ma = 0;
    bool has_ma = false;
    std::size_t reductions = 0;
    std::size_t epoch = 0;  // completed epochs
    std::size_t batches = 0;

    static ScheduleState fresh(const TrainConfig& cfg) {
        ScheduleState s;
        s.lr = cfg.initial_lr;
        return s;
    }
};

inline void to_json(nlohmann::json& j, const ScheduleState& s) {
    j = {{"lr", s.lr},           {"l_ma", s.l_ma},   {"best_l_ma", s.best_l_ma}, {"has_ma", s.has_ma},
         {"reductions", s.reductions}, {"epoch", s.epoch}, {"batches", s.batches}};
}

inline void from_json(const nlohmann::json& j, ScheduleState& s) {
    s.lr = j.at("lr").get<double>();
    s.l_ma = j.at("l_ma").get<double>();
    s.best_l_ma = j.at("best_l_ma").get<double>();
    s.has_ma = j.at("has_ma").get<bool>();
    s.reductions = j.at("reductions").get<std::size_t>();
    s.epoch = j.at("epoch").get<std::size_t>();
    s.batches = j.at("batches").get<std::size_t>();
}

/// l_MA update after one batch; the first batch initializes both l_MA and best_l_MA.
inline void update_ema(ScheduleState& s, double batch_loss, const TrainConfig& cfg) {
    if (!s.has_ma) {
        s.l_ma = s.best_l_ma = batch_loss;
        s.has_ma = true;
    } else {
        s.l_ma = cfg.ema_alpha * s.l_ma + (1 - cfg.ema_alpha) * batch_loss;
    }
    ++s.batches;
}

/// Plateau check: reduce the rate unless l_MA improved on the best value by at
/// least plateau_delta.
inline void update_schedule(ScheduleState& s, const TrainConfig& cfg) {
    if (s.best_l_ma - s.l_ma < cfg.plateau_delta) {
        ++s.reductions;
        s.lr = cfg.initial_lr / std::pow(cfg.lr_factor, double(s.reductions));
    }
    s.best_l_ma = std::min(s.best_l_ma, s.l_ma);
}

inline bool should_terminate(const ScheduleState& s, const TrainConfig& cfg) { return s.lr < cfg.lr_floor; }

struct EpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0;
    std::map<std::string, double> domain_loss;   // mean per domain
    std::map<std::string, std::size_t> batches;  // batches per domain
};

/// One optimization step on a batch; returns the batch loss.
template <class T>
double train_batch(ModelState<T>& model, OptimizerState<T>& opt, const std::string& domain,
                   const std::vector<Sample>& batch, double lr, const TrainConfig& cfg) {
    Tape<T> tape;
    std::vector<Var<T>> logits;
    Labels labels;
    for (const auto& s : batch) {
        logits.push_back(forward(model, domain, Var<T>(s.image.template cast<T>()), tape));
        labels.insert(labels.end(), s.labels.begin(), s.labels.end());
    }
    auto loss = hybrid_loss(tape, logits.size() == 1 ? logits[0] : concat_voxels(tape, logits), labels, cfg.loss);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw Error("non-finite loss on domain " + domain + "; training aborted");
    backward(loss, tape);
    adam_step(model, opt, lr, cfg.weight_decay);
    return value;
}

/// Parameters that never take gradients during training.
template <class T>
void apply_freeze(ModelState<T>& model, const OptimizerState<T>& opt) {
    for (auto& [name, p] : model.params)
        p.node()->requires_grad = !(model.frozen.count(name) || opt.frozen.count(name));
}

/// One epoch of round-robin batches over `data` (in order).
template <class T>
EpochStats train_epoch(ModelState<T>& model, OptimizerState<T>& opt, ScheduleState& sched,
                       const std::vector<DomainData>& data, const TrainConfig& cfg) {
    if (data.empty()) throw Error("train_epoch: no domains");
    apply_freeze(model, opt);
    EpochStats st;
    st.epoch = sched.epoch + 1;
    double total = 0;
    for (std::size_t i = 0; i < cfg.batches_per_epoch; ++i) {
        const auto& d = data[round_robin_index(data.size(), i)];
        const auto batch = make_batch(d, cfg.sampling, cfg.seed, sched.epoch, i, cfg.batch_size);
        const double loss = train_batch(model, opt, d.spec.id, batch, sched.lr, cfg);
        update_ema(sched, loss, cfg);
        total += loss;
        st.domain_loss[d.spec.id] += loss;
        ++st.batches[d.spec.id];
    }
    for (auto& [id, sum] : st.domain_loss) sum /= double(st.batches[id]);
    st.mean_loss = total / double(cfg.batches_per_epoch);
    ++sched.epoch;
    return st;
}

// ---- training checkpoints ------------------------------------------------

template <class T>
std::string encode_training_checkpoint(const ModelState<T>& model, const OptimizerState<T>& opt,
                                       const ScheduleState& sched, const TrainConfig& cfg) {
    auto tensors = model_tensors(model);
    std::map<std::string, Tensor<T>> moments;
    for (const auto& [name, m] : opt.m) {
        const Shape& shape = model.param(name).shape();
        moments.emplace("adam/m/" + name, Tensor<T>(shape, m));
        moments.emplace("adam/v/" + name, Tensor<T>(shape, opt.v.at(name)));
    }
    for (const auto& [name, t] : moments) tensors.emplace(name, &t);
    auto meta = model_meta(model);
    meta["optimizer"] = {{"beta1", opt.beta1}, {"beta2", opt.beta2}, {"eps", opt.eps}, {"steps", opt.steps},
                         {"frozen", opt.frozen}};
    meta["schedule"] = sched;
    meta["train"] = cfg;
    return encode_checkpoint(tensors, meta);
}

template <class T>
void save_training_checkpoint(const std::filesystem::path& path, const ModelState<T>& model,
                              const OptimizerState<T>& opt, const ScheduleState& sched, const TrainConfig& cfg) {
    write_file_atomic(path, encode_training_checkpoint(model, opt, sched, cfg));
}

template <class T>
struct TrainingState {
    ModelState<T> model;
    OptimizerState<T> opt;
    ScheduleState sched;
    TrainConfig cfg;
};

template <class T>
TrainingState<T> load_training_checkpoint(const std::filesystem::path& path) {
    const auto data = decode_checkpoint(read_file(path));
    TrainingState<T> s;
    s.model = model_from_checkpoint<T>(data);
    if (!data.meta.contains("schedule")) throw Error(path.string() + " holds no training state");
    s.sched = data.meta.at("schedule").get<ScheduleState>();
    s.cfg = data.meta.at("train").get<TrainConfig>();
    const auto& o = data.meta.at("optimizer");
    s.opt.beta1 = o.at("beta1");
    s.opt.beta2 = o.at("beta2");
    s.opt.eps = o.at("eps");
    s.opt.steps = o.at("steps").get<std::map<std::string, std::uint64_t>>();
    s.opt.frozen = o.at("frozen").get<std::set<std::string>>();
    for (const auto& [name, t] : data.tensors) {
        if (name.rfind("adam/m/", 0) == 0) s.opt.m[name.substr(7)] = t.template cast<T>().storage();
        if (name.rfind("adam/v/", 0) == 0) s.opt.v[name.substr(7)] = t.template cast<T>().storage();
    }
    return s;
}

// ---- training loop -------------------------------------------------------

inline nlohmann::json epoch_log(const EpochStats& st, const ScheduleState& s, const std::string& tag = {}) {
    nlohmann::json j = {{"epoch", st.epoch}, {"lr", s.lr}, {"l_ma", s.l_ma}, {"mean_loss", st.mean_loss},
                        {"domain_loss", st.domain_loss}};
    if (!tag.empty()) j["model"] = tag;
    return j;
}

/// Drops log lines of model `tag` past `epoch` (used when resuming).
inline void truncate_log(const std::filesystem::path& log, std::size_t epoch, const std::string& tag = {}) {
    if (!std::filesystem::exists(log)) return;
    std::ifstream is(log);
    std::string line, kept;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (j.value("model", std::string{}) != tag || j.at("epoch").get<std::size_t>() <= epoch) kept += line + "\n";
    }
    is.close();
    write_file_atomic(log, kept);
}

struct LoopResult {
    std::size_t epochs = 0;
    bool terminated = false;  // learning rate fell below the floor
};

using ProgressFn = std::function<void(const EpochStats&, const ScheduleState&)>;

/// Runs epochs until termination or max_epochs, appending a JSON line per
/// epoch to `log` and writing `checkpoint` at every schedule check and at the end.
template <class T>
LoopResult train_loop(ModelState<T>& model, OptimizerState<T>& opt, ScheduleState& sched,
                      const std::vector<DomainData>& data, const TrainConfig& cfg,
                      const std::filesystem::path& checkpoint, const std::filesystem::path& log,
                      const ProgressFn& progress = {}, const std::string& tag = {}) {
    cfg.validate();
    if (!log.empty()) {
        if (log.has_parent_path()) std::filesystem::create_directories(log.parent_path());
        truncate_log(log, sched.epoch, tag);
    }
    LoopResult r;
    while (!should_terminate(sched, cfg) && (cfg.max_epochs == 0 || sched.epoch < cfg.max_epochs)) {
        const auto st = train_epoch(model, opt, sched, data, cfg);
        const bool check = sched.epoch % cfg.ema_check_every == 0;
        if (check) update_schedule(sched, cfg);
        if (!log.empty()) {
            std::ofstream os(log, std::ios::app);
            os << epoch_log(st, sched, tag).dump() << '\n';
        }
        if (progress) progress(st, sched);
        if (check && !checkpoint.empty()) save_training_checkpoint(checkpoint, model, opt, sched, cfg);
    }
    r.epochs = sched.epoch;
    r.terminated = should_terminate(sched, cfg);
    if (!checkpoint.empty()) save_training_checkpoint(checkpoint, model, opt, sched, cfg);
    return r;
}

/// Registers a new domain on a trained shared/universal model and trains only
/// its parameters. Everything that existed before stays bit-identical.
template <class T>
std::size_t adapt_new_domain(ModelState<T>& model, const DomainData& data, const TrainConfig& cfg,
                             const std::filesystem::path& checkpoint = {}, const std::filesystem::path& log = {},
                             const ProgressFn& progress = {}) {
    const std::size_t added = add_domain(model, data.spec);
    OptimizerState<T> opt;
    const std::string own = "domain/" + data.spec.id + "/";
    for (const auto& [name, p] : model.params)
        if (name.rfind(own, 0) != 0) opt.frozen.insert(name);
    ScheduleState sched = ScheduleState::fresh(cfg);
    train_loop(model, opt, sched, {data}, cfg, checkpoint, log, progress);
    return added;
}

}  // namespace u2net
