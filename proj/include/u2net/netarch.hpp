#pragma once

// The volumetric U-shaped network in its three experimental modes:
//
//   independent  every parameter belongs to one domain ("domain/<id>/...")
//   shared       one standard network for all domains; only the input layer,
//                output head and deep-supervision heads are per domain
//   universal    every stride-1 3x3x3 convolution becomes a domain adapter:
//                a per-domain channel-wise bank followed by a shared
//                pointwise bank; normalization affines are per domain
//
// Resolution level r runs at 2^-r of the patch extent with channels[r]
// feature maps; the last level is the bottleneck. Parameter names encode the
// partition: "shared/<site>/<role>" or "domain/<id>/<site>/<role>".

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ops.hpp"
#include "rng.hpp"

namespace u2net {

enum class Mode { independent, shared, universal };

inline std::string to_string(Mode m) {
    switch (m) {
        case Mode::independent: return "independent";
        case Mode::shared: return "shared";
        case Mode::universal: return "universal";
    }
    return "?";
}

inline Mode parse_mode(const std::string& s) {
    if (s == "independent") return Mode::independent;
    if (s == "shared") return Mode::shared;
    if (s == "universal") return Mode::universal;
    throw Error("unknown mode '" + s + "' (expected independent, shared or universal)");
}

struct DomainSpec {
    std::string id;
    std::size_t modalities = 1;
    std::size_t classes = 2;  // background included
    std::array<double, 3> median_spacing{1.0, 1.0, 1.0};
    Extent3 patch_shape{32, 32, 32};
    std::size_t levels = 3;  // resolution levels for an independent model

    void validate() const {
        if (id.empty() || id.find('/') != std::string::npos)
            throw Error("domain id must be non-empty and free of '/', got '" + id + "'");
        if (modalities < 1) throw Error("domain " + id + ": at least one modality required");
        if (classes < 2) throw Error("domain " + id + ": at least two classes (background included) required");
        for (double s : median_spacing)
            if (!(s > 0)) throw Error("domain " + id + ": spacing must be positive");
        const std::size_t unit = std::size_t{1} << levels;
        for (std::size_t a = 0; a < 3; ++a)
            if (patch_shape[a] == 0 || patch_shape[a] % unit != 0)
                throw Error("domain " + id + ": patch extent " + std::to_string(patch_shape[a]) +
                            " is not divisible by 2^" + std::to_string(levels));
    }
};

struct NetworkConfig {
    std::size_t base_filters = 16;
    std::size_t levels = 5;
    Mode mode = Mode::universal;
    std::vector<std::size_t> channel_progression;  // empty: doubling from base_filters, capped
    std::size_t max_channels = 320;
    std::size_t deep_supervision_levels = 3;
    double norm_eps = 1e-5;
    double leaky_slope = 0.01;
    std::uint64_t seed = 0;

    std::vector<std::size_t> channels() const {
        if (!channel_progression.empty()) return channel_progression;
        std::vector<std::size_t> ch;
        std::size_t c = base_filters;
        for (std::size_t r = 0; r < levels; ++r) {
            ch.push_back(std::min(c, max_channels));
            c *= 2;
        }
        return ch;
    }
    std::size_t downsamplings() const { return levels - 1; }
    /// Decoder outputs that carry a segmentation head (level 0 is the output head).
    std::size_t supervised_levels() const { return std::max<std::size_t>(1, std::min(deep_supervision_levels, levels - 1)); }

    void validate() const {
        if (levels < 2) throw Error("network needs at least two resolution levels");
        if (base_filters < 1) throw Error("base_filters must be positive");
        const auto ch = channels();
        if (ch.size() != levels)
            throw Error("channel progression has " + std::to_string(ch.size()) + " entries for " +
                        std::to_string(levels) + " levels");
        if (ch.front() != base_filters) throw Error("channel progression must start at base_filters");
        if (deep_supervision_levels < 1) throw Error("deep supervision needs at least the output head");
    }
};

/// What a parameter tensor is, for accounting and weight-decay exemptions.
enum class ParamRole { input, conv, channelwise, pointwise, down, up, norm, head };

struct ParamSlot {
    std::string name;
    Shape shape;
    ParamRole role;
    std::size_t fan_in = 1;
    bool is_gain = false;
};

template <class T>
class ModelState {
public:
    NetworkConfig config;
    std::vector<DomainSpec> domains;
    std::map<std::string, Var<T>> params;
    std::set<std::string> frozen;

    bool has_domain(const std::string& id) const {
        return std::any_of(domains.begin(), domains.end(), [&](const DomainSpec& d) { return d.id == id; });
    }
    const DomainSpec& domain(const std::string& id) const {
        for (const auto& d : domains)
            if (d.id == id) return d;
        throw Error("unknown domain '" + id + "'");
    }
    const Var<T>& param(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw Error("missing parameter " + name);
        return it->second;
    }
    Var<T>& param(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw Error("missing parameter " + name);
        return it->second;
    }
};

/// "shared" or the owning domain id.
inline std::string partition_of(const std::string& name) {
    if (name.rfind("shared/", 0) == 0) return "shared";
    if (name.rfind("domain/", 0) == 0) {
        const auto end = name.find('/', 7);
        if (end != std::string::npos) return name.substr(7, end - 7);
    }
    throw Error("parameter name outside the shared/domain partition: " + name);
}

inline ParamRole role_of(const std::string& name) {
    partition_of(name);
    const std::size_t start = name.rfind("shared/", 0) == 0 ? 7 : name.find('/', 7) + 1;
    const std::string rest = name.substr(start);
    const std::string site = rest.substr(0, rest.find('/'));
    auto ends = [&](std::string_view s) { return rest.size() >= s.size() && rest.compare(rest.size() - s.size(), s.size(), s) == 0; };
    if (ends("/gain") || ends("/bias")) return ParamRole::norm;
    if (site == "input") return ParamRole::input;
    if (site.rfind("head", 0) == 0) return ParamRole::head;
    if (site.rfind("down", 0) == 0) return ParamRole::down;
    if (site.rfind("up", 0) == 0) return ParamRole::up;
    if (ends("/channelwise")) return ParamRole::channelwise;
    if (ends("/pointwise")) return ParamRole::pointwise;
    return ParamRole::conv;
}

namespace netdetail {

inline std::string scoped(bool shared, const std::string& domain, const std::string& rest) {
    return shared ? "shared/" + rest : "domain/" + domain + "/" + rest;
}

/// Parameter layout needed to run one domain through the network.
class Layout {
public:
    Layout(const NetworkConfig& cfg, const DomainSpec& d) : cfg_(cfg), d_(d), ch_(cfg.channels()) {}

    bool adapters() const { return cfg_.mode == Mode::universal; }
    bool shared_trunk() const { return cfg_.mode != Mode::independent; }
    bool shared_norms() const { return cfg_.mode == Mode::shared; }

    std::string conv_weight(const std::string& site) const { return scoped(shared_trunk(), d_.id, site + "/weight"); }
    std::string channelwise(const std::string& site) const { return scoped(false, d_.id, site + "/channelwise"); }
    std::string pointwise(const std::string& site) const { return scoped(true, d_.id, site + "/pointwise"); }
    std::string gain(const std::string& norm) const { return scoped(shared_norms(), d_.id, norm + "/gain"); }
    std::string bias(const std::string& norm) const { return scoped(shared_norms(), d_.id, norm + "/bias"); }
    std::string domain_param(const std::string& rest) const { return scoped(false, d_.id, rest); }

    std::vector<ParamSlot> slots() const {
        std::vector<ParamSlot> out;
        const std::size_t L = cfg_.levels;
        auto norm = [&](const std::string& n, std::size_t c) {
            out.push_back({gain(n), {c}, ParamRole::norm, 1, true});
            out.push_back({bias(n), {c}, ParamRole::norm, 1, false});
        };
        auto site = [&](const std::string& s, std::size_t cin, std::size_t cout) {
            if (adapters()) {
                out.push_back({channelwise(s), {cin, 3, 3, 3}, ParamRole::channelwise, 27, false});
                out.push_back({pointwise(s), {cout, cin}, ParamRole::pointwise, cin, false});
            } else {
                out.push_back({conv_weight(s), {cout, cin, 3, 3, 3}, ParamRole::conv, 27 * cin, false});
            }
        };
        out.push_back({domain_param("input/weight"), {ch_[0], d_.modalities, 3, 3, 3}, ParamRole::input,
                       27 * d_.modalities, false});
        out.push_back({domain_param("input/norm/gain"), {ch_[0]}, ParamRole::norm, 1, true});
        out.push_back({domain_param("input/norm/bias"), {ch_[0]}, ParamRole::norm, 1, false});
        for (std::size_t r = 0; r + 1 < L; ++r) {
            const std::string e = "enc" + std::to_string(r);
            site(e + "/conv1", ch_[r], ch_[r]);
            norm(e + "/norm1", ch_[r]);
            site(e + "/conv2", ch_[r], ch_[r]);
            norm(e + "/norm2", ch_[r]);
            const std::string dn = "down" + std::to_string(r);
            out.push_back({scoped(shared_trunk(), d_.id, dn + "/weight"), {ch_[r + 1], ch_[r], 3, 3, 3}, ParamRole::down,
                           27 * ch_[r], false});
            norm(dn + "/norm", ch_[r + 1]);
        }
        site("bottleneck/conv1", ch_[L - 1], ch_[L - 1]);
        norm("bottleneck/norm1", ch_[L - 1]);
        site("bottleneck/conv2", ch_[L - 1], ch_[L - 1]);
        norm("bottleneck/norm2", ch_[L - 1]);
        for (std::size_t r = L - 1; r-- > 0;) {
            const std::string up = "up" + std::to_string(r);
            out.push_back({scoped(shared_trunk(), d_.id, up + "/weight"), {ch_[r + 1], ch_[r], 2, 2, 2}, ParamRole::up,
                           ch_[r + 1], false});
            norm(up + "/norm", ch_[r]);
            const std::string dec = "dec" + std::to_string(r);
            site(dec + "/conv1", 2 * ch_[r], ch_[r]);
            norm(dec + "/norm1", ch_[r]);
            site(dec + "/conv2", ch_[r], ch_[r]);
            norm(dec + "/norm2", ch_[r]);
        }
        for (std::size_t r = 0; r < cfg_.supervised_levels(); ++r)
            out.push_back({domain_param("head" + std::to_string(r) + "/weight"), {d_.classes, ch_[r]}, ParamRole::head,
                           ch_[r], false});
        return out;
    }

private:
    const NetworkConfig& cfg_;
    const DomainSpec& d_;
    std::vector<std::size_t> ch_;
};

template <class T>
Tensor<T> init_param(const ParamSlot& slot, std::uint64_t seed) {
    Tensor<T> t(slot.shape);
    if (slot.role == ParamRole::norm) {
        t.fill(slot.is_gain ? T(1) : T(0));
        return t;
    }
    Rng rng(derive_seed(seed, slot.name));
    const double stddev = std::sqrt(2.0 / double(slot.fan_in));
    for (auto& v : t.values()) v = static_cast<T>(stddev * normal(rng));
    return t;
}

template <class T>
std::size_t allocate_domain(ModelState<T>& model, const DomainSpec& spec) {
    std::size_t added = 0;
    for (const auto& slot : Layout(model.config, spec).slots()) {
        auto it = model.params.find(slot.name);
        if (it != model.params.end()) {
            if (it->second.shape() != slot.shape)
                throw Error("parameter " + slot.name + " already exists with shape " + to_string(it->second.shape()) +
                            ", domain " + spec.id + " needs " + to_string(slot.shape));
            continue;
        }
        model.params.emplace(slot.name, Var<T>::parameter(init_param<T>(slot, model.config.seed)));
        added += numel(slot.shape);
    }
    return added;
}

}  // namespace netdetail

/// Parameter slots one domain's forward pass reads.
inline std::vector<ParamSlot> parameter_slots(const NetworkConfig& cfg, const DomainSpec& spec) {
    return netdetail::Layout(cfg, spec).slots();
}

template <class T>
ModelState<T> build_model(const NetworkConfig& config, const std::vector<DomainSpec>& domains) {
    config.validate();
    if (domains.empty()) throw Error("build_model: at least one domain is required");
    std::set<std::string> ids;
    for (const auto& d : domains) {
        d.validate();
        if (!ids.insert(d.id).second) throw Error("duplicate domain id '" + d.id + "'");
        const std::size_t unit = std::size_t{1} << config.downsamplings();
        for (std::size_t a = 0; a < 3; ++a)
            if (d.patch_shape[a] % unit != 0)
                throw Error("domain " + d.id + ": patch extent " + std::to_string(d.patch_shape[a]) + " too small for " +
                            std::to_string(config.downsamplings()) + " halvings");
    }
    if (config.mode != Mode::independent)
        for (const auto& d : domains)
            if (d.patch_shape != domains.front().patch_shape)
                throw Error("shared and universal models need a common patch shape; domain " + d.id + " differs");
    ModelState<T> model;
    model.config = config;
    model.domains = domains;
    for (const auto& d : domains) netdetail::allocate_domain(model, d);
    return model;
}

/// Segmentation logits (classes x D x H x W) of one domain for one patch.
template <class T>
Var<T> forward(const ModelState<T>& model, const std::string& domain_id, const Var<T>& patch, Tape<T>& tape) {
    const auto& spec = model.domain(domain_id);
    const auto& cfg = model.config;
    const auto& xs = patch.shape();
    if (xs.size() != 4) throw Error("forward: patch must be C x D x H x W, got " + to_string(xs));
    if (xs[0] != spec.modalities)
        throw Error("forward: domain " + domain_id + " expects " + std::to_string(spec.modalities) +
                    " modality channels, patch has " + std::to_string(xs[0]));
    const std::size_t unit = std::size_t{1} << cfg.downsamplings();
    for (std::size_t a = 1; a < 4; ++a)
        if (xs[a] % unit != 0)
            throw Error("forward: spatial extent " + std::to_string(xs[a]) + " not divisible by " + std::to_string(unit));

    const netdetail::Layout layout(cfg, spec);
    const T eps = static_cast<T>(cfg.norm_eps);
    const T slope = static_cast<T>(cfg.leaky_slope);
    auto P = [&](const std::string& name) -> const Var<T>& { return model.param(name); };
    auto norm = [&](const Var<T>& x, const std::string& n) {
        return instance_norm(tape, x, P(layout.gain(n)), P(layout.bias(n)), eps);
    };
    auto act = [&](const Var<T>& x) { return leaky_relu(tape, x, slope); };
    auto site = [&](const Var<T>& x, const std::string& s) {
        if (layout.adapters())
            return pointwise_conv3d(tape, channelwise_conv3d(tape, x, P(layout.channelwise(s))), P(layout.pointwise(s)));
        return conv3d(tape, x, P(layout.conv_weight(s)));
    };
    auto residual = [&](const Var<T>& x, const std::string& b) {
        auto h = act(norm(site(x, b + "/conv1"), b + "/norm1"));
        h = norm(site(h, b + "/conv2"), b + "/norm2");
        return act(add(tape, x, h));
    };

    const std::size_t L = cfg.levels;
    auto x = act(instance_norm(tape, conv3d(tape, patch, P(layout.domain_param("input/weight"))),
                               P(layout.domain_param("input/norm/gain")), P(layout.domain_param("input/norm/bias")), eps));
    std::vector<Var<T>> skips;
    for (std::size_t r = 0; r + 1 < L; ++r) {
        x = residual(x, "enc" + std::to_string(r));
        skips.push_back(x);
        const std::string dn = "down" + std::to_string(r);
        x = act(norm(conv3d(tape, x, P(layout.conv_weight(dn)), 2), dn + "/norm"));
    }
    x = residual(x, "bottleneck");

    std::vector<Var<T>> decoded(L - 1);
    for (std::size_t r = L - 1; r-- > 0;) {
        const std::string up = "up" + std::to_string(r);
        auto u = act(norm(transposed_conv3d(tape, x, P(layout.conv_weight(up))), up + "/norm"));
        auto cat = concat_channels(tape, u, skips[r]);
        const std::string dec = "dec" + std::to_string(r);
        auto reduced = act(norm(site(cat, dec + "/conv1"), dec + "/norm1"));
        auto h = norm(site(reduced, dec + "/conv2"), dec + "/norm2");
        x = act(add(tape, reduced, h));
        decoded[r] = x;
    }

    // Deep supervision: heads on the finest decoder levels, coarser maps are
    // upsampled and summed into the next finer one.
    const std::size_t S = cfg.supervised_levels();
    Var<T> logits;
    for (std::size_t r = S; r-- > 0;) {
        auto head = pointwise_conv3d(tape, decoded[r], P(layout.domain_param("head" + std::to_string(r) + "/weight")));
        logits = logits.defined() ? add(tape, upsample_nearest2(tape, logits), head) : head;
    }
    return logits;
}

enum class CountScope { comparable, total, per_domain_added };

inline CountScope parse_scope(const std::string& s) {
    if (s == "comparable") return CountScope::comparable;
    if (s == "total") return CountScope::total;
    if (s == "per-domain-added") return CountScope::per_domain_added;
    throw Error("unknown parameter scope '" + s + "' (expected comparable, total or per-domain-added)");
}

/// Comparable scope leaves out the input layer, the output and deep-supervision
/// heads, and normalization affines.
inline bool in_comparable_scope(ParamRole role) {
    return role != ParamRole::input && role != ParamRole::head && role != ParamRole::norm;
}

/// Enumerates parameter elements. per_domain_added counts the parameters owned
/// by `domain` (default: the most recently registered domain).
template <class T>
std::size_t count_parameters(const ModelState<T>& model, CountScope scope, std::optional<std::string> domain = {}) {
    std::size_t n = 0;
    const std::string owner = domain ? *domain : model.domains.back().id;
    if (scope == CountScope::per_domain_added) model.domain(owner);
    for (const auto& [name, v] : model.params) {
        switch (scope) {
            case CountScope::total: n += v.value().size(); break;
            case CountScope::comparable:
                if (in_comparable_scope(role_of(name))) n += v.value().size();
                break;
            case CountScope::per_domain_added:
                if (partition_of(name) == owner) n += v.value().size();
                break;
        }
    }
    return n;
}

/// Closed-form accounting by convolution site: 27*C*C' per standard site and
/// 27*C*T + C*C' per adapter site with T domains sharing it.
struct SiteCounts {
    std::size_t standard_sites = 0;  // elements in stride-1 standard 3x3x3 sites
    std::size_t adapter_sites = 0;   // elements in adapter sites
    std::size_t down = 0;            // stride-2 convolutions
    std::size_t up = 0;              // transposed convolutions
    std::size_t norm = 0;
    std::size_t input_and_heads = 0;

    std::size_t comparable() const { return standard_sites + adapter_sites + down + up; }
    std::size_t total() const { return comparable() + norm + input_and_heads; }
};

inline SiteCounts closed_form_counts(const NetworkConfig& cfg, const std::vector<DomainSpec>& domains) {
    SiteCounts s;
    const auto ch = cfg.channels();
    const std::size_t L = cfg.levels, T = domains.size();
    // (C_in, C_out) of every stride-1 3x3x3 site.
    std::vector<std::pair<std::size_t, std::size_t>> sites;
    for (std::size_t r = 0; r + 1 < L; ++r) {
        sites.push_back({ch[r], ch[r]});
        sites.push_back({ch[r], ch[r]});
        sites.push_back({2 * ch[r], ch[r]});
        sites.push_back({ch[r], ch[r]});
    }
    sites.push_back({ch[L - 1], ch[L - 1]});
    sites.push_back({ch[L - 1], ch[L - 1]});
    std::size_t norm_channels = 0;  // per copy of the trunk norms
    for (std::size_t r = 0; r + 1 < L; ++r) norm_channels += 2 * ch[r] + ch[r + 1] + ch[r] + 2 * ch[r];
    norm_channels += 2 * ch[L - 1];

    const std::size_t copies = cfg.mode == Mode::independent ? T : 1;
    for (auto [c, cp] : sites) {
        if (cfg.mode == Mode::universal)
            s.adapter_sites += 27 * c * T + c * cp;
        else
            s.standard_sites += copies * 27 * c * cp;
    }
    for (std::size_t r = 0; r + 1 < L; ++r) {
        s.down += copies * 27 * ch[r] * ch[r + 1];
        s.up += copies * 8 * ch[r + 1] * ch[r];
    }
    const std::size_t norm_copies = cfg.mode == Mode::shared ? 1 : T;
    s.norm = norm_copies * 2 * norm_channels;
    for (const auto& d : domains) {
        s.norm += 2 * ch[0];
        s.input_and_heads += 27 * d.modalities * ch[0];
        for (std::size_t r = 0; r < cfg.supervised_levels(); ++r) s.input_and_heads += d.classes * ch[r];
    }
    return s;
}

/// Registers a new domain on a shared or universal model. Shared parameters are
/// left untouched and frozen. Returns the number of parameters added.
template <class T>
std::size_t add_domain(ModelState<T>& model, const DomainSpec& spec) {
    if (model.config.mode == Mode::independent)
        throw Error("add_domain: independent models have no shared parameters to reuse");
    spec.validate();
    if (model.has_domain(spec.id)) throw Error("add_domain: domain id '" + spec.id + "' already registered");
    if (spec.patch_shape != model.domains.front().patch_shape)
        throw Error("add_domain: new domain must use the model's patch shape");
    const std::size_t added = netdetail::allocate_domain(model, spec);
    model.domains.push_back(spec);
    for (const auto& [name, v] : model.params)
        if (partition_of(name) == "shared") model.frozen.insert(name);
    return added;
}

inline void to_json(nlohmann::json& j, const DomainSpec& d) {
    j = {{"id", d.id},
         {"modalities", d.modalities},
         {"classes", d.classes},
         {"median_spacing", d.median_spacing},
         {"patch_shape", {d.patch_shape.d, d.patch_shape.h, d.patch_shape.w}},
         {"levels", d.levels}};
}

inline void from_json(const nlohmann::json& j, DomainSpec& d) {
    d.id = j.at("id").get<std::string>();
    d.modalities = j.value("modalities", std::size_t{1});
    d.classes = j.value("classes", std::size_t{2});
    if (j.contains("median_spacing")) d.median_spacing = j.at("median_spacing").get<std::array<double, 3>>();
    if (j.contains("patch_shape")) {
        auto p = j.at("patch_shape").get<std::array<std::size_t, 3>>();
        d.patch_shape = {p[0], p[1], p[2]};
    }
    d.levels = j.value("levels", std::size_t{3});
}

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
    j = {{"base_filters", c.base_filters},
         {"levels", c.levels},
         {"mode", to_string(c.mode)},
         {"channel_progression", c.channel_progression},
         {"max_channels", c.max_channels},
         {"deep_supervision_levels", c.deep_supervision_levels},
         {"norm_eps", c.norm_eps},
         {"leaky_slope", c.leaky_slope},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
    NetworkConfig d;
    c.base_filters = j.value("base_filters", d.base_filters);
    c.levels = j.value("levels", d.levels);
    c.mode = parse_mode(j.value("mode", to_string(d.mode)));
    c.channel_progression = j.value("channel_progression", d.channel_progression);
    c.max_channels = j.value("max_channels", d.max_channels);
    c.deep_supervision_levels = j.value("deep_supervision_levels", d.deep_supervision_levels);
    c.norm_eps = j.value("norm_eps", d.norm_eps);
    c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
    c.seed = j.value("seed", d.seed);
}

}  // namespace u2net
