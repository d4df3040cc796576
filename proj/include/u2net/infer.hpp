#pragma once

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "manifest.hpp"
#include "netarch.hpp"
#include "sampling.hpp"

namespace u2net {

/// Window start positions along one axis: multiples of `stride`, with the last
/// window flush against the end.
inline std::vector<std::size_t> window_corners(std::size_t extent, std::size_t patch, std::size_t stride) {
    if (patch > extent) throw Error("window_corners: patch larger than extent");
    stride = std::max<std::size_t>(1, stride);
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c + patch < extent; c += stride) out.push_back(c);
    out.push_back(extent - patch);
    return out;
}

/// Class probabilities (K x D x H x W) of one patch.
template <class T>
Tensor<float> predict_patch(const ModelState<T>& model, const std::string& domain, const Tensor<float>& patch) {
    auto tape = Tape<T>::inference();
    auto probs = softmax_channels(tape, forward(model, domain, Var<T>(patch.template cast<T>()), tape));
    return probs.value().template cast<float>();
}

inline Volume argmax_labels(const Tensor<float>& probs, const Spacing& spacing) {
    const std::size_t K = probs.channels();
    const Extent3 e = probs.spatial();
    const std::size_t n = e.voxels();
    Volume out{Tensor<float>(volume_shape(1, e)), spacing, VolumeKind::label};
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (probs[k * n + i] > probs[best * n + i]) best = k;
        out.data[i] = float(best);
    }
    return out;
}

/// Averaged class probabilities over half-overlapping windows, at the image's
/// resolution. Images smaller than the patch are zero-padded and un-padded.
template <class T>
Tensor<float> sliding_window_probs(const ModelState<T>& model, const std::string& domain, const Volume& image,
                                   Extent3 patch, std::size_t workers = num_workers()) {
    const auto& spec = model.domain(domain);
    if (image.channels() != spec.modalities)
        throw Error("inference: domain " + domain + " expects " + std::to_string(spec.modalities) + " modalities");
    BoundingBox placed;
    const Volume padded = pad_to(image, patch, &placed);
    const Extent3 e = padded.extent();
    std::vector<BoundingBox> windows;
    for (auto z : window_corners(e.d, patch.d, patch.d / 2))
        for (auto y : window_corners(e.h, patch.h, patch.h / 2))
            for (auto x : window_corners(e.w, patch.w, patch.w / 2))
                windows.push_back({{z, y, x}, {z + patch.d, y + patch.h, x + patch.w}});

    const std::size_t K = spec.classes;
    Tensor<float> sum(volume_shape(K, e));
    std::vector<float> count(e.voxels(), 0.0f);
    workers = std::clamp<std::size_t>(workers, 1, windows.size());
    // Windows are predicted in groups of `workers` and accumulated in window order.
    for (std::size_t g = 0; g < windows.size(); g += workers) {
        const std::size_t n = std::min(workers, windows.size() - g);
        std::vector<Tensor<float>> probs(n);
        std::vector<std::exception_ptr> errors(n);
        auto run = [&](std::size_t j) {
            try {
                probs[j] = predict_patch(model, domain, crop(padded, windows[g + j]).data);
            } catch (...) {
                errors[j] = std::current_exception();
            }
        };
        if (n == 1) {
            run(0);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t j = 0; j < n; ++j) pool.emplace_back(run, j);
            for (auto& t : pool) t.join();
        }
        for (auto& err : errors)
            if (err) std::rethrow_exception(err);
        for (std::size_t j = 0; j < n; ++j) {
            const auto& w = windows[g + j];
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t z = 0; z < patch.d; ++z)
                    for (std::size_t y = 0; y < patch.h; ++y)
                        for (std::size_t x = 0; x < patch.w; ++x)
                            sum.at(k, w.lo[0] + z, w.lo[1] + y, w.lo[2] + x) += probs[j].at(k, z, y, x);
            for (std::size_t z = 0; z < patch.d; ++z)
                for (std::size_t y = 0; y < patch.h; ++y)
                    for (std::size_t x = 0; x < patch.w; ++x)
                        count[((w.lo[0] + z) * e.h + w.lo[1] + y) * e.w + w.lo[2] + x] += 1.0f;
        }
    }
    const std::size_t n = e.voxels();
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < n; ++i) sum[k * n + i] /= count[i];
    Volume avg{std::move(sum), image.spacing, VolumeKind::image};
    return placed == BoundingBox::full(e) ? avg.data : crop(avg, placed).data;
}

template <class T>
Volume sliding_window_infer(const ModelState<T>& model, const std::string& domain, const Volume& image, Extent3 patch,
                            std::size_t workers = num_workers()) {
    return argmax_labels(sliding_window_probs(model, domain, image, patch, workers), image.spacing);
}

template <class T>
Volume sliding_window_infer(const ModelState<T>& model, const std::string& domain, const Volume& image) {
    return sliding_window_infer(model, domain, image, model.domain(domain).patch_shape);
}

/// 2|P n G| / (|P| + |G|) for one class; 1 when both are empty.
inline double dice(const Volume& pred, const Volume& gt, std::size_t cls) {
    if (pred.data.shape() != gt.data.shape()) throw Error("dice: prediction and ground truth shapes differ");
    std::size_t p = 0, g = 0, both = 0;
    const float c = float(cls);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool a = pred.data[i] == c, b = gt.data[i] == c;
        p += a;
        g += b;
        both += a && b;
    }
    return p + g == 0 ? 1.0 : 2.0 * double(both) / double(p + g);
}

struct CaseScore {
    std::string id;
    std::vector<double> dice;  // foreground classes 1..C-1
};

struct DomainReport {
    std::string domain;
    std::size_t classes = 2;
    std::vector<CaseScore> cases;
    std::vector<double> mean_dice;  // per foreground class, averaged over cases
};

struct EvalReport {
    std::string model;
    std::vector<DomainReport> domains;

    /// Arithmetic mean over every structure column.
    double mean() const {
        double s = 0;
        std::size_t n = 0;
        for (const auto& d : domains)
            for (double v : d.mean_dice) s += v, ++n;
        return n ? s / double(n) : 0.0;
    }
};

/// Runs sliding-window inference over the test split of a preprocessed
/// dataset. Predictions are written as label volumes when `pred_dir` is set.
template <class T>
DomainReport evaluate_dataset(const ModelState<T>& model, const DatasetManifest& m,
                              const std::filesystem::path& pred_dir = {}) {
    if (!m.preprocessed) throw Error("dataset " + m.domain.id + " is not preprocessed");
    const auto tests = m.select(Split::test);
    if (tests.empty()) throw Error("dataset " + m.domain.id + " has no test split");
    const auto& spec = model.domain(m.domain.id);
    DomainReport r{m.domain.id, spec.classes, {}, std::vector<double>(spec.classes - 1, 0.0)};
    for (const auto* c : tests) {
        if (c->label.empty()) throw Error("test case " + c->id + " has no label");
        const Volume image = read_volume(m.resolve(c->image));
        const Volume gt = read_volume(m.resolve(c->label));
        const Volume pred = sliding_window_infer(model, m.domain.id, image);
        if (!pred_dir.empty()) write_volume(pred_dir / m.domain.id / (c->id + ".u2vol"), pred);
        CaseScore s{c->id, {}};
        for (std::size_t k = 1; k < spec.classes; ++k) {
            s.dice.push_back(dice(pred, gt, k));
            r.mean_dice[k - 1] += s.dice.back();
        }
        r.cases.push_back(std::move(s));
    }
    for (auto& v : r.mean_dice) v /= double(tests.size());
    return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json doms = nlohmann::json::array();
    for (const auto& d : r.domains) {
        nlohmann::json cases = nlohmann::json::array();
        for (const auto& c : d.cases) cases.push_back({{"id", c.id}, {"dice", c.dice}});
        doms.push_back({{"domain", d.domain}, {"classes", d.classes}, {"mean_dice", d.mean_dice}, {"cases", cases}});
    }
    return {{"model", r.model}, {"domains", doms}, {"mean_dice", r.mean()}};
}

/// Aligned text table: one column per structure plus the mean, Dice in percent.
inline std::string format_table(const std::vector<EvalReport>& rows) {
    if (rows.empty()) return "";
    std::vector<std::string> header{"Model"};
    for (const auto& d : rows.front().domains)
        for (std::size_t k = 1; k < d.classes; ++k) header.push_back(d.domain + ":c" + std::to_string(k));
    header.push_back("Mean");
    std::vector<std::vector<std::string>> cells{header};
    auto pct = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        std::vector<std::string> row{r.model};
        for (const auto& d : r.domains)
            for (double v : d.mean_dice) row.push_back(pct(v));
        row.push_back(pct(r.mean()));
        if (row.size() != header.size()) throw Error("format_table: rows cover different structures");
        cells.push_back(row);
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& row : cells)
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    std::ostringstream os;
    for (const auto& row : cells) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) os << "  ";
            if (i == 0)
                os << std::left << std::setw(int(width[i])) << row[i];
            else
                os << std::right << std::setw(int(width[i])) << row[i];
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace u2net
