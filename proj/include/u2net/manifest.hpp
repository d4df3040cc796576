#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "netarch.hpp"
#include "preprocess.hpp"
#include "sampling.hpp"
#include "volume.hpp"

namespace u2net {

enum class Split { train, test };

struct CaseEntry {
    std::string id;
    std::string image;  // relative to the manifest directory
    std::string label;  // empty when unlabeled (test cases only)
    Spacing spacing{1.0, 1.0, 1.0};
    Split split = Split::train;
    std::optional<BoundingBox> crop_box;
    std::optional<Extent3> original_extent;
};

struct DatasetManifest {
    DomainSpec domain;
    std::vector<CaseEntry> cases;
    double train_fraction = 0.8;
    bool preprocessed = false;
    std::optional<Spacing> median_spacing;
    std::filesystem::path root;  // directory holding the manifest; not serialized

    std::size_t count(Split s) const {
        return static_cast<std::size_t>(std::count_if(cases.begin(), cases.end(), [&](const CaseEntry& c) { return c.split == s; }));
    }
    std::vector<const CaseEntry*> select(Split s) const {
        std::vector<const CaseEntry*> out;
        for (const auto& c : cases)
            if (c.split == s) out.push_back(&c);
        return out;
    }
    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }

    void validate() const {
        domain.validate();
        for (const auto& c : cases)
            if (c.split == Split::train && c.label.empty()) throw Error("train case " + c.id + " has no label");
        const double expect = train_fraction * double(cases.size());
        if (std::abs(double(count(Split::train)) - expect) > 1.0)
            throw Error("manifest split has " + std::to_string(count(Split::train)) + " train cases, expected about " +
                        std::to_string(expect));
    }
};

inline void to_json(nlohmann::json& j, const CaseEntry& c) {
    j = {{"id", c.id}, {"image", c.image}, {"spacing", c.spacing}, {"split", c.split == Split::train ? "train" : "test"}};
    if (!c.label.empty()) j["label"] = c.label;
    if (c.crop_box) j["crop_box"] = *c.crop_box;
    if (c.original_extent) j["original_extent"] = {c.original_extent->d, c.original_extent->h, c.original_extent->w};
}

inline void from_json(const nlohmann::json& j, CaseEntry& c) {
    c.id = j.at("id").get<std::string>();
    c.image = j.at("image").get<std::string>();
    c.label = j.value("label", std::string{});
    c.spacing = j.at("spacing").get<Spacing>();
    const auto s = j.value("split", std::string("train"));
    if (s != "train" && s != "test") throw Error("case " + c.id + ": split must be train or test");
    c.split = s == "train" ? Split::train : Split::test;
    if (j.contains("crop_box")) c.crop_box = j.at("crop_box").get<BoundingBox>();
    if (j.contains("original_extent")) {
        auto e = j.at("original_extent").get<std::array<std::size_t, 3>>();
        c.original_extent = Extent3{e[0], e[1], e[2]};
    }
}

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
    j = {{"domain", m.domain}, {"cases", m.cases}, {"train_fraction", m.train_fraction}, {"preprocessed", m.preprocessed}};
    if (m.median_spacing) j["median_spacing"] = *m.median_spacing;
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
    m.domain = j.at("domain").get<DomainSpec>();
    m.cases = j.at("cases").get<std::vector<CaseEntry>>();
    m.train_fraction = j.value("train_fraction", 0.8);
    m.preprocessed = j.value("preprocessed", false);
    if (j.contains("median_spacing")) m.median_spacing = j.at("median_spacing").get<Spacing>();
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    DatasetManifest m;
    try {
        m = nlohmann::json::parse(read_file(path)).get<DatasetManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(path.string() + ": malformed manifest: " + e.what());
    }
    m.root = path.parent_path();
    m.validate();
    return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    write_file_atomic(path, nlohmann::json(m).dump(2) + "\n");
}

/// Loads the training cases of a preprocessed manifest for patch sampling.
inline DomainData load_domain_data(const DatasetManifest& m, Extent3 extract_patch = {}) {
    if (!m.preprocessed) throw Error("dataset " + m.domain.id + " is not preprocessed; run the preprocess command first");
    DomainData d{m.domain, {}, extract_patch};
    for (const auto* c : m.select(Split::train))
        d.cases.push_back({c->id, read_volume(m.resolve(c->image)), read_volume(m.resolve(c->label))});
    return d;
}

/// Runs crop -> resample -> normalize over every case and writes the processed
/// dataset (volumes + manifest) under `out_dir`. A manifest that is already
/// preprocessed at its own median spacing is copied through unchanged.
inline DatasetManifest preprocess_dataset(const DatasetManifest& m, const std::filesystem::path& out_dir,
                                          std::ostream* log = nullptr) {
    m.validate();
    std::vector<Spacing> train_spacings;
    for (const auto* c : m.select(Split::train)) train_spacings.push_back(c->spacing);
    const Spacing target = median_spacing(train_spacings);
    DatasetManifest out = m;
    out.root = out_dir;
    out.preprocessed = true;
    out.median_spacing = target;
    out.domain.median_spacing = target;
    const bool already = m.preprocessed && std::all_of(m.cases.begin(), m.cases.end(), [&](const CaseEntry& c) {
        return c.spacing == target;
    });
    for (auto& c : out.cases) {
        const auto image_rel = "images/" + c.id + ".u2vol";
        const auto label_rel = "labels/" + c.id + ".u2vol";
        if (already) {
            write_file_atomic(out_dir / image_rel, read_file(m.resolve(c.image)));
            if (!c.label.empty()) write_file_atomic(out_dir / label_rel, read_file(m.resolve(c.label)));
        } else {
            Volume image = read_volume(m.resolve(c.image));
            Volume label;
            if (!c.label.empty()) {
                label = read_volume(m.resolve(c.label));
                if (label.kind != VolumeKind::label) throw Error("case " + c.id + ": label file is not a label volume");
                for (float v : label.data.values())
                    if (v >= float(m.domain.classes))
                        throw Error("case " + c.id + ": label value " + std::to_string(int(v)) + " outside [0, " +
                                    std::to_string(m.domain.classes) + ")");
            }
            if (image.kind != VolumeKind::image) throw Error("case " + c.id + ": image file is not an image volume");
            if (image.channels() != m.domain.modalities)
                throw Error("case " + c.id + ": expected " + std::to_string(m.domain.modalities) + " modalities");
            image.spacing = c.spacing;
            label.spacing = c.spacing;
            auto p = preprocess_case(image, label, target);
            write_volume(out_dir / image_rel, p.image);
            if (!label.empty()) write_volume(out_dir / label_rel, p.label);
            c.spacing = target;
            c.crop_box = p.box;
            c.original_extent = p.original_extent;
        }
        c.image = image_rel;
        if (!c.label.empty()) c.label = label_rel;
        if (log) {
            *log << m.domain.id << '/' << c.id;
            if (c.crop_box)
                *log << " crop [" << c.crop_box->lo[0] << ':' << c.crop_box->hi[0] << ", " << c.crop_box->lo[1] << ':'
                     << c.crop_box->hi[1] << ", " << c.crop_box->lo[2] << ':' << c.crop_box->hi[2] << ']';
            *log << (already ? " unchanged" : "") << '\n';
        }
    }
    save_manifest(out_dir / "manifest.json", out);
    return out;
}

}  // namespace u2net
