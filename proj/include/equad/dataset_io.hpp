#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "equad/graph.hpp"
#include "equad/hash.hpp"
#include "equad/version.hpp"

namespace equad {

inline constexpr int kDatasetFormatVersion = 1;

// Writes dir/data.jsonl (one graph per line) and dir/manifest.json.
inline void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream data(dir / "data.jsonl", std::ios::trunc);
    if (!data) throw IoError("save_dataset: cannot open " + (dir / "data.jsonl").string());

    std::size_t id = 0;
    auto write_split = [&](const std::vector<GraphInstance>& split) {
        for (const auto& g : split) {
            nlohmann::json edges = nlohmann::json::array();
            for (const auto& [u, v] : g.edges) edges.push_back({u, v});
            nlohmann::json x = nlohmann::json::array();
            for (std::uint32_t r = 0; r < g.num_nodes; ++r) {
                nlohmann::json row = nlohmann::json::array();
                for (std::uint32_t c = 0; c < g.feat_dim; ++c)
                    row.push_back(g.features[r * g.feat_dim + c]);
                x.push_back(std::move(row));
            }
            nlohmann::json line = {
                {"id", id++},
                {"n", g.num_nodes},
                {"edges", std::move(edges)},
                {"x", std::move(x)},
                {"y", g.label},
                {"meta",
                 {{"motif", g.motif_id},
                  {"base", g.base_id},
                  {"env", g.env_id},
                  {"corr", to_string(g.corr_group)},
                  {"inv_nodes", g.invariant_nodes}}}};
            data << line.dump() << "\n";
        }
    };
    write_split(bundle.train);
    write_split(bundle.val);
    write_split(bundle.test);
    data.close();
    if (!data) throw IoError("save_dataset: write failed for " + (dir / "data.jsonl").string());

    nlohmann::json manifest = {
        {"format_version", bundle.format_version},
        {"kind", bundle.kind},
        {"num_classes", bundle.num_classes},
        {"config", bundle.config_snapshot},
        {"splits",
         {{"train", {0, bundle.train.size()}},
          {"val", {bundle.train.size(), bundle.val_end()}},
          {"test", {bundle.val_end(), bundle.total()}}}},
        {"config_fingerprint", fingerprint(bundle.config_snapshot.dump())},
        {"code_version", kVersion}};
    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    if (!mf) throw IoError("save_dataset: cannot open " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";
}

inline DatasetBundle load_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("load_dataset: cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_dataset: bad manifest: " + std::string(e.what()));
    }
    if (!manifest.contains("format_version") ||
        manifest["format_version"].get<int>() != kDatasetFormatVersion)
        throw IoError("load_dataset: unsupported format_version in " +
                      (dir / "manifest.json").string());

    DatasetBundle bundle;
    bundle.format_version = manifest["format_version"].get<int>();
    bundle.kind = manifest.value("kind", "");
    bundle.num_classes = manifest["num_classes"].get<int>();
    bundle.config_snapshot = manifest["config"];
    const std::size_t train_end = manifest["splits"]["train"][1].get<std::size_t>();
    const std::size_t val_end = manifest["splits"]["val"][1].get<std::size_t>();
    const std::size_t total = manifest["splits"]["test"][1].get<std::size_t>();

    std::ifstream data(dir / "data.jsonl");
    if (!data) throw IoError("load_dataset: cannot open " + (dir / "data.jsonl").string());
    std::string line;
    std::size_t row = 0;
    std::vector<int> seen_labels;
    while (std::getline(data, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("load_dataset: malformed record at row " + std::to_string(row) + ": " +
                          e.what());
        }
        GraphInstance g;
        try {
            g.num_nodes = j.at("n").get<std::uint32_t>();
            for (const auto& e : j.at("edges"))
                g.edges.emplace_back(e[0].get<std::uint32_t>(), e[1].get<std::uint32_t>());
            const auto& x = j.at("x");
            g.feat_dim = x.empty() ? 0 : static_cast<std::uint32_t>(x[0].size());
            g.features.reserve(static_cast<std::size_t>(g.num_nodes) * g.feat_dim);
            for (const auto& r : x)
                for (const auto& v : r) g.features.push_back(v.get<double>());
            g.label = j.at("y").get<int>();
            const auto& meta = j.at("meta");
            g.motif_id = meta.at("motif").get<int>();
            g.base_id = meta.at("base").get<int>();
            g.env_id = meta.at("env").get<int>();
            g.corr_group = meta.at("corr").get<std::string>() == "high" ? CorrGroup::high
                                                                        : CorrGroup::low;
            g.invariant_nodes = meta.at("inv_nodes").get<std::vector<std::uint32_t>>();
        } catch (const nlohmann::json::exception& e) {
            throw IoError("load_dataset: schema violation at row " + std::to_string(row) + ": " +
                          e.what());
        }
        seen_labels.push_back(g.label);
        if (row < train_end)
            bundle.train.push_back(std::move(g));
        else if (row < val_end)
            bundle.val.push_back(std::move(g));
        else
            bundle.test.push_back(std::move(g));
        ++row;
    }
    if (row != total)
        throw IoError("load_dataset: manifest expects " + std::to_string(total) + " rows, found " +
                      std::to_string(row));

    int max_label = -1;
    for (int y : seen_labels) max_label = std::max(max_label, y);
    if (max_label >= bundle.num_classes)
        throw DataError("load_dataset: observed label " + std::to_string(max_label) +
                        " outside manifest class count " + std::to_string(bundle.num_classes));
    std::vector<char> present(static_cast<std::size_t>(bundle.num_classes), 0);
    for (int y : seen_labels)
        if (y >= 0) present[static_cast<std::size_t>(y)] = 1;
    for (int c = 0; c < bundle.num_classes; ++c)
        if (!present[static_cast<std::size_t>(c)])
            throw DataError("load_dataset: manifest declares class " + std::to_string(c) +
                            " but no such label occurs");
    return bundle;
}

}  // namespace equad
