#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mcl/common.hpp"

namespace mcl {

// Feature table: one row per patch feature, with a class label and a
// slide/group id per row. Groups are the unit of train/test splitting.
struct LabeledFeatureSet {
    Eigen::MatrixXd features;           // N x D
    std::vector<int> labels;            // in [0, C)
    std::vector<std::string> group_ids; // N

    long size() const { return features.rows(); }
    long dim() const { return features.cols(); }

    int num_classes() const {
        int c = 0;
        for (int l : labels) c = std::max(c, l + 1);
        return c;
    }

    std::vector<long> rows_of_class(int c) const {
        std::vector<long> rows;
        for (long i = 0; i < size(); ++i)
            if (labels[i] == c) rows.push_back(i);
        return rows;
    }
};

inline void validate_feature_set(const LabeledFeatureSet& set) {
    const long n = set.features.rows();
    if (static_cast<long>(set.labels.size()) != n ||
        static_cast<long>(set.group_ids.size()) != n)
        throw DataError("labels/group_ids length does not match feature row count");
    if (n > 0 && set.features.cols() < 1)
        throw DataError("feature dimension must be >= 1");
    if (!set.features.allFinite())
        throw DataError("feature matrix contains non-finite values");
    std::set<int> seen;
    for (int l : set.labels) {
        if (l < 0) throw DataError("negative class label");
        seen.insert(l);
    }
    const int c = set.num_classes();
    for (int l = 0; l < c; ++l)
        if (!seen.count(l))
            throw DataError("class " + std::to_string(l) + " has no samples");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace detail

// CSV schema: header "group_id,label,f0,...,f{D-1}", one row per feature.
inline LabeledFeatureSet load_feature_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);

    std::string line;
    if (!std::getline(in, line))
        throw ParseError(path + ":1: empty file, expected header");

    const auto header = detail::split_csv_line(line);
    if (header.size() < 3 || header[0] != "group_id" || header[1] != "label")
        throw ParseError(path + ":1: bad header, expected group_id,label,f0,...");
    const long dim = static_cast<long>(header.size()) - 2;
    for (long j = 0; j < dim; ++j)
        if (header[j + 2] != "f" + std::to_string(j))
            throw ParseError(path + ":1: bad feature column name '" + header[j + 2] + "'");

    std::vector<std::string> groups;
    std::vector<int> labels;
    std::vector<double> values;
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        const std::string where = path + ":" + std::to_string(line_no) + ": ";
        if (static_cast<long>(fields.size()) != dim + 2)
            throw ParseError(where + "expected " + std::to_string(dim + 2) +
                             " columns, got " + std::to_string(fields.size()));
        long label = 0;
        if (!parse_int(fields[1], label) || label < 0)
            throw ParseError(where + "bad label '" + fields[1] + "'");
        for (long j = 0; j < dim; ++j) {
            double v = 0.0;
            if (!parse_double(fields[j + 2], v))
                throw ParseError(where + "non-numeric feature cell '" + fields[j + 2] + "'");
            if (!std::isfinite(v))
                throw ParseError(where + "non-finite feature cell '" + fields[j + 2] + "'");
            values.push_back(v);
        }
        groups.push_back(fields[0]);
        labels.push_back(static_cast<int>(label));
    }

    LabeledFeatureSet set;
    const long n = static_cast<long>(labels.size());
    set.features.resize(n, dim);
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < dim; ++j) set.features(i, j) = values[i * dim + j];
    set.labels = std::move(labels);
    set.group_ids = std::move(groups);
    validate_feature_set(set);
    return set;
}

inline void save_feature_table(const LabeledFeatureSet& set, const std::string& path) {
    validate_feature_set(set);
    for (const auto& g : set.group_ids)
        if (g.find(',') != std::string::npos || g.find('\n') != std::string::npos)
            throw DataError("group_id '" + g + "' contains a CSV delimiter");

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "group_id,label";
    for (long j = 0; j < set.dim(); ++j) out << ",f" << j;
    out << "\n";
    for (long i = 0; i < set.size(); ++i) {
        out << set.group_ids[i] << "," << set.labels[i];
        for (long j = 0; j < set.dim(); ++j)
            out << "," << format_double(set.features(i, j));
        out << "\n";
    }
    if (!out) throw IoError("write failed for " + path);
}

// Two interleaved spiral arms in 3-D (phase-shifted by pi, lifted gently in z);
// Euclidean neighbors can cross arms while geodesics follow them. The radius
// starts at 0.35 so even the innermost windings keep a curvature radius well
// above the arm gap, and points are placed uniformly in arc length. Group ids
// cycle within each class so every group covers the whole arm.
inline LabeledFeatureSet gen_interleaved_manifolds(long n_per_class, double noise,
                                                   double turns, std::uint64_t seed,
                                                   long groups_per_class = 10,
                                                   long lift_dim = 3) {
    if (n_per_class < 4) throw ConfigError("n_per_class must be >= 4");
    if (noise < 0) throw ConfigError("noise must be >= 0");
    if (turns <= 0) throw ConfigError("turns must be > 0");
    if (groups_per_class < 1) throw ConfigError("groups_per_class must be >= 1");
    if (lift_dim < 3) throw ConfigError("lift_dim must be >= 3");

    const double r0 = 0.35;
    const double span = 2.0 * std::numbers::pi * turns;
    const double slope = (1.0 - r0) / span;  // dr/dtheta
    // arc length s(x) ~ r0*x + slope*x^2/2 for x = theta - theta0
    const double arc_total = r0 * span + 0.5 * slope * span * span;

    auto rng = make_rng(derive_seed(seed, 0x5049524cULL));
    std::normal_distribution<double> gauss(0.0, 1.0);

    const long n = 2 * n_per_class;
    Eigen::MatrixXd pts(n, 3);
    std::vector<int> labels(n);
    std::vector<std::string> groups(n);

    long row = 0;
    for (int c = 0; c < 2; ++c) {
        const double phase = c * std::numbers::pi;
        for (long i = 0; i < n_per_class; ++i, ++row) {
            const double u = (i + 0.5) / static_cast<double>(n_per_class);
            // invert s(x) = u * arc_total
            const double x =
                (std::sqrt(r0 * r0 + 2.0 * slope * u * arc_total) - r0) / slope;
            const double r = r0 + slope * x;
            pts(row, 0) = r * std::cos(x + phase) + noise * gauss(rng);
            pts(row, 1) = r * std::sin(x + phase) + noise * gauss(rng);
            pts(row, 2) = 0.3 * u + noise * gauss(rng);
            labels[row] = c;
            groups[row] = "c" + std::to_string(c) + "_g" +
                          std::to_string(i % groups_per_class);
        }
    }

    LabeledFeatureSet set;
    set.labels = std::move(labels);
    set.group_ids = std::move(groups);
    if (lift_dim == 3) {
        set.features = std::move(pts);
    } else {
        // lift into lift_dim via a random orthonormal basis (QR of a Gaussian)
        auto lift_rng = make_rng(derive_seed(seed, 0x4c494654ULL));
        Eigen::MatrixXd g(lift_dim, 3);
        for (long i = 0; i < lift_dim; ++i)
            for (long j = 0; j < 3; ++j) g(i, j) = gauss(lift_rng);
        Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() *
                            Eigen::MatrixXd::Identity(lift_dim, 3);
        set.features = pts * q.transpose();
    }
    validate_feature_set(set);
    return set;
}

// Splits at group granularity, stratified per class; no group appears in both
// halves. Each class keeps at least one group on each side.
inline std::pair<LabeledFeatureSet, LabeledFeatureSet>
split_by_group(const LabeledFeatureSet& set, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("train_fraction must be in (0,1)");
    validate_feature_set(set);

    std::map<std::string, int> group_label;
    for (long i = 0; i < set.size(); ++i) {
        auto [it, inserted] = group_label.emplace(set.group_ids[i], set.labels[i]);
        if (!inserted && it->second != set.labels[i])
            throw DataError("group '" + set.group_ids[i] + "' spans multiple classes");
    }

    std::map<int, std::vector<std::string>> groups_by_class;
    for (const auto& [g, l] : group_label) groups_by_class[l].push_back(g);

    // Per-class train counts via largest-remainder apportionment: the overall
    // train share tracks train_fraction while every class keeps at least one
    // group on each side.
    struct Alloc {
        int label;
        std::vector<std::string> groups;
        long take;
        double rem;
    };
    std::vector<Alloc> allocs;
    long total_groups = 0;
    auto rng = make_rng(derive_seed(seed, 0x53504c49ULL));
    for (auto& [label, groups] : groups_by_class) {
        if (groups.size() < 2)
            throw DataError("class " + std::to_string(label) +
                            " has a single group; cannot split by group");
        std::sort(groups.begin(), groups.end());
        std::shuffle(groups.begin(), groups.end(), rng);
        const double exact = train_fraction * static_cast<double>(groups.size());
        Alloc a{label, groups, static_cast<long>(std::floor(exact)),
                exact - std::floor(exact)};
        a.take = std::clamp(a.take, 1L, static_cast<long>(a.groups.size()) - 1);
        total_groups += static_cast<long>(a.groups.size());
        allocs.push_back(std::move(a));
    }
    const long classes = static_cast<long>(allocs.size());
    long target = std::lround(train_fraction * static_cast<double>(total_groups));
    target = std::clamp(target, classes, total_groups - classes);
    long current = 0;
    for (const auto& a : allocs) current += a.take;
    while (current < target) {
        Alloc* best = nullptr;
        for (auto& a : allocs) {
            if (a.take >= static_cast<long>(a.groups.size()) - 1) continue;
            if (!best || a.rem > best->rem) best = &a;
        }
        if (!best) break;
        ++best->take;
        best->rem -= 1.0;
        ++current;
    }
    while (current > target) {
        Alloc* best = nullptr;
        for (auto& a : allocs) {
            if (a.take <= 1) continue;
            if (!best || a.rem < best->rem) best = &a;
        }
        if (!best) break;
        --best->take;
        best->rem += 1.0;
        --current;
    }

    std::set<std::string> train_groups;
    for (const auto& a : allocs)
        for (long i = 0; i < a.take; ++i) train_groups.insert(a.groups[i]);

    std::vector<long> train_rows, test_rows;
    for (long i = 0; i < set.size(); ++i) {
        if (train_groups.count(set.group_ids[i]))
            train_rows.push_back(i);
        else
            test_rows.push_back(i);
    }

    auto take_rows = [&set](const std::vector<long>& rows) {
        LabeledFeatureSet out;
        out.features.resize(static_cast<long>(rows.size()), set.dim());
        out.labels.reserve(rows.size());
        out.group_ids.reserve(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) {
            out.features.row(static_cast<long>(i)) = set.features.row(rows[i]);
            out.labels.push_back(set.labels[rows[i]]);
            out.group_ids.push_back(set.group_ids[rows[i]]);
        }
        return out;
    };
    return {take_rows(train_rows), take_rows(test_rows)};
}

}  // namespace mcl
