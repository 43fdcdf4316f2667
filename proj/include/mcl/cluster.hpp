#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "mcl/common.hpp"
#include "mcl/dataio.hpp"
#include "mcl/graph.hpp"

namespace mcl {

enum class Linkage { single, complete, average };

inline Linkage parse_linkage(const std::string& s) {
    if (s == "single") return Linkage::single;
    if (s == "complete") return Linkage::complete;
    if (s == "average") return Linkage::average;
    throw ConfigError("unknown linkage '" + s + "'");
}

inline const char* linkage_name(Linkage l) {
    switch (l) {
        case Linkage::single: return "single";
        case Linkage::complete: return "complete";
        default: return "average";
    }
}

// Sub-class assignment of one class's samples, indices in [0, n).
struct SubclassPartition {
    std::vector<int> assignments;
    int n_subclasses = 0;
    int class_id = 0;
};

// Mean feature vector per sub-class of one class.
struct PrototypeSet {
    Eigen::MatrixXd prototypes;  // n x D
    int class_id = 0;
    std::vector<long> member_counts;
};

// Bottom-up merging on the geodesic matrix. Cluster ids equal the smallest
// member row index; among equal-distance pairs the lexicographically smallest
// (min id, max id) pair merges first. Pairs at +inf merge only once no finite
// pair remains, largest combined size first, then lowest ids.
inline SubclassPartition agglomerate(const GeodesicMatrix& m, int n, Linkage linkage,
                                     int class_id = 0,
                                     std::vector<double>* merge_distances = nullptr) {
    const long count = m.size();
    if (n < 1) throw ConfigError("target sub-class count must be >= 1");
    if (n > count) throw ConfigError("target sub-class count exceeds sample count");
    if (m.dist.rows() != m.dist.cols()) throw DataError("geodesic matrix not square");

    Eigen::MatrixXd d = m.dist;
    std::vector<char> active(count, 1);
    std::vector<long> size(count, 1);
    std::vector<std::vector<long>> members(count);
    for (long i = 0; i < count; ++i) members[i] = {i};

    long remaining = count;
    while (remaining > n) {
        long best_i = -1, best_j = -1;
        double best_d = kInf;
        for (long i = 0; i < count; ++i) {
            if (!active[i]) continue;
            for (long j = i + 1; j < count; ++j) {
                if (!active[j]) continue;
                if (d(i, j) < best_d) {
                    best_d = d(i, j);
                    best_i = i;
                    best_j = j;
                }
            }
        }
        if (best_i < 0) {
            // every remaining pair is at +inf: forced cross-component merge
            long best_size = -1;
            for (long i = 0; i < count; ++i) {
                if (!active[i]) continue;
                for (long j = i + 1; j < count; ++j) {
                    if (!active[j]) continue;
                    if (size[i] + size[j] > best_size) {
                        best_size = size[i] + size[j];
                        best_i = i;
                        best_j = j;
                    }
                }
            }
        }

        if (merge_distances) merge_distances->push_back(best_d);
        const long a = best_i, b = best_j;
        for (long o = 0; o < count; ++o) {
            if (!active[o] || o == a || o == b) continue;
            double nd;
            switch (linkage) {
                case Linkage::single: nd = std::min(d(a, o), d(b, o)); break;
                case Linkage::complete: nd = std::max(d(a, o), d(b, o)); break;
                default:
                    nd = (std::isinf(d(a, o)) || std::isinf(d(b, o)))
                             ? kInf
                             : (size[a] * d(a, o) + size[b] * d(b, o)) /
                                   static_cast<double>(size[a] + size[b]);
            }
            d(a, o) = nd;
            d(o, a) = nd;
        }
        size[a] += size[b];
        members[a].insert(members[a].end(), members[b].begin(), members[b].end());
        members[b].clear();
        active[b] = 0;
        --remaining;
    }

    SubclassPartition part;
    part.class_id = class_id;
    part.n_subclasses = n;
    part.assignments.assign(count, -1);
    int label = 0;
    for (long i = 0; i < count; ++i) {
        if (!active[i]) continue;
        for (long r : members[i]) part.assignments[r] = label;
        ++label;
    }
    return part;
}

inline PrototypeSet compute_prototypes(const Eigen::MatrixXd& features,
                                       const SubclassPartition& part) {
    const long n = features.rows();
    if (static_cast<long>(part.assignments.size()) != n)
        throw DataError("partition size does not match feature rows");

    PrototypeSet set;
    set.class_id = part.class_id;
    set.prototypes = Eigen::MatrixXd::Zero(part.n_subclasses, features.cols());
    set.member_counts.assign(part.n_subclasses, 0);
    for (long i = 0; i < n; ++i) {
        const int s = part.assignments[i];
        if (s < 0 || s >= part.n_subclasses)
            throw DataError("sub-class index out of range");
        set.prototypes.row(s) += features.row(i);
        ++set.member_counts[s];
    }
    for (int s = 0; s < part.n_subclasses; ++s) {
        if (set.member_counts[s] == 0)
            throw DataError("sub-class " + std::to_string(s) + " is empty");
        set.prototypes.row(s) /= static_cast<double>(set.member_counts[s]);
    }
    return set;
}

// One class's manifold state: which original rows belong to it, how they are
// partitioned, and the sub-class prototypes.
struct ClassManifold {
    int class_id = 0;
    std::vector<long> rows;  // original row indices, ascending
    SubclassPartition partition;
    PrototypeSet prototypes;
};

// kNN graph -> geodesics -> agglomerative sub-classes -> mean prototypes,
// per class, on the current embeddings.
inline std::vector<ClassManifold> refresh_manifold(const LabeledFeatureSet& set,
                                                   const Eigen::MatrixXd& embeddings,
                                                   int k, int n, Linkage linkage) {
    if (embeddings.rows() != set.size())
        throw ConfigError("embeddings not row-aligned with the feature set");
    const int classes = set.num_classes();
    std::vector<ClassManifold> out;
    out.reserve(classes);
    for (int c = 0; c < classes; ++c) {
        ClassManifold cm;
        cm.class_id = c;
        cm.rows = set.rows_of_class(c);
        const long nc = static_cast<long>(cm.rows.size());
        if (k >= nc)
            throw ConfigError("class " + std::to_string(c) + " has " +
                              std::to_string(nc) + " samples; needs > k=" +
                              std::to_string(k));
        if (n > nc)
            throw ConfigError("class " + std::to_string(c) + " has " +
                              std::to_string(nc) + " samples; needs >= n=" +
                              std::to_string(n));
        Eigen::MatrixXd feats(nc, embeddings.cols());
        for (long i = 0; i < nc; ++i) feats.row(i) = embeddings.row(cm.rows[i]);
        const auto graph = build_knn_graph(feats, k);
        const auto geo = geodesic_all_pairs(graph);
        cm.partition = agglomerate(geo, n, linkage, c);
        cm.prototypes = compute_prototypes(feats, cm.partition);
        out.push_back(std::move(cm));
    }
    return out;
}

// Appends the class mean (the "global" prototype) after the local ones; the
// appended row is not a valid sub-class assignment target.
inline void append_global_prototype(PrototypeSet& set) {
    long total = 0;
    for (long c : set.member_counts) total += c;
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(set.prototypes.cols());
    for (long s = 0; s < set.prototypes.rows(); ++s)
        mean += set.prototypes.row(s) * static_cast<double>(set.member_counts[s]);
    mean /= static_cast<double>(total);
    set.prototypes.conservativeResize(set.prototypes.rows() + 1, Eigen::NoChange);
    set.prototypes.row(set.prototypes.rows() - 1) = mean;
    set.member_counts.push_back(total);
}

// Lloyd's k-means; baseline sub-classing for the cosine/NT-Xent variant only.
// Farthest-first seeding (first center random, the rest maximize distance to
// the chosen set); empty clusters steal the farthest point.
inline SubclassPartition kmeans_partition(const Eigen::MatrixXd& features, int n,
                                          std::uint64_t seed, int class_id = 0) {
    const long count = features.rows();
    if (n < 1) throw ConfigError("k-means cluster count must be >= 1");
    if (n > count) throw ConfigError("k-means cluster count exceeds sample count");

    auto rng = make_rng(derive_seed(seed, 0x4b4d4e53ULL));
    Eigen::MatrixXd centers(n, features.cols());
    std::uniform_int_distribution<long> first(0, count - 1);
    centers.row(0) = features.row(first(rng));
    Eigen::VectorXd nearest_sq =
        (features.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int s = 1; s < n; ++s) {
        long far_i = 0;
        nearest_sq.maxCoeff(&far_i);
        centers.row(s) = features.row(far_i);
        nearest_sq = nearest_sq.cwiseMin(
            (features.rowwise() - centers.row(s)).rowwise().squaredNorm());
    }

    std::vector<int> assign(count, 0);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        for (long i = 0; i < count; ++i) {
            int best = 0;
            double best_d = (features.row(i) - centers.row(0)).squaredNorm();
            for (int s = 1; s < n; ++s) {
                const double d = (features.row(i) - centers.row(s)).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = s;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        std::vector<long> counts(n, 0);
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(n, features.cols());
        for (long i = 0; i < count; ++i) {
            sums.row(assign[i]) += features.row(i);
            ++counts[assign[i]];
        }
        for (int s = 0; s < n; ++s) {
            if (counts[s] > 0) {
                centers.row(s) = sums.row(s) / static_cast<double>(counts[s]);
                continue;
            }
            // steal the point farthest from its center
            long far_i = 0;
            double far_d = -1.0;
            for (long i = 0; i < count; ++i) {
                const double d = (features.row(i) - centers.row(assign[i])).squaredNorm();
                if (d > far_d) {
                    far_d = d;
                    far_i = i;
                }
            }
            centers.row(s) = features.row(far_i);
            assign[far_i] = s;
            changed = true;
        }
        if (!changed && iter > 0) break;
    }

    SubclassPartition part;
    part.class_id = class_id;
    part.n_subclasses = n;
    part.assignments = std::move(assign);
    return part;
}

inline std::vector<ClassManifold> refresh_kmeans(const LabeledFeatureSet& set,
                                                 const Eigen::MatrixXd& embeddings,
                                                 int n, std::uint64_t seed) {
    if (embeddings.rows() != set.size())
        throw ConfigError("embeddings not row-aligned with the feature set");
    const int classes = set.num_classes();
    std::vector<ClassManifold> out;
    out.reserve(classes);
    for (int c = 0; c < classes; ++c) {
        ClassManifold cm;
        cm.class_id = c;
        cm.rows = set.rows_of_class(c);
        const long nc = static_cast<long>(cm.rows.size());
        if (n > nc)
            throw ConfigError("class " + std::to_string(c) + " has " +
                              std::to_string(nc) + " samples; needs >= n=" +
                              std::to_string(n));
        Eigen::MatrixXd feats(nc, embeddings.cols());
        for (long i = 0; i < nc; ++i) feats.row(i) = embeddings.row(cm.rows[i]);
        cm.partition = kmeans_partition(feats, n, derive_seed(seed, c), c);
        cm.prototypes = compute_prototypes(feats, cm.partition);
        out.push_back(std::move(cm));
    }
    return out;
}

// Partition dump: "row_index,class,subclass" per sample row.
inline void dump_partition(const std::vector<ClassManifold>& state, std::ostream& out) {
    out << "row_index,class,subclass\n";
    std::vector<std::pair<long, std::pair<int, int>>> rows;
    for (const auto& cm : state)
        for (size_t i = 0; i < cm.rows.size(); ++i)
            rows.push_back({cm.rows[i], {cm.class_id, cm.partition.assignments[i]}});
    std::sort(rows.begin(), rows.end());
    for (const auto& [r, cs] : rows)
        out << r << "," << cs.first << "," << cs.second << "\n";
}

// Prototype dump: "class,subclass,f0..f{D-1}".
inline void dump_prototypes(const std::vector<ClassManifold>& state, std::ostream& out) {
    if (state.empty()) return;
    out << "class,subclass";
    for (long j = 0; j < state[0].prototypes.prototypes.cols(); ++j) out << ",f" << j;
    out << "\n";
    for (const auto& cm : state)
        for (long s = 0; s < cm.prototypes.prototypes.rows(); ++s) {
            out << cm.class_id << "," << s;
            for (long j = 0; j < cm.prototypes.prototypes.cols(); ++j)
                out << "," << format_double(cm.prototypes.prototypes(s, j));
            out << "\n";
        }
}

}  // namespace mcl
