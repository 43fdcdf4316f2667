#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <limits>
#include <ostream>
#include <queue>
#include <vector>

#include "mcl/common.hpp"

namespace mcl {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Undirected weighted kNN graph over one class's features. Directed kNN edges
// are symmetrized by union, so degrees can exceed k.
struct NeighborGraph {
    long node_count = 0;
    int k = 0;
    // per node, (neighbor, Euclidean weight), sorted by neighbor index
    std::vector<std::vector<std::pair<long, double>>> adjacency;
};

// All-pairs shortest-path distances; +inf across graph components.
struct GeodesicMatrix {
    Eigen::MatrixXd dist;
    std::vector<int> component_id;

    long size() const { return dist.rows(); }
};

// Ties in the k-nearest selection break toward the lower node index.
inline NeighborGraph build_knn_graph(const Eigen::MatrixXd& features, int k) {
    const long n = features.rows();
    if (n < 2) throw ConfigError("kNN graph needs at least 2 points");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (k >= n) throw ConfigError("k must be < number of points");

    NeighborGraph g;
    g.node_count = n;
    g.k = k;
    g.adjacency.assign(n, {});

    std::vector<long> order(n - 1);
    std::vector<double> dist(n);
    std::vector<std::vector<char>> linked(n, std::vector<char>(n, 0));

    for (long i = 0; i < n; ++i) {
        long m = 0;
        for (long j = 0; j < n; ++j) {
            if (j == i) continue;
            dist[j] = (features.row(i) - features.row(j)).norm();
            order[m++] = j;
        }
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [&dist](long a, long b) {
                              return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
                          });
        for (int t = 0; t < k; ++t) {
            const long j = order[t];
            linked[std::min(i, j)][std::max(i, j)] = 1;
        }
    }

    for (long u = 0; u < n; ++u) {
        for (long v = u + 1; v < n; ++v) {
            if (!linked[u][v]) continue;
            const double w = (features.row(u) - features.row(v)).norm();
            g.adjacency[u].emplace_back(v, w);
            g.adjacency[v].emplace_back(u, w);
        }
    }
    return g;
}

inline std::vector<int> connected_components(const NeighborGraph& g) {
    const long n = g.node_count;
    std::vector<int> label(n, -1);
    int next = 0;
    std::vector<long> stack;
    for (long s = 0; s < n; ++s) {
        if (label[s] != -1) continue;
        label[s] = next;
        stack.push_back(s);
        while (!stack.empty()) {
            const long u = stack.back();
            stack.pop_back();
            for (const auto& [v, w] : g.adjacency[u]) {
                if (label[v] == -1) {
                    label[v] = next;
                    stack.push_back(v);
                }
            }
        }
        ++next;
    }
    return label;
}

namespace detail {

inline void dijkstra_from(const NeighborGraph& g, long source,
                          Eigen::MatrixXd& dist_out) {
    const long n = g.node_count;
    using Item = std::pair<double, long>;
    std::priority_queue<Item, std::vector<Item>, std::greater<Item>> heap;
    auto row = dist_out.row(source);
    row.setConstant(kInf);
    row(source) = 0.0;
    heap.emplace(0.0, source);
    while (!heap.empty()) {
        const auto [d, u] = heap.top();
        heap.pop();
        if (d > row(u)) continue;  // stale entry
        for (const auto& [v, w] : g.adjacency[u]) {
            const double cand = d + w;
            if (cand < row(v)) {
                row(v) = cand;
                heap.emplace(cand, v);
            }
        }
    }
}

}  // namespace detail

inline GeodesicMatrix geodesic_all_pairs(const NeighborGraph& g) {
    const long n = g.node_count;
    GeodesicMatrix m;
    m.dist.resize(n, n);
    for (long s = 0; s < n; ++s) detail::dijkstra_from(g, s, m.dist);
    // per-source runs sum edge weights in different orders; enforce exact
    // symmetry by keeping the shorter of the two path sums
    m.dist = m.dist.cwiseMin(m.dist.transpose().eval()).eval();
    m.component_id = connected_components(g);
    return m;
}

// Debug dump, one undirected edge per line as "u,v,w" with u < v.
inline void dump_edge_list(const NeighborGraph& g, std::ostream& out) {
    for (long u = 0; u < g.node_count; ++u)
        for (const auto& [v, w] : g.adjacency[u])
            if (u < v) out << u << "," << v << "," << format_double(w) << "\n";
}

}  // namespace mcl
