#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <sstream>

#include "mcl/cluster.hpp"
#include "mcl/dataio.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mcl;

namespace {

bool same_up_to_bijection(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) return false;
    std::map<int, int> fwd, bwd;
    for (size_t i = 0; i < a.size(); ++i) {
        auto [f, fi] = fwd.emplace(a[i], b[i]);
        if (!fi && f->second != b[i]) return false;
        auto [g, gi] = bwd.emplace(b[i], a[i]);
        if (!gi && g->second != a[i]) return false;
    }
    return true;
}

GeodesicMatrix matrix_only(Eigen::MatrixXd d) {
    GeodesicMatrix m;
    m.component_id.assign(d.rows(), 0);
    m.dist = std::move(d);
    return m;
}

}  // namespace

TEST_CASE("agglomerate groups two far-apart pairs") {
    Eigen::MatrixXd pts(4, 1);
    pts << 0.0, 1.0, 10.0, 11.0;

    SECTION("connected graph") {
        const auto geo = geodesic_all_pairs(build_knn_graph(pts, 2));
        const auto part = agglomerate(geo, 2, Linkage::average);
        REQUIRE(part.assignments == std::vector<int>{0, 0, 1, 1});
        REQUIRE(part.assignments == oracles::naive_agglomerate(geo.dist, 2,
                                                               Linkage::average));
    }
    SECTION("disconnected graph, infinite cross distances") {
        const auto geo = geodesic_all_pairs(build_knn_graph(pts, 1));
        REQUIRE(std::isinf(geo.dist(0, 2)));
        const auto part = agglomerate(geo, 2, Linkage::single);
        REQUIRE(part.assignments == std::vector<int>{0, 0, 1, 1});
    }
}

TEST_CASE("agglomerate edge cases") {
    Eigen::MatrixXd pts(5, 1);
    pts << 0, 1, 2, 3, 4;
    const auto geo = geodesic_all_pairs(build_knn_graph(pts, 1));

    SECTION("n = N is the identity partition") {
        const auto part = agglomerate(geo, 5, Linkage::complete);
        REQUIRE(part.assignments == std::vector<int>{0, 1, 2, 3, 4});
        REQUIRE(part.n_subclasses == 5);
    }
    SECTION("n = 1 puts everything together") {
        const auto part = agglomerate(geo, 1, Linkage::complete);
        REQUIRE(part.assignments == std::vector<int>{0, 0, 0, 0, 0});
    }
    SECTION("bad n") {
        REQUIRE_THROWS_AS(agglomerate(geo, 6, Linkage::single), ConfigError);
        REQUIRE_THROWS_AS(agglomerate(geo, 0, Linkage::single), ConfigError);
    }
}

TEST_CASE("forced merges pick the largest components first") {
    // three components of sizes 3, 2, 1 at mutual infinity
    Eigen::MatrixXd d = Eigen::MatrixXd::Constant(6, 6, kInf);
    for (long i = 0; i < 6; ++i) d(i, i) = 0.0;
    auto close = [&d](long a, long b, double w) {
        d(a, b) = w;
        d(b, a) = w;
    };
    close(0, 1, 1.0);
    close(1, 2, 1.0);
    close(0, 2, 2.0);
    close(3, 4, 1.0);

    std::vector<double> trace;
    const auto part = agglomerate(matrix_only(d), 2, Linkage::single, 0, &trace);
    // finite merges first: {0,1,2} and {3,4}; then the two largest merge
    REQUIRE(part.assignments == std::vector<int>{0, 0, 0, 0, 0, 1});
    REQUIRE(std::isinf(trace.back()));
    REQUIRE(part.assignments == oracles::naive_agglomerate(d, 2, Linkage::single));
}

TEST_CASE("agglomerate matches the naive oracle on random geodesic matrices") {
    auto rng = make_rng(404);
    std::uniform_int_distribution<long> size(4, 40);
    std::uniform_int_distribution<int> kk(1, 4);
    const Linkage linkages[] = {Linkage::single, Linkage::complete, Linkage::average};
    for (int trial = 0; trial < 36; ++trial) {
        const long n = size(rng);
        const auto g = oracles::random_knn_graph(rng, n, 3, std::min<int>(kk(rng), n - 1));
        const auto geo = geodesic_all_pairs(g);
        std::uniform_int_distribution<int> nsub(1, static_cast<int>(n));
        const int target = nsub(rng);
        const Linkage linkage = linkages[trial % 3];
        const auto part = agglomerate(geo, target, linkage);
        const auto oracle = oracles::naive_agglomerate(geo.dist, target, linkage);
        REQUIRE(part.assignments == oracle);
        for (int s = 0; s < target; ++s)
            REQUIRE(std::count(part.assignments.begin(), part.assignments.end(), s) > 0);
    }
}

TEST_CASE("agglomerate handles exact distance ties like the oracle") {
    // integer grid distances create exact ties
    Eigen::MatrixXd pts(6, 2);
    pts << 0, 0, 1, 0, 2, 0, 0, 1, 1, 1, 2, 1;
    const auto geo = geodesic_all_pairs(build_knn_graph(pts, 2));
    for (int n = 1; n <= 6; ++n)
        for (Linkage l : {Linkage::single, Linkage::complete, Linkage::average})
            REQUIRE(agglomerate(geo, n, l).assignments ==
                    oracles::naive_agglomerate(geo.dist, n, l));
}

TEST_CASE("agglomerate is permutation-equivariant up to relabeling") {
    auto rng = make_rng(505);
    const long n = 20;
    const auto g = oracles::random_knn_graph(rng, n, 3, 3);
    const auto geo = geodesic_all_pairs(g);
    const auto base = agglomerate(geo, 4, Linkage::average);

    std::vector<long> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 5; ++trial) {
        std::shuffle(perm.begin(), perm.end(), rng);
        Eigen::MatrixXd pd(n, n);
        for (long i = 0; i < n; ++i)
            for (long j = 0; j < n; ++j) pd(perm[i], perm[j]) = geo.dist(i, j);
        const auto moved = agglomerate(matrix_only(pd), 4, Linkage::average);
        std::vector<int> unpermuted(n);
        for (long i = 0; i < n; ++i) unpermuted[i] = moved.assignments[perm[i]];
        REQUIRE(same_up_to_bijection(base.assignments, unpermuted));
    }
}

TEST_CASE("merge distances are non-decreasing") {
    auto rng = make_rng(606);
    for (int trial = 0; trial < 12; ++trial) {
        const auto g = oracles::random_knn_graph(rng, 25, 3, 2);
        const auto geo = geodesic_all_pairs(g);
        for (Linkage l : {Linkage::single, Linkage::complete, Linkage::average}) {
            std::vector<double> trace;
            agglomerate(geo, 1, l, 0, &trace);
            for (size_t t = 1; t < trace.size(); ++t) {
                if (std::isinf(trace[t])) continue;  // forced merges come last
                REQUIRE(trace[t] >= trace[t - 1] - 1e-9);
            }
        }
    }
}

TEST_CASE("compute_prototypes") {
    SECTION("singleton sub-class reproduces the point") {
        Eigen::MatrixXd f(1, 3);
        f << 1.0, -2.0, 0.5;
        SubclassPartition part{{0}, 1, 0};
        const auto protos = compute_prototypes(f, part);
        REQUIRE(protos.prototypes.row(0) == f.row(0));
        REQUIRE(protos.member_counts == std::vector<long>{1});
    }
    SECTION("two points average to the midpoint") {
        Eigen::MatrixXd f(2, 2);
        f << 0.0, 0.0, 2.0, 0.0;
        SubclassPartition part{{0, 0}, 1, 0};
        const auto protos = compute_prototypes(f, part);
        REQUIRE(protos.prototypes(0, 0) == 1.0);
        REQUIRE(protos.prototypes(0, 1) == 0.0);
    }
    SECTION("random partitions match the column-mean oracle") {
        auto rng = make_rng(707);
        std::uniform_real_distribution<double> u(-1, 1);
        std::uniform_int_distribution<int> sub(0, 4);
        Eigen::MatrixXd f(60, 4);
        for (long i = 0; i < 60; ++i)
            for (long j = 0; j < 4; ++j) f(i, j) = u(rng);
        SubclassPartition part;
        part.n_subclasses = 5;
        part.assignments.resize(60);
        for (int s = 0; s < 5; ++s) part.assignments[s] = s;  // keep all non-empty
        for (long i = 5; i < 60; ++i) part.assignments[i] = sub(rng);
        const auto protos = compute_prototypes(f, part);
        for (int s = 0; s < 5; ++s) {
            Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(4);
            long count = 0;
            for (long i = 0; i < 60; ++i)
                if (part.assignments[i] == s) {
                    mean += f.row(i);
                    ++count;
                }
            mean /= static_cast<double>(count);
            REQUIRE((protos.prototypes.row(s) - mean).cwiseAbs().maxCoeff() <= 1e-12);
            REQUIRE(protos.member_counts[s] == count);
        }
    }
    SECTION("empty sub-class is an error") {
        Eigen::MatrixXd f(2, 1);
        f << 0.0, 1.0;
        SubclassPartition part{{0, 0}, 2, 0};
        REQUIRE_THROWS_AS(compute_prototypes(f, part), DataError);
    }
}

TEST_CASE("refresh_manifold yields per-class prototype sets") {
    const auto set = gen_interleaved_manifolds(30, 0.02, 1.5, 3, 3);
    REQUIRE(set.size() == 60);

    SECTION("n=10 per class gives 20 prototypes") {
        const auto state = refresh_manifold(set, set.features, 5, 10, Linkage::average);
        REQUIRE(state.size() == 2);
        long total = 0;
        for (const auto& cm : state) {
            REQUIRE(cm.prototypes.prototypes.rows() == 10);
            long members = 0;
            for (long c : cm.prototypes.member_counts) members += c;
            REQUIRE(members == 30);
            total += cm.prototypes.prototypes.rows();
        }
        REQUIRE(total == 20);
    }
    SECTION("n=1 gives the class mean") {
        const auto state = refresh_manifold(set, set.features, 5, 1, Linkage::average);
        for (const auto& cm : state) {
            Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(set.dim());
            for (long r : cm.rows) mean += set.features.row(r);
            mean /= static_cast<double>(cm.rows.size());
            REQUIRE((cm.prototypes.prototypes.row(0) - mean).cwiseAbs().maxCoeff() <=
                    1e-12);
        }
    }
    SECTION("refresh is idempotent on unchanged embeddings") {
        const auto a = refresh_manifold(set, set.features, 5, 10, Linkage::average);
        const auto b = refresh_manifold(set, set.features, 5, 10, Linkage::average);
        for (size_t c = 0; c < a.size(); ++c) {
            REQUIRE(a[c].partition.assignments == b[c].partition.assignments);
            REQUIRE(testutil::exact_equal(a[c].prototypes.prototypes,
                                          b[c].prototypes.prototypes));
        }
    }
    SECTION("k or n too large for a class") {
        REQUIRE_THROWS_AS(refresh_manifold(set, set.features, 30, 10, Linkage::average),
                          ConfigError);
        REQUIRE_THROWS_AS(refresh_manifold(set, set.features, 5, 31, Linkage::average),
                          ConfigError);
    }
}

TEST_CASE("append_global_prototype adds the class mean") {
    const auto set = gen_interleaved_manifolds(20, 0.02, 1.5, 9, 2);
    auto state = refresh_manifold(set, set.features, 3, 4, Linkage::average);
    for (auto& cm : state) {
        Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(set.dim());
        for (long r : cm.rows) mean += set.features.row(r);
        mean /= static_cast<double>(cm.rows.size());
        append_global_prototype(cm.prototypes);
        REQUIRE(cm.prototypes.prototypes.rows() == 5);
        REQUIRE((cm.prototypes.prototypes.row(4) - mean).cwiseAbs().maxCoeff() <= 1e-9);
        REQUIRE(cm.prototypes.member_counts.back() == 20);
    }
}

TEST_CASE("kmeans_partition is deterministic and fills every cluster") {
    auto rng = make_rng(808);
    std::uniform_real_distribution<double> u(-1, 1);
    Eigen::MatrixXd f(40, 3);
    for (long i = 0; i < 40; ++i)
        for (long j = 0; j < 3; ++j) f(i, j) = u(rng);

    const auto a = kmeans_partition(f, 6, 42);
    const auto b = kmeans_partition(f, 6, 42);
    REQUIRE(a.assignments == b.assignments);
    for (int s = 0; s < 6; ++s)
        REQUIRE(std::count(a.assignments.begin(), a.assignments.end(), s) > 0);

    // well-separated blobs are recovered exactly
    Eigen::MatrixXd blobs(9, 2);
    blobs << 0, 0, 0.1, 0, 0, 0.1, 10, 10, 10.1, 10, 10, 10.1, -10, 5, -10.1, 5, -10,
        5.1;
    const auto part = kmeans_partition(blobs, 3, 7);
    REQUIRE(part.assignments[0] == part.assignments[1]);
    REQUIRE(part.assignments[1] == part.assignments[2]);
    REQUIRE(part.assignments[3] == part.assignments[4]);
    REQUIRE(part.assignments[4] == part.assignments[5]);
    REQUIRE(part.assignments[6] == part.assignments[7]);
    REQUIRE(part.assignments[7] == part.assignments[8]);
    REQUIRE(part.assignments[0] != part.assignments[3]);
    REQUIRE(part.assignments[0] != part.assignments[6]);
    REQUIRE(part.assignments[3] != part.assignments[6]);
}

TEST_CASE("partition and prototype dumps") {
    const auto set = gen_interleaved_manifolds(10, 0.0, 1.5, 1, 2);
    const auto state = refresh_manifold(set, set.features, 2, 2, Linkage::average);
    std::ostringstream part, protos;
    dump_partition(state, part);
    dump_prototypes(state, protos);
    const std::string part_text = part.str();
    const std::string proto_text = protos.str();
    REQUIRE(part_text.rfind("row_index,class,subclass\n0,", 0) == 0);
    REQUIRE(proto_text.rfind("class,subclass,f0,f1,f2\n", 0) == 0);
    REQUIRE(std::count(part_text.begin(), part_text.end(), '\n') == 21);
    REQUIRE(std::count(proto_text.begin(), proto_text.end(), '\n') == 5);
}
