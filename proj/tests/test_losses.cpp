#include <catch2/catch_amalgamated.hpp>

#include "mcl/losses.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mcl;

namespace {

PrototypeSet proto_set(Eigen::MatrixXd protos, int class_id) {
    PrototypeSet set;
    set.prototypes = std::move(protos);
    set.class_id = class_id;
    set.member_counts.assign(set.prototypes.rows(), 1);
    return set;
}

// random two-class prototype table plus a batch whose assignments are valid
struct Instance {
    Batch batch;
    std::vector<PrototypeSet> protos;
};

Instance random_instance(std::mt19937_64& rng, long batch_size, long dim,
                         int classes, int protos_per_class) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Instance inst;
    for (int c = 0; c < classes; ++c) {
        Eigen::MatrixXd p(protos_per_class, dim);
        for (long i = 0; i < protos_per_class; ++i)
            for (long j = 0; j < dim; ++j) p(i, j) = u(rng);
        inst.protos.push_back(proto_set(std::move(p), c));
    }
    inst.batch.embeddings.resize(batch_size, dim);
    std::uniform_int_distribution<int> cls(0, classes - 1);
    std::uniform_int_distribution<int> sub(0, protos_per_class - 1);
    for (long i = 0; i < batch_size; ++i) {
        for (long j = 0; j < dim; ++j) inst.batch.embeddings(i, j) = u(rng);
        inst.batch.class_labels.push_back(i < classes ? static_cast<int>(i)
                                                      : cls(rng));
        inst.batch.subclass_assignments.push_back(sub(rng));
    }
    return inst;
}

Eigen::MatrixXd random_probabilities(std::mt19937_64& rng, long rows, long cols) {
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    Eigen::MatrixXd p(rows, cols);
    for (long i = 0; i < rows; ++i) {
        Eigen::RowVectorXd z(cols);
        for (long j = 0; j < cols; ++j) z(j) = u(rng);
        const Eigen::RowVectorXd ex = (z.array() - z.maxCoeff()).exp();
        p.row(i) = ex / ex.sum();
    }
    return p;
}

}  // namespace

TEST_CASE("intra_loss basics") {
    SECTION("embeddings at their prototypes give zero") {
        Eigen::MatrixXd p(1, 2);
        p << 0.5, -0.5;
        std::vector<PrototypeSet> protos = {proto_set(p, 0), proto_set(p, 1)};
        Batch batch;
        batch.embeddings = p.replicate(3, 1);
        batch.class_labels = {0, 1, 0};
        batch.subclass_assignments = {0, 0, 0};
        const auto out = intra_loss(batch, protos);
        REQUIRE(out.value == 0.0);
        REQUIRE(out.grad.cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("unit displacement") {
        Eigen::MatrixXd p(1, 2);
        p << 0.0, 0.0;
        std::vector<PrototypeSet> protos = {proto_set(p, 0), proto_set(p, 1)};
        Batch batch;
        batch.embeddings.resize(1, 2);
        batch.embeddings << 1.0, 0.0;
        batch.class_labels = {0};
        batch.subclass_assignments = {0};
        const auto out = intra_loss(batch, protos);
        REQUIRE(out.value == Catch::Approx(1.0));
        REQUIRE(out.grad(0, 0) == Catch::Approx(2.0));
        REQUIRE(out.grad(0, 1) == 0.0);
    }
    SECTION("missing prototype assignment") {
        Eigen::MatrixXd p(1, 2);
        p.setZero();
        std::vector<PrototypeSet> protos = {proto_set(p, 0), proto_set(p, 1)};
        Batch batch;
        batch.embeddings.resize(1, 2);
        batch.embeddings.setZero();
        batch.class_labels = {0};
        batch.subclass_assignments = {3};
        REQUIRE_THROWS_AS(intra_loss(batch, protos), DataError);
    }
}

TEST_CASE("intra_loss is non-negative") {
    auto rng = make_rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto inst = random_instance(rng, 5, 3, 2, 2);
        const auto out = intra_loss(inst.batch, inst.protos);
        REQUIRE(out.value > 0.0);  // random embeddings never sit exactly on protos
    }
}

TEST_CASE("intra_loss gradient matches finite differences") {
    auto rng = make_rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        auto inst = random_instance(rng, 6, 4, 2, 3);
        const auto analytic = intra_loss(inst.batch, inst.protos);
        const auto fd = oracles::fd_gradient(inst.batch.embeddings, [&] {
            return intra_loss(inst.batch, inst.protos).value;
        });
        REQUIRE(oracles::grads_close(analytic.grad, fd));
    }
}

TEST_CASE("hausdorff hand cases") {
    SECTION("identical sets") {
        Eigen::MatrixXd y(3, 2);
        y << 0, 0, 1, 2, -1, 0.5;
        const auto h = hausdorff(y, y);
        REQUIRE(h.value == 0.0);
    }
    SECTION("asymmetric supremum") {
        Eigen::MatrixXd y(2, 2), z(1, 2);
        y << 0, 0, 3, 0;
        z << 0, 0;
        const auto h = hausdorff(y, z);
        REQUIRE(h.value == Catch::Approx(3.0));
        REQUIRE(h.outer_is_y);
        REQUIRE(h.y_index == 1);
        REQUIRE(h.z_index == 0);
    }
    SECTION("empty set rejected") {
        Eigen::MatrixXd y(1, 2), z(0, 2);
        y.setZero();
        REQUIRE_THROWS_AS(hausdorff(y, z), DataError);
    }
}

TEST_CASE("hausdorff equals brute force on random small sets") {
    auto rng = make_rng(33);
    std::uniform_int_distribution<long> size(1, 8);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
        Eigen::MatrixXd y(size(rng), 3), z(size(rng), 3);
        for (long i = 0; i < y.rows(); ++i)
            for (long j = 0; j < 3; ++j) y(i, j) = u(rng);
        for (long i = 0; i < z.rows(); ++i)
            for (long j = 0; j < 3; ++j) z(i, j) = u(rng);
        const auto h = hausdorff(y, z);
        REQUIRE(h.value == Catch::Approx(oracles::hausdorff_brute(y, z)).margin(1e-12));
        REQUIRE(h.value ==
                Catch::Approx((y.row(h.y_index) - z.row(h.z_index)).norm()).margin(1e-12));
        // symmetry
        REQUIRE(hausdorff(z, y).value == Catch::Approx(h.value).margin(1e-12));
        // translation invariance
        const Eigen::RowVectorXd shift = y.row(0) * 0.37 + z.row(0) * 0.11;
        Eigen::MatrixXd ys = y.rowwise() + shift;
        Eigen::MatrixXd zs = z.rowwise() + shift;
        REQUIRE(hausdorff(ys, zs).value == Catch::Approx(h.value).margin(1e-12));
    }
}

TEST_CASE("hausdorff satisfies the triangle inequality") {
    auto rng = make_rng(44);
    std::uniform_int_distribution<long> size(1, 6);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int trial = 0; trial < 100; ++trial) {
        auto sample = [&](long n) {
            Eigen::MatrixXd s(n, 2);
            for (long i = 0; i < n; ++i)
                for (long j = 0; j < 2; ++j) s(i, j) = u(rng);
            return s;
        };
        const auto a = sample(size(rng));
        const auto b = sample(size(rng));
        const auto c = sample(size(rng));
        REQUIRE(hausdorff(a, c).value <=
                hausdorff(a, b).value + hausdorff(b, c).value + 1e-12);
    }
}

TEST_CASE("inter_loss hand cases") {
    Eigen::MatrixXd p0(1, 2), p1(1, 2);
    p0 << 0.0, 0.0;
    p1 << 1.0, 0.0;
    std::vector<PrototypeSet> protos = {proto_set(p0, 0), proto_set(p1, 1)};
    Batch batch;
    batch.embeddings.resize(1, 2);
    batch.embeddings << 0.0, 0.0;
    batch.class_labels = {0};
    batch.subclass_assignments = {0};

    SECTION("margin exactly met") {
        LossConfig cfg;
        cfg.margin = 1.0;
        const auto out = inter_loss(batch, protos, cfg);
        REQUIRE(out.value == 0.0);
    }
    SECTION("margin violated by 1") {
        LossConfig cfg;
        cfg.margin = 2.0;
        const auto out = inter_loss(batch, protos, cfg);
        REQUIRE(out.value == Catch::Approx(1.0));
        REQUIRE(out.grad(0, 0) == Catch::Approx(1.0));
        REQUIRE(out.grad(0, 1) == Catch::Approx(0.0));
    }
    SECTION("far-apart classes with clamp give zero") {
        Batch far = batch;
        far.embeddings << 10.0, 0.0;
        LossConfig cfg;
        cfg.margin = 1.0;
        const auto out = inter_loss(far, protos, cfg);
        REQUIRE(out.value == 0.0);
        REQUIRE(out.grad.cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("single class is a configuration error") {
        std::vector<PrototypeSet> lone = {proto_set(p0, 0)};
        LossConfig cfg;
        REQUIRE_THROWS_AS(inter_loss(batch, lone, cfg), ConfigError);
    }
}

TEST_CASE("unclamped inter terms never exceed the margin") {
    auto rng = make_rng(55);
    LossConfig cfg;
    cfg.margin = 1.5;
    cfg.inter_clamp = false;
    for (int trial = 0; trial < 20; ++trial) {
        const auto inst = random_instance(rng, 5, 3, 2, 2);
        const auto out = inter_loss(inst.batch, inst.protos, cfg);
        REQUIRE(out.value <= cfg.margin + 1e-12);  // mean of terms each <= margin

        LossConfig clamped = cfg;
        clamped.inter_clamp = true;
        REQUIRE(inter_loss(inst.batch, inst.protos, clamped).value >= 0.0);
    }
}

TEST_CASE("inter_loss gradient matches finite differences away from ties") {
    auto rng = make_rng(66);
    LossConfig cfg;
    cfg.margin = 2.0;
    int accepted = 0;
    int attempts = 0;
    while (accepted < 10 && attempts < 500) {
        ++attempts;
        auto inst = random_instance(rng, 5, 3, 2, 2);
        // reject configurations whose witnesses or hinge state could flip
        bool degenerate = false;
        for (int a = 0; a < 2 && !degenerate; ++a) {
            std::vector<long> rows;
            for (long i = 0; i < inst.batch.embeddings.rows(); ++i)
                if (inst.batch.class_labels[i] == a) rows.push_back(i);
            if (rows.empty()) continue;
            Eigen::MatrixXd ya(static_cast<long>(rows.size()), 3);
            for (size_t r = 0; r < rows.size(); ++r)
                ya.row(static_cast<long>(r)) = inst.batch.embeddings.row(rows[r]);
            const auto& pb = inst.protos[1 - a].prototypes;
            if (oracles::hausdorff_selection_margin(ya, pb) < 1e-3) degenerate = true;
            if (std::abs(cfg.margin - hausdorff(ya, pb).value) < 1e-3) degenerate = true;
        }
        if (degenerate) continue;
        ++accepted;

        const auto analytic = inter_loss(inst.batch, inst.protos, cfg);
        const auto fd = oracles::fd_gradient(inst.batch.embeddings, [&] {
            return inter_loss(inst.batch, inst.protos, cfg).value;
        });
        REQUIRE(oracles::grads_close(analytic.grad, fd));

        LossConfig unclamped = cfg;
        unclamped.inter_clamp = false;
        const auto analytic2 = inter_loss(inst.batch, inst.protos, unclamped);
        const auto fd2 = oracles::fd_gradient(inst.batch.embeddings, [&] {
            return inter_loss(inst.batch, inst.protos, unclamped).value;
        });
        REQUIRE(oracles::grads_close(analytic2.grad, fd2));
    }
    REQUIRE(accepted == 10);
}

TEST_CASE("manifold_loss adds intra and inter") {
    auto rng = make_rng(77);
    LossConfig cfg;
    for (int trial = 0; trial < 10; ++trial) {
        const auto inst = random_instance(rng, 6, 3, 2, 2);
        const auto man = manifold_loss(inst.batch, inst.protos, cfg);
        const auto intra = intra_loss(inst.batch, inst.protos);
        const auto inter = inter_loss(inst.batch, inst.protos, cfg);
        REQUIRE(man.value == Catch::Approx(intra.value + inter.value).margin(1e-12));
        REQUIRE((man.grad - intra.grad - inter.grad).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("cross_entropy hand cases") {
    SECTION("perfect prediction") {
        Eigen::MatrixXd p(2, 2);
        p << 1.0 - 1e-13, 1e-13, 1e-13, 1.0 - 1e-13;
        const auto out = cross_entropy(p, {0, 1});
        REQUIRE(out.value <= 1e-10);
    }
    SECTION("uniform binary prediction is ln 2") {
        Eigen::MatrixXd p(4, 2);
        p.setConstant(0.5);
        const auto out = cross_entropy(p, {0, 1, 0, 1});
        REQUIRE(out.value == Catch::Approx(std::log(2.0)).epsilon(1e-9));
    }
    SECTION("label out of range") {
        Eigen::MatrixXd p(1, 2);
        p << 0.5, 0.5;
        REQUIRE_THROWS_AS(cross_entropy(p, {2}), DataError);
        REQUIRE_THROWS_AS(cross_entropy(p, {-1}), DataError);
    }
}

TEST_CASE("cross_entropy gradient matches finite differences") {
    auto rng = make_rng(88);
    for (int trial = 0; trial < 10; ++trial) {
        auto p = random_probabilities(rng, 5, 3);
        std::vector<int> labels;
        std::uniform_int_distribution<int> cls(0, 2);
        for (long i = 0; i < 5; ++i) labels.push_back(cls(rng));
        const auto analytic = cross_entropy(p, labels);
        const auto fd =
            oracles::fd_gradient(p, [&] { return cross_entropy(p, labels).value; });
        REQUIRE(oracles::grads_close(analytic.grad, fd));
    }
}

TEST_CASE("total_loss composes the stage-1 objective") {
    auto rng = make_rng(99);
    LossConfig cfg;
    for (int trial = 0; trial < 10; ++trial) {
        const auto inst = random_instance(rng, 6, 3, 2, 2);
        const auto p = random_probabilities(rng, 6, 2);
        const auto total =
            total_loss(inst.batch, inst.protos, p, inst.batch.class_labels, cfg);
        const auto man = manifold_loss(inst.batch, inst.protos, cfg);
        const auto ce = cross_entropy(p, inst.batch.class_labels);
        REQUIRE(total.value == Catch::Approx(man.value + ce.value).margin(1e-12));
        REQUIRE(total.intra + total.inter == Catch::Approx(man.value).margin(1e-12));
        REQUIRE(total.ce == Catch::Approx(ce.value).margin(1e-12));
        REQUIRE((total.grad_embeddings - man.grad).cwiseAbs().maxCoeff() <= 1e-12);
        REQUIRE((total.grad_probabilities - ce.grad).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("cosine_prototype_loss hand cases") {
    SECTION("single prototype softmax is free") {
        Eigen::MatrixXd p(1, 2);
        p << 1.0, 0.0;
        std::vector<PrototypeSet> protos = {proto_set(p, 0)};
        Batch batch;
        batch.embeddings.resize(1, 2);
        batch.embeddings << 0.3, 0.4;
        batch.class_labels = {0};
        batch.subclass_assignments = {0};
        LossConfig cfg;
        const auto out = cosine_prototype_loss(batch, protos, cfg);
        REQUIRE(out.value == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("orthogonal negative at tau=1") {
        Eigen::MatrixXd p0(1, 2), p1(1, 2);
        p0 << 1.0, 0.0;
        p1 << 0.0, 1.0;
        std::vector<PrototypeSet> protos = {proto_set(p0, 0), proto_set(p1, 1)};
        Batch batch;
        batch.embeddings.resize(1, 2);
        batch.embeddings << 1.0, 0.0;  // equals its positive prototype
        batch.class_labels = {0};
        batch.subclass_assignments = {0};
        LossConfig cfg;
        cfg.temperature = 1.0;
        const auto out = cosine_prototype_loss(batch, protos, cfg);
        const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
        REQUIRE(out.value == Catch::Approx(expected).epsilon(1e-9));
        REQUIRE(out.value == Catch::Approx(0.3133).margin(5e-5));
    }
    SECTION("zero-norm embedding raises") {
        Eigen::MatrixXd p(1, 2);
        p << 1.0, 0.0;
        std::vector<PrototypeSet> protos = {proto_set(p, 0)};
        Batch batch;
        batch.embeddings = Eigen::MatrixXd::Zero(1, 2);
        batch.class_labels = {0};
        batch.subclass_assignments = {0};
        LossConfig cfg;
        REQUIRE_THROWS_AS(cosine_prototype_loss(batch, protos, cfg), NumericError);
    }
}

TEST_CASE("cosine_prototype_loss gradient matches finite differences") {
    auto rng = make_rng(111);
    LossConfig cfg;
    cfg.temperature = 0.5;
    for (int trial = 0; trial < 10; ++trial) {
        auto inst = random_instance(rng, 5, 4, 2, 3);
        const auto analytic = cosine_prototype_loss(inst.batch, inst.protos, cfg);
        const auto fd = oracles::fd_gradient(inst.batch.embeddings, [&] {
            return cosine_prototype_loss(inst.batch, inst.protos, cfg).value;
        });
        REQUIRE(oracles::grads_close(analytic.grad, fd));
    }
}
