#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "mcl/cluster.hpp"
#include "mcl/common.hpp"

namespace mcl {

// One mini-batch at the loss boundary: embeddings plus, per sample, its class
// and the sub-class index inside that class's PrototypeSet.
struct Batch {
    Eigen::MatrixXd embeddings;            // I x D'
    std::vector<int> class_labels;         // I
    std::vector<int> subclass_assignments; // I
};

struct LossConfig {
    double margin = 1.0;      // class margin on the manifold
    bool inter_clamp = true;  // hinge max(0, margin - D)
    double temperature = 0.5; // cosine baseline only
};

inline void validate_loss_config(const LossConfig& cfg) {
    if (!(cfg.margin > 0)) throw ConfigError("margin must be > 0");
    if (!(cfg.temperature > 0)) throw ConfigError("temperature must be > 0");
}

// Scalar loss plus its gradient with respect to the operation's direct input
// (embeddings for the manifold losses, probabilities for cross-entropy).
struct LossValue {
    double value = 0.0;
    Eigen::MatrixXd grad;
};

namespace detail {

inline void validate_batch(const Batch& batch,
                           const std::vector<PrototypeSet>& prototypes_by_class) {
    const long count = batch.embeddings.rows();
    if (static_cast<long>(batch.class_labels.size()) != count ||
        static_cast<long>(batch.subclass_assignments.size()) != count)
        throw DataError("batch label/assignment length mismatch");
    if (!batch.embeddings.allFinite())
        throw NumericError("batch embeddings contain non-finite values");
    for (long i = 0; i < count; ++i) {
        const int c = batch.class_labels[i];
        if (c < 0 || c >= static_cast<int>(prototypes_by_class.size()))
            throw DataError("batch class label out of range");
        const int s = batch.subclass_assignments[i];
        if (s < 0 || s >= prototypes_by_class[c].prototypes.rows())
            throw DataError("missing prototype for sub-class assignment " +
                            std::to_string(s));
    }
}

}  // namespace detail

// Mean squared distance from each embedding to its own sub-class prototype.
// Prototypes are constants: no gradient flows into them.
inline LossValue intra_loss(const Batch& batch,
                            const std::vector<PrototypeSet>& prototypes_by_class) {
    detail::validate_batch(batch, prototypes_by_class);
    const long count = batch.embeddings.rows();
    if (count == 0) throw DataError("empty batch");

    LossValue out;
    out.grad = Eigen::MatrixXd::Zero(count, batch.embeddings.cols());
    for (long i = 0; i < count; ++i) {
        const auto& protos = prototypes_by_class[batch.class_labels[i]];
        const Eigen::RowVectorXd diff =
            batch.embeddings.row(i) - protos.prototypes.row(batch.subclass_assignments[i]);
        out.value += diff.squaredNorm();
        out.grad.row(i) = 2.0 * diff;
    }
    out.value /= static_cast<double>(count);
    out.grad /= static_cast<double>(count);
    return out;
}

// Hausdorff distance between two point sets, with the achieving pair recorded
// for subgradient use. Exact ties resolve to the first pair in scan order.
struct HausdorffResult {
    double value = 0.0;
    long y_index = -1;        // row in Y of the achieving pair
    long z_index = -1;        // row in Z
    bool outer_is_y = true;   // which directed sup attained the max
};

inline HausdorffResult hausdorff(const Eigen::MatrixXd& y, const Eigen::MatrixXd& z) {
    if (y.rows() == 0 || z.rows() == 0)
        throw DataError("hausdorff requires non-empty sets");
    if (y.cols() != z.cols()) throw DataError("hausdorff dimension mismatch");

    HausdorffResult res;
    double sup_y = -1.0;
    long sy = -1, sz = -1;
    for (long i = 0; i < y.rows(); ++i) {
        double inf_d = kInf;
        long arg = -1;
        for (long j = 0; j < z.rows(); ++j) {
            const double d = (y.row(i) - z.row(j)).norm();
            if (d < inf_d) {
                inf_d = d;
                arg = j;
            }
        }
        if (inf_d > sup_y) {
            sup_y = inf_d;
            sy = i;
            sz = arg;
        }
    }
    double sup_z = -1.0;
    long ty = -1, tz = -1;
    for (long j = 0; j < z.rows(); ++j) {
        double inf_d = kInf;
        long arg = -1;
        for (long i = 0; i < y.rows(); ++i) {
            const double d = (y.row(i) - z.row(j)).norm();
            if (d < inf_d) {
                inf_d = d;
                arg = i;
            }
        }
        if (inf_d > sup_z) {
            sup_z = inf_d;
            ty = arg;
            tz = j;
        }
    }
    if (sup_y >= sup_z) {
        res.value = sup_y;
        res.y_index = sy;
        res.z_index = sz;
        res.outer_is_y = true;
    } else {
        res.value = sup_z;
        res.y_index = ty;
        res.z_index = tz;
        res.outer_is_y = false;
    }
    return res;
}

// Margin hinge pushing each class's batch embeddings at least `margin` away
// (in Hausdorff distance) from every other class's prototypes. Terms average
// over ordered class pairs (A,B) with class-A samples present in the batch.
// Gradient flows only through the witness embedding of each Hausdorff value.
inline LossValue inter_loss(const Batch& batch,
                            const std::vector<PrototypeSet>& prototypes_by_class,
                            const LossConfig& cfg) {
    validate_loss_config(cfg);
    detail::validate_batch(batch, prototypes_by_class);
    const int classes = static_cast<int>(prototypes_by_class.size());
    if (classes < 2) throw ConfigError("inter_loss needs prototypes for >= 2 classes");

    const long count = batch.embeddings.rows();
    LossValue out;
    out.grad = Eigen::MatrixXd::Zero(count, batch.embeddings.cols());

    // class -> batch rows of that class
    std::vector<std::vector<long>> rows_by_class(classes);
    for (long i = 0; i < count; ++i) rows_by_class[batch.class_labels[i]].push_back(i);

    struct Term {
        double value;
        long batch_row;
        Eigen::RowVectorXd grad_dir;  // d(margin - D)/d embedding at the witness
    };
    std::vector<Term> terms;
    for (int a = 0; a < classes; ++a) {
        if (rows_by_class[a].empty()) continue;
        Eigen::MatrixXd ya(static_cast<long>(rows_by_class[a].size()),
                           batch.embeddings.cols());
        for (size_t r = 0; r < rows_by_class[a].size(); ++r)
            ya.row(static_cast<long>(r)) = batch.embeddings.row(rows_by_class[a][r]);
        for (int b = 0; b < classes; ++b) {
            if (b == a) continue;
            const auto h = hausdorff(ya, prototypes_by_class[b].prototypes);
            Term t;
            t.value = cfg.margin - h.value;
            t.batch_row = rows_by_class[a][h.y_index];
            if (h.value > 0.0) {
                const Eigen::RowVectorXd diff =
                    ya.row(h.y_index) - prototypes_by_class[b].prototypes.row(h.z_index);
                t.grad_dir = -diff / h.value;
            } else {
                t.grad_dir = Eigen::RowVectorXd::Zero(batch.embeddings.cols());
            }
            terms.push_back(std::move(t));
        }
    }
    if (terms.empty()) throw DataError("inter_loss: batch has no usable class pair");

    const double scale = 1.0 / static_cast<double>(terms.size());
    double sum = 0.0;
    for (const auto& t : terms) {
        const bool active = !cfg.inter_clamp || t.value > 0.0;
        sum += cfg.inter_clamp ? std::max(0.0, t.value) : t.value;
        if (active) out.grad.row(t.batch_row) += scale * t.grad_dir;
    }
    out.value = sum * scale;
    return out;
}

inline LossValue manifold_loss(const Batch& batch,
                               const std::vector<PrototypeSet>& prototypes_by_class,
                               const LossConfig& cfg) {
    LossValue intra = intra_loss(batch, prototypes_by_class);
    LossValue inter = inter_loss(batch, prototypes_by_class, cfg);
    intra.value += inter.value;
    intra.grad += inter.grad;
    return intra;
}

// Categorical cross-entropy on softmax probabilities; for two classes on the
// probability simplex this equals the binary y*log(p) + (1-y)*log(1-p) form.
// Entries clamp at 1e-12 before the log.
inline LossValue cross_entropy(const Eigen::MatrixXd& probabilities,
                               const std::vector<int>& labels) {
    constexpr double kEps = 1e-12;
    const long count = probabilities.rows();
    const long classes = probabilities.cols();
    if (static_cast<long>(labels.size()) != count)
        throw DataError("label count does not match probability rows");
    if (count == 0) throw DataError("empty probability matrix");
    for (long i = 0; i < count; ++i) {
        if (labels[i] < 0 || labels[i] >= classes)
            throw DataError("label " + std::to_string(labels[i]) + " out of range");
        const double row_sum = probabilities.row(i).sum();
        if (std::abs(row_sum - 1.0) > 1e-3)
            throw DataError("probability row " + std::to_string(i) +
                            " does not sum to 1");
    }

    LossValue out;
    out.grad = Eigen::MatrixXd::Zero(count, classes);
    for (long i = 0; i < count; ++i) {
        const double p = std::max(probabilities(i, labels[i]), kEps);
        out.value -= std::log(p);
        out.grad(i, labels[i]) = -1.0 / p;
    }
    out.value /= static_cast<double>(count);
    out.grad /= static_cast<double>(count);
    return out;
}

// Stage-1 composite: manifold loss on the embedding head plus cross-entropy on
// the softmax head. Gradients are carried per head and combine in the encoder
// trunk during backprop.
struct TotalLoss {
    double value = 0.0;
    double intra = 0.0;
    double inter = 0.0;
    double ce = 0.0;
    Eigen::MatrixXd grad_embeddings;
    Eigen::MatrixXd grad_probabilities;
};

inline TotalLoss total_loss(const Batch& batch,
                            const std::vector<PrototypeSet>& prototypes_by_class,
                            const Eigen::MatrixXd& probabilities,
                            const std::vector<int>& labels, const LossConfig& cfg) {
    TotalLoss out;
    LossValue intra = intra_loss(batch, prototypes_by_class);
    LossValue inter = inter_loss(batch, prototypes_by_class, cfg);
    LossValue ce = cross_entropy(probabilities, labels);
    out.intra = intra.value;
    out.inter = inter.value;
    out.ce = ce.value;
    out.value = intra.value + inter.value + ce.value;
    out.grad_embeddings = intra.grad + inter.grad;
    out.grad_probabilities = ce.grad;
    return out;
}

// NT-Xent-style baseline: softmax over cosine similarity to every prototype,
// positive being the sample's own sub-class prototype.
inline LossValue cosine_prototype_loss(const Batch& batch,
                                       const std::vector<PrototypeSet>& prototypes_by_class,
                                       const LossConfig& cfg) {
    validate_loss_config(cfg);
    detail::validate_batch(batch, prototypes_by_class);
    const long count = batch.embeddings.rows();
    if (count == 0) throw DataError("empty batch");
    const long dim = batch.embeddings.cols();

    // flatten prototypes: class ascending, sub-class ascending
    std::vector<std::pair<int, long>> proto_index;  // (class, row within class)
    long total = 0;
    for (size_t c = 0; c < prototypes_by_class.size(); ++c)
        total += prototypes_by_class[c].prototypes.rows();
    Eigen::MatrixXd protos(total, dim);
    long row = 0;
    for (size_t c = 0; c < prototypes_by_class.size(); ++c)
        for (long s = 0; s < prototypes_by_class[c].prototypes.rows(); ++s, ++row) {
            protos.row(row) = prototypes_by_class[c].prototypes.row(s);
            proto_index.push_back({static_cast<int>(c), s});
        }

    Eigen::VectorXd proto_norm(total);
    for (long p = 0; p < total; ++p) {
        proto_norm(p) = protos.row(p).norm();
        if (proto_norm(p) == 0.0)
            throw NumericError("zero-norm prototype in cosine loss");
    }

    LossValue out;
    out.grad = Eigen::MatrixXd::Zero(count, dim);
    const double inv_tau = 1.0 / cfg.temperature;
    for (long i = 0; i < count; ++i) {
        const Eigen::RowVectorXd f = batch.embeddings.row(i);
        const double fn = f.norm();
        if (fn == 0.0) throw NumericError("zero-norm embedding in cosine loss");

        Eigen::VectorXd cosv(total);
        for (long p = 0; p < total; ++p)
            cosv(p) = f.dot(protos.row(p)) / (fn * proto_norm(p));

        long pos = -1;
        for (long p = 0; p < total; ++p)
            if (proto_index[p].first == batch.class_labels[i] &&
                proto_index[p].second == batch.subclass_assignments[i])
                pos = p;

        const Eigen::VectorXd scaled = cosv * inv_tau;
        const double m = scaled.maxCoeff();
        const Eigen::VectorXd ex = (scaled.array() - m).exp();
        const double denom = ex.sum();
        out.value += -(scaled(pos) - m - std::log(denom));

        for (long p = 0; p < total; ++p) {
            const double w = (ex(p) / denom - (p == pos ? 1.0 : 0.0)) * inv_tau;
            const Eigen::RowVectorXd dcos =
                (protos.row(p) / proto_norm(p) - cosv(p) * f / fn) / fn;
            out.grad.row(i) += w * dcos;
        }
    }
    out.value /= static_cast<double>(count);
    out.grad /= static_cast<double>(count);
    return out;
}

}  // namespace mcl
