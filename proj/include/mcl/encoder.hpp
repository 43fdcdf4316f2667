#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcl/cluster.hpp"
#include "mcl/common.hpp"
#include "mcl/dataio.hpp"
#include "mcl/losses.hpp"

namespace mcl {

struct AffineLayer {
    Eigen::MatrixXd weights;  // in x out
    Eigen::RowVectorXd bias;  // out
};

struct LayerDims {
    long input_dim = 0;
    std::vector<long> trunk;
    long embed_dim = 0;
    long n_classes = 0;
};

// Shared ReLU trunk with two affine heads: a D'-dim embedding head feeding the
// manifold losses and a logit head feeding the softmax path.
struct EncoderModel {
    LayerDims dims;
    std::vector<AffineLayer> trunk;
    AffineLayer embed_head;
    AffineLayer softmax_head;
};

namespace detail {

inline AffineLayer init_affine(long fan_in, long fan_out, std::mt19937_64& rng) {
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-scale, scale);
    AffineLayer layer;
    layer.weights.resize(fan_in, fan_out);
    for (long i = 0; i < fan_in; ++i)
        for (long j = 0; j < fan_out; ++j) layer.weights(i, j) = u(rng);
    layer.bias = Eigen::RowVectorXd::Zero(fan_out);
    return layer;
}

}  // namespace detail

inline EncoderModel init_encoder(const LayerDims& dims, std::uint64_t seed) {
    if (dims.input_dim < 1 || dims.embed_dim < 1 || dims.n_classes < 2)
        throw ConfigError("encoder dims must have input >= 1, embed >= 1, classes >= 2");
    if (dims.trunk.empty()) throw ConfigError("encoder needs at least one trunk layer");
    for (long w : dims.trunk)
        if (w < 1) throw ConfigError("trunk layer width must be >= 1");

    auto rng = make_rng(derive_seed(seed, 0x494e4954ULL));
    EncoderModel model;
    model.dims = dims;
    long prev = dims.input_dim;
    for (long w : dims.trunk) {
        model.trunk.push_back(detail::init_affine(prev, w, rng));
        prev = w;
    }
    model.embed_head = detail::init_affine(prev, dims.embed_dim, rng);
    model.softmax_head = detail::init_affine(prev, dims.n_classes, rng);
    return model;
}

inline long parameter_count(const EncoderModel& m) {
    long count = 0;
    for (const auto& l : m.trunk) count += l.weights.size() + l.bias.size();
    count += m.embed_head.weights.size() + m.embed_head.bias.size();
    count += m.softmax_head.weights.size() + m.softmax_head.bias.size();
    return count;
}

struct ForwardCache {
    Eigen::MatrixXd input;
    std::vector<Eigen::MatrixXd> trunk_pre;  // pre-activation per trunk layer
    std::vector<Eigen::MatrixXd> trunk_act;  // post-ReLU per trunk layer
    Eigen::MatrixXd embeddings;
    Eigen::MatrixXd logits;
    Eigen::MatrixXd probabilities;
};

inline ForwardCache forward(const EncoderModel& model, const Eigen::MatrixXd& inputs) {
    if (inputs.cols() != model.dims.input_dim)
        throw ConfigError("input dimension does not match encoder");

    ForwardCache cache;
    cache.input = inputs;
    Eigen::MatrixXd x = inputs;
    for (size_t l = 0; l < model.trunk.size(); ++l) {
        Eigen::MatrixXd pre =
            (x * model.trunk[l].weights).rowwise() + model.trunk[l].bias;
        if (!pre.allFinite())
            throw NumericError("non-finite activation in trunk layer " + std::to_string(l));
        cache.trunk_pre.push_back(pre);
        x = pre.cwiseMax(0.0);
        cache.trunk_act.push_back(x);
    }
    cache.embeddings = (x * model.embed_head.weights).rowwise() + model.embed_head.bias;
    cache.logits = (x * model.softmax_head.weights).rowwise() + model.softmax_head.bias;
    if (!cache.embeddings.allFinite())
        throw NumericError("non-finite activation in embed head");
    if (!cache.logits.allFinite())
        throw NumericError("non-finite activation in softmax head");

    cache.probabilities.resizeLike(cache.logits);
    for (long i = 0; i < cache.logits.rows(); ++i) {
        const Eigen::RowVectorXd row = cache.logits.row(i);
        const double m = row.maxCoeff();
        Eigen::RowVectorXd ex = (row.array() - m).exp();
        cache.probabilities.row(i) = ex / ex.sum();
    }
    return cache;
}

struct EncoderGradients {
    std::vector<AffineLayer> trunk;
    AffineLayer embed_head;
    AffineLayer softmax_head;
};

namespace detail {

// y = x*W + b; returns grad wrt x, fills layer gradient
inline Eigen::MatrixXd affine_backward(const AffineLayer& layer, const Eigen::MatrixXd& x,
                                       const Eigen::MatrixXd& grad_y, AffineLayer& grad) {
    grad.weights = x.transpose() * grad_y;
    grad.bias = grad_y.colwise().sum();
    return grad_y * layer.weights.transpose();
}

}  // namespace detail

// Exact gradients of the two-head composite loss. grad_probabilities is routed
// through the softmax Jacobian; head gradients sum at the trunk junction.
inline EncoderGradients backward(const EncoderModel& model, const ForwardCache& cache,
                                 const Eigen::MatrixXd& grad_embeddings,
                                 const Eigen::MatrixXd& grad_probabilities) {
    if (grad_embeddings.rows() != cache.embeddings.rows() ||
        grad_embeddings.cols() != cache.embeddings.cols())
        throw ConfigError("grad_embeddings shape mismatch");
    if (grad_probabilities.rows() != cache.probabilities.rows() ||
        grad_probabilities.cols() != cache.probabilities.cols())
        throw ConfigError("grad_probabilities shape mismatch");

    // softmax: dL/dz_k = p_k * (g_k - sum_j g_j p_j)
    Eigen::MatrixXd grad_logits(cache.logits.rows(), cache.logits.cols());
    for (long i = 0; i < cache.logits.rows(); ++i) {
        const double dot = grad_probabilities.row(i).dot(cache.probabilities.row(i));
        const Eigen::RowVectorXd shifted =
            (grad_probabilities.row(i).array() - dot).matrix();
        grad_logits.row(i) = cache.probabilities.row(i).cwiseProduct(shifted);
    }

    EncoderGradients grads;
    grads.trunk.resize(model.trunk.size());
    const Eigen::MatrixXd& trunk_out = cache.trunk_act.back();
    Eigen::MatrixXd g =
        detail::affine_backward(model.embed_head, trunk_out, grad_embeddings,
                                grads.embed_head) +
        detail::affine_backward(model.softmax_head, trunk_out, grad_logits,
                                grads.softmax_head);

    for (long l = static_cast<long>(model.trunk.size()) - 1; l >= 0; --l) {
        // ReLU gate
        g = g.cwiseProduct(
            (cache.trunk_pre[l].array() > 0.0).cast<double>().matrix());
        const Eigen::MatrixXd& x =
            (l == 0) ? cache.input : cache.trunk_act[l - 1];
        g = detail::affine_backward(model.trunk[l], x, g, grads.trunk[l]);
    }
    return grads;
}

// Time-based decay: lr_t = lr / (1 + decay * step_index).
inline void sgd_step(EncoderModel& model, const EncoderGradients& grads, double lr,
                     double decay, long step_index) {
    const double lr_t = lr / (1.0 + decay * static_cast<double>(step_index));
    auto apply = [lr_t](AffineLayer& layer, const AffineLayer& g) {
        if (!g.weights.allFinite() || !g.bias.allFinite())
            throw NumericError("non-finite gradient in sgd_step");
        layer.weights -= lr_t * g.weights;
        layer.bias -= lr_t * g.bias;
    };
    for (size_t l = 0; l < model.trunk.size(); ++l) apply(model.trunk[l], grads.trunk[l]);
    apply(model.embed_head, grads.embed_head);
    apply(model.softmax_head, grads.softmax_head);
}

inline Eigen::MatrixXd extract_embeddings(const EncoderModel& model,
                                          const Eigen::MatrixXd& inputs) {
    return forward(model, inputs).embeddings;
}

inline Eigen::MatrixXd extract_embeddings(const EncoderModel& model,
                                          const LabeledFeatureSet& set) {
    return extract_embeddings(model, set.features);
}

enum class LossVariant { geodesic, cosine };

inline LossVariant parse_variant(const std::string& s) {
    if (s == "geodesic") return LossVariant::geodesic;
    if (s == "cosine") return LossVariant::cosine;
    throw ConfigError("unknown loss variant '" + s + "'");
}

enum class PrototypeMode { local, global, global_plus_local };

inline PrototypeMode parse_prototype_mode(const std::string& s) {
    if (s == "local") return PrototypeMode::local;
    if (s == "global") return PrototypeMode::global;
    if (s == "global+local" || s == "global_plus_local")
        return PrototypeMode::global_plus_local;
    throw ConfigError("unknown prototype mode '" + s + "'");
}

struct TrainConfig {
    LayerDims dims;
    double lr = 1e-4;
    double lr_decay = 1e-6;
    int batch_size = 64;
    int epochs = 50;
    int refresh_every = 5;
    int k = 5;
    int n_subclasses = 10;
    Linkage linkage = Linkage::average;
    LossConfig loss;
    LossVariant variant = LossVariant::geodesic;
    PrototypeMode proto_mode = PrototypeMode::local;
    std::uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& cfg) {
    if (cfg.lr <= 0) throw ConfigError("lr must be > 0");
    if (cfg.lr_decay < 0) throw ConfigError("lr_decay must be >= 0");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (cfg.refresh_every < 1) throw ConfigError("refresh_every must be >= 1");
    if (cfg.k < 1) throw ConfigError("k must be >= 1");
    if (cfg.n_subclasses < 1) throw ConfigError("n_subclasses must be >= 1");
    validate_loss_config(cfg.loss);
}

struct EpochRecord {
    double l_intra = 0.0;  // cosine variant logs its contrastive term here
    double l_inter = 0.0;
    double l_ce = 0.0;
    double l_total = 0.0;
    double train_acc = 0.0;
};

using TrainHistory = std::vector<EpochRecord>;

inline void write_history_csv(const TrainHistory& history, std::ostream& out) {
    out << "epoch,l_intra,l_inter,l_ce,l_total,train_acc\n";
    for (size_t e = 0; e < history.size(); ++e)
        out << e << "," << format_double(history[e].l_intra) << ","
            << format_double(history[e].l_inter) << ","
            << format_double(history[e].l_ce) << ","
            << format_double(history[e].l_total) << ","
            << format_double(history[e].train_acc) << "\n";
}

namespace detail {

// Interleaves shuffled per-class queues, always drawing from the class with
// the most samples left, so batches mix classes whenever the data allows.
inline std::vector<long> stratified_order(const LabeledFeatureSet& set,
                                          std::mt19937_64& rng) {
    const int classes = set.num_classes();
    std::vector<std::vector<long>> queues(classes);
    for (int c = 0; c < classes; ++c) {
        queues[c] = set.rows_of_class(c);
        std::shuffle(queues[c].begin(), queues[c].end(), rng);
    }
    std::vector<size_t> next(classes, 0);
    std::vector<long> order;
    order.reserve(set.size());
    for (long t = 0; t < set.size(); ++t) {
        int pick = -1;
        size_t most = 0;
        for (int c = 0; c < classes; ++c) {
            const size_t left = queues[c].size() - next[c];
            if (left > most) {
                most = left;
                pick = c;
            }
        }
        order.push_back(queues[pick][next[pick]++]);
    }
    return order;
}

struct ManifoldState {
    std::vector<PrototypeSet> prototypes_by_class;
    std::vector<int> row_subclass;  // per original row
};

inline ManifoldState refresh_state(const LabeledFeatureSet& set,
                                   const Eigen::MatrixXd& embeddings,
                                   const TrainConfig& cfg, int epoch) {
    const int n_eff = cfg.proto_mode == PrototypeMode::global ? 1 : cfg.n_subclasses;
    std::vector<ClassManifold> manifolds;
    if (cfg.variant == LossVariant::geodesic) {
        manifolds = refresh_manifold(set, embeddings, cfg.k, n_eff, cfg.linkage);
    } else {
        // cosine/NT-Xent baseline sub-classes via k-means
        manifolds = refresh_kmeans(set, embeddings, n_eff,
                                   derive_seed(cfg.seed, 0x4b4d0000ULL + epoch));
    }
    ManifoldState state;
    state.row_subclass.assign(set.size(), -1);
    for (auto& cm : manifolds) {
        for (size_t i = 0; i < cm.rows.size(); ++i)
            state.row_subclass[cm.rows[i]] = cm.partition.assignments[i];
        if (cfg.proto_mode == PrototypeMode::global_plus_local)
            append_global_prototype(cm.prototypes);
        state.prototypes_by_class.push_back(std::move(cm.prototypes));
    }
    return state;
}

}  // namespace detail

// Stage-1 loop: refresh the per-class manifold state every refresh_every
// epochs (including epoch 0), then run stratified mini-batches of the chosen
// loss variant under SGD. Deterministic for a fixed seed.
inline std::pair<EncoderModel, TrainHistory> train_encoder(const LabeledFeatureSet& set,
                                                           const TrainConfig& cfg) {
    validate_train_config(cfg);
    validate_feature_set(set);
    const int classes = set.num_classes();
    if (classes < 2) throw ConfigError("training needs >= 2 classes");
    if (set.dim() != cfg.dims.input_dim)
        throw ConfigError("cfg.dims.input_dim does not match data dimension");
    if (cfg.dims.n_classes != classes)
        throw ConfigError("cfg.dims.n_classes does not match data");
    const int n_eff = cfg.proto_mode == PrototypeMode::global ? 1 : cfg.n_subclasses;
    for (int c = 0; c < classes; ++c) {
        const long nc = static_cast<long>(set.rows_of_class(c).size());
        if (nc <= cfg.k && cfg.variant == LossVariant::geodesic)
            throw ConfigError("class " + std::to_string(c) + " smaller than k+1");
        if (nc < n_eff)
            throw ConfigError("class " + std::to_string(c) + " smaller than n");
    }

    EncoderModel model = init_encoder(cfg.dims, cfg.seed);
    auto rng = make_rng(derive_seed(cfg.seed, 0x53484c46ULL));
    TrainHistory history;
    detail::ManifoldState state;
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch % cfg.refresh_every == 0)
            state = detail::refresh_state(set, extract_embeddings(model, set), cfg, epoch);

        const auto order = detail::stratified_order(set, rng);
        EpochRecord rec;
        long correct = 0;
        long batches = 0;
        for (long start = 0; start < set.size(); start += cfg.batch_size) {
            const long stop = std::min<long>(start + cfg.batch_size, set.size());
            const long count = stop - start;
            Eigen::MatrixXd inputs(count, set.dim());
            Batch batch;
            batch.class_labels.resize(count);
            batch.subclass_assignments.resize(count);
            for (long i = 0; i < count; ++i) {
                const long row = order[start + i];
                inputs.row(i) = set.features.row(row);
                batch.class_labels[i] = set.labels[row];
                batch.subclass_assignments[i] = state.row_subclass[row];
            }

            const ForwardCache cache = forward(model, inputs);
            batch.embeddings = cache.embeddings;

            EncoderGradients grads;
            if (cfg.variant == LossVariant::geodesic) {
                const TotalLoss tl = total_loss(batch, state.prototypes_by_class,
                                                cache.probabilities,
                                                batch.class_labels, cfg.loss);
                grads = backward(model, cache, tl.grad_embeddings, tl.grad_probabilities);
                rec.l_intra += tl.intra;
                rec.l_inter += tl.inter;
                rec.l_ce += tl.ce;
                rec.l_total += tl.value;
            } else {
                const LossValue con =
                    cosine_prototype_loss(batch, state.prototypes_by_class, cfg.loss);
                const LossValue ce = cross_entropy(cache.probabilities, batch.class_labels);
                grads = backward(model, cache, con.grad, ce.grad);
                rec.l_intra += con.value;
                rec.l_ce += ce.value;
                rec.l_total += con.value + ce.value;
            }
            for (long i = 0; i < count; ++i) {
                long pred = 0;
                cache.probabilities.row(i).maxCoeff(&pred);
                if (pred == batch.class_labels[i]) ++correct;
            }
            sgd_step(model, grads, cfg.lr, cfg.lr_decay, step);
            ++step;
            ++batches;
        }
        rec.l_intra /= batches;
        rec.l_inter /= batches;
        rec.l_ce /= batches;
        rec.l_total /= batches;
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(set.size());
        history.push_back(rec);
    }
    return {std::move(model), std::move(history)};
}

// ---- checkpoint (versioned JSON) ----

namespace detail {

inline nlohmann::json layer_to_json(const AffineLayer& layer) {
    std::vector<double> w;
    w.reserve(layer.weights.size());
    for (long i = 0; i < layer.weights.rows(); ++i)
        for (long j = 0; j < layer.weights.cols(); ++j) w.push_back(layer.weights(i, j));
    std::vector<double> b(layer.bias.data(), layer.bias.data() + layer.bias.size());
    return nlohmann::json{{"rows", layer.weights.rows()},
                          {"cols", layer.weights.cols()},
                          {"w", w},
                          {"b", b}};
}

inline AffineLayer layer_from_json(const nlohmann::json& j) {
    AffineLayer layer;
    const long rows = j.at("rows").get<long>();
    const long cols = j.at("cols").get<long>();
    const auto w = j.at("w").get<std::vector<double>>();
    const auto b = j.at("b").get<std::vector<double>>();
    if (static_cast<long>(w.size()) != rows * cols || static_cast<long>(b.size()) != cols)
        throw ParseError("checkpoint layer size mismatch");
    layer.weights.resize(rows, cols);
    for (long i = 0; i < rows; ++i)
        for (long j2 = 0; j2 < cols; ++j2) layer.weights(i, j2) = w[i * cols + j2];
    layer.bias = Eigen::Map<const Eigen::RowVectorXd>(b.data(), cols);
    return layer;
}

}  // namespace detail

inline void save_encoder(const EncoderModel& model, const std::string& path) {
    nlohmann::json j;
    j["format"] = "mcl-encoder";
    j["version"] = 1;
    j["dims"] = {{"input", model.dims.input_dim},
                 {"trunk", model.dims.trunk},
                 {"embed", model.dims.embed_dim},
                 {"classes", model.dims.n_classes}};
    j["trunk"] = nlohmann::json::array();
    for (const auto& l : model.trunk) j["trunk"].push_back(detail::layer_to_json(l));
    j["embed_head"] = detail::layer_to_json(model.embed_head);
    j["softmax_head"] = detail::layer_to_json(model.softmax_head);

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed for " + path);
}

inline EncoderModel load_encoder(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": invalid checkpoint JSON: " + e.what());
    }
    if (j.value("format", "") != "mcl-encoder" || j.value("version", 0) != 1)
        throw ParseError(path + ": not a version-1 encoder checkpoint");

    EncoderModel model;
    model.dims.input_dim = j.at("dims").at("input").get<long>();
    model.dims.trunk = j.at("dims").at("trunk").get<std::vector<long>>();
    model.dims.embed_dim = j.at("dims").at("embed").get<long>();
    model.dims.n_classes = j.at("dims").at("classes").get<long>();
    for (const auto& l : j.at("trunk")) model.trunk.push_back(detail::layer_from_json(l));
    model.embed_head = detail::layer_from_json(j.at("embed_head"));
    model.softmax_head = detail::layer_from_json(j.at("softmax_head"));
    return model;
}

}  // namespace mcl
