#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcl/common.hpp"
#include "mcl/dataio.hpp"
#include "mcl/encoder.hpp"
#include "mcl/losses.hpp"

namespace mcl {

// A bag is the concatenation of patches_per_bag embedded patch features from
// one slide, carrying the slide-level label.
struct MilBag {
    Eigen::VectorXd bag_vector;
    std::string slide_id;
    int label = 0;
};

struct MilConfig {
    int bags_per_slide = 50;
    int patches_per_bag = 100;
    int classifier_hidden = 512;
    double lr = 1e-3;
    double decay = 1e-6;
    int epochs = 50;
    int batch_size = 4;
    std::uint64_t seed = 0;
};

inline void validate_mil_config(const MilConfig& cfg) {
    if (cfg.bags_per_slide < 1) throw ConfigError("bags_per_slide must be >= 1");
    if (cfg.patches_per_bag < 1) throw ConfigError("patches_per_bag must be >= 1");
    if (cfg.classifier_hidden < 1) throw ConfigError("classifier_hidden must be >= 1");
    if (cfg.lr <= 0) throw ConfigError("mil lr must be > 0");
    if (cfg.decay < 0) throw ConfigError("mil decay must be >= 0");
    if (cfg.epochs < 0) throw ConfigError("mil epochs must be >= 0");
    if (cfg.batch_size < 1) throw ConfigError("mil batch_size must be >= 1");
}

// Samples patch rows without replacement when the slide has enough patches,
// with replacement otherwise. Deterministic per (seed, slide_id).
inline std::vector<MilBag> make_bags(const Eigen::MatrixXd& embeddings,
                                     const std::string& slide_id, int label,
                                     const MilConfig& cfg, std::uint64_t seed) {
    validate_mil_config(cfg);
    const long n = embeddings.rows();
    if (n == 0) throw DataError("slide '" + slide_id + "' has no patches");
    const long dim = embeddings.cols();
    auto rng = make_rng(derive_seed(seed, fnv1a64(slide_id)));

    std::vector<MilBag> bags;
    bags.reserve(cfg.bags_per_slide);
    std::vector<long> pool(n);
    for (long i = 0; i < n; ++i) pool[i] = i;

    for (int b = 0; b < cfg.bags_per_slide; ++b) {
        MilBag bag;
        bag.slide_id = slide_id;
        bag.label = label;
        bag.bag_vector.resize(static_cast<long>(cfg.patches_per_bag) * dim);
        if (n >= cfg.patches_per_bag) {
            // partial Fisher-Yates keeps the sampled order random
            for (int t = 0; t < cfg.patches_per_bag; ++t) {
                std::uniform_int_distribution<long> pick(t, n - 1);
                std::swap(pool[t], pool[pick(rng)]);
                bag.bag_vector.segment(static_cast<long>(t) * dim, dim) =
                    embeddings.row(pool[t]);
            }
        } else {
            std::uniform_int_distribution<long> pick(0, n - 1);
            for (int t = 0; t < cfg.patches_per_bag; ++t)
                bag.bag_vector.segment(static_cast<long>(t) * dim, dim) =
                    embeddings.row(pick(rng));
        }
        bags.push_back(std::move(bag));
    }
    return bags;
}

// Bag classifier: [bag_dim -> hidden -> hidden -> C], ReLU between affine
// layers, softmax output.
struct MilClassifier {
    std::vector<AffineLayer> layers;

    long input_dim() const { return layers.front().weights.rows(); }
    long n_classes() const { return layers.back().weights.cols(); }
};

inline MilClassifier init_mil_classifier(long bag_dim, long hidden, long classes,
                                         std::uint64_t seed) {
    if (bag_dim < 1 || hidden < 1 || classes < 2)
        throw ConfigError("bad MIL classifier dimensions");
    auto rng = make_rng(derive_seed(seed, 0x4d494c49ULL));
    MilClassifier clf;
    clf.layers.push_back(detail::init_affine(bag_dim, hidden, rng));
    clf.layers.push_back(detail::init_affine(hidden, hidden, rng));
    clf.layers.push_back(detail::init_affine(hidden, classes, rng));
    return clf;
}

struct MilForwardCache {
    Eigen::MatrixXd input;
    std::vector<Eigen::MatrixXd> pre;  // pre-activations of hidden layers
    std::vector<Eigen::MatrixXd> act;
    Eigen::MatrixXd logits;
    Eigen::MatrixXd probabilities;
};

inline MilForwardCache mil_forward(const MilClassifier& clf, const Eigen::MatrixXd& x) {
    if (x.cols() != clf.input_dim())
        throw ConfigError("bag dimension does not match classifier");
    MilForwardCache cache;
    cache.input = x;
    Eigen::MatrixXd cur = x;
    for (size_t l = 0; l + 1 < clf.layers.size(); ++l) {
        Eigen::MatrixXd pre = (cur * clf.layers[l].weights).rowwise() + clf.layers[l].bias;
        if (!pre.allFinite())
            throw NumericError("non-finite activation in MIL layer " + std::to_string(l));
        cache.pre.push_back(pre);
        cur = pre.cwiseMax(0.0);
        cache.act.push_back(cur);
    }
    cache.logits = (cur * clf.layers.back().weights).rowwise() + clf.layers.back().bias;
    if (!cache.logits.allFinite())
        throw NumericError("non-finite logits in MIL classifier");
    cache.probabilities.resizeLike(cache.logits);
    for (long i = 0; i < cache.logits.rows(); ++i) {
        const Eigen::RowVectorXd row = cache.logits.row(i);
        const double m = row.maxCoeff();
        Eigen::RowVectorXd ex = (row.array() - m).exp();
        cache.probabilities.row(i) = ex / ex.sum();
    }
    return cache;
}

inline std::vector<AffineLayer> mil_backward(const MilClassifier& clf,
                                             const MilForwardCache& cache,
                                             const Eigen::MatrixXd& grad_probabilities) {
    Eigen::MatrixXd grad_logits(cache.logits.rows(), cache.logits.cols());
    for (long i = 0; i < cache.logits.rows(); ++i) {
        const double dot = grad_probabilities.row(i).dot(cache.probabilities.row(i));
        const Eigen::RowVectorXd shifted =
            (grad_probabilities.row(i).array() - dot).matrix();
        grad_logits.row(i) = cache.probabilities.row(i).cwiseProduct(shifted);
    }

    std::vector<AffineLayer> grads(clf.layers.size());
    Eigen::MatrixXd g = detail::affine_backward(
        clf.layers.back(), cache.act.back(), grad_logits, grads.back());
    for (long l = static_cast<long>(clf.layers.size()) - 2; l >= 0; --l) {
        g = g.cwiseProduct((cache.pre[l].array() > 0.0).cast<double>().matrix());
        const Eigen::MatrixXd& x = (l == 0) ? cache.input : cache.act[l - 1];
        g = detail::affine_backward(clf.layers[l], x, g, grads[l]);
    }
    return grads;
}

inline void mil_sgd_step(MilClassifier& clf, const std::vector<AffineLayer>& grads,
                         double lr, double decay, long step_index) {
    const double lr_t = lr / (1.0 + decay * static_cast<double>(step_index));
    for (size_t l = 0; l < clf.layers.size(); ++l) {
        if (!grads[l].weights.allFinite() || !grads[l].bias.allFinite())
            throw NumericError("non-finite gradient in MIL sgd step");
        clf.layers[l].weights -= lr_t * grads[l].weights;
        clf.layers[l].bias -= lr_t * grads[l].bias;
    }
}

inline MilClassifier train_mil(const std::vector<MilBag>& bags, const MilConfig& cfg) {
    validate_mil_config(cfg);
    if (bags.empty()) throw DataError("no bags to train on");
    const long bag_dim = bags.front().bag_vector.size();
    int classes = 0;
    for (const auto& b : bags) {
        if (b.bag_vector.size() != bag_dim) throw DataError("inconsistent bag dimensions");
        classes = std::max(classes, b.label + 1);
    }
    bool multi = false;
    for (const auto& b : bags)
        if (b.label != bags.front().label) multi = true;
    if (!multi) throw ConfigError("MIL training needs bags from >= 2 classes");

    MilClassifier clf =
        init_mil_classifier(bag_dim, cfg.classifier_hidden, classes, cfg.seed);
    auto rng = make_rng(derive_seed(cfg.seed, 0x4d534846ULL));
    std::vector<long> order(bags.size());
    for (size_t i = 0; i < bags.size(); ++i) order[i] = static_cast<long>(i);

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t stop = std::min(order.size(), start + cfg.batch_size);
            const long count = static_cast<long>(stop - start);
            Eigen::MatrixXd x(count, bag_dim);
            std::vector<int> labels(count);
            for (long i = 0; i < count; ++i) {
                x.row(i) = bags[order[start + i]].bag_vector;
                labels[i] = bags[order[start + i]].label;
            }
            const MilForwardCache cache = mil_forward(clf, x);
            const LossValue ce = cross_entropy(cache.probabilities, labels);
            mil_sgd_step(clf, mil_backward(clf, cache, ce.grad), cfg.lr, cfg.decay, step);
            ++step;
        }
    }
    return clf;
}

struct SlidePrediction {
    std::string slide_id;
    std::vector<int> bag_predictions;
    int final_label = 0;
    double vote_fraction = 0.0;
};

// Majority vote over the slide's bags. Ties break toward the class with the
// higher mean predicted probability across bags, then the lower class index.
inline SlidePrediction predict_slide(const MilClassifier& clf,
                                     const std::vector<MilBag>& bags) {
    if (bags.empty()) throw DataError("predict_slide needs >= 1 bag");
    const long count = static_cast<long>(bags.size());
    Eigen::MatrixXd x(count, bags.front().bag_vector.size());
    for (long i = 0; i < count; ++i) x.row(i) = bags[i].bag_vector;

    const MilForwardCache cache = mil_forward(clf, x);
    SlidePrediction pred;
    pred.slide_id = bags.front().slide_id;
    const long classes = cache.probabilities.cols();
    std::vector<long> votes(classes, 0);
    Eigen::RowVectorXd mean_prob = Eigen::RowVectorXd::Zero(classes);
    for (long i = 0; i < count; ++i) {
        long arg = 0;
        cache.probabilities.row(i).maxCoeff(&arg);
        pred.bag_predictions.push_back(static_cast<int>(arg));
        ++votes[arg];
        mean_prob += cache.probabilities.row(i);
    }
    mean_prob /= static_cast<double>(count);

    long best = 0;
    for (long c = 1; c < classes; ++c) {
        if (votes[c] > votes[best] ||
            (votes[c] == votes[best] && mean_prob(c) > mean_prob(best)))
            best = c;
    }
    pred.final_label = static_cast<int>(best);
    pred.vote_fraction = static_cast<double>(votes[best]) / static_cast<double>(count);
    return pred;
}

struct Metrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Accuracy plus macro-averaged precision/recall/F1 (zero divisions count as 0).
inline Metrics evaluate(const std::vector<SlidePrediction>& predictions,
                        const std::map<std::string, int>& truth) {
    if (predictions.empty()) throw DataError("no predictions to evaluate");
    int classes = 0;
    for (const auto& [id, l] : truth) classes = std::max(classes, l + 1);
    for (const auto& p : predictions) classes = std::max(classes, p.final_label + 1);

    Eigen::MatrixXd confusion = Eigen::MatrixXd::Zero(classes, classes);
    long correct = 0;
    for (const auto& p : predictions) {
        auto it = truth.find(p.slide_id);
        if (it == truth.end())
            throw DataError("unknown slide id '" + p.slide_id + "' in predictions");
        confusion(it->second, p.final_label) += 1.0;
        if (it->second == p.final_label) ++correct;
    }

    Metrics m;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(predictions.size());
    for (int c = 0; c < classes; ++c) {
        const double tp = confusion(c, c);
        const double pred_c = confusion.col(c).sum();
        const double true_c = confusion.row(c).sum();
        const double prec = pred_c > 0 ? tp / pred_c : 0.0;
        const double rec = true_c > 0 ? tp / true_c : 0.0;
        const double f1 = (prec + rec) > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        m.precision += prec;
        m.recall += rec;
        m.f1 += f1;
    }
    m.precision /= classes;
    m.recall /= classes;
    m.f1 /= classes;
    return m;
}

// ---- slide grouping and the end-to-end experiment ----

struct Slide {
    std::string id;
    int label = 0;
    std::vector<long> rows;
};

inline std::vector<Slide> group_slides(const LabeledFeatureSet& set) {
    std::map<std::string, Slide> by_id;
    for (long i = 0; i < set.size(); ++i) {
        auto [it, inserted] = by_id.try_emplace(set.group_ids[i]);
        if (inserted) {
            it->second.id = set.group_ids[i];
            it->second.label = set.labels[i];
        } else if (it->second.label != set.labels[i]) {
            throw DataError("slide '" + set.group_ids[i] + "' spans multiple classes");
        }
        it->second.rows.push_back(i);
    }
    std::vector<Slide> slides;
    for (auto& [id, s] : by_id) slides.push_back(std::move(s));
    return slides;
}

inline Eigen::MatrixXd slide_embeddings(const Eigen::MatrixXd& embeddings,
                                        const Slide& slide) {
    Eigen::MatrixXd out(static_cast<long>(slide.rows.size()), embeddings.cols());
    for (size_t i = 0; i < slide.rows.size(); ++i)
        out.row(static_cast<long>(i)) = embeddings.row(slide.rows[i]);
    return out;
}

struct ExperimentReport {
    std::vector<Metrics> runs;
    Metrics mean;
    TrainHistory encoder_history;
};

// Stage 1 once, then `repeats` MIL train/evaluate rounds with distinct seeds;
// the loss variant (geodesic vs cosine) comes from encoder_cfg.variant.
inline ExperimentReport run_experiment(const LabeledFeatureSet& train_set,
                                       const LabeledFeatureSet& test_set,
                                       const TrainConfig& encoder_cfg,
                                       const MilConfig& mil_cfg, int repeats) {
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
    validate_mil_config(mil_cfg);

    auto [model, history] = train_encoder(train_set, encoder_cfg);
    const Eigen::MatrixXd train_emb = extract_embeddings(model, train_set);
    const Eigen::MatrixXd test_emb = extract_embeddings(model, test_set);
    const auto train_slides = group_slides(train_set);
    const auto test_slides = group_slides(test_set);

    std::map<std::string, int> truth;
    for (const auto& s : test_slides) truth[s.id] = s.label;

    ExperimentReport report;
    report.encoder_history = std::move(history);
    for (int rep = 0; rep < repeats; ++rep) {
        const std::uint64_t rep_seed = derive_seed(mil_cfg.seed, 1000 + rep);
        std::vector<MilBag> train_bags;
        for (const auto& s : train_slides) {
            auto bags = make_bags(slide_embeddings(train_emb, s), s.id, s.label,
                                  mil_cfg, rep_seed);
            train_bags.insert(train_bags.end(), bags.begin(), bags.end());
        }
        MilConfig rep_cfg = mil_cfg;
        rep_cfg.seed = rep_seed;
        const MilClassifier clf = train_mil(train_bags, rep_cfg);

        std::vector<SlidePrediction> predictions;
        for (const auto& s : test_slides) {
            auto bags = make_bags(slide_embeddings(test_emb, s), s.id, s.label,
                                  mil_cfg, derive_seed(rep_seed, 0x54455354ULL));
            predictions.push_back(predict_slide(clf, bags));
        }
        report.runs.push_back(evaluate(predictions, truth));
    }

    for (const auto& r : report.runs) {
        report.mean.accuracy += r.accuracy;
        report.mean.precision += r.precision;
        report.mean.recall += r.recall;
        report.mean.f1 += r.f1;
    }
    const double n = static_cast<double>(report.runs.size());
    report.mean.accuracy /= n;
    report.mean.precision /= n;
    report.mean.recall /= n;
    report.mean.f1 /= n;
    return report;
}

// ---- file formats ----

// Bags CSV: header "slide_id,label,v0..v{L-1}".
inline void save_bags(const std::vector<MilBag>& bags, const std::string& path) {
    if (bags.empty()) throw DataError("no bags to save");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "slide_id,label";
    for (long j = 0; j < bags.front().bag_vector.size(); ++j) out << ",v" << j;
    out << "\n";
    for (const auto& b : bags) {
        out << b.slide_id << "," << b.label;
        for (long j = 0; j < b.bag_vector.size(); ++j)
            out << "," << format_double(b.bag_vector(j));
        out << "\n";
    }
    if (!out) throw IoError("write failed for " + path);
}

inline std::vector<MilBag> load_bags(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ":1: empty bag file");
    const auto header = detail::split_csv_line(line);
    if (header.size() < 3 || header[0] != "slide_id" || header[1] != "label")
        throw ParseError(path + ":1: bad bag header");
    const long dim = static_cast<long>(header.size()) - 2;

    std::vector<MilBag> bags;
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        const std::string where = path + ":" + std::to_string(line_no) + ": ";
        if (static_cast<long>(fields.size()) != dim + 2)
            throw ParseError(where + "wrong column count");
        MilBag bag;
        bag.slide_id = fields[0];
        long label = 0;
        if (!parse_int(fields[1], label) || label < 0)
            throw ParseError(where + "bad label '" + fields[1] + "'");
        bag.label = static_cast<int>(label);
        bag.bag_vector.resize(dim);
        for (long j = 0; j < dim; ++j) {
            double v = 0.0;
            if (!parse_double(fields[j + 2], v) || !std::isfinite(v))
                throw ParseError(where + "bad value '" + fields[j + 2] + "'");
            bag.bag_vector(j) = v;
        }
        bags.push_back(std::move(bag));
    }
    return bags;
}

inline void save_mil_classifier(const MilClassifier& clf, const std::string& path) {
    nlohmann::json j;
    j["format"] = "mcl-mil";
    j["version"] = 1;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : clf.layers) j["layers"].push_back(detail::layer_to_json(l));
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed for " + path);
}

inline MilClassifier load_mil_classifier(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": invalid checkpoint JSON: " + e.what());
    }
    if (j.value("format", "") != "mcl-mil" || j.value("version", 0) != 1)
        throw ParseError(path + ": not a version-1 MIL checkpoint");
    MilClassifier clf;
    for (const auto& l : j.at("layers")) clf.layers.push_back(detail::layer_from_json(l));
    if (clf.layers.size() != 3) throw ParseError(path + ": unexpected layer count");
    return clf;
}

// Predictions CSV: "slide_id,true_label,predicted_label,vote_fraction".
inline void write_predictions_csv(const std::vector<SlidePrediction>& predictions,
                                  const std::map<std::string, int>& truth,
                                  std::ostream& out) {
    out << "slide_id,true_label,predicted_label,vote_fraction\n";
    for (const auto& p : predictions) {
        auto it = truth.find(p.slide_id);
        if (it == truth.end())
            throw DataError("unknown slide id '" + p.slide_id + "'");
        out << p.slide_id << "," << it->second << "," << p.final_label << ","
            << format_double(p.vote_fraction) << "\n";
    }
}

// Metrics CSV: one row per run plus a mean row.
inline void write_metrics_csv(const ExperimentReport& report, std::ostream& out) {
    out << "run,accuracy,precision,recall,f1\n";
    for (size_t r = 0; r < report.runs.size(); ++r)
        out << r << "," << format_double(report.runs[r].accuracy) << ","
            << format_double(report.runs[r].precision) << ","
            << format_double(report.runs[r].recall) << ","
            << format_double(report.runs[r].f1) << "\n";
    out << "mean," << format_double(report.mean.accuracy) << ","
        << format_double(report.mean.precision) << ","
        << format_double(report.mean.recall) << ","
        << format_double(report.mean.f1) << "\n";
}

}  // namespace mcl
