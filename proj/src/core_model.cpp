#include "radloop/core_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "radloop/errors.hpp"

namespace radloop {

namespace {

constexpr int kMinSide = 8;
constexpr int kMaxSide = 1024;

std::string dims(int w, int h) { return std::to_string(w) + "x" + std::to_string(h); }

// log(1 + exp(z)) without overflow.
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double logit(const LabelWeights& layer, std::span<const double> x) {
    double z = layer.bias;
    const auto& w = layer.plane.values;
    for (std::size_t i = 0; i < x.size(); ++i) z += w[i] * x[i];
    return z;
}

void check_dims(const ImagePayload& image, const ModelConfig& cfg) {
    if (image.width != cfg.width || image.height != cfg.height) {
        throw InvalidInput("image dimensions " + dims(image.width, image.height) + " do not match model dimensions " +
                           dims(cfg.width, cfg.height));
    }
}

}  // namespace

double ModelConfig::inside_margin() const {
    return m_in.value_or(1.0 / (static_cast<double>(height) * static_cast<double>(width)));
}

void ModelConfig::validate() const {
    if (height < kMinSide || height > kMaxSide) throw InvalidInput("height out of range");
    if (width < kMinSide || width > kMaxSide) throw InvalidInput("width out of range");
    if (labels.empty()) throw InvalidInput("labels must not be empty");
    std::set<std::string> seen;
    for (const auto& l : labels) {
        if (l.empty()) throw InvalidInput("labels must not contain an empty identifier");
        if (!seen.insert(l).second) throw InvalidInput("duplicate label '" + l + "'");
    }
    if (!(theta_det > 0.0 && theta_det < 1.0)) throw InvalidInput("theta_det must lie in (0,1)");
    if (!(tau > 0.0 && tau < 1.0)) throw InvalidInput("tau must lie in (0,1)");
    if (!(eta > 0.0) || !std::isfinite(eta)) throw InvalidInput("eta must be positive");
    if (!(lambda_loc >= 0.0) || !std::isfinite(lambda_loc)) throw InvalidInput("lambda_loc must be non-negative");
    if (!(lambda_reg >= 0.0) || !std::isfinite(lambda_reg)) throw InvalidInput("lambda_reg must be non-negative");
    if (m_in && !(*m_in > 0.0 && std::isfinite(*m_in))) throw InvalidInput("m_in must be positive");
    if (epochs_default <= 0) throw InvalidInput("epochs_default must be positive");
}

std::size_t ModelConfig::label_index(const std::string& label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end()) throw UnknownLabel(label);
    return static_cast<std::size_t>(it - labels.begin());
}

bool ModelConfig::has_label(const std::string& label) const {
    return std::find(labels.begin(), labels.end(), label) != labels.end();
}

void ImagePayload::validate() const {
    if (width < kMinSide || width > kMaxSide || height < kMinSide || height > kMaxSide) {
        throw InvalidInput("image dimensions " + dims(width, height) + " outside [8,1024]");
    }
    if (pixels.size() != static_cast<std::size_t>(width) * height) {
        throw InvalidInput("image carries " + std::to_string(pixels.size()) + " bytes, expected " +
                           std::to_string(static_cast<std::size_t>(width) * height) + " for " + dims(width, height));
    }
}

ModelWeights ModelWeights::zeros(const ModelConfig& cfg) {
    ModelWeights w;
    w.layers.assign(cfg.labels.size(), LabelWeights{Plane(cfg.height, cfg.width), 0.0});
    return w;
}

bool ModelWeights::all_finite() const {
    for (const auto& layer : layers) {
        if (!std::isfinite(layer.bias)) return false;
        for (double v : layer.plane.values) {
            if (!std::isfinite(v)) return false;
        }
    }
    return true;
}

void ModelWeights::validate(const ModelConfig& cfg) const {
    if (layers.size() != cfg.labels.size()) {
        throw InvalidInput("weights carry " + std::to_string(layers.size()) + " layers, config has " +
                           std::to_string(cfg.labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& p = layers[i].plane;
        if (p.rows != cfg.height || p.cols != cfg.width || p.values.size() != cfg.cells()) {
            throw InvalidInput("weight plane for '" + cfg.labels[i] + "' is " + dims(p.cols, p.rows) +
                               ", expected " + dims(cfg.width, cfg.height));
        }
    }
    if (!all_finite()) throw InvalidInput("weights contain a non-finite value");
}

BoundingBox BoundingBox::from_extent(int left, int top, int right, int bottom) {
    return BoundingBox{left, top, right, top, right, bottom, left, bottom};
}

void BoundingBox::validate(int width, int height) const {
    if (x1 != x4) throw InvalidInput("box: x1 must equal x4");
    if (x2 != x3) throw InvalidInput("box: x2 must equal x3");
    if (y1 != y2) throw InvalidInput("box: y1 must equal y2");
    if (y3 != y4) throw InvalidInput("box: y3 must equal y4");
    if (x1 > x2) throw InvalidInput("box: x1 must not exceed x2");
    if (y1 > y3) throw InvalidInput("box: y1 must not exceed y3");
    if (x1 < 0 || y1 < 0 || x2 >= width || y3 >= height) {
        throw InvalidInput("box lies outside the " + dims(width, height) + " image");
    }
}

double iou(const BoundingBox& a, const BoundingBox& b) {
    const int l = std::max(a.left(), b.left());
    const int r = std::min(a.right(), b.right());
    const int t = std::max(a.top(), b.top());
    const int d = std::min(a.bottom(), b.bottom());
    if (l > r || t > d) return 0.0;
    const double inter = static_cast<double>(r - l + 1) * (d - t + 1);
    return inter / (static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter);
}

RleMask RleMask::from_dense(int height, int width, const std::vector<bool>& cells) {
    RleMask m{height, width, {}};
    const int n = height * width;
    int i = 0;
    while (i < n) {
        if (!cells[i]) {
            ++i;
            continue;
        }
        int start = i;
        while (i < n && cells[i]) ++i;
        m.runs.emplace_back(start, i - start);
    }
    return m;
}

std::vector<bool> RleMask::to_dense() const {
    std::vector<bool> cells(static_cast<std::size_t>(height) * width, false);
    for (auto [start, len] : runs) {
        std::fill_n(cells.begin() + start, len, true);
    }
    return cells;
}

std::size_t RleMask::count() const {
    std::size_t n = 0;
    for (const auto& run : runs) n += static_cast<std::size_t>(run.second);
    return n;
}

bool RleMask::contains(int row, int col) const {
    const int offset = row * width + col;
    for (auto [start, len] : runs) {
        if (offset < start) return false;
        if (offset < start + len) return true;
    }
    return false;
}

std::optional<BoundingBox> RleMask::bounds() const {
    if (runs.empty()) return std::nullopt;
    int left = width, right = -1, top = height, bottom = -1;
    for (auto [start, len] : runs) {
        const int end = start + len - 1;
        const int r0 = start / width, r1 = end / width;
        top = std::min(top, r0);
        bottom = std::max(bottom, r1);
        if (r0 == r1) {
            left = std::min(left, start % width);
            right = std::max(right, end % width);
        } else {
            // a run crossing a row boundary touches both the first and last column
            left = 0;
            right = width - 1;
        }
    }
    return BoundingBox::from_extent(left, top, right, bottom);
}

const LabelFinding& InferenceResult::finding(const std::string& label) const {
    for (const auto& f : findings) {
        if (f.label == label) return f;
    }
    throw UnknownLabel(label);
}

void TrainingExample::validate(const ModelConfig& cfg) const {
    image.validate();
    check_dims(image, cfg);
    cfg.label_index(label);
    if (y != 0 && y != 1) throw InvalidInput("training target y must be 0 or 1");
    if (box) {
        if (y != 1) throw InvalidInput("a supervision box requires y = 1");
        box->validate(image.width, image.height);
    }
}

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

std::vector<double> normalize(const ImagePayload& image) {
    std::vector<double> x(image.pixels.size());
    std::transform(image.pixels.begin(), image.pixels.end(), x.begin(),
                   [](std::uint8_t p) { return static_cast<double>(p) / 255.0; });
    return x;
}

namespace {

double max_value(std::span<const double> values) {
    double best = -std::numeric_limits<double>::infinity();
    for (double v : values) {
        if (!std::isfinite(v)) throw InvalidInput("saliency contains a non-finite value");
        best = std::max(best, v);
    }
    return best;
}

}  // namespace

RleMask extract_mask(std::span<const double> saliency, int rows, int cols, double tau) {
    if (saliency.size() != static_cast<std::size_t>(rows) * cols) {
        throw InvalidInput("saliency size does not match " + dims(cols, rows));
    }
    if (!(tau > 0.0 && tau < 1.0)) throw InvalidInput("tau must lie in (0,1)");
    const double peak = saliency.empty() ? 0.0 : max_value(saliency);
    if (!(peak > 0.0)) return RleMask{rows, cols, {}};
    const double cut = tau * peak;
    std::vector<bool> cells(saliency.size());
    for (std::size_t i = 0; i < saliency.size(); ++i) cells[i] = saliency[i] >= cut;
    return RleMask::from_dense(rows, cols, cells);
}

std::optional<BoundingBox> extract_box(std::span<const double> saliency, int rows, int cols, double tau) {
    if (saliency.size() != static_cast<std::size_t>(rows) * cols) {
        throw InvalidInput("saliency size does not match " + dims(cols, rows));
    }
    if (!(tau > 0.0 && tau < 1.0)) throw InvalidInput("tau must lie in (0,1)");
    const double peak = saliency.empty() ? 0.0 : max_value(saliency);
    if (!(peak > 0.0)) return std::nullopt;
    const double cut = tau * peak;
    int left = cols, right = -1, top = rows, bottom = -1;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (saliency[static_cast<std::size_t>(r) * cols + c] >= cut) {
                left = std::min(left, c);
                right = std::max(right, c);
                top = std::min(top, r);
                bottom = std::max(bottom, r);
            }
        }
    }
    return BoundingBox::from_extent(left, top, right, bottom);
}

InferenceResult infer(const ModelWeights& weights, const ImagePayload& image, const ModelConfig& cfg) {
    check_dims(image, cfg);
    image.validate();
    if (weights.layers.size() != cfg.labels.size()) throw InvalidInput("weights do not match the label set");

    const auto x = normalize(image);
    InferenceResult result;
    result.findings.reserve(cfg.labels.size());
    std::vector<double> saliency(x.size());
    for (std::size_t l = 0; l < cfg.labels.size(); ++l) {
        const auto& layer = weights.layers[l];
        LabelFinding f;
        f.label = cfg.labels[l];
        f.probability = sigmoid(logit(layer, x));
        if (f.probability >= cfg.theta_det) {
            for (std::size_t i = 0; i < x.size(); ++i) saliency[i] = layer.plane.values[i] * x[i];
            auto mask = extract_mask(saliency, cfg.height, cfg.width, cfg.tau);
            if (!mask.empty()) {
                f.box = extract_box(saliency, cfg.height, cfg.width, cfg.tau);
                f.mask = std::move(mask);
            }
        }
        result.findings.push_back(std::move(f));
    }
    return result;
}

namespace {

// Adds the gradient of the example's loss into `grad_layer` (scaled by
// `scale`) and returns the loss.
double accumulate(const LabelWeights& layer, const TrainingExample& ex, const ModelConfig& cfg,
                  std::span<const double> x, LabelWeights* grad_layer, double scale) {
    const double z = logit(layer, x);
    const double p = sigmoid(z);
    const double y = static_cast<double>(ex.y);
    double loss = softplus(z) - y * z;

    const auto& w = layer.plane.values;
    const double dz = (p - y) * scale;
    if (grad_layer) {
        auto& g = grad_layer->plane.values;
        for (std::size_t i = 0; i < x.size(); ++i) g[i] += dz * x[i];
        grad_layer->bias += dz;
    }

    if (cfg.lambda_reg > 0.0) {
        double sq = 0.0;
        for (double v : w) sq += v * v;
        loss += cfg.lambda_reg * sq;
        if (grad_layer) {
            auto& g = grad_layer->plane.values;
            const double k = 2.0 * cfg.lambda_reg * scale;
            for (std::size_t i = 0; i < w.size(); ++i) g[i] += k * w[i];
        }
    }

    if (ex.box && cfg.lambda_loc > 0.0) {
        const auto& box = *ex.box;
        const long n_in = box.area();
        const long n_out = static_cast<long>(x.size()) - n_in;
        const double margin = cfg.inside_margin();
        double in_sum = 0.0, out_sum = 0.0;
        const int cols = cfg.width;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
            const double s = w[i] * x[i];
            if (box.contains(r, c)) {
                if (margin - s > 0.0) {
                    in_sum += margin - s;
                    if (grad_layer) grad_layer->plane.values[i] -= cfg.lambda_loc * scale * x[i] / n_in;
                }
            } else if (s > 0.0) {
                out_sum += s;
                if (grad_layer) grad_layer->plane.values[i] += cfg.lambda_loc * scale * x[i] / n_out;
            }
        }
        double loc = in_sum / static_cast<double>(n_in);
        if (n_out > 0) loc += out_sum / static_cast<double>(n_out);
        loss += cfg.lambda_loc * loc;
    }
    return loss;
}

}  // namespace

LossAndGrad loss_and_grad(const ModelWeights& weights, const TrainingExample& ex, const ModelConfig& cfg) {
    const std::size_t l = cfg.label_index(ex.label);
    check_dims(ex.image, cfg);
    const auto x = normalize(ex.image);
    LossAndGrad out;
    out.grad = ModelWeights::zeros(cfg);
    out.loss = accumulate(weights.layers[l], ex, cfg, x, &out.grad.layers[l], 1.0);
    return out;
}

double loss_only(const ModelWeights& weights, const TrainingExample& ex, const ModelConfig& cfg) {
    const std::size_t l = cfg.label_index(ex.label);
    check_dims(ex.image, cfg);
    const auto x = normalize(ex.image);
    return accumulate(weights.layers[l], ex, cfg, x, nullptr, 1.0);
}

double batch_loss(const ModelWeights& weights, std::span<const TrainingExample> examples, const ModelConfig& cfg) {
    if (examples.empty()) throw InvalidInput("batch must not be empty");
    double total = 0.0;
    for (const auto& ex : examples) total += loss_only(weights, ex, cfg);
    return total / static_cast<double>(examples.size());
}

ModelWeights sgd_step(const ModelWeights& weights, std::span<const TrainingExample> examples, const ModelConfig& cfg) {
    if (examples.empty()) throw InvalidInput("sgd_step needs at least one example");
    ModelWeights grad = ModelWeights::zeros(cfg);
    const double scale = 1.0 / static_cast<double>(examples.size());
    for (const auto& ex : examples) {
        const std::size_t l = cfg.label_index(ex.label);
        check_dims(ex.image, cfg);
        const auto x = normalize(ex.image);
        accumulate(weights.layers[l], ex, cfg, x, &grad.layers[l], scale);
    }
    ModelWeights next = weights;
    for (std::size_t l = 0; l < next.layers.size(); ++l) {
        auto& dst = next.layers[l];
        const auto& g = grad.layers[l];
        for (std::size_t i = 0; i < dst.plane.values.size(); ++i) dst.plane.values[i] -= cfg.eta * g.plane.values[i];
        dst.bias -= cfg.eta * g.bias;
    }
    return next;
}

}  // namespace radloop
