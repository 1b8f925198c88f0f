#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace radloop {

/// Model hyper-parameters and the thresholds used when turning saliency into
/// boxes and masks.
struct ModelConfig {
    int height = 64;
    int width = 64;
    std::vector<std::string> labels{"lesion-a", "lesion-b", "lesion-c"};
    double theta_det = 0.5;
    double tau = 0.5;
    double eta = 0.05;
    double lambda_loc = 1.0;
    double lambda_reg = 1e-4;
    // Unset means 1/(height*width).
    std::optional<double> m_in;
    int epochs_default = 20;

    double inside_margin() const;
    std::size_t cells() const { return static_cast<std::size_t>(height) * width; }

    /// Throws InvalidInput naming the first bad field.
    void validate() const;

    /// Index of `label` in `labels`; throws UnknownLabel.
    std::size_t label_index(const std::string& label) const;
    bool has_label(const std::string& label) const;
};

/// 8-bit grayscale raster, row-major.
struct ImagePayload {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    void validate() const;
    std::uint8_t at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }

    bool operator==(const ImagePayload&) const = default;
};

/// Dense real matrix, row-major.
struct Plane {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;

    Plane() = default;
    Plane(int r, int c, double fill = 0.0)
        : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}

    double& operator()(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }

    bool operator==(const Plane&) const = default;
};

struct LabelWeights {
    Plane plane;
    double bias = 0.0;

    bool operator==(const LabelWeights&) const = default;
};

/// One weight plane and bias per configured label, in config label order.
struct ModelWeights {
    std::vector<LabelWeights> layers;

    static ModelWeights zeros(const ModelConfig& cfg);

    bool all_finite() const;
    /// Throws InvalidInput when shapes disagree with `cfg` or a value is non-finite.
    void validate(const ModelConfig& cfg) const;

    bool operator==(const ModelWeights&) const = default;
};

/// Axis-aligned rectangle stored as four corners, clockwise from top-left.
/// x is the column and y the row, both inclusive pixel coordinates.
struct BoundingBox {
    int x1 = 0, y1 = 0;
    int x2 = 0, y2 = 0;
    int x3 = 0, y3 = 0;
    int x4 = 0, y4 = 0;

    static BoundingBox from_extent(int left, int top, int right, int bottom);

    int left() const { return x1; }
    int top() const { return y1; }
    int right() const { return x2; }
    int bottom() const { return y3; }
    long area() const { return static_cast<long>(right() - left() + 1) * (bottom() - top() + 1); }
    bool contains(int row, int col) const {
        return col >= left() && col <= right() && row >= top() && row <= bottom();
    }

    /// Checks the corner invariants and image bounds; throws InvalidInput.
    void validate(int width, int height) const;

    bool operator==(const BoundingBox&) const = default;
};

double iou(const BoundingBox& a, const BoundingBox& b);

/// Binary mask stored as runs of set cells over the row-major raster.
struct RleMask {
    int height = 0;
    int width = 0;
    // (start offset, run length) pairs, ascending and non-adjacent.
    std::vector<std::pair<int, int>> runs;

    static RleMask from_dense(int height, int width, const std::vector<bool>& cells);
    std::vector<bool> to_dense() const;
    std::size_t count() const;
    bool empty() const { return runs.empty(); }
    bool contains(int row, int col) const;
    /// Tight bounding rectangle of the set cells, none when empty.
    std::optional<BoundingBox> bounds() const;

    bool operator==(const RleMask&) const = default;
};

struct LabelFinding {
    std::string label;
    double probability = 0.0;
    std::optional<BoundingBox> box;
    std::optional<RleMask> mask;

    bool detected(double theta_det) const { return probability >= theta_det; }
};

inline constexpr const char* kStatusReady = "ready";
inline constexpr const char* kStatusRetraining = "retraining";
inline constexpr const char* kStatusSwarmLearned = "swarm-learned";

struct InferenceResult {
    std::string model;
    long model_version = 0;
    std::string status = kStatusReady;
    std::vector<LabelFinding> findings;

    const LabelFinding& finding(const std::string& label) const;
};

struct TrainingExample {
    ImagePayload image;
    std::string label;
    int y = 0;
    std::optional<BoundingBox> box;

    void validate(const ModelConfig& cfg) const;
};

struct LossAndGrad {
    double loss = 0.0;
    ModelWeights grad;
};

double sigmoid(double z);

/// Pixel values scaled to [0,1].
std::vector<double> normalize(const ImagePayload& image);

/// Per-label probabilities, boxes and masks. Pure; model identity fields of
/// the result are left default and filled by callers that know them.
InferenceResult infer(const ModelWeights& weights, const ImagePayload& image, const ModelConfig& cfg);

/// Tight rectangle around cells >= tau * max; none when max <= 0.
std::optional<BoundingBox> extract_box(std::span<const double> saliency, int rows, int cols, double tau);

/// Cells >= tau * max as a mask; empty when max <= 0.
RleMask extract_mask(std::span<const double> saliency, int rows, int cols, double tau);

/// BCE + localization hinge + L2 for the example's label, with its exact
/// gradient. Only the example's label layer of `grad` is non-zero.
LossAndGrad loss_and_grad(const ModelWeights& weights, const TrainingExample& ex, const ModelConfig& cfg);

double loss_only(const ModelWeights& weights, const TrainingExample& ex, const ModelConfig& cfg);

/// Mean loss over a batch.
double batch_loss(const ModelWeights& weights, std::span<const TrainingExample> examples, const ModelConfig& cfg);

/// One full-batch gradient step: weights - eta * mean gradient.
ModelWeights sgd_step(const ModelWeights& weights, std::span<const TrainingExample> examples, const ModelConfig& cfg);

}  // namespace radloop
