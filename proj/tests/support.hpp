#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "radloop/core_model.hpp"

namespace radloop::testing {

// Fresh directory removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "radloop") {
        static std::mt19937_64 rng{std::random_device{}()};
        path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline ImagePayload uniform_image(int width, int height, std::uint8_t value) {
    return ImagePayload{width, height, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height, value)};
}

inline ImagePayload random_image(int width, int height, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> px(0, 255);
    ImagePayload img{width, height, {}};
    img.pixels.resize(static_cast<std::size_t>(width) * height);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(px(rng));
    return img;
}

inline ModelWeights random_weights(const ModelConfig& cfg, std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    ModelWeights w = ModelWeights::zeros(cfg);
    for (auto& layer : w.layers) {
        for (auto& v : layer.plane.values) v = n(rng);
        layer.bias = n(rng);
    }
    return w;
}

inline ModelConfig small_config() {
    ModelConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    return cfg;
}

}  // namespace radloop::testing
