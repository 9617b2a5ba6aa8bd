#pragma once
// Eigen-CAM style heatmaps and direct export of attention maps.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dualatt/tensor.hpp"

namespace dualatt {

struct Heatmap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // row-major, in [0,1]
    std::string source;
};

struct PowerIterationResult {
    std::vector<double> vector;  // unit norm, largest-magnitude entry positive
    double eigenvalue = 0.0;     // of M^T M
    std::size_t iterations = 0;
};

// First right singular vector of the row-major rows x cols matrix `m`, by
// power iteration on M^T M applied as two matrix-vector products. Throws
// ConvergenceError if the relative eigenvalue change is still >= tol after
// max_iter iterations.
PowerIterationResult principal_right_vector(std::span<const double> m, std::size_t rows, std::size_t cols,
                                            std::size_t max_iter = 1000, double tol = 1e-10);

// Min-max normalize into [0,1]; a constant input maps to all zeros.
Heatmap normalize_map(std::span<const double> values, std::size_t height, std::size_t width, std::string source);

// `feature` is [C,H,W] or [1,C,H,W].
Heatmap eigen_cam(const Tensor& feature, std::string source = "eigencam");

enum class HeatmapFormat { pgm, csv };

void export_heatmap(const Heatmap& h, const std::filesystem::path& path, HeatmapFormat format);
Heatmap read_heatmap_csv(const std::filesystem::path& path);

}  // namespace dualatt
