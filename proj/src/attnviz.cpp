#include "dualatt/attnviz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dualatt/error.hpp"
#include "dualatt/rng.hpp"
#include "dualatt/synthdata.hpp"

namespace dualatt {

namespace {

double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// y = M v (rows), then z = M^T y (cols).
void gram_apply(std::span<const double> m, std::size_t rows, std::size_t cols, const std::vector<double>& v,
                std::vector<double>& y, std::vector<double>& z) {
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += m[r * cols + c] * v[c];
        y[r] = s;
    }
    std::fill(z.begin(), z.end(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) z[c] += m[r * cols + c] * y[r];
}

}  // namespace

PowerIterationResult principal_right_vector(std::span<const double> m, std::size_t rows, std::size_t cols,
                                            std::size_t max_iter, double tol) {
    if (rows == 0 || cols == 0 || m.size() != rows * cols)
        throw DimensionError("principal_right_vector: matrix of " + std::to_string(m.size()) + " values is not " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    PowerIterationResult r;
    r.vector.assign(cols, 0.0);
    // Fixed start vector, independent of the data and of channel order.
    Rng rng(0xE16E, cols);
    for (double& x : r.vector) x = 0.5 + rng.uniform();
    const double n0 = norm2(r.vector);
    for (double& x : r.vector) x /= n0;

    std::vector<double> y(rows), z(cols);
    double lambda = 0.0;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        gram_apply(m, rows, cols, r.vector, y, z);
        double next = 0.0;  // Rayleigh quotient v^T G v = |Mv|^2
        for (double v : y) next += v * v;
        r.iterations = it;
        if (next == 0.0) {
            // v lies in the null space; for a zero matrix every vector does.
            r.eigenvalue = 0.0;
            return r;
        }
        const double nz = norm2(z);
        const bool done = it > 1 && std::abs(next - lambda) < tol * next;
        double res = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            res += (z[c] - next * r.vector[c]) * (z[c] - next * r.vector[c]);
            r.vector[c] = z[c] / nz;
        }
        lambda = next;
        if (done) break;
        if (it == max_iter)
            throw ConvergenceError("power iteration did not converge in " + std::to_string(max_iter) +
                                   " iterations; residual |Gv - lv|/l = " + std::to_string(std::sqrt(res) / next));
    }
    r.eigenvalue = lambda;
    std::size_t k = 0;
    for (std::size_t c = 1; c < cols; ++c)
        if (std::abs(r.vector[c]) > std::abs(r.vector[k])) k = c;
    if (r.vector[k] < 0)
        for (double& x : r.vector) x = -x;
    return r;
}

Heatmap normalize_map(std::span<const double> values, std::size_t height, std::size_t width, std::string source) {
    if (values.size() != height * width) throw DimensionError("normalize_map: size mismatch");
    Heatmap h{height, width, std::vector<double>(values.size(), 0.0), std::move(source)};
    if (values.empty()) return h;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double scale = std::max(std::abs(*lo), std::abs(*hi));
    if (!(*hi - *lo > 1e-12 * scale)) return h;
    for (std::size_t i = 0; i < values.size(); ++i) h.values[i] = (values[i] - *lo) / (*hi - *lo);
    return h;
}

Heatmap eigen_cam(const Tensor& feature, std::string source) {
    std::size_t C = 0, H = 0, W = 0;
    if (feature.rank() == 3) {
        C = feature.dim(0), H = feature.dim(1), W = feature.dim(2);
    } else if (feature.rank() == 4 && feature.dim(0) == 1) {
        C = feature.dim(1), H = feature.dim(2), W = feature.dim(3);
    } else {
        throw DimensionError("eigen_cam: expected [C,H,W] or [1,C,H,W], got " + shape_str(feature.shape()));
    }
    const auto r = principal_right_vector(feature.data(), C, H * W);
    if (r.eigenvalue == 0.0) return Heatmap{H, W, std::vector<double>(H * W, 0.0), std::move(source)};
    return normalize_map(r.vector, H, W, std::move(source));
}

void export_heatmap(const Heatmap& h, const std::filesystem::path& path, HeatmapFormat format) {
    if (format == HeatmapFormat::pgm) {
        write_pgm(path, h.values, h.height, h.width);
        return;
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    char buf[32];
    for (std::size_t i = 0; i < h.height; ++i) {
        for (std::size_t j = 0; j < h.width; ++j) {
            std::snprintf(buf, sizeof buf, "%.9f", h.values[i * h.width + j]);
            f << (j ? "," : "") << buf;
        }
        f << '\n';
    }
    if (!f) throw IoError("write failed: " + path.string());
}

Heatmap read_heatmap_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    Heatmap h;
    h.source = path.stem().string();
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t n = 0;
        while (std::getline(ss, cell, ',')) {
            try {
                h.values.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw ParseError(path.string() + ": line " + std::to_string(h.height + 1) + ": bad value '" + cell + "'");
            }
            ++n;
        }
        if (h.height == 0) h.width = n;
        if (n != h.width) throw ParseError(path.string() + ": ragged row " + std::to_string(h.height + 1));
        ++h.height;
    }
    return h;
}

}  // namespace dualatt
