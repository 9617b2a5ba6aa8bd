#include <doctest.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dualatt/attnviz.hpp"

using namespace dualatt;
namespace fs = std::filesystem;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Largest eigenvalue of M^T M from a full symmetric eigendecomposition.
double dense_top_eigenvalue(const Tensor& f, std::size_t rows, std::size_t cols) {
    Eigen::MatrixXd m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) m(r, c) = f[r * cols + c];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m);
    return es.eigenvalues().maxCoeff();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dualatt_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("eigen_cam of a rank-1 feature") {
    const std::vector<double> v{0.5, -1.0, 2.0};
    const std::vector<double> u{0.1, -0.7, 0.3, 0.25, -0.05, 0.9};  // distinct magnitudes
    Tensor f({3, 2, 3});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 6; ++p) f[c * 6 + p] = v[c] * u[p];
    const Heatmap h = eigen_cam(f);
    // Largest magnitude entry (0.9) is already positive.
    const double lo = -0.7, hi = 0.9;
    std::vector<double> want;
    for (double x : u) want.push_back((x - lo) / (hi - lo));
    CHECK(max_abs_diff(h.values, want) < 1e-8);
    CHECK(h.height == 2);
    CHECK(h.width == 3);

    // Flipping u's sign flips the singular vector; the sign rule undoes it.
    Tensor g = f;
    for (double& x : g.storage()) x = -x;
    CHECK(max_abs_diff(eigen_cam(g).values, want) < 1e-8);
}

TEST_CASE("eigen_cam degenerate inputs") {
    CHECK(eigen_cam(Tensor::full({4, 3, 3}, 2.5), "c").values == std::vector<double>(9, 0.0));
    CHECK(eigen_cam(Tensor::zeros({1, 4, 3, 3})).values == std::vector<double>(9, 0.0));
    CHECK_THROWS_AS(eigen_cam(Tensor::zeros({2, 4, 3, 3})), DimensionError);
}

TEST_CASE("power iteration against a dense eigensolver") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const Tensor f = Tensor::normal({8, 4, 4}, rng, 1.0);
        const double lambda = dense_top_eigenvalue(f, 8, 16);
        const PowerIterationResult r = principal_right_vector(f.data(), 8, 16);
        double proj = 0;
        for (std::size_t row = 0; row < 8; ++row) {
            double s = 0;
            for (std::size_t c = 0; c < 16; ++c) s += f[row * 16 + c] * r.vector[c];
            proj += s * s;
        }
        CHECK(std::abs(proj - lambda) < 1e-8 * lambda);
        CHECK(std::abs(r.eigenvalue - lambda) < 1e-8 * lambda);
        double n = 0, big = 0;
        for (double x : r.vector) {
            n += x * x;
            if (std::abs(x) > std::abs(big)) big = x;
        }
        CHECK(std::abs(n - 1.0) < 1e-12);
        CHECK(big > 0);
    }
}

TEST_CASE("eigen_cam invariances") {
    Rng rng(42);
    const Tensor f = Tensor::normal({8, 4, 4}, rng, 1.0);
    const Heatmap base = eigen_cam(f);
    SUBCASE("positive scaling") {
        for (double s : {1e-3, 0.5, 7.0, 1e4}) {
            Tensor g = f;
            for (double& x : g.storage()) x *= s;
            CHECK(max_abs_diff(eigen_cam(g).values, base.values) < 1e-9);
        }
    }
    SUBCASE("channel permutation") {
        const std::size_t perm[] = {3, 7, 0, 5, 1, 6, 2, 4};
        Tensor g(f.shape());
        for (std::size_t c = 0; c < 8; ++c)
            for (std::size_t p = 0; p < 16; ++p) g[c * 16 + p] = f[perm[c] * 16 + p];
        CHECK(max_abs_diff(eigen_cam(g).values, base.values) < 1e-9);
    }
    SUBCASE("range") {
        CHECK(*std::min_element(base.values.begin(), base.values.end()) == 0.0);
        CHECK(*std::max_element(base.values.begin(), base.values.end()) == 1.0);
    }
}

TEST_CASE("power iteration reports non-convergence") {
    Rng rng(3);
    const Tensor f = Tensor::normal({6, 10}, rng, 1.0);
    try {
        principal_right_vector(f.data(), 6, 10, 2, 1e-15);
        FAIL("expected a convergence error");
    } catch (const ConvergenceError& e) {
        CHECK(std::string(e.what()).find("did not converge in 2") != std::string::npos);
    }
}

TEST_CASE("heatmap export") {
    const fs::path dir = scratch("heat");
    const Heatmap h{2, 2, {0.0, 1.0, 0.5, 0.25}, "x"};
    export_heatmap(h, dir / "h.pgm", HeatmapFormat::pgm);
    std::ifstream in(dir / "h.pgm", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 11) == "P5\n2 2\n255\n");
    const std::string px = bytes.substr(11);
    REQUIRE(px.size() == 4);
    CHECK(static_cast<unsigned char>(px[0]) == 0);
    CHECK(static_cast<unsigned char>(px[1]) == 255);
    CHECK(static_cast<unsigned char>(px[2]) == 128);
    CHECK(static_cast<unsigned char>(px[3]) == 64);

    const Heatmap z{3, 2, std::vector<double>(6, 0.0), "z"};
    export_heatmap(z, dir / "z.pgm", HeatmapFormat::pgm);
    CHECK(fs::file_size(dir / "z.pgm") == std::string("P5\n2 3\n255\n").size() + 6);

    Rng rng(1);
    Heatmap r{4, 5, {}, "r"};
    for (int i = 0; i < 20; ++i) r.values.push_back(rng.uniform());
    export_heatmap(r, dir / "r.csv", HeatmapFormat::csv);
    const Heatmap back = read_heatmap_csv(dir / "r.csv");
    CHECK(back.height == 4);
    CHECK(back.width == 5);
    CHECK(max_abs_diff(back.values, r.values) < 1e-6);

    export_heatmap(r, dir / "r2.csv", HeatmapFormat::csv);
    std::ifstream a(dir / "r.csv"), b(dir / "r2.csv");
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
    CHECK_THROWS_AS(export_heatmap(r, dir / "missing" / "r.csv", HeatmapFormat::csv), IoError);
}
