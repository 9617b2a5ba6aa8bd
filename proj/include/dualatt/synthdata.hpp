#pragma once
// Synthetic multi-label "lesion" scenes: low-contrast discs, rings and soft
// rectangles over smoothed noise, with COCO-style annotation I/O.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dualatt/boxes.hpp"
#include "dualatt/rng.hpp"
#include "dualatt/tensor.hpp"

namespace dualatt {

struct SceneConfig {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t classes = 3;
    std::size_t min_lesions = 1;
    std::size_t max_lesions = 3;
    // Per class (min_side, max_side) in pixels. A single entry applies to all classes.
    std::vector<std::pair<double, double>> size_range{{8.0, 24.0}};
    double noise_amplitude = 0.08;
    double contrast_lo = 0.12;
    double contrast_hi = 0.25;
    std::uint64_t seed = 0;

    std::pair<double, double> sizes_for(std::size_t cls) const;
    void validate() const;
};

struct SceneAnnotation {
    std::int64_t image_id = 0;
    std::vector<GroundTruthBox> boxes;
    std::vector<double> label_vector;

    friend bool operator==(const SceneAnnotation&, const SceneAnnotation&) = default;
};

struct Scene {
    Tensor image;  // [1,H,W], values k/255
    SceneAnnotation annotation;
};

// Deterministic in (config.seed, index); independent of any other scene.
Scene generate_scene(const SceneConfig& config, std::size_t index);

struct AugmentRecord {
    bool flip = false;
    bool rotate = false;
    bool brightness = false;
    bool contrast = false;
    bool cutout = false;
};

struct Augmented {
    Tensor image;
    SceneAnnotation annotation;
    AugmentRecord applied;
};

struct AugmentLimits {
    double max_rotation_deg = 10.0;
    double brightness = 0.1;
    double contrast_lo = 0.8;
    double contrast_hi = 1.2;
    std::size_t cutout_min = 6;
    std::size_t cutout_max = 12;
    double cutout_max_erased = 0.5;
    std::size_t cutout_tries = 20;
};

// Flip, rotation, brightness, contrast and cutout, each applied with
// probability p in that order. Label vectors are recomputed from the boxes
// that survive.
Augmented augment(const Tensor& image, const SceneAnnotation& annotation, Rng& rng, double p,
                  const AugmentLimits& limits = {});

Tensor flip_horizontal(const Tensor& image);
Box flip_horizontal(const Box& box, double width);

std::vector<double> label_vector(const std::vector<GroundTruthBox>& boxes, std::size_t classes);

struct Split {
    std::vector<std::size_t> train, val, test;
};

// Shuffles [0,n) with `seed`; train and val get round(r*n) items each and
// test takes the rest. Ratios must sum to 1.
Split split_indices(std::size_t n, const std::array<double, 3>& ratios, std::uint64_t seed);

void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t height,
               std::size_t width);
// Returns [1,H,W] with values byte/255.
Tensor read_pgm(const std::filesystem::path& path);

struct ImageEntry {
    SceneAnnotation annotation;
    std::string file_name;
    std::size_t width = 0;
    std::size_t height = 0;

    friend bool operator==(const ImageEntry&, const ImageEntry&) = default;
};

struct AnnotationFile {
    std::string fingerprint;  // written under "info" when non-empty
    std::vector<std::string> categories;
    std::vector<ImageEntry> images;

    friend bool operator==(const AnnotationFile&, const AnnotationFile&) = default;
};

std::string annotations_to_json(const AnnotationFile& file);
AnnotationFile annotations_from_json(const std::string& text);
void write_annotations(const AnnotationFile& file, const std::filesystem::path& path);
AnnotationFile read_annotations(const std::filesystem::path& path);

}  // namespace dualatt
