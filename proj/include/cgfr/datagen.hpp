#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cgfr/config.hpp"
#include "cgfr/tensor.hpp"

namespace cgfr {

constexpr int kNumAttributes = 38;

/// How an attribute is realized in captions.
enum AttrKind {
    kGenderAttr,    // the person noun ("woman"/"man")
    kOpenerAttr,    // adjective before the noun ("young", "smiling", ...)
    kHairPartAttr,  // merged into one "<length> <color> <texture> hair" clause
    kPairedAttr,    // standalone phrase, usually "<value> <noun>"
};

struct AttributeDef {
    std::string name;
    AttrKind kind;
    std::vector<std::string> values;
    // One caption phrase per value (word sequences, lowercase).
    std::vector<std::vector<std::string>> phrases;
};

/// The closed 38-attribute schema driving both rendering and captions.
const std::vector<AttributeDef>& attribute_schema();

/// Every word the caption grammar can emit, in stable first-use order; the
/// vocabulary is built from this list.
std::vector<std::string> grammar_words();

struct IdentityRecord {
    int id = 0;
    std::array<std::uint8_t, kNumAttributes> attributes{};
};

/// Deterministic attribute vector from (seed, id).
IdentityRecord generate_identity(std::uint64_t seed, int id);

/// Per-image acquisition conditions, separate from identity.
struct Nuisance {
    double pose = 0.0;   // [-1, 1], horizontal head shift
    double gain = 1.0;   // illumination multiplier
    int expression = 0;  // 0 neutral, 1 smile, 2 open mouth
};

/// Procedural face-like image in [0,1]: background gradient, skin ellipse,
/// hair region, eye/brow/nose/mouth glyphs and accessory overlays, all driven
/// by the attribute vector; nuisance shifts geometry and gain.
Tensor render_image(const IdentityRecord& record, const Nuisance& nuisance, std::uint64_t seed);

/// Templated captions. Each caption mentions a different subset of between
/// min_attrs and max_attrs attributes (at least 3) and fits the 19-word
/// budget. When `mentioned` is given, the attribute indices each caption
/// mentions are appended per caption.
std::vector<std::string> generate_captions(const IdentityRecord& record, std::uint64_t seed,
                                           int n, int min_attrs = 3, int max_attrs = 8,
                                           std::vector<std::vector<int>>* mentioned = nullptr);

struct DegradeConfig {
    double subsample_min = 1.0;  // down-up resample factor range
    double subsample_max = 1.0;
    double rotation_deg = 0.0;  // +- range
    double flip_prob = 0.0;
    double noise_sigma = 0.0;
    double brightness = 0.0;  // jitter half-ranges; gain in [1-r, 1+r]
    double contrast = 0.0;
    double saturation = 0.0;

    /// The low-quality surveillance preset used by the acceptance runs.
    static DegradeConfig strong();
};

/// Applies, in order: down-up bilinear resample, color jitter, horizontal
/// flip, rotation (bilinear, zero fill), Gaussian noise, clamp to [0,1].
/// All draws come from the seed; identity settings are bit-exact no-ops.
Tensor degrade(const Tensor& image, const DegradeConfig& cfg, std::uint64_t seed);

struct DataConfig {
    int n_identities = 200;
    int images_per_identity = 10;
    int captions_per_image = 10;
    int min_caption_attributes = 3;
    int max_caption_attributes = 8;
    int gallery_per_identity = 1;
    int probe_per_identity = 2;
    bool identity_disjoint = false;
    int holdout_identities = 0;  // disjoint mode: identities reserved for eval
    DegradeConfig degrade;

    static DataConfig from_run_config(const RunConfig& cfg);
};

struct Sample {
    int identity = 0;
    Tensor image;  // [3 x 112 x 112], degraded
    std::vector<std::string> captions;
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<int> train_idx, gallery_idx, probe_idx;
    int n_identities = 0;
    std::vector<IdentityRecord> records;  // empty when loaded from disk
};

/// Generates identities, renders nuisance-varied views, degrades them and
/// attaches captions; samples are grouped by identity, images in order.
Dataset build_dataset(const DataConfig& cfg, std::uint64_t seed);

/// Raw image container: magic "CGIM", u16 C,H,W little-endian, f64 planes.
void write_image_cgim(const std::string& path, const Tensor& image);
Tensor read_image_cgim(const std::string& path);

/// Manifest lines "identity_id<TAB>image_path<TAB>caption_1|caption_2|...".
void write_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir, const DataConfig& cfg);

}  // namespace cgfr
