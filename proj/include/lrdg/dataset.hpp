#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lrdg/common.hpp"

namespace lrdg {

/// Images are stored channel-planar: a (channels x H*W) matrix whose column
/// index is the raster position y*W + x. Stacking images side by side gives
/// the batch layout used by the networks.
using Image = MatrixR;

struct ImageShape {
  int height = 32;
  int width = 32;
  int channels = 3;

  [[nodiscard]] int pixels() const { return height * width; }
  [[nodiscard]] int size() const { return pixels() * channels; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

enum class Split : std::uint8_t { train, val, test };

enum class CueKind : std::uint8_t { tint, stripe, watermark, frame, none };

std::string to_string(CueKind kind);
CueKind parse_cue_kind(const std::string& name);
std::string to_string(Split split);

/// Injected synthetic cue. `class_keyed` is true when the parameter is the
/// class-determined value of the sample's own domain.
struct CueDescriptor {
  CueKind kind = CueKind::none;
  int parameter = 0;
  bool class_keyed = false;
  friend bool operator==(const CueDescriptor&, const CueDescriptor&) = default;
};

struct Sample {
  Image image;
  int label = 0;
  int domain_id = 0;
  Split split = Split::train;
  std::vector<CueDescriptor> cues;  // empty for loaded real data
};

struct Domain {
  std::string name;
  CueKind cue_kind = CueKind::none;
  std::vector<Sample> samples;

  [[nodiscard]] std::vector<int> indices(Split split) const;
  [[nodiscard]] std::vector<int> all_indices() const;
};

struct MultiDomainDataset {
  std::vector<Domain> domains;
  std::vector<std::string> class_names;
  ImageShape shape;
  bool synthetic = false;

  [[nodiscard]] int num_classes() const { return static_cast<int>(class_names.size()); }
  [[nodiscard]] int num_domains() const { return static_cast<int>(domains.size()); }
  [[nodiscard]] int domain_index(const std::string& name) const;

  /// Throws if any documented dataset invariant is violated.
  void validate() const;
};

/// Identifies one sample for target-blindness audits.
struct SampleId {
  int domain = 0;
  int index = 0;
  friend auto operator<=>(const SampleId&, const SampleId&) = default;
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
};

enum class ForeignCueMode : std::uint8_t { omitted, random };

struct SyntheticDomainSpec {
  int num_classes = 5;
  int samples_per_class_per_domain = 100;
  int image_size = 32;
  std::vector<CueKind> cue_kinds = {CueKind::tint, CueKind::stripe, CueKind::watermark,
                                    CueKind::frame};
  std::vector<std::string> domain_names;  // defaults to the cue kind names
  double cue_strength = 0.9;
  double noise_level = 0.05;
  ForeignCueMode foreign_cues = ForeignCueMode::omitted;
  SplitFractions split;

  [[nodiscard]] int num_domains() const { return static_cast<int>(cue_kinds.size()); }
  void validate() const;
};

inline constexpr int kNumGlyphs = 5;
std::string glyph_name(int shape_class);

/// Everything needed to draw one synthetic image.
struct RenderRequest {
  int shape_class = 0;
  bool draw_shape = true;
  std::vector<CueDescriptor> cues;
  int image_size = 32;
  double cue_strength = 0.9;
  double noise_level = 0.05;
};

class Rng;
Image render_synthetic(const RenderRequest& request, Rng& rng);

MultiDomainDataset generate_synthetic(const SyntheticDomainSpec& spec, std::uint64_t seed);

/// Images whose cue parameter is drawn independently of the glyph class, for
/// probing whether a cue survives a transformation. `labels` hold the cue
/// parameter.
struct CueProbeSet {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<int> shape_classes;
};
CueProbeSet render_cue_probe_set(const SyntheticDomainSpec& spec, CueKind kind, int count,
                                 std::uint64_t seed);

MultiDomainDataset load_image_folder(const std::filesystem::path& root, int image_size,
                                     SplitFractions fractions, std::uint64_t seed);

/// Decodes any OpenCV-readable file to RGB in [0, 1], resized to size x size.
Image read_image(const std::filesystem::path& path, int image_size);

/// Writes root/<domain>/<class>/<index>.png plus manifest.json.
void export_dataset(const MultiDomainDataset& dataset, const std::filesystem::path& root,
                    const SyntheticDomainSpec* spec, std::uint64_t seed);

struct LooFold {
  std::vector<int> sources;
  int target = 0;
};
std::vector<LooFold> make_loo_splits(const MultiDomainDataset& dataset);

/// Assigns a stratified split per class to every sample in `samples`.
void assign_splits(std::vector<Sample>& samples, int num_classes, SplitFractions fractions,
                   Rng& rng);

/// Concatenates images into the (channels x count*H*W) batch layout.
MatrixR stack_images(const Domain& domain, std::span<const int> indices);
MatrixR stack_images(std::span<const Image> images);

/// 8-bit RGB conversion helpers shared by export, inspect and plotting.
std::vector<std::uint8_t> to_rgb8(const Image& image, const ImageShape& shape);

}  // namespace lrdg
