#pragma once

// Seeded synthetic datasets built so that text alone cannot solve the task.
//
// seg: 32x32 RGB scenes with 2-4 shapes (6 colours x 4 kinds) in distinct
//      cells of a 3x3 grid; the description names exactly one (colour, kind)
//      pair and the mask covers that shape. Target cells are uniform.
// cls: 1-3 shapes; the text names two (colour, kind) pairs. Label 0 when both
//      are in the image, 1 when exactly one is, 2 when neither is.
// msa: an utterance with a text polarity plus acoustic (L x 8) and facial
//      (L x 6) step features driven by latent scores z_a, z_f:
//        label = clamp(0.5 f(text) + 1.2 z_a + 1.2 z_f + 0.1 eps, -3, 3)
//
// Sample i draws from mix_seed(seed, i); the modality directions and word
// polarities are fixed generator constants shared by every seed.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mit/heads.h"

namespace mit {

inline constexpr const char* kGeneratorVersion = "mit-synth-1";
inline constexpr int kImageSize = 32;
inline constexpr int kImageChannels = 3;
inline constexpr int kAcousticDim = 8;
inline constexpr int kFacialDim = 6;
inline constexpr int kMaxSteps = 16;

enum class ShapeKind { kCircle, kSquare, kTriangle, kCross };
inline constexpr int kNumKinds = 4;
inline constexpr int kNumColors = 6;

const std::vector<std::string>& color_names();
const std::vector<std::string>& kind_names();

struct ShapeSpec {
  int color = 0;
  int kind = 0;
  double cy = 0.0;
  double cx = 0.0;
  double size = 8.0;  // bounding extent in pixels
};

std::string describe(const ShapeSpec& s);  // "red circle"
// Pixel membership of a shape on an h x w grid (row-major 0/1).
std::vector<double> rasterize(const ShapeSpec& s, int height, int width);

struct SegSample {
  std::vector<double> image;  // (32, 32, 3) row-major, values in [0, 1]
  std::string description;
  std::vector<double> mask;  // (32, 32) 0/1
  std::vector<ShapeSpec> shapes;
  int target = 0;
};

struct ClsSample {
  std::vector<double> image;
  std::string text;
  int label = 0;
  std::vector<ShapeSpec> shapes;
};

struct MsaSample {
  std::string text;
  int steps = 1;
  std::vector<double> acoustic;  // (steps, 8)
  std::vector<double> facial;    // (steps, 6)
  double label = 0.0;
  // Generator internals, kept for oracles.
  double text_score = 0.0;
  double z_a = 0.0;
  double z_f = 0.0;
};

struct Dataset {
  Task task = Task::kSeg;
  std::uint64_t seed = 0;
  std::vector<SegSample> seg;
  std::vector<ClsSample> cls;
  std::vector<MsaSample> msa;

  std::size_t size() const;
};

// Deterministic in (task, n, seed). Throws std::invalid_argument for n < 1.
// Seg datasets with n >= 50 are checked against the text-only oracle and
// rejected if it exceeds kTextOnlyDiceCeiling.
Dataset generate_dataset(Task task, std::size_t n, std::uint64_t seed);

inline constexpr double kTextOnlyDiceCeiling = 0.35;

// Text-only predictor: per description, the leave-one-out pixel frequency of
// its masks thresholded at the best global level; returns mean binary DICE.
double text_only_oracle_dice(const std::vector<SegSample>& samples);

struct LeastSquaresOracle {
  double text_only_mae = 0.0;
  double all_modal_mae = 0.0;
};
// Ordinary least squares on generator internals: text polarity alone vs text
// polarity plus step-mean acoustic and facial features.
LeastSquaresOracle msa_least_squares_oracle(const std::vector<MsaSample>& samples);

// Empty on success, otherwise one message per violated invariant.
std::vector<std::string> validate_sample(const SegSample& s);
std::vector<std::string> validate_sample(const ClsSample& s);
std::vector<std::string> validate_sample(const MsaSample& s);
std::vector<std::string> validate_dataset(const Dataset& d);

// Packed little-endian records, see docs/DATA_FORMAT.md.
std::vector<std::uint8_t> serialize_samples(const Dataset& d);
Dataset deserialize_samples(Task task, std::span<const std::uint8_t> bytes);

// Writes DIR/samples.bin and DIR/manifest.json; returns the checksum.
std::string save_dataset(const Dataset& d, const std::filesystem::path& dir);
// Verifies the manifest checksum and record count.
Dataset load_dataset(const std::filesystem::path& dir);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};
// Seeded shuffle, first ceil(0.9 n) indices train (n >= 2 keeps one test item).
Split train_test_split(std::size_t n, std::uint64_t seed, double train_fraction = 0.9);

}  // namespace mit
