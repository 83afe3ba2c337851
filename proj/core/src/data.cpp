#include "mit/data.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numeric>
#include <set>
#include <thread>

#include "mit/io.h"
#include "mit/rng.h"

namespace mit {

namespace {

constexpr std::uint64_t kConstantsSeed = 0x4D6954'53796E74ULL;
constexpr std::uint32_t kMagic = 0x4454494D;  // "MITD"
constexpr std::uint32_t kFormatVersion = 1;

struct Rgb {
  double r, g, b;
};

const std::vector<Rgb>& palette() {
  static const std::vector<Rgb> p{{0.90, 0.10, 0.10}, {0.10, 0.80, 0.20}, {0.15, 0.25, 0.95},
                                  {0.95, 0.90, 0.10}, {0.60, 0.20, 0.80}, {0.10, 0.85, 0.90}};
  return p;
}

struct Word {
  const char* text;
  double polarity;
};

const std::vector<std::string>& subjects() {
  static const std::vector<std::string> s{"the movie", "the plot", "the acting", "this film", "the story",
                                          "the soundtrack"};
  return s;
}

const std::vector<Word>& adjectives() {
  static const std::vector<Word> a{{"terrible", -1.0}, {"bad", -0.6}, {"dull", -0.4}, {"okay", 0.0},
                                   {"fine", 0.2},      {"good", 0.6}, {"great", 0.8}, {"wonderful", 1.0}};
  return a;
}

struct ModalDirections {
  std::vector<double> acoustic;
  std::vector<double> facial;
};

std::vector<double> unit_vector(int dim, SplitMix64& rng) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (double& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

const ModalDirections& directions() {
  static const ModalDirections d = [] {
    SplitMix64 rng(kConstantsSeed);
    ModalDirections out;
    out.acoustic = unit_vector(kAcousticDim, rng);
    out.facial = unit_vector(kFacialDim, rng);
    return out;
  }();
  return d;
}

int env_threads() {
  const char* v = std::getenv("MIT_THREADS");
  if (v == nullptr) return 1;
  const int n = std::atoi(v);
  return std::clamp(n, 1, 64);
}

template <typename T, typename F>
std::vector<T> generate_parallel(std::size_t n, F make) {
  std::vector<T> out(n);
  const auto threads = static_cast<std::size_t>(std::min<int>(env_threads(), static_cast<int>(n)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = make(i);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) out[i] = make(i);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

ShapeSpec place_shape(int color, int kind, int cell, SplitMix64& rng) {
  const double cell_size = static_cast<double>(kImageSize) / 3.0;
  ShapeSpec s;
  s.color = color;
  s.kind = kind;
  s.cy = round_f32((cell / 3 + 0.5) * cell_size + rng.uniform(-0.5, 0.5));
  s.cx = round_f32((cell % 3 + 0.5) * cell_size + rng.uniform(-0.5, 0.5));
  s.size = round_f32(rng.uniform(7.5, 9.5));
  return s;
}

std::vector<double> paint(const std::vector<ShapeSpec>& shapes, SplitMix64& rng) {
  const std::size_t px = static_cast<std::size_t>(kImageSize) * kImageSize;
  std::vector<double> img(px * kImageChannels);
  for (double& v : img) v = rng.uniform(0.0, 0.12);
  for (const auto& s : shapes) {
    const auto m = rasterize(s, kImageSize, kImageSize);
    const Rgb c = palette()[static_cast<std::size_t>(s.color)];
    const double rgb[3] = {c.r, c.g, c.b};
    for (std::size_t p = 0; p < px; ++p) {
      if (m[p] == 0.0) continue;
      for (int ch = 0; ch < kImageChannels; ++ch) {
        img[p * kImageChannels + ch] = std::clamp(rgb[ch] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
      }
    }
  }
  for (double& v : img) v = round_f32(v);
  return img;
}

int pair_id(int color, int kind) { return color * kNumKinds + kind; }

SegSample make_seg(std::uint64_t seed) {
  SplitMix64 rng(seed);
  const int count = 2 + static_cast<int>(rng.below(3));
  std::vector<int> cells(9);
  std::iota(cells.begin(), cells.end(), 0);
  rng.shuffle(cells);
  const int t_color = static_cast<int>(rng.below(kNumColors));
  const int t_kind = static_cast<int>(rng.below(kNumKinds));
  std::set<int> used{pair_id(t_color, t_kind)};
  SegSample s;
  s.shapes.push_back(place_shape(t_color, t_kind, cells[0], rng));
  for (int i = 1; i < count; ++i) {
    int color = 0;
    int kind = 0;
    do {
      color = static_cast<int>(rng.below(kNumColors));
      kind = static_cast<int>(rng.below(kNumKinds));
    } while (used.count(pair_id(color, kind)) != 0);
    used.insert(pair_id(color, kind));
    s.shapes.push_back(place_shape(color, kind, cells[static_cast<std::size_t>(i)], rng));
  }
  // Shuffle the drawing order so the target index carries no information.
  std::vector<std::size_t> order(s.shapes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<ShapeSpec> shuffled;
  for (std::size_t i = 0; i < order.size(); ++i) {
    shuffled.push_back(s.shapes[order[i]]);
    if (order[i] == 0) s.target = static_cast<int>(i);
  }
  s.shapes = std::move(shuffled);
  s.image = paint(s.shapes, rng);
  s.description = describe(s.shapes[static_cast<std::size_t>(s.target)]);
  s.mask = rasterize(s.shapes[static_cast<std::size_t>(s.target)], kImageSize, kImageSize);
  return s;
}

ClsSample make_cls(std::uint64_t seed) {
  SplitMix64 rng(seed);
  ClsSample s;
  s.label = static_cast<int>(rng.below(3));
  const int a = static_cast<int>(rng.below(kNumColors * kNumKinds));
  int b = a;
  while (b == a) b = static_cast<int>(rng.below(kNumColors * kNumKinds));
  std::vector<int> pairs;
  if (s.label == 0) {
    pairs = {a, b};
  } else if (s.label == 1) {
    pairs = {rng.below(2) == 0 ? a : b};
  }
  const int count = std::max<int>(static_cast<int>(pairs.size()), 1 + static_cast<int>(rng.below(3)));
  std::set<int> used(pairs.begin(), pairs.end());
  while (static_cast<int>(pairs.size()) < count) {
    const int p = static_cast<int>(rng.below(kNumColors * kNumKinds));
    if (p == a || p == b || used.count(p) != 0) continue;
    used.insert(p);
    pairs.push_back(p);
  }
  rng.shuffle(pairs);
  std::vector<int> cells(9);
  std::iota(cells.begin(), cells.end(), 0);
  rng.shuffle(cells);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    s.shapes.push_back(place_shape(pairs[i] / kNumKinds, pairs[i] % kNumKinds, cells[i], rng));
  }
  s.image = paint(s.shapes, rng);
  ShapeSpec sa{a / kNumKinds, a % kNumKinds};
  ShapeSpec sb{b / kNumKinds, b % kNumKinds};
  s.text = "a " + describe(sa) + " and a " + describe(sb);
  return s;
}

MsaSample make_msa(std::uint64_t seed) {
  SplitMix64 rng(seed);
  const auto& dirs = directions();
  MsaSample s;
  const auto& subj = subjects()[rng.below(subjects().size())];
  const Word adj = adjectives()[rng.below(adjectives().size())];
  s.text = subj + " was " + adj.text;
  s.text_score = round_f32(adj.polarity);
  s.steps = 6 + static_cast<int>(rng.below(7));
  s.z_a = round_f32(rng.normal());
  s.z_f = round_f32(rng.normal());
  for (int t = 0; t < s.steps; ++t) {
    for (int c = 0; c < kAcousticDim; ++c) {
      const double v = s.z_a * dirs.acoustic[static_cast<std::size_t>(c)] + 0.3 * rng.normal();
      s.acoustic.push_back(round_f32(std::clamp(v, -6.0, 6.0)));
    }
    for (int c = 0; c < kFacialDim; ++c) {
      const double v = s.z_f * dirs.facial[static_cast<std::size_t>(c)] + 0.3 * rng.normal();
      s.facial.push_back(round_f32(std::clamp(v, -6.0, 6.0)));
    }
  }
  const double y = 0.5 * s.text_score + 1.2 * s.z_a + 1.2 * s.z_f + 0.1 * rng.normal();
  s.label = round_f32(std::clamp(y, -3.0, 3.0));
  return s;
}

double binary_dice(const std::vector<double>& pred, const std::vector<double>& gt) {
  double inter = 0, ps = 0, gs = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    ps += pred[i];
    gs += gt[i];
  }
  return (ps + gs) == 0.0 ? 1.0 : 2.0 * inter / (ps + gs);
}

void write_shapes(ByteWriter& w, const std::vector<ShapeSpec>& shapes) {
  w.u32(static_cast<std::uint32_t>(shapes.size()));
  for (const auto& s : shapes) {
    w.u32(static_cast<std::uint32_t>(s.color));
    w.u32(static_cast<std::uint32_t>(s.kind));
    w.f32(s.cy);
    w.f32(s.cx);
    w.f32(s.size);
  }
}

std::vector<ShapeSpec> read_shapes(ByteReader& r) {
  const std::uint32_t n = r.u32();
  if (n > 9) throw FormatError("shape count " + std::to_string(n) + " exceeds 9");
  std::vector<ShapeSpec> shapes(n);
  for (auto& s : shapes) {
    s.color = static_cast<int>(r.u32());
    s.kind = static_cast<int>(r.u32());
    s.cy = r.f32();
    s.cx = r.f32();
    s.size = r.f32();
  }
  return shapes;
}

void write_image(ByteWriter& w, const std::vector<double>& image) {
  w.u32(kImageSize);
  w.u32(kImageSize);
  w.u32(kImageChannels);
  w.f32s(image);
}

std::vector<double> read_image(ByteReader& r) {
  const std::uint32_t h = r.u32();
  const std::uint32_t wd = r.u32();
  const std::uint32_t c = r.u32();
  if (h != kImageSize || wd != kImageSize || c != kImageChannels) {
    throw FormatError("unsupported image shape " + std::to_string(h) + "x" + std::to_string(wd) + "x" +
                      std::to_string(c));
  }
  return r.f32s(static_cast<std::size_t>(h) * wd * c);
}

void check_image(const std::vector<double>& image, std::vector<std::string>& errors) {
  if (image.size() != static_cast<std::size_t>(kImageSize * kImageSize * kImageChannels)) {
    errors.push_back("image has " + std::to_string(image.size()) + " values");
  }
  for (double v : image) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      errors.push_back("image value outside [0, 1]");
      break;
    }
  }
}

void check_shapes(const std::vector<ShapeSpec>& shapes, std::vector<std::string>& errors) {
  std::set<int> pairs;
  std::vector<double> cover(static_cast<std::size_t>(kImageSize * kImageSize), 0.0);
  for (const auto& s : shapes) {
    if (s.color < 0 || s.color >= kNumColors || s.kind < 0 || s.kind >= kNumKinds) {
      errors.push_back("shape with invalid colour/kind");
      return;
    }
    if (!pairs.insert(pair_id(s.color, s.kind)).second) errors.push_back("duplicate (colour, kind) pair");
    const auto m = rasterize(s, kImageSize, kImageSize);
    for (std::size_t p = 0; p < m.size(); ++p) {
      if (m[p] != 0.0 && cover[p] != 0.0) {
        errors.push_back("shapes overlap");
        return;
      }
      cover[p] += m[p];
    }
  }
}

}  // namespace

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> c{"red", "green", "blue", "yellow", "purple", "cyan"};
  return c;
}

const std::vector<std::string>& kind_names() {
  static const std::vector<std::string> k{"circle", "square", "triangle", "cross"};
  return k;
}

std::string describe(const ShapeSpec& s) {
  return color_names().at(static_cast<std::size_t>(s.color)) + " " + kind_names().at(static_cast<std::size_t>(s.kind));
}

std::vector<double> rasterize(const ShapeSpec& s, int height, int width) {
  std::vector<double> m(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0.0);
  const double r = s.size / 2.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dy = y + 0.5 - s.cy;
      const double dx = x + 0.5 - s.cx;
      bool in = false;
      switch (static_cast<ShapeKind>(s.kind)) {
        case ShapeKind::kCircle:
          in = dy * dy + dx * dx <= r * r;
          break;
        case ShapeKind::kSquare:
          in = std::abs(dy) <= r && std::abs(dx) <= r;
          break;
        case ShapeKind::kTriangle:
          // Apex up; half-width grows linearly from 0 at the top to r at the base.
          in = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
          break;
        case ShapeKind::kCross:
          in = std::abs(dy) <= r && std::abs(dx) <= r && (std::abs(dy) <= r / 3.0 || std::abs(dx) <= r / 3.0);
          break;
      }
      if (in) m[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)] = 1.0;
    }
  }
  return m;
}

std::size_t Dataset::size() const {
  switch (task) {
    case Task::kSeg:
      return seg.size();
    case Task::kCls:
      return cls.size();
    case Task::kMsa:
      return msa.size();
  }
  return 0;
}

Dataset generate_dataset(Task task, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_dataset: n must be >= 1");
  Dataset d;
  d.task = task;
  d.seed = seed;
  switch (task) {
    case Task::kSeg:
      d.seg = generate_parallel<SegSample>(n, [&](std::size_t i) { return make_seg(mix_seed(seed, i)); });
      if (n >= 50) {
        const double oracle = text_only_oracle_dice(d.seg);
        if (oracle > kTextOnlyDiceCeiling) {
          throw std::runtime_error("gen_dataset: text-only oracle DICE " + std::to_string(oracle) + " exceeds " +
                                   std::to_string(kTextOnlyDiceCeiling));
        }
      }
      break;
    case Task::kCls:
      d.cls = generate_parallel<ClsSample>(n, [&](std::size_t i) { return make_cls(mix_seed(seed, i)); });
      break;
    case Task::kMsa:
      d.msa = generate_parallel<MsaSample>(n, [&](std::size_t i) { return make_msa(mix_seed(seed, i)); });
      break;
  }
  return d;
}

double text_only_oracle_dice(const std::vector<SegSample>& samples) {
  if (samples.size() < 2) return 0.0;
  const std::size_t px = samples.front().mask.size();
  std::map<std::string, std::vector<double>> sums;
  std::map<std::string, double> counts;
  std::vector<double> all(px, 0.0);
  for (const auto& s : samples) {
    auto& f = sums[s.description];
    f.resize(px, 0.0);
    for (std::size_t p = 0; p < px; ++p) {
      f[p] += s.mask[p];
      all[p] += s.mask[p];
    }
    counts[s.description] += 1.0;
  }
  // Leave-one-out frequency map: the sample's own mask never informs its prediction.
  auto frequency = [&](const SegSample& s) {
    std::vector<double> f(px);
    const double c = counts[s.description] - 1.0;
    const auto& sum = sums[s.description];
    const double total = static_cast<double>(samples.size()) - 1.0;
    for (std::size_t p = 0; p < px; ++p) {
      f[p] = c > 0.0 ? (sum[p] - s.mask[p]) / c : (all[p] - s.mask[p]) / total;
    }
    return f;
  };
  std::vector<std::vector<double>> freqs;
  freqs.reserve(samples.size());
  for (const auto& s : samples) freqs.push_back(frequency(s));
  double best = 0.0;
  for (int step = -1; step < 20; ++step) {
    const double threshold = step < 0 ? -1.0 : 0.05 * step;  // -1: predict every pixel
    double total = 0.0;
    std::vector<double> pred(px);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      for (std::size_t p = 0; p < px; ++p) pred[p] = freqs[i][p] > threshold ? 1.0 : 0.0;
      total += binary_dice(pred, samples[i].mask);
    }
    best = std::max(best, total / static_cast<double>(samples.size()));
  }
  return best;
}

LeastSquaresOracle msa_least_squares_oracle(const std::vector<MsaSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("msa oracle: empty sample list");
  const auto n = static_cast<Eigen::Index>(samples.size());
  Eigen::VectorXd y(n);
  Eigen::MatrixXd text(n, 2);
  Eigen::MatrixXd all(n, 2 + kAcousticDim + kFacialDim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    y(i) = s.label;
    text(i, 0) = 1.0;
    text(i, 1) = s.text_score;
    all(i, 0) = 1.0;
    all(i, 1) = s.text_score;
    for (int c = 0; c < kAcousticDim; ++c) {
      double m = 0.0;
      for (int t = 0; t < s.steps; ++t) m += s.acoustic[static_cast<std::size_t>(t * kAcousticDim + c)];
      all(i, 2 + c) = m / s.steps;
    }
    for (int c = 0; c < kFacialDim; ++c) {
      double m = 0.0;
      for (int t = 0; t < s.steps; ++t) m += s.facial[static_cast<std::size_t>(t * kFacialDim + c)];
      all(i, 2 + kAcousticDim + c) = m / s.steps;
    }
  }
  auto mae = [&](const Eigen::MatrixXd& x) {
    const Eigen::VectorXd beta = x.colPivHouseholderQr().solve(y);
    return (x * beta - y).cwiseAbs().mean();
  };
  return {mae(text), mae(all)};
}

std::vector<std::string> validate_sample(const SegSample& s) {
  std::vector<std::string> errors;
  check_image(s.image, errors);
  if (s.shapes.size() < 2 || s.shapes.size() > 4) errors.push_back("expected 2-4 shapes");
  check_shapes(s.shapes, errors);
  if (s.target < 0 || static_cast<std::size_t>(s.target) >= s.shapes.size()) {
    errors.push_back("target index out of range");
    return errors;
  }
  int matches = 0;
  for (const auto& sh : s.shapes) {
    if (sh.color >= 0 && sh.color < kNumColors && sh.kind >= 0 && sh.kind < kNumKinds &&
        describe(sh) == s.description) {
      ++matches;
    }
  }
  if (matches != 1) errors.push_back("description matches " + std::to_string(matches) + " shapes");
  if (s.mask != rasterize(s.shapes[static_cast<std::size_t>(s.target)], kImageSize, kImageSize)) {
    errors.push_back("mask differs from the target shape's pixels");
  }
  if (std::accumulate(s.mask.begin(), s.mask.end(), 0.0) == 0.0) errors.push_back("empty mask");
  return errors;
}

std::vector<std::string> validate_sample(const ClsSample& s) {
  std::vector<std::string> errors;
  check_image(s.image, errors);
  if (s.shapes.empty() || s.shapes.size() > 3) errors.push_back("expected 1-3 shapes");
  check_shapes(s.shapes, errors);
  int present = 0;
  const std::string sep = " and a ";
  const auto cut = s.text.find(sep);
  if (s.text.rfind("a ", 0) != 0 || cut == std::string::npos) {
    errors.push_back("text does not name two shapes");
    return errors;
  }
  const std::string first = s.text.substr(2, cut - 2);
  const std::string second = s.text.substr(cut + sep.size());
  for (const std::string& want : {first, second}) {
    for (const auto& sh : s.shapes) present += describe(sh) == want ? 1 : 0;
  }
  const int expected = present == 2 ? 0 : (present == 1 ? 1 : 2);
  if (first == second) errors.push_back("text names the same shape twice");
  if (s.label != expected) errors.push_back("label " + std::to_string(s.label) + " inconsistent with image and text");
  return errors;
}

std::vector<std::string> validate_sample(const MsaSample& s) {
  std::vector<std::string> errors;
  if (s.steps < 1 || s.steps > kMaxSteps) errors.push_back("step count outside [1, 16]");
  if (s.acoustic.size() != static_cast<std::size_t>(s.steps * kAcousticDim) ||
      s.facial.size() != static_cast<std::size_t>(s.steps * kFacialDim)) {
    errors.push_back("feature sizes disagree with step count");
  }
  for (const auto* v : {&s.acoustic, &s.facial}) {
    for (double x : *v) {
      if (!std::isfinite(x) || std::abs(x) > 6.0) {
        errors.push_back("feature value outside [-6, 6]");
        break;
      }
    }
  }
  if (!std::isfinite(s.label) || s.label < -3.0 || s.label > 3.0) errors.push_back("label outside [-3, 3]");
  const double y = std::clamp(0.5 * s.text_score + 1.2 * s.z_a + 1.2 * s.z_f, -3.0, 3.0);
  if (std::abs(y - s.label) > 1.0) errors.push_back("label far from its generating scores");
  if (s.text.empty()) errors.push_back("empty text");
  return errors;
}

std::vector<std::string> validate_dataset(const Dataset& d) {
  std::vector<std::string> out;
  auto collect = [&](const auto& samples) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      for (const auto& e : validate_sample(samples[i])) out.push_back("sample " + std::to_string(i) + ": " + e);
    }
  };
  collect(d.seg);
  collect(d.cls);
  collect(d.msa);
  return out;
}

std::vector<std::uint8_t> serialize_samples(const Dataset& d) {
  ByteWriter out;
  out.u32(kMagic);
  out.u32(kFormatVersion);
  out.u32(static_cast<std::uint32_t>(d.task));
  out.u64(d.size());
  auto record = [&](auto&& fill) {
    ByteWriter r;
    fill(r);
    out.u32(static_cast<std::uint32_t>(r.size()));
    out.bytes(r.data());
  };
  for (const auto& s : d.seg) {
    record([&](ByteWriter& r) {
      write_image(r, s.image);
      r.str(s.description);
      r.f32s(s.mask);
      write_shapes(r, s.shapes);
      r.i32(s.target);
    });
  }
  for (const auto& s : d.cls) {
    record([&](ByteWriter& r) {
      write_image(r, s.image);
      r.str(s.text);
      r.i32(s.label);
      write_shapes(r, s.shapes);
    });
  }
  for (const auto& s : d.msa) {
    record([&](ByteWriter& r) {
      r.str(s.text);
      r.u32(static_cast<std::uint32_t>(s.steps));
      r.f32s(s.acoustic);
      r.f32s(s.facial);
      r.f32(s.label);
      r.f32(s.text_score);
      r.f32(s.z_a);
      r.f32(s.z_f);
    });
  }
  return out.take();
}

Dataset deserialize_samples(Task task, std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (in.u32() != kMagic) throw FormatError("samples.bin: bad magic");
  if (in.u32() != kFormatVersion) throw FormatError("samples.bin: unsupported format version");
  if (in.u32() != static_cast<std::uint32_t>(task)) throw FormatError("samples.bin: task tag disagrees with manifest");
  const std::uint64_t n = in.u64();
  Dataset d;
  d.task = task;
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint32_t len = in.u32();
    ByteReader r(in.bytes(len));
    switch (task) {
      case Task::kSeg: {
        SegSample s;
        s.image = read_image(r);
        s.description = r.str();
        s.mask = r.f32s(static_cast<std::size_t>(kImageSize * kImageSize));
        s.shapes = read_shapes(r);
        s.target = r.i32();
        d.seg.push_back(std::move(s));
        break;
      }
      case Task::kCls: {
        ClsSample s;
        s.image = read_image(r);
        s.text = r.str();
        s.label = r.i32();
        s.shapes = read_shapes(r);
        d.cls.push_back(std::move(s));
        break;
      }
      case Task::kMsa: {
        MsaSample s;
        s.text = r.str();
        s.steps = static_cast<int>(r.u32());
        if (s.steps < 1 || s.steps > kMaxSteps) throw FormatError("record " + std::to_string(i) + ": bad step count");
        s.acoustic = r.f32s(static_cast<std::size_t>(s.steps * kAcousticDim));
        s.facial = r.f32s(static_cast<std::size_t>(s.steps * kFacialDim));
        s.label = r.f32();
        s.text_score = r.f32();
        s.z_a = r.f32();
        s.z_f = r.f32();
        d.msa.push_back(std::move(s));
        break;
      }
    }
    if (r.remaining() != 0) throw FormatError("record " + std::to_string(i) + ": trailing bytes");
  }
  if (in.remaining() != 0) throw FormatError("samples.bin: trailing bytes after last record");
  return d;
}

std::string save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto bytes = serialize_samples(d);
  const std::string checksum = sha256_hex(bytes);
  write_file(dir / "samples.bin", bytes);
  nlohmann::json manifest{{"task", to_string(d.task)},
                          {"n", d.size()},
                          {"seed", d.seed},
                          {"generator_version", kGeneratorVersion},
                          {"checksum", checksum}};
  write_json(dir / "manifest.json", manifest);
  return checksum;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  Task task;
  std::size_t n = 0;
  std::string checksum;
  std::uint64_t seed = 0;
  try {
    task = task_from_string(manifest.at("task").get<std::string>());
    n = manifest.at("n").get<std::size_t>();
    seed = manifest.at("seed").get<std::uint64_t>();
    checksum = manifest.at("checksum").get<std::string>();
    if (manifest.at("generator_version").get<std::string>() != kGeneratorVersion) {
      throw FormatError("unsupported generator_version");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
  const auto bytes = read_file(dir / "samples.bin");
  if (sha256_hex(bytes) != checksum) throw FormatError(dir.string() + "/samples.bin: checksum mismatch");
  Dataset d = deserialize_samples(task, bytes);
  if (d.size() != n) throw FormatError("manifest n=" + std::to_string(n) + " but " + std::to_string(d.size()) + " records");
  d.seed = seed;
  return d;
}

Split train_test_split(std::size_t n, std::uint64_t seed, double train_fraction) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  SplitMix64 rng(mix_seed(seed, 0x5917));
  rng.shuffle(idx);
  auto n_train = static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(n)));
  if (n >= 2) n_train = std::min(n_train, n - 1);
  n_train = std::min(n_train, n);
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  return s;
}

}  // namespace mit
