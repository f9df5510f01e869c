#include "cdl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "cdl/binary_io.hpp"
#include "cdl/error.hpp"
#include "cdl/rng.hpp"

namespace cdl {

namespace {

constexpr std::uint16_t kCdldVersion = 1;

struct Pattern {
  bool grating = true;
  double freq = 1.0, theta = 0.0, phase = 0.0;  // grating
  double cx = 0.5, cy = 0.5, sigma = 0.2;       // blob

  double operator()(double x, double y) const {
    if (grating) return std::sin(2.0 * std::numbers::pi * freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
    const double dx = x - cx, dy = y - cy;
    return 2.0 * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) - 1.0;
  }
};

std::vector<Pattern> make_basis(const SyntheticDatasetSpec& spec) {
  SeededRng rng = SeededRng(spec.seed).split("basis");
  std::vector<Pattern> basis(spec.basis_size);
  for (int i = 0; i < spec.basis_size; ++i) {
    Pattern& p = basis[i];
    p.grating = i % 2 == 0;
    p.freq = 0.5 + rng.uniform(0.0, 2.0);
    p.theta = rng.uniform(0.0, std::numbers::pi);
    p.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    p.cx = rng.uniform(0.15, 0.85);
    p.cy = rng.uniform(0.15, 0.85);
    p.sigma = rng.uniform(0.08, 0.25);
  }
  return basis;
}

std::vector<double> prototype(const SyntheticDatasetSpec& spec, const std::vector<Pattern>& basis, int label) {
  SeededRng rng = SeededRng(spec.seed).split("class").split(static_cast<std::uint64_t>(label));
  std::vector<int> order(basis.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);

  const int s = spec.image_size;
  std::vector<double> img(static_cast<std::size_t>(spec.channels) * s * s, 0.5);
  for (int k = 0; k < spec.patterns_per_class; ++k) {
    const Pattern& p = basis[order[k]];
    std::vector<double> color(spec.channels);
    for (double& c : color) c = rng.uniform(-1.0, 1.0);
    const double amp = 0.35 / spec.patterns_per_class * 2.0;
    for (int ch = 0; ch < spec.channels; ++ch)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          img[(static_cast<std::size_t>(ch) * s + y) * s + x] +=
              amp * color[ch] * p((x + 0.5) / s, (y + 0.5) / s);
  }
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  return img;
}

void fill_split(DataSplit& split, const SyntheticDatasetSpec& spec, const std::vector<std::vector<double>>& protos,
                int per_class, std::string_view tag) {
  split.channels = spec.channels;
  split.height = split.width = spec.image_size;
  split.n_classes = spec.total_classes();
  split.pretrain_class_count = spec.pretrain_classes;
  const int s = spec.image_size;
  const std::size_t n = static_cast<std::size_t>(per_class) * split.n_classes;
  split.labels.reserve(n);
  split.pixels.reserve(n * split.sample_bytes());
  SeededRng base = SeededRng(spec.seed).split(tag);
  for (int c = 0; c < split.n_classes; ++c) {
    const std::vector<double>& proto = protos[c];
    for (int i = 0; i < per_class; ++i) {
      SeededRng rng = base.split(static_cast<std::uint64_t>(c)).split(static_cast<std::uint64_t>(i));
      const int dx = spec.max_shift > 0 ? rng.uniform_int(-spec.max_shift, spec.max_shift) : 0;
      const int dy = spec.max_shift > 0 ? rng.uniform_int(-spec.max_shift, spec.max_shift) : 0;
      const double contrast =
          spec.contrast_hi > spec.contrast_lo ? rng.uniform(spec.contrast_lo, spec.contrast_hi) : spec.contrast_lo;
      split.labels.push_back(static_cast<std::uint16_t>(c));
      for (int ch = 0; ch < spec.channels; ++ch)
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x) {
            const int sy = ((y - dy) % s + s) % s, sx = ((x - dx) % s + s) % s;
            double v = proto[(static_cast<std::size_t>(ch) * s + sy) * s + sx];
            v = 0.5 + contrast * (v - 0.5);
            if (spec.noise > 0.0) v += rng.normal(0.0, spec.noise);
            split.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
          }
    }
  }
}

}  // namespace

void SyntheticDatasetSpec::validate() const {
  CDL_REQUIRE(noise >= 0.0, "dataset noise sigma must be non-negative");
  CDL_REQUIRE(pretrain_classes >= 0 && cl_classes >= 1, "dataset needs at least one continual-learning class");
  CDL_REQUIRE(total_classes() <= 65535, "too many classes for 16-bit labels");
  CDL_REQUIRE(image_size >= 1 && channels >= 1 && channels <= 255, "bad image geometry");
  CDL_REQUIRE(train_per_class >= 1 && test_per_class >= 1, "need at least one sample per class and split");
  CDL_REQUIRE(max_shift >= 0 && contrast_lo > 0.0 && contrast_hi >= contrast_lo, "bad jitter ranges");
  CDL_REQUIRE(basis_size >= 1 && patterns_per_class >= 1 && patterns_per_class <= basis_size,
              "patterns per class must be within the basis size");
}

std::vector<double> DataSplit::image(std::size_t i) const {
  CDL_REQUIRE(i < size(), "sample index out of range");
  auto r = raw(i);
  std::vector<double> out(r.size());
  for (std::size_t k = 0; k < r.size(); ++k) out[k] = r[k] / 255.0;
  return out;
}

std::vector<double> class_prototype(const SyntheticDatasetSpec& spec, int label) {
  spec.validate();
  CDL_REQUIRE(0 <= label && label < spec.total_classes(), "class label out of range");
  return prototype(spec, make_basis(spec), label);
}

Dataset generate_synthetic_dataset(const SyntheticDatasetSpec& spec) {
  spec.validate();
  const auto basis = make_basis(spec);
  std::vector<std::vector<double>> protos;
  for (int c = 0; c < spec.total_classes(); ++c) protos.push_back(prototype(spec, basis, c));
  Dataset d;
  fill_split(d.train, spec, protos, spec.train_per_class, "train");
  fill_split(d.test, spec, protos, spec.test_per_class, "test");
  return d;
}

void write_cdld(std::ostream& out, const DataSplit& split) {
  using namespace binio;
  CDL_REQUIRE(split.pixels.size() == split.size() * split.sample_bytes(), "pixel buffer does not match sample count");
  out.write("CDLD", 4);
  put_le<std::uint16_t>(out, kCdldVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(split.size()));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(split.channels));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(split.height));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(split.width));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(split.n_classes));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(split.pretrain_class_count));
  for (std::uint16_t l : split.labels) put_le<std::uint16_t>(out, l);
  out.write(reinterpret_cast<const char*>(split.pixels.data()), static_cast<std::streamsize>(split.pixels.size()));
  if (!out) throw FormatError("CDLD write failed");
}

DataSplit read_cdld(std::istream& in) {
  using namespace binio;
  expect_magic(in, "CDLD");
  const auto version = get_le<std::uint16_t>(in);
  if (version != kCdldVersion) throw FormatError("unsupported CDLD version " + std::to_string(version));
  DataSplit s;
  const auto n = get_le<std::uint32_t>(in);
  s.channels = get_le<std::uint8_t>(in);
  s.height = get_le<std::uint16_t>(in);
  s.width = get_le<std::uint16_t>(in);
  s.n_classes = get_le<std::uint16_t>(in);
  s.pretrain_class_count = get_le<std::uint16_t>(in);
  if (s.channels == 0 || s.height == 0 || s.width == 0) throw FormatError("CDLD: zero image dimension");
  if (s.pretrain_class_count > s.n_classes) throw FormatError("CDLD: pretraining block larger than the class count");
  s.labels.resize(n);
  for (auto& l : s.labels) {
    l = get_le<std::uint16_t>(in);
    if (l >= s.n_classes) throw FormatError("CDLD: label " + std::to_string(l) + " out of range");
  }
  s.pixels.resize(static_cast<std::size_t>(n) * s.sample_bytes());
  if (!in.read(reinterpret_cast<char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size())))
    throw FormatError("unexpected end of file");
  return s;
}

void save_cdld(const std::filesystem::path& path, const DataSplit& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_cdld(out, split);
}

DataSplit load_cdld(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_cdld(in);
}

void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  save_cdld(dir / "train.cdld", d.train);
  save_cdld(dir / "test.cdld", d.test);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d{load_cdld(dir / "train.cdld"), load_cdld(dir / "test.cdld")};
  if (d.train.n_classes != d.test.n_classes || d.train.pretrain_class_count != d.test.pretrain_class_count ||
      d.train.sample_bytes() != d.test.sample_bytes())
    throw FormatError("train and test splits in " + dir.string() + " disagree on geometry");
  return d;
}

TaskStream make_task_stream(const Dataset& d, int tasks, std::uint64_t seed) {
  const int first = d.train.pretrain_class_count;
  const int count = d.train.n_classes - first;
  if (tasks < 1 || count % tasks != 0)
    throw ConfigError(std::to_string(count) + " continual-learning classes cannot be split into " +
                      std::to_string(tasks) + " equal tasks");
  std::vector<int> classes(count);
  for (int i = 0; i < count; ++i) classes[i] = first + i;
  SeededRng(seed).split("stream").shuffle(classes);

  const int k = count / tasks;
  TaskStream s;
  s.tasks.resize(tasks);
  s.model_label.assign(d.train.n_classes, -1);
  std::vector<int> task_of(d.train.n_classes, -1);
  for (int t = 0; t < tasks; ++t)
    for (int j = 0; j < k; ++j) {
      const int c = classes[t * k + j];
      s.tasks[t].classes.push_back(c);
      s.model_label[c] = t * k + j;
      task_of[c] = t;
    }
  for (std::size_t i = 0; i < d.train.size(); ++i)
    if (int t = task_of[d.train.labels[i]]; t >= 0) s.tasks[t].train.push_back(static_cast<int>(i));
  for (std::size_t i = 0; i < d.test.size(); ++i)
    if (int t = task_of[d.test.labels[i]]; t >= 0) s.tasks[t].test.push_back(static_cast<int>(i));
  return s;
}

}  // namespace cdl
