#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace cdl {

/// Procedural image classes. Each class is a sparse mixture of patterns
/// drawn from a basis shared by every class, so features learned on the
/// pretraining block transfer to the continual-learning classes.
struct SyntheticDatasetSpec {
  std::uint64_t seed = 0;
  int pretrain_classes = 10;
  int cl_classes = 20;
  int image_size = 16;
  int channels = 3;
  int train_per_class = 200;
  int test_per_class = 50;
  double noise = 0.05;
  int max_shift = 1;             // cyclic pixel shift in [-s, s]
  double contrast_lo = 0.8;
  double contrast_hi = 1.2;
  int basis_size = 16;
  int patterns_per_class = 3;

  int total_classes() const { return pretrain_classes + cl_classes; }
  void validate() const;
};

/// One split in CDLD layout. Labels [0, pretrain_class_count) form the
/// pretraining block; the rest are continual-learning classes.
struct DataSplit {
  int channels = 3;
  int height = 16;
  int width = 16;
  int n_classes = 0;
  int pretrain_class_count = 0;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;  // channel-major per sample

  std::size_t size() const { return labels.size(); }
  std::size_t sample_bytes() const { return static_cast<std::size_t>(channels) * height * width; }
  std::span<const std::uint8_t> raw(std::size_t i) const { return {pixels.data() + i * sample_bytes(), sample_bytes()}; }
  // Pixels scaled to [0, 1].
  std::vector<double> image(std::size_t i) const;
  bool operator==(const DataSplit&) const = default;
};

struct Dataset {
  DataSplit train;
  DataSplit test;
};

// Noise-free class prototype in [0, 1], channel-major.
std::vector<double> class_prototype(const SyntheticDatasetSpec& spec, int label);

Dataset generate_synthetic_dataset(const SyntheticDatasetSpec& spec);

void write_cdld(std::ostream& out, const DataSplit& split);
DataSplit read_cdld(std::istream& in);
void save_cdld(const std::filesystem::path& path, const DataSplit& split);
DataSplit load_cdld(const std::filesystem::path& path);

// train.cdld / test.cdld under `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& dir);

struct Task {
  std::vector<int> classes;        // dataset labels, in stream order
  std::vector<int> train;          // sample indices into the train split
  std::vector<int> test;
  bool operator==(const Task&) const = default;
};

/// Class-incremental stream over the continual-learning classes. Task t's
/// classes get contiguous model labels [t*k, (t+1)*k).
struct TaskStream {
  std::vector<Task> tasks;
  std::vector<int> model_label;    // dataset label -> model label, -1 outside the stream

  int size() const { return static_cast<int>(tasks.size()); }
  int classes_per_task() const { return tasks.empty() ? 0 : static_cast<int>(tasks[0].classes.size()); }
  bool operator==(const TaskStream&) const = default;
};

TaskStream make_task_stream(const Dataset& d, int tasks, std::uint64_t seed);

}  // namespace cdl
