#include <cmath>
#include <set>
#include <sstream>

#include "cdl/dataset.hpp"
#include "cdl/error.hpp"
#include "doctest.h"

using namespace cdl;

namespace {

SyntheticDatasetSpec small_spec() {
  SyntheticDatasetSpec s;
  s.pretrain_classes = 2;
  s.cl_classes = 8;
  s.image_size = 8;
  s.train_per_class = 5;
  s.test_per_class = 3;
  return s;
}

}  // namespace

TEST_CASE("noise-free samples equal their class prototype") {
  SyntheticDatasetSpec s = small_spec();
  s.noise = 0.0;
  s.max_shift = 0;
  s.contrast_lo = s.contrast_hi = 1.0;
  Dataset d = generate_synthetic_dataset(s);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const auto proto = class_prototype(s, d.train.labels[i]);
    auto raw = d.train.raw(i);
    for (std::size_t k = 0; k < proto.size(); ++k)
      REQUIRE(raw[k] == static_cast<std::uint8_t>(std::lround(proto[k] * 255.0)));
  }
}

TEST_CASE("prototypes differ between classes and replay per seed") {
  SyntheticDatasetSpec s = small_spec();
  for (int a = 0; a < s.total_classes(); ++a)
    for (int b = a + 1; b < s.total_classes(); ++b) CHECK(class_prototype(s, a) != class_prototype(s, b));
  CHECK(generate_synthetic_dataset(s).train == generate_synthetic_dataset(s).train);
  SyntheticDatasetSpec other = s;
  other.seed = 1;
  CHECK(generate_synthetic_dataset(other).train != generate_synthetic_dataset(s).train);
  s.noise = -0.1;
  CHECK_THROWS_AS(generate_synthetic_dataset(s), ContractViolation);
}

TEST_CASE("layout: class-major labels and pixel range") {
  Dataset d = generate_synthetic_dataset(small_spec());
  CHECK(d.train.size() == 50);
  CHECK(d.test.size() == 30);
  CHECK(d.train.n_classes == 10);
  CHECK(d.train.pretrain_class_count == 2);
  CHECK(d.train.pixels.size() == 50 * 3 * 8 * 8);
  for (double v : d.train.image(7)) CHECK((v >= 0.0 && v <= 1.0));
  CHECK_THROWS_AS(d.train.image(50), ContractViolation);
}

TEST_CASE("default spec classes are linearly separable from raw pixels") {
  // Nearest class mean is a linear classifier.
  Dataset d = generate_synthetic_dataset(SyntheticDatasetSpec{});
  const int c = d.train.n_classes;
  const std::size_t dim = d.train.sample_bytes();
  std::vector<std::vector<double>> mean(c, std::vector<double>(dim, 0.0));
  std::vector<int> count(c, 0);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    auto x = d.train.image(i);
    for (std::size_t k = 0; k < dim; ++k) mean[d.train.labels[i]][k] += x[k];
    ++count[d.train.labels[i]];
  }
  for (int k = 0; k < c; ++k)
    for (double& v : mean[k]) v /= count[k];
  int hit = 0;
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    auto x = d.test.image(i);
    double best = 1e300;
    int arg = -1;
    for (int k = 0; k < c; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += (x[j] - mean[k][j]) * (x[j] - mean[k][j]);
      if (s < best) best = s, arg = k;
    }
    hit += arg == d.test.labels[i];
  }
  CHECK(100.0 * hit / d.test.size() > 90.0);
}

TEST_CASE("CDLD round trip is bit exact") {
  Dataset d = generate_synthetic_dataset(small_spec());
  std::stringstream ss;
  write_cdld(ss, d.train);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "CDLD");
  CHECK(bytes.size() == 4 + 2 + 4 + 1 + 2 * 4 + 2 * 50 + 50 * 192);
  std::stringstream in(bytes);
  DataSplit back = read_cdld(in);
  CHECK(back == d.train);
  std::stringstream again;
  write_cdld(again, back);
  CHECK(again.str() == bytes);

  std::stringstream cut(bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(read_cdld(cut), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream magic(bad);
  CHECK_THROWS_AS(read_cdld(magic), FormatError);
  std::string ver = bytes;
  ver[4] = 9;
  std::stringstream version(ver);
  CHECK_THROWS_AS(read_cdld(version), FormatError);
}

TEST_CASE("make_task_stream") {
  SyntheticDatasetSpec s = small_spec();
  s.cl_classes = 20;
  Dataset d = generate_synthetic_dataset(s);
  TaskStream st = make_task_stream(d, 5, 3);
  REQUIRE(st.size() == 5);
  std::set<int> seen;
  for (int t = 0; t < 5; ++t) {
    const Task& task = st.tasks[t];
    CHECK(task.classes.size() == 4);
    for (int c : task.classes) {
      CHECK(c >= s.pretrain_classes);
      CHECK(seen.insert(c).second);
    }
    CHECK(task.train.size() == 4 * 5);
    CHECK(task.test.size() == 4 * 3);
    for (int i : task.train) {
      const int label = d.train.labels[i];
      CHECK(std::find(task.classes.begin(), task.classes.end(), label) != task.classes.end());
      const int m = st.model_label[label];
      CHECK((m >= t * 4 && m < (t + 1) * 4));
    }
  }
  CHECK(seen.size() == 20);
  for (int c = 0; c < s.pretrain_classes; ++c) CHECK(st.model_label[c] == -1);

  CHECK(make_task_stream(d, 5, 3) == st);
  CHECK_FALSE(make_task_stream(d, 5, 4) == st);
  TaskStream one = make_task_stream(d, 1, 0);
  CHECK(one.tasks[0].classes.size() == 20);
  CHECK_THROWS_AS(make_task_stream(d, 3, 0), ConfigError);
  CHECK_THROWS_AS(make_task_stream(d, 0, 0), ConfigError);
}
