#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "fsvi/errors.hpp"
#include "fsvi/tasks.hpp"
#include "test_util.hpp"

using fsvi::Dataset;
using fsvi::HeadMode;
using fsvi::RngStream;
using fsvi::SequenceKind;
using fsvi::SequenceSpec;
using fsvi::TaskSpec;
using fsvi::Tensor2;

namespace {

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void push_u32be(std::vector<unsigned char>* b, std::uint32_t v) {
  b->push_back((unsigned char)(v >> 24));
  b->push_back((unsigned char)(v >> 16));
  b->push_back((unsigned char)(v >> 8));
  b->push_back((unsigned char)(v));
}

std::vector<unsigned char> idx_image_bytes(std::uint32_t count, std::uint32_t rows,
                                           std::uint32_t cols,
                                           const std::vector<unsigned char>& payload) {
  std::vector<unsigned char> b;
  push_u32be(&b, 0x00000803);
  push_u32be(&b, count);
  push_u32be(&b, rows);
  push_u32be(&b, cols);
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

std::vector<unsigned char> idx_label_bytes(const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> b;
  push_u32be(&b, 0x00000801);
  push_u32be(&b, std::uint32_t(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

// Ten-class pool where x(r,0) encodes the row's global label and x(r,1) its
// original row index, so filtering and remapping stay checkable.
Dataset ten_class_pool(std::size_t per_class) {
  Dataset d;
  d.x = Tensor2(10 * per_class, 3);
  d.y.resize(10 * per_class);
  std::size_t r = 0;
  for (int cls = 0; cls < 10; ++cls) {
    for (std::size_t i = 0; i < per_class; ++i, ++r) {
      d.x(r, 0) = double(cls);
      d.x(r, 1) = double(r);
      d.x(r, 2) = 0.5;
      d.y[r] = cls;
    }
  }
  return d;
}

// Plain batch-gradient logistic regression; enough to certify separability.
double logistic_train_accuracy(const Dataset& d, int iters = 500, double lr = 0.5) {
  double w0 = 0.0, w1 = 0.0, b = 0.0;
  const double n = double(d.size());
  for (int it = 0; it < iters; ++it) {
    double g0 = 0.0, g1 = 0.0, gb = 0.0;
    for (std::size_t r = 0; r < d.size(); ++r) {
      const double z = w0 * d.x(r, 0) + w1 * d.x(r, 1) + b;
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double e = p - double(d.y[r]);
      g0 += e * d.x(r, 0);
      g1 += e * d.x(r, 1);
      gb += e;
    }
    w0 -= lr * g0 / n;
    w1 -= lr * g1 / n;
    b -= lr * gb / n;
  }
  std::size_t hits = 0;
  for (std::size_t r = 0; r < d.size(); ++r) {
    const double z = w0 * d.x(r, 0) + w1 * d.x(r, 1) + b;
    if ((z > 0.0) == (d.y[r] == 1)) ++hits;
  }
  return double(hits) / n;
}

std::set<std::pair<double, double>> point_set(const Tensor2& x) {
  std::set<std::pair<double, double>> s;
  for (std::size_t r = 0; r < x.rows; ++r) s.insert({x(r, 0), x(r, 1)});
  return s;
}

}  // namespace

TEST_SUITE("tasks") {
  TEST_CASE("IDX image loading scales bytes to [0,1]") {
    const std::string img = "/tmp/fsvi_idx_images_test";
    write_bytes(img, idx_image_bytes(2, 2, 2, {0, 255, 128, 64, 10, 20, 30, 40}));
    Tensor2 x = fsvi::load_idx_images(img);
    REQUIRE(x.rows == 2);
    REQUIRE(x.cols == 4);
    CHECK(x(0, 0) == 0.0);
    CHECK(x(0, 1) == 1.0);
    CHECK(x(0, 2) == doctest::Approx(0.50196).epsilon(1e-4));
    CHECK(x(0, 3) == doctest::Approx(0.25098).epsilon(1e-4));
    CHECK(x(0, 2) == doctest::Approx(128.0 / 255.0).epsilon(1e-12));
    CHECK(x(1, 3) == doctest::Approx(40.0 / 255.0).epsilon(1e-12));
  }

  TEST_CASE("IDX loaders reject malformed files") {
    const std::string img = "/tmp/fsvi_idx_bad_test";
    const std::string lbl = "/tmp/fsvi_idx_lbl_test";

    SUBCASE("label file round-trips") {
      write_bytes(lbl, idx_label_bytes({7, 0, 9}));
      std::vector<int> y = fsvi::load_idx_labels(lbl);
      CHECK(y == std::vector<int>{7, 0, 9});
    }
    SUBCASE("bad magic") {
      auto bytes = idx_image_bytes(1, 2, 2, {1, 2, 3, 4});
      bytes[3] = 0x99;
      write_bytes(img, bytes);
      CHECK_THROWS_AS(fsvi::load_idx_images(img), fsvi::DataError);
      write_bytes(lbl, idx_image_bytes(1, 2, 2, {1, 2, 3, 4}));  // image magic, label reader
      CHECK_THROWS_AS(fsvi::load_idx_labels(lbl), fsvi::DataError);
    }
    SUBCASE("truncated payload") {
      write_bytes(img, idx_image_bytes(2, 2, 2, {1, 2, 3, 4}));  // promises 8 bytes
      CHECK_THROWS_AS(fsvi::load_idx_images(img), fsvi::DataError);
      write_bytes(lbl, idx_label_bytes({1, 2, 3}));
      auto short_lbl = idx_label_bytes({1, 2, 3});
      short_lbl.pop_back();
      write_bytes(lbl, short_lbl);
      CHECK_THROWS_AS(fsvi::load_idx_labels(lbl), fsvi::DataError);
    }
    SUBCASE("image/label count mismatch") {
      write_bytes(img, idx_image_bytes(2, 2, 2, {0, 0, 0, 0, 1, 1, 1, 1}));
      write_bytes(lbl, idx_label_bytes({1, 2, 3}));
      CHECK_THROWS_AS(fsvi::load_image_dataset(img, lbl), fsvi::DataError);
    }
    SUBCASE("missing file") {
      CHECK_THROWS_AS(fsvi::load_idx_images("/tmp/fsvi_idx_does_not_exist"), fsvi::DataError);
    }
  }

  TEST_CASE("split tasks filter and remap classes") {
    Dataset train = ten_class_pool(4);
    Dataset test = ten_class_pool(2);

    SUBCASE("multi-head task 3 maps {6,7} onto {0,1}") {
      TaskSpec t = fsvi::make_split(train, test, 3, HeadMode::multi);
      CHECK(t.id == 4);
      CHECK(t.head == 3);
      CHECK(t.head_width == 2);
      CHECK(t.d_cumulative == 8);
      CHECK(t.classes == std::vector<int>{6, 7});
      REQUIRE(t.train.size() == 8);
      REQUIRE(t.test.size() == 4);
      for (std::size_t r = 0; r < t.train.size(); ++r) {
        const int local = t.train.y[r];
        CHECK((local == 0 || local == 1));
        CHECK(t.train.x(r, 0) == double(6 + local));  // global class retained in features
      }
    }
    SUBCASE("single-head keeps global labels on a 10-wide head") {
      TaskSpec t = fsvi::make_split(train, test, 3, HeadMode::single);
      CHECK(t.head == 0);
      CHECK(t.head_width == 10);
      CHECK(t.d_cumulative == 10);
      std::set<int> seen(t.train.y.begin(), t.train.y.end());
      CHECK(seen == std::set<int>{6, 7});
    }
    SUBCASE("pair 0 contains only digits 0 and 1") {
      TaskSpec t = fsvi::make_split(train, test, 0, HeadMode::multi);
      for (std::size_t r = 0; r < t.train.size(); ++r) {
        CHECK((t.train.x(r, 0) == 0.0 || t.train.x(r, 0) == 1.0));
      }
    }
    SUBCASE("the five tasks partition the pool") {
      std::multiset<double> seen;
      std::size_t total = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        TaskSpec t = fsvi::make_split(train, test, k, HeadMode::multi);
        total += t.train.size();
        for (std::size_t r = 0; r < t.train.size(); ++r) seen.insert(t.train.x(r, 1));
      }
      CHECK(total == train.size());
      std::multiset<double> want;
      for (std::size_t r = 0; r < train.size(); ++r) want.insert(train.x(r, 1));
      CHECK(seen == want);
    }
    SUBCASE("pair index out of range") {
      CHECK_THROWS_AS(fsvi::make_split(train, test, 5, HeadMode::multi), fsvi::ConfigError);
    }
  }

  TEST_CASE("permuted tasks reorder pixels deterministically") {
    // Column c holds the constant value c, so the permutation can be read off.
    Dataset train;
    train.x = Tensor2(3, 16);
    train.y = {1, 2, 3};
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 16; ++c) train.x(r, c) = double(c);
    }
    Dataset test = train;

    SUBCASE("task 1 is the identity") {
      TaskSpec t = fsvi::make_permuted(train, test, 1, 99);
      CHECK(t.train.x.data == train.x.data);
      CHECK(t.test.x.data == test.x.data);
    }
    SUBCASE("later tasks apply one valid permutation to train and test") {
      TaskSpec t = fsvi::make_permuted(train, test, 2, 99);
      std::vector<std::size_t> pi(16);
      std::set<std::size_t> seen;
      for (std::size_t c = 0; c < 16; ++c) {
        pi[c] = std::size_t(t.train.x(0, c));
        seen.insert(pi[c]);
      }
      CHECK(seen.size() == 16);                      // a bijection
      CHECK(t.train.x.data != train.x.data);         // and not the identity
      CHECK(t.test.x.data == t.train.x.data);        // same reorder both sides
      CHECK(t.train.y == train.y);

      // Applying the inverse recovers the original image.
      Tensor2 undone(3, 16);
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 16; ++c) undone(r, pi[c]) = t.train.x(r, c);
      }
      CHECK(undone.data == train.x.data);
    }
    SUBCASE("fixed seed reproduces the permutation; tasks differ") {
      TaskSpec a = fsvi::make_permuted(train, test, 2, 99);
      TaskSpec b = fsvi::make_permuted(train, test, 2, 99);
      CHECK(a.train.x.data == b.train.x.data);
      TaskSpec c = fsvi::make_permuted(train, test, 3, 99);
      CHECK(a.train.x.data != c.train.x.data);
    }
  }

  TEST_CASE("toy sequence: shape, range, determinism, separability") {
    auto tasks = fsvi::make_toy_sequence(7);
    REQUIRE(tasks.size() == 5);
    for (const auto& t : tasks) {
      CHECK(t.train.size() == 3600);
      CHECK(t.test.size() == 400);
      CHECK(t.head_width == 2);
      CHECK(t.head == 0);
      const auto zeros = std::size_t(std::count(t.train.y.begin(), t.train.y.end(), 0));
      CHECK(zeros == 1800);
      for (double v : t.train.x.data) {
        CHECK(v >= -4.0);
        CHECK(v <= 4.0);
      }
      CHECK(logistic_train_accuracy(t.train) >= 0.99);

      auto train_pts = point_set(t.train.x);
      auto test_pts = point_set(t.test.x);
      for (const auto& p : test_pts) CHECK(train_pts.count(p) == 0);
    }
    auto again = fsvi::make_toy_sequence(7);
    CHECK(again[0].train.x.data == tasks[0].train.x.data);
    auto other = fsvi::make_toy_sequence(8);
    CHECK(other[0].train.x.data != tasks[0].train.x.data);
  }

  TEST_CASE("stratified subsampling keeps ceil(f * per-class) points in order") {
    Dataset d;
    d.x = Tensor2(17, 2);
    d.y.resize(17);
    for (std::size_t r = 0; r < 17; ++r) {
      d.x(r, 0) = double(r);
      d.y[r] = r < 10 ? 0 : 1;  // 10 of class 0, 7 of class 1
    }
    RngStream rng(41);
    Dataset s = fsvi::stratified_subsample(d, 0.25, &rng);
    CHECK(std::count(s.y.begin(), s.y.end(), 0) == 3);  // ceil(2.5)
    CHECK(std::count(s.y.begin(), s.y.end(), 1) == 2);  // ceil(1.75)
    REQUIRE(s.size() == 5);
    for (std::size_t r = 1; r < s.size(); ++r) CHECK(s.x(r, 0) > s.x(r - 1, 0));  // order kept

    RngStream rng2(41);
    Dataset s2 = fsvi::stratified_subsample(d, 0.25, &rng2);
    CHECK(s2.x.data == s.x.data);

    Dataset full = fsvi::stratified_subsample(d, 1.0, &rng);
    CHECK(full.x.data == d.x.data);
    CHECK_THROWS_AS(fsvi::stratified_subsample(d, 0.0, &rng), fsvi::ConfigError);
    CHECK_THROWS_AS(fsvi::stratified_subsample(d, 1.5, &rng), fsvi::ConfigError);
  }

  TEST_CASE("sequence spec validation and head layouts") {
    SequenceSpec spec;
    spec.kind = SequenceKind::permuted_mnist;
    spec.head_mode = HeadMode::multi;
    CHECK_THROWS_AS(spec.validate(), fsvi::ConfigError);
    spec.kind = SequenceKind::toy2d;
    CHECK_THROWS_AS(spec.validate(), fsvi::ConfigError);
    spec.head_mode = HeadMode::single;
    spec.subsample = 0.0;
    CHECK_THROWS_AS(spec.validate(), fsvi::ConfigError);

    spec = SequenceSpec();
    spec.kind = SequenceKind::split_mnist;
    spec.head_mode = HeadMode::multi;
    CHECK(fsvi::head_layout(spec) == std::vector<std::size_t>{2, 2, 2, 2, 2});
    spec.head_mode = HeadMode::single;
    CHECK(fsvi::head_layout(spec) == std::vector<std::size_t>{10});
    spec.kind = SequenceKind::toy2d;
    CHECK(fsvi::head_layout(spec) == std::vector<std::size_t>{2});
    spec.kind = SequenceKind::permuted_mnist;
    CHECK(fsvi::head_layout(spec) == std::vector<std::size_t>{10});
  }

  TEST_CASE("build_sequence assembles image sequences from IDX files") {
    // Miniature MNIST-shaped store: 2x2 images, two per class.
    const std::string dir = "/tmp/fsvi_tasks_data";
    REQUIRE(std::system(("mkdir -p " + dir + "/mnist").c_str()) == 0);
    std::vector<unsigned char> train_px, test_px;
    std::vector<unsigned char> train_y, test_y;
    for (int cls = 0; cls < 10; ++cls) {
      for (int rep = 0; rep < 2; ++rep) {
        for (int p = 0; p < 4; ++p) train_px.push_back((unsigned char)(cls * 20 + p));
        train_y.push_back((unsigned char)cls);
      }
      for (int p = 0; p < 4; ++p) test_px.push_back((unsigned char)(cls * 10 + p));
      test_y.push_back((unsigned char)cls);
    }
    write_bytes(dir + "/mnist/train-images-idx3-ubyte", idx_image_bytes(20, 2, 2, train_px));
    write_bytes(dir + "/mnist/train-labels-idx1-ubyte", idx_label_bytes(train_y));
    write_bytes(dir + "/mnist/t10k-images-idx3-ubyte", idx_image_bytes(10, 2, 2, test_px));
    write_bytes(dir + "/mnist/t10k-labels-idx1-ubyte", idx_label_bytes(test_y));

    SequenceSpec spec;
    spec.kind = SequenceKind::split_mnist;
    spec.head_mode = HeadMode::multi;
    spec.seed = 3;
    auto tasks = fsvi::build_sequence(spec, dir);
    REQUIRE(tasks.size() == 5);
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(tasks[k].train.size() == 4);
      CHECK(tasks[k].test.size() == 2);
      CHECK(tasks[k].head == k);
    }

    spec.kind = SequenceKind::permuted_mnist;
    spec.head_mode = HeadMode::single;
    auto ptasks = fsvi::build_sequence(spec, dir);
    REQUIRE(ptasks.size() == 10);
    CHECK(ptasks[0].train.x.data == ptasks[0].train.x.data);
    CHECK(ptasks[1].train.x.data != ptasks[0].train.x.data);

    SequenceSpec missing = spec;
    CHECK_THROWS_AS(fsvi::build_sequence(missing, "/tmp/fsvi_tasks_nowhere"), fsvi::DataError);
  }
}
