#include "fsvi/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "fsvi/errors.hpp"

namespace fsvi {

void SequenceSpec::validate() const {
  if (!(subsample > 0.0) || subsample > 1.0) {
    throw ConfigError("sequence: subsample fraction must be in (0, 1]");
  }
  const bool single_only =
      kind == SequenceKind::permuted_mnist || kind == SequenceKind::toy2d;
  if (single_only && head_mode == HeadMode::multi) {
    throw ConfigError("sequence: permuted and toy sequences are single-head only");
  }
}

std::vector<std::size_t> head_layout(const SequenceSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case SequenceKind::toy2d:
      return {2};
    case SequenceKind::split_mnist:
    case SequenceKind::split_fmnist:
      if (spec.head_mode == HeadMode::multi) return {2, 2, 2, 2, 2};
      return {10};
    case SequenceKind::permuted_mnist:
      return {10};
  }
  throw ConfigError("sequence: unknown kind");
}

// ---------------------------------------------------------------------------
// IDX ingestion.

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

std::uint32_t read_u32be(const std::vector<unsigned char>& b, std::size_t off,
                         const std::string& path) {
  if (off + 4 > b.size()) throw DataError(path + ": truncated header");
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace

Tensor2 load_idx_images(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  if (read_u32be(bytes, 0, path) != kIdxImagesMagic) {
    throw DataError(path + ": not an IDX image file");
  }
  const std::size_t count = read_u32be(bytes, 4, path);
  const std::size_t rows = read_u32be(bytes, 8, path);
  const std::size_t cols = read_u32be(bytes, 12, path);
  const std::size_t dim = rows * cols;
  if (bytes.size() != 16 + count * dim) {
    throw DataError(path + ": payload size does not match header");
  }
  Tensor2 out(count, dim);
  for (std::size_t i = 0; i < count * dim; ++i) {
    out.data[i] = double(bytes[16 + i]) / 255.0;
  }
  return out;
}

std::vector<int> load_idx_labels(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  if (read_u32be(bytes, 0, path) != kIdxLabelsMagic) {
    throw DataError(path + ": not an IDX label file");
  }
  const std::size_t count = read_u32be(bytes, 4, path);
  if (bytes.size() != 8 + count) {
    throw DataError(path + ": payload size does not match header");
  }
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = int(bytes[8 + i]);
  return out;
}

Dataset load_image_dataset(const std::string& images_path, const std::string& labels_path) {
  Dataset d;
  d.x = load_idx_images(images_path);
  d.y = load_idx_labels(labels_path);
  if (d.y.size() != d.x.rows) {
    throw DataError(images_path + ": " + std::to_string(d.x.rows) + " images but " +
                    std::to_string(d.y.size()) + " labels");
  }
  return d;
}

// ---------------------------------------------------------------------------
// Pool transforms.

namespace {

Dataset gather_rows(const Dataset& d, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.x = Tensor2(idx.size(), d.x.cols);
  out.y.resize(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::memcpy(out.x.row_ptr(r), d.x.row_ptr(idx[r]), d.x.cols * sizeof(double));
    out.y[r] = d.y[idx[r]];
  }
  return out;
}

Dataset filter_classes(const Dataset& d, int a, int b) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.y[i] == a || d.y[i] == b) idx.push_back(i);
  }
  return gather_rows(d, idx);
}

}  // namespace

Dataset stratified_subsample(const Dataset& d, double fraction, RngStream* rng) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw ConfigError("subsample: fraction must be in (0, 1]");
  }
  if (fraction == 1.0) return d;
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < d.size(); ++i) by_class[d.y[i]].push_back(i);
  std::vector<std::size_t> keep;
  for (const auto& [cls, members] : by_class) {
    (void)cls;
    const std::size_t want =
        std::size_t(std::ceil(fraction * double(members.size())));
    std::vector<std::size_t> picks = rng->sample_without_replacement(members.size(), want);
    std::sort(picks.begin(), picks.end());
    for (std::size_t p : picks) keep.push_back(members[p]);
  }
  std::sort(keep.begin(), keep.end());
  return gather_rows(d, keep);
}

TaskSpec make_split(const Dataset& train, const Dataset& test, std::size_t k, HeadMode mode) {
  if (k > 4) throw ConfigError("split: pair index must be in [0, 4]");
  const int a = int(2 * k);
  const int b = int(2 * k + 1);
  TaskSpec task;
  task.id = k + 1;
  task.train = filter_classes(train, a, b);
  task.test = filter_classes(test, a, b);
  if (mode == HeadMode::multi) {
    task.head = k;
    task.head_width = 2;
    task.d_cumulative = 2 * (k + 1);
    task.classes = {a, b};
    for (int& y : task.train.y) y = (y == a) ? 0 : 1;
    for (int& y : task.test.y) y = (y == a) ? 0 : 1;
  } else {
    task.head = 0;
    task.head_width = 10;
    task.d_cumulative = 10;
    task.classes.resize(10);
    for (int c = 0; c < 10; ++c) task.classes[std::size_t(c)] = c;
  }
  return task;
}

namespace {

Dataset permute_columns(const Dataset& d, const std::vector<std::size_t>& pi) {
  Dataset out;
  out.y = d.y;
  out.x = Tensor2(d.x.rows, d.x.cols);
  for (std::size_t r = 0; r < d.x.rows; ++r) {
    const double* src = d.x.row_ptr(r);
    double* dst = out.x.row_ptr(r);
    for (std::size_t c = 0; c < d.x.cols; ++c) dst[c] = src[pi[c]];
  }
  return out;
}

}  // namespace

TaskSpec make_permuted(const Dataset& train, const Dataset& test, std::size_t t,
                       std::uint64_t seed) {
  if (t < 1) throw ConfigError("permuted: tasks are numbered from 1");
  TaskSpec task;
  task.id = t;
  task.head = 0;
  task.head_width = 10;
  task.d_cumulative = 10;
  task.classes.resize(10);
  for (int c = 0; c < 10; ++c) task.classes[std::size_t(c)] = c;
  if (t == 1) {
    task.train = train;
    task.test = test;
    return task;
  }
  RngStream rng(seed, "pixel-permutation/" + std::to_string(t));
  const std::vector<std::size_t> pi = rng.permutation(train.x.cols);
  task.train = permute_columns(train, pi);
  task.test = permute_columns(test, pi);
  return task;
}

std::vector<TaskSpec> make_toy_sequence(std::uint64_t seed) {
  // Five well-separated regions of [-4,4]^2, one binary blob pair per task.
  // Cluster means sit 1.4 apart (5.6 sigma at sigma = 0.25), so tasks are
  // linearly separable; draws are clamped to the box.
  static const double centers[5][2] = {
      {-2.4, 2.4}, {2.4, 2.4}, {0.0, 0.0}, {-2.4, -2.4}, {2.4, -2.4}};
  constexpr double kSigma = 0.25;
  constexpr double kHalfGap = 0.7;
  constexpr std::size_t kTrainPerClass = 1800;
  constexpr std::size_t kTestPerClass = 200;

  auto draw = [](RngStream* rng, double cx, double cy, std::size_t n, int label, Dataset* out,
                 std::size_t row0) {
    for (std::size_t i = 0; i < n; ++i) {
      const double px = std::clamp(cx + kSigma * rng->normal(), -4.0, 4.0);
      const double py = std::clamp(cy + kSigma * rng->normal(), -4.0, 4.0);
      out->x(row0 + i, 0) = px;
      out->x(row0 + i, 1) = py;
      out->y[row0 + i] = label;
    }
  };

  std::vector<TaskSpec> tasks;
  for (std::size_t t = 0; t < 5; ++t) {
    TaskSpec task;
    task.id = t + 1;
    task.head = 0;
    task.head_width = 2;
    task.d_cumulative = 2;
    task.classes = {0, 1};
    task.train.x = Tensor2(2 * kTrainPerClass, 2);
    task.train.y.resize(2 * kTrainPerClass);
    task.test.x = Tensor2(2 * kTestPerClass, 2);
    task.test.y.resize(2 * kTestPerClass);

    RngStream rng(seed, "toy-task/" + std::to_string(t + 1));
    const double cx = centers[t][0];
    const double cy = centers[t][1];
    draw(&rng, cx - kHalfGap, cy, kTrainPerClass, 0, &task.train, 0);
    draw(&rng, cx + kHalfGap, cy, kTrainPerClass, 1, &task.train, kTrainPerClass);
    draw(&rng, cx - kHalfGap, cy, kTestPerClass, 0, &task.test, 0);
    draw(&rng, cx + kHalfGap, cy, kTestPerClass, 1, &task.test, kTestPerClass);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

std::vector<TaskSpec> build_sequence(const SequenceSpec& spec, const std::string& data_dir) {
  spec.validate();
  if (spec.kind == SequenceKind::toy2d) return make_toy_sequence(spec.seed);

  const std::string sub =
      spec.kind == SequenceKind::split_fmnist ? "/fmnist" : "/mnist";
  Dataset train = load_image_dataset(data_dir + sub + "/train-images-idx3-ubyte",
                                     data_dir + sub + "/train-labels-idx1-ubyte");
  Dataset test = load_image_dataset(data_dir + sub + "/t10k-images-idx3-ubyte",
                                    data_dir + sub + "/t10k-labels-idx1-ubyte");
  if (spec.subsample < 1.0) {
    RngStream rng_train(spec.seed, "subsample/train");
    RngStream rng_test(spec.seed, "subsample/test");
    train = stratified_subsample(train, spec.subsample, &rng_train);
    test = stratified_subsample(test, spec.subsample, &rng_test);
  }

  std::vector<TaskSpec> tasks;
  if (spec.kind == SequenceKind::permuted_mnist) {
    for (std::size_t t = 1; t <= 10; ++t) {
      tasks.push_back(make_permuted(train, test, t, spec.seed));
    }
  } else {
    for (std::size_t k = 0; k < 5; ++k) {
      tasks.push_back(make_split(train, test, k, spec.head_mode));
    }
  }
  return tasks;
}

}  // namespace fsvi
