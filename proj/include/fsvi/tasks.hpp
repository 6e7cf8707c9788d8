#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsvi/rng.hpp"
#include "fsvi/tensor.hpp"

namespace fsvi {

// A labeled pool of points: rows of x paired with integer labels.
struct Dataset {
  Tensor2 x;
  std::vector<int> y;

  std::size_t size() const { return x.rows; }
};

// One element of a task sequence. Labels in train/test are head-local; the
// classes vector maps a local label back to its global class id.
struct TaskSpec {
  std::size_t id = 1;      // 1-based position in the sequence
  std::size_t head = 0;    // output head used by this task
  std::size_t head_width = 2;
  std::size_t d_cumulative = 2;  // active output dims once this task is live
  std::vector<int> classes;      // local label -> global class
  Dataset train;
  Dataset test;
};

enum class SequenceKind { toy2d, split_mnist, split_fmnist, permuted_mnist };
enum class HeadMode { multi, single };

struct SequenceSpec {
  SequenceKind kind = SequenceKind::toy2d;
  HeadMode head_mode = HeadMode::single;
  std::uint64_t seed = 0;
  double subsample = 1.0;  // stratified per-class fraction of train and test

  void validate() const;  // permuted and toy sequences are single-head only
};

// Head widths implied by the sequence: five binary heads for multi-head
// splits, one shared head otherwise.
std::vector<std::size_t> head_layout(const SequenceSpec& spec);

// IDX readers. Image pixels are scaled to [0,1]; shapes are flattened to one
// row per image. Malformed files (bad magic, truncated payload) raise
// DataError.
Tensor2 load_idx_images(const std::string& path);
std::vector<int> load_idx_labels(const std::string& path);
// Pairs images with labels; count mismatch raises DataError.
Dataset load_image_dataset(const std::string& images_path, const std::string& labels_path);

// Keeps ceil(fraction * per-class count) points of each class, sampled
// without replacement, original order preserved.
Dataset stratified_subsample(const Dataset& d, double fraction, RngStream* rng);

// Task k (0-based) of a split sequence: classes 2k and 2k+1. Multi-head
// remaps labels to {0,1} on head k; single-head keeps global labels on one
// shared 10-wide head.
TaskSpec make_split(const Dataset& train, const Dataset& test, std::size_t k, HeadMode mode);

// Task t (1-based) of a permuted sequence: pixels reordered by a seeded
// permutation, identity for t = 1, applied to train and test alike.
TaskSpec make_permuted(const Dataset& train, const Dataset& test, std::size_t t,
                       std::uint64_t seed);

// Five 2D binary tasks of Gaussian blob pairs in [-4,4]^2: 3600 train and
// 400 test points each, class-balanced, deterministic for a fixed seed.
std::vector<TaskSpec> make_toy_sequence(std::uint64_t seed);

// Assembles the full sequence. Image sequences read IDX files from
// data_dir/mnist or data_dir/fmnist; the toy sequence is synthesized.
std::vector<TaskSpec> build_sequence(const SequenceSpec& spec, const std::string& data_dir);

}  // namespace fsvi
