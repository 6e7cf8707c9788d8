#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsvi/objective.hpp"
#include "fsvi/rng.hpp"
#include "fsvi/tensor.hpp"

namespace fsvi {

// How candidate points are scored at the end of a task, and from which end of
// the score distribution the stored points are drawn.
enum class ScoreMethod { random, entropy, elbo, kl };
enum class ScoreDirection { lowest, highest };

struct SelectionPolicy {
  ScoreMethod method = ScoreMethod::random;
  ScoreDirection direction = ScoreDirection::highest;
};

// Where the per-step context batch comes from.
enum class ContextMode { coreset, noise, current_task };

struct ContextConfig {
  ContextMode mode = ContextMode::coreset;
  std::size_t points_per_step = 40;
  // Per-dimension range for noise draws (pixel data: [0,1]; toy 2D: [-4,4]).
  double noise_lo = 0.0;
  double noise_hi = 1.0;

  void validate() const;
};

// Representative inputs kept from past tasks. Storage is append-only with
// strictly increasing task ids, so a task's points are frozen the moment the
// next task starts.
class Coreset {
 public:
  explicit Coreset(std::size_t capacity_per_task = 0) : capacity_(capacity_per_task) {}

  std::size_t capacity_per_task() const { return capacity_; }
  std::size_t task_count() const { return tasks_.size(); }
  std::size_t total_points() const;
  bool empty() const { return tasks_.empty(); }
  std::size_t points_dim() const;  // StateError when empty

  // Appends one task's selection. Rows must not exceed the per-task capacity
  // and the task id must be greater than any stored so far.
  void store(std::size_t task, const Tensor2& inputs, const std::vector<int>& labels);

  // All stored inputs stacked in (task, insertion) order.
  Tensor2 all_inputs() const;

  // Content fingerprint over task ids, inputs, and labels.
  std::uint64_t content_hash() const;

  // One JSON object per line: {"task": t, "input": [...], "label": y}.
  std::string to_jsonl() const;
  static Coreset from_jsonl(const std::string& text, std::size_t capacity_per_task);

 private:
  struct TaskPoints {
    std::size_t task;
    Tensor2 inputs;
    std::vector<int> labels;
  };
  std::size_t capacity_;
  std::vector<TaskPoints> tasks_;
};

// MC-averaged softmax predictions, rows of x by classes of the head.
Tensor2 mc_softmax(const MeanFieldGaussian& q, const Tensor2& x, std::size_t head,
                   int mc_samples, RngStream* rng);

// One finite nonnegative score per candidate. entropy: predictive entropy of
// the MC-averaged softmax; elbo: per-point expected log-likelihood minus the
// point's function-KL cells, shifted so the minimum is zero; kl: the KL cells
// alone; random: constant (a uniform PMF).
std::vector<double> score_points(const MeanFieldGaussian& q, const FunctionPrior& prior,
                                 const Tensor2& candidates, const std::vector<int>& labels,
                                 std::size_t head, std::size_t active_heads, ScoreMethod method,
                                 int mc_samples, RngStream* rng);

// n distinct indices sampled without replacement from the score PMF
// (renormalized after each draw). lowest uses s_max - s_i as the mass;
// highest uses s_i. A zero total mass falls back to uniform.
std::vector<std::size_t> select_points(const std::vector<double>& scores, std::size_t n,
                                       ScoreDirection direction, RngStream* rng);

// Context batch for one gradient step.
//  - coreset: points_per_step draws from stored past points (all of them when
//    fewer are stored); at task 1, noise draws in the configured range.
//  - noise: 20*(t-1) stored points plus 30*t noise draws.
//  - current_task: points_per_step rows of the current training inputs.
Tensor2 build_context(const Coreset& coreset, const ContextConfig& cfg, const Tensor2& current_x,
                      std::size_t task, RngStream* rng);

}  // namespace fsvi
