#include "fsvi/coreset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "fsvi/errors.hpp"
#include "fsvi/mlp.hpp"
#include "json.hpp"

namespace fsvi {

void ContextConfig::validate() const {
  if (points_per_step < 1) throw ConfigError("context: points_per_step must be at least 1");
  if (!(noise_lo < noise_hi)) throw ConfigError("context: noise range must be non-degenerate");
}

std::size_t Coreset::total_points() const {
  std::size_t n = 0;
  for (const auto& t : tasks_) n += t.inputs.rows;
  return n;
}

std::size_t Coreset::points_dim() const {
  if (tasks_.empty()) throw StateError("coreset: no points stored yet");
  return tasks_.front().inputs.cols;
}

void Coreset::store(std::size_t task, const Tensor2& inputs, const std::vector<int>& labels) {
  if (labels.size() != inputs.rows) {
    throw ShapeError("coreset: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(inputs.rows) + " inputs");
  }
  if (inputs.rows == 0) throw ShapeError("coreset: refusing to store an empty selection");
  if (inputs.rows > capacity_) {
    throw CapacityError("coreset: " + std::to_string(inputs.rows) +
                        " points exceed the per-task capacity of " + std::to_string(capacity_));
  }
  if (!tasks_.empty()) {
    if (task <= tasks_.back().task) {
      throw StateError("coreset: task " + std::to_string(task) +
                       " stored out of order; past tasks are frozen");
    }
    if (inputs.cols != points_dim()) {
      throw ShapeError("coreset: input dimension changed between tasks");
    }
  }
  ensure_finite(inputs, "coreset inputs");
  tasks_.push_back({task, inputs, labels});
}

Tensor2 Coreset::all_inputs() const {
  if (tasks_.empty()) throw StateError("coreset: no points stored yet");
  Tensor2 out(total_points(), points_dim());
  std::size_t r = 0;
  for (const auto& t : tasks_) {
    std::memcpy(out.row_ptr(r), t.inputs.data.data(), t.inputs.size() * sizeof(double));
    r += t.inputs.rows;
  }
  return out;
}

std::uint64_t Coreset::content_hash() const {
  // FNV-1a over the raw bytes of every stored field, in storage order.
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& t : tasks_) {
    mix(&t.task, sizeof(t.task));
    mix(t.inputs.data.data(), t.inputs.size() * sizeof(double));
    mix(t.labels.data(), t.labels.size() * sizeof(int));
  }
  return h;
}

std::string Coreset::to_jsonl() const {
  std::ostringstream out;
  for (const auto& t : tasks_) {
    for (std::size_t r = 0; r < t.inputs.rows; ++r) {
      nlohmann::json line;
      line["task"] = t.task;
      line["input"] = std::vector<double>(t.inputs.row_ptr(r), t.inputs.row_ptr(r) + t.inputs.cols);
      line["label"] = t.labels[r];
      out << line.dump() << '\n';
    }
  }
  return out.str();
}

Coreset Coreset::from_jsonl(const std::string& text, std::size_t capacity_per_task) {
  Coreset cs(capacity_per_task);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;

  std::size_t cur_task = 0;
  std::vector<double> xs;
  std::vector<int> ys;
  std::size_t dim = 0;
  auto flush = [&]() {
    if (ys.empty()) return;
    cs.store(cur_task, Tensor2(ys.size(), dim, std::move(xs)), ys);
    xs.clear();
    ys.clear();
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("coreset jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("task") || !j.contains("input") || !j.contains("label")) {
      throw DataError("coreset jsonl line " + std::to_string(lineno) + ": missing field");
    }
    const std::size_t task = j["task"].get<std::size_t>();
    std::vector<double> input = j["input"].get<std::vector<double>>();
    if (ys.empty() && xs.empty()) {
      cur_task = task;
      dim = input.size();
    } else if (task != cur_task) {
      flush();
      cur_task = task;
      dim = input.size();
    }
    if (input.size() != dim) {
      throw DataError("coreset jsonl line " + std::to_string(lineno) + ": dimension mismatch");
    }
    xs.insert(xs.end(), input.begin(), input.end());
    ys.push_back(j["label"].get<int>());
  }
  flush();
  return cs;
}

// ---------------------------------------------------------------------------

Tensor2 mc_softmax(const MeanFieldGaussian& q, const Tensor2& x, std::size_t head,
                   int mc_samples, RngStream* rng) {
  if (mc_samples < 1) throw ConfigError("mc_softmax: mc_samples must be at least 1");
  q.validate();
  Tensor2 avg;
  std::vector<double> eps(q.param_count());
  for (int s = 0; s < mc_samples; ++s) {
    rng->fill_normal(eps.data(), eps.size());
    Tensor2 logits = mlp_forward(q.arch, sample_params(q, eps), x, head);
    if (s == 0) avg = Tensor2(logits.rows, logits.cols, 0.0);
    for (std::size_t r = 0; r < logits.rows; ++r) {
      double m = logits(r, 0);
      for (std::size_t c = 1; c < logits.cols; ++c) m = std::max(m, logits(r, c));
      double z = 0.0;
      for (std::size_t c = 0; c < logits.cols; ++c) z += std::exp(logits(r, c) - m);
      for (std::size_t c = 0; c < logits.cols; ++c) {
        avg(r, c) += std::exp(logits(r, c) - m) / z;
      }
    }
  }
  for (double& v : avg.data) v /= double(mc_samples);
  return avg;
}

namespace {

// Per-point log-likelihood under one MC parameter draw, accumulated in place.
void add_pointwise_loglik(const MeanFieldGaussian& q, const std::vector<double>& eps,
                          const Tensor2& x, const std::vector<int>& y, std::size_t head,
                          std::vector<double>* acc) {
  Tensor2 logits = mlp_forward(q.arch, sample_params(q, eps), x, head);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const int label = y[r];
    if (label < 0 || static_cast<std::size_t>(label) >= logits.cols) {
      throw DataError("score_points: label " + std::to_string(label) + " out of range");
    }
    double m = logits(r, 0);
    for (std::size_t c = 1; c < logits.cols; ++c) m = std::max(m, logits(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < logits.cols; ++c) z += std::exp(logits(r, c) - m);
    (*acc)[r] += logits(r, static_cast<std::size_t>(label)) - (m + std::log(z));
  }
}

// The diagonalized function-KL is separable over context points: sum each
// row's cells to get that point's contribution.
std::vector<double> per_point_kl(const MeanFieldGaussian& q, const FunctionPrior& prior,
                                 const Tensor2& candidates, std::size_t active_heads) {
  FunctionPriorTerms terms = eval_function_prior(prior, q.arch, candidates, active_heads);
  Tensor2 cells = kl_diag_cells(q, terms, candidates, active_heads);
  std::vector<double> out(cells.rows, 0.0);
  for (std::size_t r = 0; r < cells.rows; ++r) {
    for (std::size_t c = 0; c < cells.cols; ++c) out[r] += cells(r, c);
  }
  return out;
}

}  // namespace

std::vector<double> score_points(const MeanFieldGaussian& q, const FunctionPrior& prior,
                                 const Tensor2& candidates, const std::vector<int>& labels,
                                 std::size_t head, std::size_t active_heads, ScoreMethod method,
                                 int mc_samples, RngStream* rng) {
  if (candidates.rows == 0) throw ShapeError("score_points: no candidates");
  const std::size_t n = candidates.rows;

  std::vector<double> scores(n, 0.0);
  switch (method) {
    case ScoreMethod::random: {
      scores.assign(n, 1.0);
      break;
    }
    case ScoreMethod::entropy: {
      Tensor2 p = mc_softmax(q, candidates, head, mc_samples, rng);
      for (std::size_t r = 0; r < n; ++r) {
        double h = 0.0;
        for (std::size_t c = 0; c < p.cols; ++c) {
          if (p(r, c) > 0.0) h -= p(r, c) * std::log(p(r, c));
        }
        scores[r] = h;
      }
      break;
    }
    case ScoreMethod::kl: {
      scores = per_point_kl(q, prior, candidates, active_heads);
      break;
    }
    case ScoreMethod::elbo: {
      if (labels.size() != n) throw ShapeError("score_points: elbo scoring needs labels");
      std::vector<double> ll(n, 0.0);
      std::vector<double> eps(q.param_count());
      for (int s = 0; s < mc_samples; ++s) {
        rng->fill_normal(eps.data(), eps.size());
        add_pointwise_loglik(q, eps, candidates, labels, head, &ll);
      }
      const std::vector<double> kl = per_point_kl(q, prior, candidates, active_heads);
      for (std::size_t r = 0; r < n; ++r) scores[r] = ll[r] / double(mc_samples) - kl[r];
      // The ELBO is signed; shift so the PMF masses are valid.
      const double lo = *std::min_element(scores.begin(), scores.end());
      for (double& s : scores) s -= lo;
      break;
    }
  }
  ensure_finite(scores, "candidate scores");
  for (double s : scores) {
    if (s < 0.0) throw NumericalError("score_points: negative score");
  }
  return scores;
}

std::vector<std::size_t> select_points(const std::vector<double>& scores, std::size_t n,
                                       ScoreDirection direction, RngStream* rng) {
  if (n > scores.size()) {
    throw ConfigError("select_points: asked for " + std::to_string(n) + " of " +
                      std::to_string(scores.size()) + " candidates");
  }
  ensure_finite(scores, "selection scores");
  double top = 0.0;
  for (double s : scores) {
    if (s < 0.0) throw NumericalError("select_points: negative score");
    top = std::max(top, s);
  }

  std::vector<double> mass(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    mass[i] = direction == ScoreDirection::lowest ? top - scores[i] : scores[i];
  }

  std::vector<std::size_t> remaining(scores.size());
  for (std::size_t i = 0; i < remaining.size(); ++i) remaining[i] = i;
  std::vector<std::size_t> picked;
  picked.reserve(n);
  while (picked.size() < n) {
    double total = 0.0;
    for (std::size_t i : remaining) total += mass[i];
    std::size_t chosen_slot;
    if (total <= 0.0) {
      // Degenerate PMF (all remaining masses zero): uniform fallback.
      chosen_slot = std::size_t(rng->uniform_int(remaining.size()));
    } else {
      const double u = rng->uniform() * total;
      double acc = 0.0;
      chosen_slot = remaining.size() - 1;
      for (std::size_t slot = 0; slot < remaining.size(); ++slot) {
        acc += mass[remaining[slot]];
        if (u < acc) {
          chosen_slot = slot;
          break;
        }
      }
    }
    picked.push_back(remaining[chosen_slot]);
    remaining.erase(remaining.begin() + std::ptrdiff_t(chosen_slot));
  }
  return picked;
}

namespace {

Tensor2 noise_rows(std::size_t count, std::size_t dim, double lo, double hi, RngStream* rng) {
  Tensor2 out(count, dim);
  for (double& v : out.data) v = rng->uniform(lo, hi);
  return out;
}

// Uniform draw of `count` rows; takes everything (in order) when the source
// has no more than `count` rows.
Tensor2 sample_rows(const Tensor2& source, std::size_t count, RngStream* rng) {
  if (source.rows <= count) return source;
  std::vector<std::size_t> idx = rng->sample_without_replacement(source.rows, count);
  Tensor2 out(count, source.cols);
  for (std::size_t r = 0; r < count; ++r) {
    std::memcpy(out.row_ptr(r), source.row_ptr(idx[r]), source.cols * sizeof(double));
  }
  return out;
}

Tensor2 stack_rows(const Tensor2& a, const Tensor2& b) {
  if (a.rows == 0) return b;
  if (b.rows == 0) return a;
  if (a.cols != b.cols) throw ShapeError("context: mismatched point dimensions");
  Tensor2 out(a.rows + b.rows, a.cols);
  std::memcpy(out.data.data(), a.data.data(), a.size() * sizeof(double));
  std::memcpy(out.row_ptr(a.rows), b.data.data(), b.size() * sizeof(double));
  return out;
}

}  // namespace

Tensor2 build_context(const Coreset& coreset, const ContextConfig& cfg, const Tensor2& current_x,
                      std::size_t task, RngStream* rng) {
  cfg.validate();
  if (task < 1) throw ConfigError("build_context: tasks are numbered from 1");
  if (current_x.cols == 0) throw ShapeError("build_context: current inputs have no columns");
  const std::size_t dim = current_x.cols;

  switch (cfg.mode) {
    case ContextMode::coreset: {
      if (task == 1) {
        return noise_rows(cfg.points_per_step, dim, cfg.noise_lo, cfg.noise_hi, rng);
      }
      if (coreset.empty()) {
        throw ConfigError("build_context: coreset mode needs stored points after task 1");
      }
      return sample_rows(coreset.all_inputs(), cfg.points_per_step, rng);
    }
    case ContextMode::noise: {
      const std::size_t from_coreset = 20 * (task - 1);
      const std::size_t from_noise = 30 * task;
      Tensor2 stored(0, dim);
      if (from_coreset > 0) {
        if (coreset.empty()) {
          throw ConfigError("build_context: noise mode needs stored points after task 1");
        }
        stored = sample_rows(coreset.all_inputs(), from_coreset, rng);
      }
      return stack_rows(stored, noise_rows(from_noise, dim, cfg.noise_lo, cfg.noise_hi, rng));
    }
    case ContextMode::current_task: {
      if (current_x.rows == 0) throw ShapeError("build_context: empty current batch");
      return sample_rows(current_x, cfg.points_per_step, rng);
    }
  }
  throw ConfigError("build_context: unknown context mode");
}

}  // namespace fsvi
