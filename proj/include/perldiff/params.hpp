#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "perldiff/rng.hpp"
#include "perldiff/tensor.hpp"

namespace perldiff {

class Graph;
struct Var;

// Named trainable tensors plus their gradient accumulators and AdamW moments.
// Iteration order is the lexicographic name order, which makes optimizer
// updates and checkpoint layout deterministic.
class ParameterStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
    Tensor first_moment;
    Tensor second_moment;
    bool has_grad = false;
  };

  Tensor& add(const std::string& name, Tensor init);
  // Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)).
  Tensor& add_uniform(const std::string& name, Dims dims, int fan_in, CounterRng& rng);
  Tensor& add_constant(const std::string& name, Dims dims, double v);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t num_scalars() const;
  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  void zero_grad();
  // Marks every parameter as having a (possibly zero) gradient; parameters a
  // loss does not touch legitimately receive zero.
  void mark_all_grads();

 private:
  std::map<std::string, Entry> entries_;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// One decoupled-weight-decay Adam step; `step` is 1-based and drives bias
// correction. Throws if any parameter lacks a gradient. Gradients are cleared.
void adamw_step(ParameterStore& store, double lr, int step, const AdamWConfig& cfg = {});

// Linear ramp from lr/warmup to lr over the first `warmup_steps`, then flat.
double warmup_lr(double base_lr, int step, int warmup_steps);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

class GradCheckError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Builds the loss on a fresh graph from the store. Must be deterministic.
using LossBuilder = std::function<Var(Graph&, ParameterStore&)>;

// Central finite differences vs. reverse mode for every parameter element
// (or at most `max_per_param` evenly spaced elements per tensor when > 0).
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
GradCheckResult gradient_check(const LossBuilder& loss, ParameterStore& store, double h = 1e-3,
                               std::size_t max_per_param = 0);

}  // namespace perldiff
