#include "perldiff/params.hpp"

#include <algorithm>
#include <cmath>

#include "perldiff/autograd.hpp"

namespace perldiff {

Tensor& ParameterStore::add(const std::string& name, Tensor init) {
  if (entries_.count(name) != 0) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  Entry e;
  e.grad = Tensor(init.dims());
  e.first_moment = Tensor(init.dims());
  e.second_moment = Tensor(init.dims());
  e.value = std::move(init);
  return entries_.emplace(name, std::move(e)).first->second.value;
}

Tensor& ParameterStore::add_uniform(const std::string& name, Dims dims, int fan_in, CounterRng& rng) {
  Tensor t(std::move(dims));
  const double bound = std::sqrt(1.0 / static_cast<double>(std::max(fan_in, 1)));
  for (double& v : t.storage()) v = rng.uniform(-bound, bound);
  return add(name, std::move(t));
}

Tensor& ParameterStore::add_constant(const std::string& name, Dims dims, double v) {
  return add(name, Tensor(std::move(dims), v));
}

ParameterStore::Entry& ParameterStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

const ParameterStore::Entry& ParameterStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterStore::value(const std::string& name) { return entry(name).value; }
const Tensor& ParameterStore::value(const std::string& name) const { return entry(name).value; }

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, e] : entries_) {
    e.grad.fill(0.0);
    e.has_grad = false;
  }
}

void ParameterStore::mark_all_grads() {
  for (auto& [_, e] : entries_) e.has_grad = true;
}

void adamw_step(ParameterStore& store, double lr, int step, const AdamWConfig& cfg) {
  if (step < 1) throw std::invalid_argument("adamw_step: step is 1-based");
  for (const auto& [name, e] : store.entries()) {
    if (!e.has_grad) throw std::runtime_error("adamw_step: missing gradient for parameter '" + name + "'");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step);
  for (auto& [name, e] : store.entries()) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      double& m = e.first_moment[i];
      double& v = e.second_moment[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      double& p = e.value[i];
      p -= lr * cfg.weight_decay * p;
      p -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  store.zero_grad();
}

double warmup_lr(double base_lr, int step, int warmup_steps) {
  if (warmup_steps <= 0 || step >= warmup_steps) return base_lr;
  return base_lr * static_cast<double>(std::max(step, 1)) / static_cast<double>(warmup_steps);
}

namespace {

double evaluate(const LossBuilder& loss, ParameterStore& store) {
  Graph g(false);
  return loss(g, store).value()[0];
}

}  // namespace

GradCheckResult gradient_check(const LossBuilder& loss, ParameterStore& store, double h, std::size_t max_per_param) {
  if (h <= 0.0) throw std::invalid_argument("gradient_check: h must be positive");
  store.zero_grad();
  double base = 0.0;
  {
    Graph g(true);
    Var l = loss(g, store);
    base = l.value()[0];
    g.backward(l);
  }
  if (evaluate(loss, store) != base) {
    throw GradCheckError("gradient_check: loss is not deterministic; finite differences are meaningless");
  }

  GradCheckResult result;
  for (auto& [name, e] : store.entries()) {
    const std::size_t n = e.value.size();
    std::size_t stride = 1;
    if (max_per_param > 0 && n > max_per_param) stride = (n + max_per_param - 1) / max_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = e.value[i];
      e.value[i] = saved + h;
      const double up = evaluate(loss, store);
      e.value[i] = saved - h;
      const double down = evaluate(loss, store);
      e.value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = e.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error || result.checked == 1) {
        result.max_rel_error = rel;
        result.worst_param = name;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  store.zero_grad();
  return result;
}

}  // namespace perldiff
