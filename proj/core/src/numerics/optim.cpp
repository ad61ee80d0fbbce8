#include "modicf/numerics/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace modicf {

AdamState AdamState::for_store(const ParameterStore& store) {
  AdamState s;
  for (const auto& p : store.all()) {
    s.first_moment.emplace_back(p.value.shape());
    s.second_moment.emplace_back(p.value.shape());
  }
  return s;
}

void adam_step(ParameterStore& store, AdamState& state, double lr) {
  auto& params = store.all();
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ShapeError("Adam state does not match the parameter set");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    if (m.shape() != p.value.shape() || v.shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
      throw ShapeError("Adam moment/gradient shape mismatch for " + p.name);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<Scalar>(mi);
      v[i] = static_cast<Scalar>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps);
      p.value[i] = static_cast<Scalar>(p.value[i] - update);
    }
  }
}

namespace {

double evaluate(const LossFragment& fragment, std::vector<std::uint8_t>& signs) {
  KinkRecorder kinks;
  Tape tape(false);
  const double loss = static_cast<double>(fragment(tape).value().item());
  signs = kinks.signs();
  return loss;
}

}  // namespace

GradCheckResult grad_check(const LossFragment& fragment, const std::vector<ParameterStore*>& stores, double step,
                           const ParameterFilter& include) {
  for (auto* s : stores) s->zero_grad();
  std::vector<std::uint8_t> base_signs, up_signs, down_signs;
  {
    KinkRecorder kinks;
    Tape tape;
    Var loss = fragment(tape);
    tape.backward(loss);
    base_signs = kinks.signs();
  }
  GradCheckResult result;
  double total_diff2 = 0, total_a2 = 0, total_n2 = 0;
  auto ratio = [](double diff2, double a2, double n2) {
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    return denom == 0.0 ? 0.0 : std::sqrt(diff2) / denom;
  };
  for (auto* s : stores) {
    for (auto& p : s->all()) {
      if (include && !include(p)) continue;
      double diff2 = 0, a2 = 0, n2 = 0;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const Scalar orig = p.value[i];
        p.value[i] = static_cast<Scalar>(orig + step);
        const double up = evaluate(fragment, up_signs);
        p.value[i] = static_cast<Scalar>(orig - step);
        const double down = evaluate(fragment, down_signs);
        p.value[i] = orig;
        if (up_signs != base_signs || down_signs != base_signs) {
          ++result.skipped_at_kinks;
          continue;
        }
        // Use the step actually representable in Scalar.
        const double h2 = static_cast<double>(static_cast<Scalar>(orig + step)) -
                          static_cast<double>(static_cast<Scalar>(orig - step));
        const double numeric = (up - down) / h2;
        const double analytic = p.grad[i];
        diff2 += (analytic - numeric) * (analytic - numeric);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
        ++result.checked_scalars;
      }
      const double rel = ratio(diff2, a2, n2);
      if (result.worst_parameter.empty() || rel > result.worst_parameter_error) {
        result.worst_parameter_error = rel;
        result.worst_parameter = p.name;
      }
      total_diff2 += diff2;
      total_a2 += a2;
      total_n2 += n2;
    }
  }
  result.relative_error = ratio(total_diff2, total_a2, total_n2);
  return result;
}

}  // namespace modicf
