#include "msa/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "msa/errors.hpp"
#include "msa/ops.hpp"
#include "msa/rng.hpp"
#include "msa/tape.hpp"

namespace msa {

namespace {

double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& params,
                   double* kink_distance) {
  KinkWatch watch;
  const Tensor out = f(params);
  MSA_CHECK(out.size() == 1, ErrorKind::kContract,
            "grad_check function must return a scalar");
  const double value = out.value();
  MSA_CHECK(std::isfinite(value), ErrorKind::kNumeric,
            "grad_check function returned a non-finite value");
  if (kink_distance) *kink_distance = std::min(*kink_distance, watch.min_distance());
  return value;
}

Tensor perturbed(const Tensor& t, std::size_t coord, double delta) {
  std::vector<double> data(t.data().begin(), t.data().end());
  data[coord] += delta;
  return Tensor::from_vector(t.shape(), std::move(data));
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& params,
                           double eps, std::size_t probes, std::uint64_t seed) {
  MSA_CHECK(eps >= 1e-7 && eps <= 1e-3, ErrorKind::kContract,
            "grad_check eps must lie in [1e-7, 1e-3], got ", eps);
  MSA_CHECK(!params.empty(), ErrorKind::kContract, "grad_check needs parameters");

  // analytic gradient
  Tape tape;
  std::vector<Tensor> tracked;
  tracked.reserve(params.size());
  for (const Tensor& p : params) tracked.push_back(tape.leaf(p));
  const Tensor loss = f(tracked);
  MSA_CHECK(loss.size() == 1, ErrorKind::kContract,
            "grad_check function must return a scalar");
  MSA_CHECK(std::isfinite(loss.value()), ErrorKind::kNumeric,
            "grad_check function returned a non-finite value");
  const Gradients grads = tape.backward(loss);

  std::size_t total = 0;
  for (const Tensor& p : params) total += p.size();
  MSA_CHECK(total > 0, ErrorKind::kContract, "grad_check parameters are empty");

  GradCheckResult result;
  Rng rng(seed);
  for (std::size_t probe = 0; probe < probes; ++probe) {
    std::size_t flat = rng.index(total);
    std::size_t pi = 0;
    while (flat >= params[pi].size()) {
      flat -= params[pi].size();
      ++pi;
    }

    double kink = std::numeric_limits<double>::infinity();
    std::vector<Tensor> plus = params;
    plus[pi] = perturbed(params[pi], flat, eps);
    const double f_plus = eval_scalar(f, plus, &kink);
    std::vector<Tensor> minus = params;
    minus[pi] = perturbed(params[pi], flat, -eps);
    const double f_minus = eval_scalar(f, minus, &kink);

    if (kink < 10.0 * eps) {
      ++result.skipped;
      continue;
    }

    const double numeric = (f_plus - f_minus) / (2.0 * eps);
    const double analytic = grads.at(tracked[pi]).data()[flat];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    result.max_rel_error = std::max(result.max_rel_error, rel);
    ++result.evaluated;
  }
  return result;
}

}  // namespace msa
