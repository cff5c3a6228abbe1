#pragma once

// Central finite-difference gradient checking for every differentiable op.
// The checker perturbs raw tensor values and re-runs the forward closure with
// no graph installed, so the numeric route never touches the adjoint code it
// is checking.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sqvlm/tensor.hpp"

namespace sqvlm {

// Max relative error between analytic and central finite-difference gradients
// of a scalar-valued forward closure, over every element of every input.
// Elements where both routes sit below the FD noise floor (~|f| * eps / 2h)
// are treated as zero rather than divided by each other.
inline double max_rel_grad_err(const std::function<Tensor()>& forward,
                               const std::vector<Tensor>& inputs,
                               double h = 1e-5) {
  for (const Tensor& t : inputs) const_cast<Tensor&>(t).zero_grad();
  double f0 = 0.0;
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    Tensor loss = forward();
    f0 = loss.item();
    g.backward(loss);
  }
  const double zero_guard = std::max(1e-7, std::abs(f0) * 1e-6);
  for (const Tensor& t : inputs) {
    if (!t.has_grad())
      throw StateError("gradcheck input has no grad after backward");
    analytic.push_back(t.grad_view());
  }

  double worst = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor t = inputs[ti];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t.value()[i];
      t.value()[i] = orig + h;
      const double fp = forward().item();
      t.value()[i] = orig - h;
      const double fm = forward().item();
      t.value()[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[ti][i];
      const double denom = std::max(std::abs(an), std::abs(fd));
      if (denom < zero_guard) continue;  // both below the noise floor
      worst = std::max(worst, std::abs(an - fd) / denom);
    }
  }
  return worst;
}

struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;
};

namespace detail {
inline Tensor weighted_sum(const Tensor& y, const Tensor& w) {
  return sum_all(mul(y, w));
}
}  // namespace detail

// Runs the finite-difference contract for every differentiable op on several
// random small shapes each. tol is the spec'd 1e-4 relative-error budget.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed,
                                                        double tol = 1e-4,
                                                        int shapes_per_op = 5) {
  std::mt19937_64 rng(seed);
  auto rnd_dim = [&](int lo, int hi) {
    return static_cast<int>(lo + rng() % static_cast<std::uint64_t>(hi - lo + 1));
  };
  auto randn = [&](Shape s, double sd = 1.0) {
    return Tensor::randn(std::move(s), rng, sd, true);
  };
  auto fixed = [&](Shape s) {
    Tensor t = Tensor::randn(std::move(s), rng, 1.0, false);
    return t;
  };

  std::vector<GradCheckResult> results;
  auto run = [&](const std::string& name,
                 const std::function<double()>& one_case) {
    GradCheckResult r;
    r.op = name;
    for (int c = 0; c < shapes_per_op; ++c)
      r.max_rel_err = std::max(r.max_rel_err, one_case());
    r.pass = r.max_rel_err < tol;
    results.push_back(r);
  };

  run("matmul", [&] {
    const int m = rnd_dim(2, 5), k = rnd_dim(2, 6), n = rnd_dim(2, 5);
    Tensor a = randn({m, k}), b = randn({k, n}), w = fixed({m, n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(matmul(a, b), w); }, {a, b});
  });
  run("add", [&] {
    const int m = rnd_dim(2, 5), n = rnd_dim(2, 5);
    Tensor a = randn({m, n}), b = randn({m, n}), w = fixed({m, n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(add(a, b), w); }, {a, b});
  });
  run("mul", [&] {
    const int m = rnd_dim(2, 5), n = rnd_dim(2, 5);
    Tensor a = randn({m, n}), b = randn({m, n}), w = fixed({m, n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(mul(a, b), w); }, {a, b});
  });
  run("scale", [&] {
    const int m = rnd_dim(2, 5), n = rnd_dim(2, 5);
    Tensor a = randn({m, n}), w = fixed({m, n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(scale(a, 0.731), w); }, {a});
  });
  run("add_rowvec", [&] {
    const int m = rnd_dim(2, 5), n = rnd_dim(2, 5);
    Tensor a = randn({m, n}), v = randn({n}), w = fixed({m, n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(add_rowvec(a, v), w); }, {a, v});
  });
  run("transpose", [&] {
    const int m = rnd_dim(2, 5), n = rnd_dim(2, 5);
    Tensor a = randn({m, n}), w = fixed({n, m});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(transpose(a), w); }, {a});
  });
  run("softmax", [&] {
    const int m = rnd_dim(2, 4), n = rnd_dim(3, 6);
    const int axis = static_cast<int>(rng() % 2);
    Tensor a = randn({m, n}), w = fixed({m, n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(softmax(a, axis), w); }, {a});
  });
  run("layer_norm", [&] {
    const int m = rnd_dim(2, 4), n = rnd_dim(3, 6);
    Tensor a = randn({m, n}), g = randn({n}, 0.5), b = randn({n}, 0.5);
    Tensor w = fixed({m, n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(layer_norm(a, g, b), w); }, {a, g, b});
  });
  run("gelu", [&] {
    const int m = rnd_dim(2, 5), n = rnd_dim(2, 5);
    Tensor a = randn({m, n}), w = fixed({m, n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(gelu(a), w); }, {a});
  });
  run("embedding_lookup", [&] {
    const int v = rnd_dim(4, 8), d = rnd_dim(2, 5), l = rnd_dim(2, 6);
    Tensor table = randn({v, d});
    std::vector<int> ids(l);
    for (int& id : ids) id = static_cast<int>(rng() % static_cast<std::uint64_t>(v));
    Tensor w = fixed({l, d});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(embedding_lookup(table, ids), w); },
        {table});
  });
  run("concat_rows", [&] {
    const int n = rnd_dim(2, 5), m1 = rnd_dim(1, 4), m2 = rnd_dim(1, 4);
    Tensor a = randn({m1, n}), b = randn({m2, n}), w = fixed({m1 + m2, n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(concat_rows({a, b}), w); }, {a, b});
  });
  run("slice_cols", [&] {
    const int m = rnd_dim(2, 5), n = rnd_dim(4, 7);
    const int start = rnd_dim(0, n - 2), count = rnd_dim(1, n - start - 1);
    Tensor a = randn({m, n}), w = fixed({m, count});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(slice_cols(a, start, count), w); },
        {a});
  });
  run("concat_cols", [&] {
    const int m = rnd_dim(2, 5), n1 = rnd_dim(1, 4), n2 = rnd_dim(1, 4);
    Tensor a = randn({m, n1}), b = randn({m, n2}), w = fixed({m, n1 + n2});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(concat_cols({a, b}), w); }, {a, b});
  });
  run("mean_rows", [&] {
    const int m = rnd_dim(2, 6), n = rnd_dim(2, 5);
    Tensor a = randn({m, n}), w = fixed({n});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(mean_rows(a), w); }, {a});
  });
  run("sum_all", [&] {
    const int m = rnd_dim(2, 5), n = rnd_dim(2, 5);
    Tensor a = randn({m, n});
    return max_rel_grad_err([&] { return sum_all(a); }, {a});
  });
  run("cosine_rows", [&] {
    const int m = rnd_dim(2, 5), n = rnd_dim(2, 6);
    Tensor a = randn({m, n}), b = randn({m, n}), w = fixed({m});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(cosine_rows(a, b), w); }, {a, b});
  });
  run("cosine_matrix", [&] {
    const int m = rnd_dim(2, 4), k = rnd_dim(2, 4), d = rnd_dim(2, 6);
    Tensor a = randn({m, d}), b = randn({k, d}), w = fixed({m, k});
    return max_rel_grad_err(
        [&] { return detail::weighted_sum(cosine_matrix(a, b), w); }, {a, b});
  });
  run("cross_entropy", [&] {
    const int l = rnd_dim(3, 7), v = rnd_dim(3, 6);
    Tensor logits = randn({l, v});
    std::vector<int> targets(l);
    BoolVec mask(l);
    bool any = false;
    for (int i = 0; i < l; ++i) {
      targets[i] = static_cast<int>(rng() % static_cast<std::uint64_t>(v));
      mask[i] = static_cast<std::uint8_t>(rng() % 2);
      any = any || mask[i];
    }
    if (!any) mask[0] = 1;
    return max_rel_grad_err(
        [&] { return cross_entropy(logits, targets, mask); }, {logits});
  });

  return results;
}

}  // namespace sqvlm
