#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pcas/graph.hpp"

namespace pcas {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  int n_elements = 0;
  // Location of the worst element, for diagnostics.
  int worst_param = -1;
  int worst_index = -1;

  bool ok(double tol) const { return max_rel_error < tol; }
  std::string str() const;
};

// Builds the scalar loss from the given parameters inside the supplied graph.
// Must be deterministic; the checker runs it repeatedly.
using LossFn = std::function<Var(Graph&, const std::vector<Tensor*>&)>;

// Central finite differences against reverse-mode gradients for every element
// of every parameter. Relative error uses |ad - fd| / max(1e-8, |ad| + |fd|).
// Throws if two forward evaluations disagree (non-deterministic loss).
GradCheckReport grad_check(const LossFn& loss_fn, std::vector<Tensor*> params,
                           double eps = 1e-5);

}  // namespace pcas
