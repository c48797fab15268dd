#include "pcas/grad_check.hpp"

#include <cmath>
#include <sstream>

#include "pcas/logging.hpp"

namespace pcas {

std::string GradCheckReport::str() const {
  std::ostringstream os;
  os << "grad_check: max_rel=" << max_rel_error << " max_abs=" << max_abs_error
     << " over " << n_elements << " elements";
  if (worst_param >= 0) os << " (worst: param " << worst_param << "[" << worst_index << "])";
  return os.str();
}

namespace {

double eval_loss(const LossFn& loss_fn, const std::vector<Tensor*>& params) {
  Graph g;
  Var loss = loss_fn(g, params);
  const Tensor& v = g.value(loss);
  if (v.numel() != 1) throw Error("grad_check: loss_fn must return a scalar");
  return v.data[0];
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss_fn, std::vector<Tensor*> params,
                           double eps) {
  if (eps < 1e-7 || eps > 1e-3) throw Error("grad_check: eps out of [1e-7, 1e-3]");
  for (Tensor* p : params) {
    p->requires_grad = true;
    p->zero_grad();
    p->ensure_grad();
  }

  const double l1 = eval_loss(loss_fn, params);
  const double l2 = eval_loss(loss_fn, params);
  if (l1 != l2) throw Error("grad_check: loss_fn is not deterministic");

  // Reverse-mode gradients.
  {
    Graph g;
    Var loss = loss_fn(g, params);
    g.backward(loss);
  }

  GradCheckReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* p = params[pi];
    for (int i = 0; i < p->numel(); ++i) {
      const double keep = p->data[i];
      p->data[i] = keep + eps;
      const double lp = eval_loss(loss_fn, params);
      p->data[i] = keep - eps;
      const double lm = eval_loss(loss_fn, params);
      p->data[i] = keep;
      const double fd = (lp - lm) / (2.0 * eps);
      const double ad = p->grad[i];
      const double abs_err = std::abs(ad - fd);
      const double rel_err = abs_err / std::max(1e-8, std::abs(ad) + std::abs(fd));
      ++rep.n_elements;
      if (rel_err > rep.max_rel_error) {
        rep.max_rel_error = rel_err;
        rep.worst_param = static_cast<int>(pi);
        rep.worst_index = i;
      }
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
    }
  }
  return rep;
}

}  // namespace pcas
