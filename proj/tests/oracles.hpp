// Reference computations the tests compare against. Deliberately naive:
// each is written from the definition with no shared code paths.
#ifndef CONVCAST_TESTS_ORACLES_HPP
#define CONVCAST_TESTS_ORACLES_HPP

#include <cmath>
#include <limits>
#include <vector>

namespace oracle {

struct Sample {
  double p;
  int o;
};

inline double clamp05(double p) { return p < 0.05 ? 0.05 : (p > 0.95 ? 0.95 : p); }

/// Scaled probability straight from the transform, no numerics tricks.
inline double scaled(double p, double tau, double beta) {
  const double q = clamp05(p);
  const double z = std::log(q) - std::log(1.0 - q);
  return 1.0 / (1.0 + std::exp(-(z / tau - beta)));
}

inline double nll(const std::vector<Sample>& dev, double tau, double beta) {
  double total = 0.0;
  for (const auto& s : dev) {
    const double p = scaled(s.p, tau, beta);
    total -= s.o ? std::log(p) : std::log(1.0 - p);
  }
  return total;
}

struct GridMin {
  double tau, beta, nll;
};

/// Exhaustive search on an n x n lattice, log-spaced in tau.
inline GridMin dense_grid(const std::vector<Sample>& dev, int n = 201) {
  GridMin best{1.0, 0.0, std::numeric_limits<double>::infinity()};
  const double lo = std::log(0.05), hi = std::log(20.0);
  for (int i = 0; i < n; ++i) {
    const double tau = std::exp(lo + (hi - lo) * i / (n - 1));
    for (int j = 0; j < n; ++j) {
      const double beta = -10.0 + 20.0 * j / (n - 1);
      const double v = nll(dev, tau, beta);
      if (v < best.nll) best = {tau, beta, v};
    }
  }
  return best;
}

/// Central finite difference of nll along log tau and beta.
inline std::pair<double, double> finite_gradient(const std::vector<Sample>& dev, double tau, double beta,
                                                 double h = 1e-6) {
  const double u = std::log(tau);
  const double du = (nll(dev, std::exp(u + h), beta) - nll(dev, std::exp(u - h), beta)) / (2 * h);
  const double db = (nll(dev, tau, beta + h) - nll(dev, tau, beta - h)) / (2 * h);
  return {du, db};
}

struct Recount {
  double accuracy, f1, bias;
};

/// Metrics by literal counting over the pairs.
inline Recount recount(const std::vector<int>& preds, const std::vector<int>& labels) {
  int agree = 0, tp = 0, pred_pos = 0, label_pos = 0, diff = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    agree += preds[i] == labels[i];
    tp += preds[i] == 1 && labels[i] == 1;
    pred_pos += preds[i];
    label_pos += labels[i];
    diff += preds[i] - labels[i];
  }
  const double n = static_cast<double>(preds.size());
  Recount r{agree / n, 0.0, diff / n};
  if (pred_pos == 0 && label_pos == 0) {
    r.f1 = 1.0;
  } else if (pred_pos == 0 || label_pos == 0) {
    r.f1 = 0.0;
  } else {
    // harmonic mean of precision tp/pred_pos and recall tp/label_pos
    r.f1 = 2.0 * tp / static_cast<double>(pred_pos + label_pos);
  }
  return r;
}

}  // namespace oracle

#endif  // CONVCAST_TESTS_ORACLES_HPP
