#ifndef CONVCAST_SCALING_HPP
#define CONVCAST_SCALING_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "convcast/error.hpp"
#include "convcast/text.hpp"

namespace convcast {

/// Post-hoc forecast scaling in logit space:
///   z = logit(p), z' = z / tau - beta, p_new = sigmoid(z').
/// tau > 1 flattens forecasts toward one half, beta > 0 shifts them down.
struct ScalingParams {
  double tau = 1.0;
  double beta = 0.0;

  void validate() const {
    if (!std::isfinite(tau) || !std::isfinite(beta) || !(tau > 0.0))
      throw PreconditionError("scaling params need finite beta and finite tau > 0");
  }

  bool operator==(const ScalingParams&) const = default;
};

/// A forecast probability paired with the observed outcome.
struct ScoredOutcome {
  double p_hat = 0.5;
  int outcome = 0;
};

/// Likert 10 normalizes to 1.0 where the logit is infinite, so inputs are
/// clamped to [eps, 1 - eps] first. 0.05 keeps all ten levels distinct.
inline constexpr double kClampEpsilon = 0.05;

/// Search box and lattice for the fit.
inline constexpr double kTauMin = 0.05;
inline constexpr double kTauMax = 20.0;
inline constexpr double kBetaMin = -10.0;
inline constexpr double kBetaMax = 10.0;
inline constexpr int kGridPoints = 33;
inline constexpr double kStopStep = 1e-5;

struct FitReport {
  ScalingParams params;
  double nll = 0.0;
  std::size_t n_dev = 0;
  double clamp_epsilon = kClampEpsilon;
  double grid_nll = 0.0;     ///< best lattice value before refinement
  std::size_t sweeps = 0;    ///< refinement sweeps performed
};

namespace detail {

inline double clamp_probability(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline void check_probability(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw PreconditionError("forecast probability outside [0, 1]");
}

inline double scaled_logit(double p_hat, double inv_tau, double beta) {
  return logit(clamp_probability(p_hat, kClampEpsilon)) * inv_tau - beta;
}

/// Negative log-likelihood over pre-computed clamped logits.
inline double nll_from_logits(std::span<const double> z, std::span<const int> outcomes, double log_tau,
                              double beta) {
  const double inv_tau = std::exp(-log_tau);
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zt = z[i] * inv_tau - beta;
    // -ln sigmoid(zt) = softplus(-zt); -ln(1 - sigmoid(zt)) = softplus(zt)
    total += outcomes[i] ? softplus(-zt) : softplus(zt);
  }
  return total;
}

}  // namespace detail

inline double apply_scaling(double p_hat, const ScalingParams& params) {
  params.validate();
  detail::check_probability(p_hat);
  return detail::sigmoid(detail::scaled_logit(p_hat, 1.0 / params.tau, params.beta));
}

inline double nll(const ScalingParams& params, std::span<const ScoredOutcome> records) {
  params.validate();
  if (records.empty()) throw PreconditionError("nll needs at least one record");
  double total = 0.0;
  for (const auto& r : records) {
    detail::check_probability(r.p_hat);
    const double zt = detail::scaled_logit(r.p_hat, 1.0 / params.tau, params.beta);
    total += r.outcome ? detail::softplus(-zt) : detail::softplus(zt);
  }
  return total;
}

/// Analytic gradient of nll with respect to (log tau, beta).
struct NllGradient {
  double d_log_tau = 0.0;
  double d_beta = 0.0;
};

inline NllGradient nll_gradient(const ScalingParams& params, std::span<const ScoredOutcome> records) {
  params.validate();
  if (records.empty()) throw PreconditionError("nll needs at least one record");
  NllGradient g;
  const double inv_tau = 1.0 / params.tau;
  for (const auto& r : records) {
    detail::check_probability(r.p_hat);
    const double z = detail::logit(detail::clamp_probability(r.p_hat, kClampEpsilon));
    const double residual = detail::sigmoid(z * inv_tau - params.beta) - r.outcome;
    g.d_log_tau += residual * (-z * inv_tau);
    g.d_beta -= residual;
  }
  return g;
}

/// Maximum-likelihood (tau, beta) on a dev set.
///
/// The objective is searched over log tau in [ln 0.05, ln 20] and beta in
/// [-10, 10]: first a 33 x 33 lattice (ties go to the smallest beta, then
/// the smallest tau), then compass-style coordinate descent from the best
/// lattice point, halving both steps whenever no axis move improves, until
/// the steps drop below 1e-5. Everything is sequential and deterministic.
///
/// Throws PreconditionError when the dev set is empty or holds a single
/// outcome class; the unconstrained MLE runs off to the box edge there.
inline FitReport fit_scaling(std::span<const ScoredOutcome> dev) {
  if (dev.empty()) throw PreconditionError("fit_scaling needs a non-empty dev set");
  std::vector<double> z;
  std::vector<int> o;
  z.reserve(dev.size());
  o.reserve(dev.size());
  std::size_t positives = 0;
  for (const auto& r : dev) {
    detail::check_probability(r.p_hat);
    if (r.outcome != 0 && r.outcome != 1) throw PreconditionError("outcomes must be 0 or 1");
    z.push_back(detail::logit(detail::clamp_probability(r.p_hat, kClampEpsilon)));
    o.push_back(r.outcome);
    positives += static_cast<std::size_t>(r.outcome);
  }
  if (positives == 0 || positives == dev.size())
    throw PreconditionError(
        "dev set contains a single outcome class; the scaling MLE diverges. Use a stratified dev split.");

  const double u_lo = std::log(kTauMin), u_hi = std::log(kTauMax);
  const double u_step0 = (u_hi - u_lo) / (kGridPoints - 1);
  const double b_step0 = (kBetaMax - kBetaMin) / (kGridPoints - 1);
  auto f = [&](double u, double b) { return detail::nll_from_logits(z, o, u, b); };

  double best_u = u_lo, best_b = kBetaMin;
  double best = f(best_u, best_b);
  for (int j = 0; j < kGridPoints; ++j) {
    const double b = kBetaMin + j * b_step0;
    for (int i = 0; i < kGridPoints; ++i) {
      const double u = u_lo + i * u_step0;
      const double v = f(u, b);
      if (v < best) {
        best = v;
        best_u = u;
        best_b = b;
      }
    }
  }

  FitReport report;
  report.grid_nll = best;

  double du = u_step0, db = b_step0;
  std::size_t sweeps = 0;
  while (du >= kStopStep || db >= kStopStep) {
    ++sweeps;
    bool moved = false;
    for (int axis = 0; axis < 2; ++axis) {
      const double step = axis == 0 ? du : db;
      for (double sign : {+1.0, -1.0}) {
        double u = best_u, b = best_b;
        if (axis == 0) u = std::clamp(u + sign * step, u_lo, u_hi);
        else b = std::clamp(b + sign * step, kBetaMin, kBetaMax);
        if (u == best_u && b == best_b) continue;
        const double v = f(u, b);
        if (v < best) {
          best = v;
          best_u = u;
          best_b = b;
          moved = true;
          break;
        }
      }
    }
    if (!moved) {
      du *= 0.5;
      db *= 0.5;
    }
    if (sweeps > 1000000) break;
  }

  report.params = ScalingParams{std::exp(best_u), best_b};
  report.nll = best;
  report.n_dev = dev.size();
  report.sweeps = sweeps;
  return report;
}

// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const FitReport& r) {
  return {{"tau", r.params.tau},   {"beta", r.params.beta},           {"nll", r.nll},
          {"n_dev", r.n_dev},      {"clamp_epsilon", r.clamp_epsilon}, {"grid_nll", r.grid_nll},
          {"sweeps", r.sweeps}};
}

inline FitReport fit_report_from_json(const nlohmann::json& j) {
  try {
    FitReport r;
    r.params = {j.at("tau").get<double>(), j.at("beta").get<double>()};
    r.params.validate();
    r.nll = j.at("nll").get<double>();
    r.n_dev = j.at("n_dev").get<std::size_t>();
    r.clamp_epsilon = j.value("clamp_epsilon", kClampEpsilon);
    r.grid_nll = j.value("grid_nll", r.nll);
    r.sweeps = j.value("sweeps", std::size_t{0});
    if (r.clamp_epsilon != kClampEpsilon)
      throw PreconditionError("fit used clamp epsilon " + std::to_string(r.clamp_epsilon) +
                              ", this build applies " + std::to_string(kClampEpsilon));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed fit report: ") + e.what());
  }
}

inline void save_fit_report(const std::filesystem::path& path, const FitReport& r) {
  text::write_file_atomic(path, to_json(r).dump(2) + "\n");
}

inline FitReport load_fit_report(const std::filesystem::path& path) {
  try {
    return fit_report_from_json(nlohmann::json::parse(text::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("malformed fit report " + path.string() + ": " + e.what());
  }
}

}  // namespace convcast

#endif  // CONVCAST_SCALING_HPP
