#pragma once

// Loss-law evaluation for dense training, MoE training and dense-to-MoE
// upcycling. All laws are sums of power-law terms above an irreducible
// floor E; losses are in nats, logarithms are natural.
//
// Token variables that can legitimately be zero (the training tokens D of
// the two-term law, the upcycled tokens D2) enter through (1 + x) so the
// value stays finite at x = 0; strictly positive variables (D1, N, N1, N2,
// sparsity P) use plain powers.

#include <cmath>
#include <stdexcept>
#include <variant>

namespace moescale {

enum class DataLawForm {
  multiplicative,
  additive,
  multiplicative_no_interaction,
  additive_no_interaction,
};

enum class ConfigLawForm {
  multiplicative,
  additive,
  multiplicative_no_interaction,
  additive_no_interaction,
};

constexpr bool has_interaction(DataLawForm f) {
  return f == DataLawForm::multiplicative || f == DataLawForm::additive;
}
constexpr bool is_additive(DataLawForm f) {
  return f == DataLawForm::additive || f == DataLawForm::additive_no_interaction;
}
constexpr bool has_interaction(ConfigLawForm f) {
  return f == ConfigLawForm::multiplicative || f == ConfigLawForm::additive;
}
constexpr bool is_additive(ConfigLawForm f) {
  return f == ConfigLawForm::additive || f == ConfigLawForm::additive_no_interaction;
}

// L(D, N) = A*(1+D)^-alpha + B*N^-beta + E
struct ChinchillaParams {
  double a = 0, b = 0, e = 0;
  double alpha = 0, beta = 0;
};

// L(D1, D2): multiplicative  A*D1^-a1*(1+D2)^(-a2+a3*ln D1) + E
//            additive        A*D1^-a1 + F*(1+D2)^(-a2+a3*ln D1) + E
// The *_no_interaction forms pin alpha3 = 0.
struct UpcycleDataParams {
  double a = 0, e = 0;
  double alpha1 = 0, alpha2 = 0, alpha3 = 0;
  DataLawForm form = DataLawForm::multiplicative;
  double f = 0;  // additive forms only
};

// L(P, N2): multiplicative  A*P^-b1*N2^(-b2+b3*ln P) + E
//           additive        A*P^-b1 + F*N2^(-b2+b3*ln P) + E
struct ConfigLawParams {
  double a = 0, f = 0, e = 0;
  double beta1 = 0, beta2 = 0, beta3 = 0;
  ConfigLawForm form = ConfigLawForm::additive_no_interaction;
};

// L(D1, D2, N1) = A*D1^-a1*(1+D2)^(-a2+a3*ln D1) + B*N1^-beta + E
struct JointUpcycleParams {
  double a = 0, b = 0, e = 0;
  double alpha1 = 0, alpha2 = 0, alpha3 = 0;
  double beta = 0;
};

// L(D1, D2, N1) = A*D1^-a1 + B*D2^-a2*N1^(-b2+a3*ln D2) + E
// Kept only to demonstrate why this candidate is discarded: its fitted
// exponents come out negative, so the loss rises with size.
struct RejectedJointParams {
  double a = 0, b = 0, e = 0;
  double alpha1 = 0, alpha2 = 0, beta2 = 0, alpha3 = 0;
};

// Single-budget slice L(D2) = A*(1+D2)^-alpha + E
struct SingleBudgetParams {
  double a = 0, alpha = 0, e = 0;
};

using LawParams = std::variant<ChinchillaParams, UpcycleDataParams, ConfigLawParams,
                               JointUpcycleParams, RejectedJointParams, SingleBudgetParams>;

inline void validate(const ChinchillaParams& p) {
  if (!(p.a > 0 && p.b > 0 && p.e > 0))
    throw std::domain_error("ChinchillaParams: A, B, E must be positive");
}

inline void validate(const UpcycleDataParams& p) {
  if (!(p.a > 0 && p.e > 0))
    throw std::domain_error("UpcycleDataParams: A, E must be positive");
  if (is_additive(p.form) && !(p.f > 0))
    throw std::domain_error("UpcycleDataParams: F must be positive for additive forms");
  if (!has_interaction(p.form) && p.alpha3 != 0.0)
    throw std::domain_error("UpcycleDataParams: alpha3 must be 0 without interaction");
}

inline void validate(const ConfigLawParams& p) {
  if (!(p.a > 0 && p.e > 0))
    throw std::domain_error("ConfigLawParams: A, E must be positive");
  if (is_additive(p.form) && !(p.f > 0))
    throw std::domain_error("ConfigLawParams: F must be positive for additive forms");
  if (!has_interaction(p.form) && p.beta3 != 0.0)
    throw std::domain_error("ConfigLawParams: beta3 must be 0 without interaction");
}

inline void validate(const JointUpcycleParams& p) {
  if (!(p.a > 0 && p.b > 0 && p.e > 0))
    throw std::domain_error("JointUpcycleParams: A, B, E must be positive");
}

inline void validate(const RejectedJointParams& p) {
  if (!(p.a > 0 && p.b > 0 && p.e > 0))
    throw std::domain_error("RejectedJointParams: A, B, E must be positive");
}

inline void validate(const SingleBudgetParams& p) {
  if (!(p.a > 0 && p.e > 0))
    throw std::domain_error("SingleBudgetParams: A, E must be positive");
}

inline double predict_chinchilla(const ChinchillaParams& p, double d, double n) {
  validate(p);
  if (!(d >= 0)) throw std::domain_error("predict_chinchilla: D must be >= 0");
  if (!(n > 0)) throw std::domain_error("predict_chinchilla: N must be positive");
  return p.a * std::pow(1.0 + d, -p.alpha) + p.b * std::pow(n, -p.beta) + p.e;
}

inline double predict_upcycle_data(const UpcycleDataParams& p, double d1, double d2) {
  validate(p);
  if (!(d1 > 0)) throw std::domain_error("predict_upcycle_data: D1 must be positive");
  if (!(d2 >= 0)) throw std::domain_error("predict_upcycle_data: D2 must be >= 0");
  const double d2_exponent = -p.alpha2 + p.alpha3 * std::log(d1);
  const double d2_term = std::pow(1.0 + d2, d2_exponent);
  if (is_additive(p.form))
    return p.a * std::pow(d1, -p.alpha1) + p.f * d2_term + p.e;
  return p.a * std::pow(d1, -p.alpha1) * d2_term + p.e;
}

inline double predict_config_law(const ConfigLawParams& p, double sparsity_p, double n2) {
  validate(p);
  if (!(sparsity_p >= 1))
    throw std::domain_error("predict_config_law: sparsity P must be >= 1");
  if (!(n2 > 0)) throw std::domain_error("predict_config_law: N2 must be positive");
  const double n2_exponent = -p.beta2 + p.beta3 * std::log(sparsity_p);
  const double n2_term = std::pow(n2, n2_exponent);
  if (is_additive(p.form))
    return p.a * std::pow(sparsity_p, -p.beta1) + p.f * n2_term + p.e;
  return p.a * std::pow(sparsity_p, -p.beta1) * n2_term + p.e;
}

inline double predict_joint(const JointUpcycleParams& p, double d1, double d2, double n1) {
  validate(p);
  if (!(d1 > 0)) throw std::domain_error("predict_joint: D1 must be positive");
  if (!(d2 >= 0)) throw std::domain_error("predict_joint: D2 must be >= 0");
  if (!(n1 > 0)) throw std::domain_error("predict_joint: N1 must be positive");
  const double d2_exponent = -p.alpha2 + p.alpha3 * std::log(d1);
  return p.a * std::pow(d1, -p.alpha1) * std::pow(1.0 + d2, d2_exponent) +
         p.b * std::pow(n1, -p.beta) + p.e;
}

inline double predict_rejected_joint(const RejectedJointParams& p, double d1, double d2,
                                     double n1) {
  validate(p);
  if (!(d1 > 0)) throw std::domain_error("predict_rejected_joint: D1 must be positive");
  if (!(d2 > 0)) throw std::domain_error("predict_rejected_joint: D2 must be positive");
  if (!(n1 > 0)) throw std::domain_error("predict_rejected_joint: N1 must be positive");
  const double n1_exponent = -p.beta2 + p.alpha3 * std::log(d2);
  return p.a * std::pow(d1, -p.alpha1) +
         p.b * std::pow(d2, -p.alpha2) * std::pow(n1, n1_exponent) + p.e;
}

inline double predict_single_budget(const SingleBudgetParams& p, double d2) {
  validate(p);
  if (!(d2 >= 0)) throw std::domain_error("predict_single_budget: D2 must be >= 0");
  return p.a * std::pow(1.0 + d2, -p.alpha) + p.e;
}

/// Realized D2 scaling rate at sunk cost D1: alpha2 - alpha3*ln(D1).
inline double effective_exponent(double alpha2, double alpha3, double d1) {
  if (!(d1 > 0)) throw std::domain_error("effective_exponent: D1 must be positive");
  return alpha2 - alpha3 * std::log(d1);
}
inline double effective_exponent(const JointUpcycleParams& p, double d1) {
  return effective_exponent(p.alpha2, p.alpha3, d1);
}
inline double effective_exponent(const UpcycleDataParams& p, double d1) {
  return effective_exponent(p.alpha2, p.alpha3, d1);
}

/// Realized D2 scaling factor at sunk cost D1: A*D1^-alpha1.
inline double effective_factor(double a, double alpha1, double d1) {
  if (!(d1 > 0)) throw std::domain_error("effective_factor: D1 must be positive");
  return a * std::pow(d1, -alpha1);
}
inline double effective_factor(const JointUpcycleParams& p, double d1) {
  return effective_factor(p.a, p.alpha1, d1);
}
inline double effective_factor(const UpcycleDataParams& p, double d1) {
  return effective_factor(p.a, p.alpha1, d1);
}

}  // namespace moescale
