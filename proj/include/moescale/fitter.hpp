#pragma once

// Robust fitting of the loss laws to observation sets.
//
// The objective is a Huber penalty (delta = 1e-3) on log-loss residuals:
// every law is a sum of positive power-law terms, so its log is evaluated
// as a numerically stable log-sum-exp whose terms are affine in the fit
// parameters (factors A, B, F, E carried as logs, exponents linear). That
// makes gradients exact softmax-weighted features and keeps all factors
// positive by construction.
//
// Minimization is BFGS from a deterministic multistart lattice
// (exponents {0, 0.1, 0.2, 0.4}, log-factors {-1, 0, 1, 2}, interaction
// exponents start at 0), capped at 256 starts by Latin-hypercube
// subsampling under the configured seed. Identical (data, config, seed)
// yields bit-identical reports; multistart points and leave-one-out folds
// are independent and merged in index order, so parallel and serial runs
// agree exactly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "moescale/fit/bfgs.hpp"
#include "moescale/laws.hpp"

namespace moescale {

enum class ObsKind { dense, moe_scratch, upcycled };

struct Observation {
  ObsKind kind = ObsKind::dense;
  double d1 = 0;  // dense training tokens (sunk cost for upcycled rows)
  double d2 = 0;  // upcycled training tokens, 0 unless kind == upcycled
  double n1 = 0;  // dense-equivalent non-embedding parameters
  std::optional<double> sparsity;
  std::optional<double> n2;
  double loss = 0;  // nats
};

enum class LawForm {
  chinchilla,
  upcycle_data_multiplicative,
  upcycle_data_additive,
  upcycle_data_multiplicative_no_interaction,
  upcycle_data_additive_no_interaction,
  config_multiplicative,
  config_additive,
  config_multiplicative_no_interaction,
  config_additive_no_interaction,
  joint_upcycle,
  rejected_joint,
  single_budget,
};

constexpr std::array<LawForm, 4> kDataLawFamily = {
    LawForm::upcycle_data_multiplicative,
    LawForm::upcycle_data_additive,
    LawForm::upcycle_data_multiplicative_no_interaction,
    LawForm::upcycle_data_additive_no_interaction,
};

constexpr std::array<LawForm, 4> kConfigLawFamily = {
    LawForm::config_multiplicative,
    LawForm::config_additive,
    LawForm::config_multiplicative_no_interaction,
    LawForm::config_additive_no_interaction,
};

struct MultistartGrid {
  std::vector<double> exponent_levels = {0.0, 0.1, 0.2, 0.4};
  std::vector<double> log_factor_levels = {-1.0, 0.0, 1.0, 2.0};
  int cap = 256;
};

struct FitConfig {
  double huber_delta = 1e-3;
  int max_iterations = 2000;
  double gradient_tolerance = 1e-8;
  MultistartGrid multistart_grid;
  std::uint64_t seed = 0;
  bool loo_log_residuals = false;  // measure LOO residuals in log-loss
  int threads = 1;                 // 0 = hardware concurrency
};

struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FitReport {
  LawForm form = LawForm::chinchilla;
  LawParams params;
  double objective = std::numeric_limits<double>::infinity();
  std::vector<double> residuals;  // observed - predicted, raw nats
  std::optional<double> loo_rms;
  int starts_tried = 0;
  bool converged = false;
  bool degenerate = false;  // some exponent ~ 0 or factor ~ 0
  std::optional<double> fixed_e;
};

struct ExponentTrend {
  double gamma = 0;
  double e_prime = 0;
  double fit_rms = 0;
};

struct FactorTrend {
  double eta = 0;
  double log_intercept = 0;
  double fit_rms = 0;
};

/// Huber penalty: quadratic within delta, linear outside, C1 everywhere.
inline double huber(double residual, double delta) {
  if (!(delta > 0)) throw std::domain_error("huber: delta must be positive");
  const double r = std::abs(residual);
  if (r <= delta) return 0.5 * residual * residual;
  return delta * (r - 0.5 * delta);
}

namespace detail {

enum class ParamRole { log_factor, exponent, interaction };

// One power-law term of a law, as an affine function of theta.
struct TermEntry {
  int index;
  double coeff;
};
struct Term {
  int n = 0;
  std::array<TermEntry, 4> entries{};
};
struct DesignRow {
  int n_terms = 0;
  std::array<Term, 3> terms{};
  double ln_loss = 0;
};

struct Design {
  int n_params = 0;
  std::vector<ParamRole> roles;
  std::vector<std::string> names;
  std::vector<DesignRow> rows;

  int index_of(const std::string& name) const {
    for (int i = 0; i < n_params; ++i)
      if (names[i] == name) return i;
    throw std::logic_error("Design: no parameter named " + name);
  }
};

inline double logsumexp(const Term* terms, int n_terms, const double* theta,
                        double* softmax = nullptr) {
  double t[3];
  double m = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_terms; ++i) {
    double v = 0;
    for (int k = 0; k < terms[i].n; ++k)
      v += terms[i].entries[k].coeff * theta[terms[i].entries[k].index];
    t[i] = v;
    m = std::max(m, v);
  }
  double sum = 0;
  for (int i = 0; i < n_terms; ++i) sum += std::exp(t[i] - m);
  if (softmax) {
    for (int i = 0; i < n_terms; ++i) softmax[i] = std::exp(t[i] - m) / sum;
  }
  return m + std::log(sum);
}

inline double objective_value(const Design& d, const double* theta, double delta,
                              double* grad = nullptr) {
  double total = 0;
  double softmax[3];
  for (const DesignRow& row : d.rows) {
    const double lse = logsumexp(row.terms.data(), row.n_terms, theta, grad ? softmax : nullptr);
    const double r = row.ln_loss - lse;
    double dpen;  // d huber / d r
    if (std::abs(r) <= delta) {
      total += 0.5 * r * r;
      dpen = r;
    } else {
      total += delta * (std::abs(r) - 0.5 * delta);
      dpen = r > 0 ? delta : -delta;
    }
    if (grad) {
      for (int i = 0; i < row.n_terms; ++i) {
        const Term& t = row.terms[i];
        for (int k = 0; k < t.n; ++k)
          grad[t.entries[k].index] -= dpen * softmax[i] * t.entries[k].coeff;
      }
    }
  }
  return total;
}

namespace layout {

// Parameter vectors per form; order fixes the multistart lattice and the
// natural-scale mapping below.
inline Design skeleton(LawForm form) {
  Design d;
  auto add = [&d](const char* name, ParamRole role) {
    d.names.emplace_back(name);
    d.roles.push_back(role);
  };
  using R = ParamRole;
  switch (form) {
    case LawForm::chinchilla:
      add("log_a", R::log_factor); add("alpha", R::exponent);
      add("log_b", R::log_factor); add("beta", R::exponent);
      break;
    case LawForm::upcycle_data_multiplicative:
      add("log_a", R::log_factor); add("alpha1", R::exponent);
      add("alpha2", R::exponent); add("alpha3", R::interaction);
      break;
    case LawForm::upcycle_data_multiplicative_no_interaction:
      add("log_a", R::log_factor); add("alpha1", R::exponent);
      add("alpha2", R::exponent);
      break;
    case LawForm::upcycle_data_additive:
      add("log_a", R::log_factor); add("alpha1", R::exponent);
      add("log_f", R::log_factor); add("alpha2", R::exponent);
      add("alpha3", R::interaction);
      break;
    case LawForm::upcycle_data_additive_no_interaction:
      add("log_a", R::log_factor); add("alpha1", R::exponent);
      add("log_f", R::log_factor); add("alpha2", R::exponent);
      break;
    case LawForm::config_multiplicative:
      add("log_a", R::log_factor); add("beta1", R::exponent);
      add("beta2", R::exponent); add("beta3", R::interaction);
      break;
    case LawForm::config_multiplicative_no_interaction:
      add("log_a", R::log_factor); add("beta1", R::exponent);
      add("beta2", R::exponent);
      break;
    case LawForm::config_additive:
      add("log_a", R::log_factor); add("beta1", R::exponent);
      add("log_f", R::log_factor); add("beta2", R::exponent);
      add("beta3", R::interaction);
      break;
    case LawForm::config_additive_no_interaction:
      add("log_a", R::log_factor); add("beta1", R::exponent);
      add("log_f", R::log_factor); add("beta2", R::exponent);
      break;
    case LawForm::joint_upcycle:
      add("log_a", R::log_factor); add("alpha1", R::exponent);
      add("alpha2", R::exponent); add("alpha3", R::interaction);
      add("log_b", R::log_factor); add("beta", R::exponent);
      break;
    case LawForm::rejected_joint:
      add("log_a", R::log_factor); add("alpha1", R::exponent);
      add("log_b", R::log_factor); add("alpha2", R::exponent);
      add("beta2", R::exponent); add("alpha3", R::interaction);
      break;
    case LawForm::single_budget:
      add("log_a", R::log_factor); add("alpha", R::exponent);
      break;
  }
  add("log_e", R::log_factor);
  d.n_params = static_cast<int>(d.names.size());
  return d;
}

}  // namespace layout

inline void require_positive(double v, const char* what, std::size_t obs_index) {
  if (!(v > 0))
    throw std::invalid_argument(std::string("fit: observation ") + std::to_string(obs_index) +
                                ": " + what + " must be positive");
}

inline DesignRow make_row(LawForm form, const Observation& obs, std::size_t obs_index,
                          const Design& d) {
  require_positive(obs.loss, "loss", obs_index);
  DesignRow row;
  row.ln_loss = std::log(obs.loss);
  auto term = [&row](std::initializer_list<TermEntry> entries) {
    Term t;
    for (const TermEntry& e : entries) t.entries[t.n++] = e;
    row.terms[row.n_terms++] = t;
  };
  const int log_e = d.n_params - 1;
  switch (form) {
    case LawForm::chinchilla: {
      if (!(obs.d1 >= 0))
        throw std::invalid_argument("fit: observation " + std::to_string(obs_index) +
                                    ": tokens must be >= 0");
      require_positive(obs.n1, "n1", obs_index);
      const double x = std::log1p(obs.d1), w = std::log(obs.n1);
      term({{0, 1.0}, {1, -x}});
      term({{2, 1.0}, {3, -w}});
      break;
    }
    case LawForm::upcycle_data_multiplicative: {
      require_positive(obs.d1, "d1", obs_index);
      const double u = std::log(obs.d1), v = std::log1p(obs.d2);
      term({{0, 1.0}, {1, -u}, {2, -v}, {3, u * v}});
      break;
    }
    case LawForm::upcycle_data_multiplicative_no_interaction: {
      require_positive(obs.d1, "d1", obs_index);
      const double u = std::log(obs.d1), v = std::log1p(obs.d2);
      term({{0, 1.0}, {1, -u}, {2, -v}});
      break;
    }
    case LawForm::upcycle_data_additive: {
      require_positive(obs.d1, "d1", obs_index);
      const double u = std::log(obs.d1), v = std::log1p(obs.d2);
      term({{0, 1.0}, {1, -u}});
      term({{2, 1.0}, {3, -v}, {4, u * v}});
      break;
    }
    case LawForm::upcycle_data_additive_no_interaction: {
      require_positive(obs.d1, "d1", obs_index);
      const double u = std::log(obs.d1), v = std::log1p(obs.d2);
      term({{0, 1.0}, {1, -u}});
      term({{2, 1.0}, {3, -v}});
      break;
    }
    case LawForm::config_multiplicative:
    case LawForm::config_multiplicative_no_interaction:
    case LawForm::config_additive:
    case LawForm::config_additive_no_interaction: {
      if (!obs.sparsity || !obs.n2)
        throw std::invalid_argument("fit: observation " + std::to_string(obs_index) +
                                    ": config-law fits need sparsity and n2");
      if (!(*obs.sparsity >= 1))
        throw std::invalid_argument("fit: observation " + std::to_string(obs_index) +
                                    ": sparsity must be >= 1");
      require_positive(*obs.n2, "n2", obs_index);
      const double s = std::log(*obs.sparsity), m = std::log(*obs.n2);
      if (form == LawForm::config_multiplicative)
        term({{0, 1.0}, {1, -s}, {2, -m}, {3, s * m}});
      else if (form == LawForm::config_multiplicative_no_interaction)
        term({{0, 1.0}, {1, -s}, {2, -m}});
      else if (form == LawForm::config_additive) {
        term({{0, 1.0}, {1, -s}});
        term({{2, 1.0}, {3, -m}, {4, s * m}});
      } else {
        term({{0, 1.0}, {1, -s}});
        term({{2, 1.0}, {3, -m}});
      }
      break;
    }
    case LawForm::joint_upcycle: {
      require_positive(obs.d1, "d1", obs_index);
      require_positive(obs.n1, "n1", obs_index);
      const double u = std::log(obs.d1), v = std::log1p(obs.d2), w = std::log(obs.n1);
      term({{0, 1.0}, {1, -u}, {2, -v}, {3, u * v}});
      term({{4, 1.0}, {5, -w}});
      break;
    }
    case LawForm::rejected_joint: {
      require_positive(obs.d1, "d1", obs_index);
      require_positive(obs.d2, "d2", obs_index);
      require_positive(obs.n1, "n1", obs_index);
      const double u = std::log(obs.d1), q = std::log(obs.d2), w = std::log(obs.n1);
      term({{0, 1.0}, {1, -u}});
      term({{2, 1.0}, {3, -q}, {4, -w}, {5, q * w}});
      break;
    }
    case LawForm::single_budget: {
      const double v = std::log1p(obs.d2);
      term({{0, 1.0}, {1, -v}});
      break;
    }
  }
  term({{log_e, 1.0}});
  return row;
}

inline Design build_design(LawForm form, std::span<const Observation> data) {
  Design d = layout::skeleton(form);
  d.rows.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) d.rows.push_back(make_row(form, data[i], i, d));
  return d;
}

// Natural-scale parameters <-> theta. The theta layout matches
// layout::skeleton; factors are exponentiated.
inline LawParams theta_to_params(LawForm form, const std::vector<double>& t) {
  auto x = [](double v) { return std::exp(v); };
  switch (form) {
    case LawForm::chinchilla:
      return ChinchillaParams{x(t[0]), x(t[2]), x(t[4]), t[1], t[3]};
    case LawForm::upcycle_data_multiplicative:
      return UpcycleDataParams{x(t[0]), x(t[4]), t[1], t[2], t[3], DataLawForm::multiplicative, 0};
    case LawForm::upcycle_data_multiplicative_no_interaction:
      return UpcycleDataParams{x(t[0]), x(t[3]), t[1], t[2], 0.0,
                               DataLawForm::multiplicative_no_interaction, 0};
    case LawForm::upcycle_data_additive:
      return UpcycleDataParams{x(t[0]), x(t[5]), t[1], t[3], t[4], DataLawForm::additive, x(t[2])};
    case LawForm::upcycle_data_additive_no_interaction:
      return UpcycleDataParams{x(t[0]), x(t[4]), t[1],
                               t[3],    0.0,     DataLawForm::additive_no_interaction,
                               x(t[2])};
    case LawForm::config_multiplicative:
      return ConfigLawParams{x(t[0]), 0, x(t[4]), t[1], t[2], t[3], ConfigLawForm::multiplicative};
    case LawForm::config_multiplicative_no_interaction:
      return ConfigLawParams{x(t[0]), 0,   x(t[3]),
                             t[1],    t[2], 0.0,
                             ConfigLawForm::multiplicative_no_interaction};
    case LawForm::config_additive:
      return ConfigLawParams{x(t[0]), x(t[2]), x(t[5]), t[1], t[3], t[4], ConfigLawForm::additive};
    case LawForm::config_additive_no_interaction:
      return ConfigLawParams{x(t[0]), x(t[2]), x(t[4]),
                             t[1],    t[3],    0.0,
                             ConfigLawForm::additive_no_interaction};
    case LawForm::joint_upcycle:
      return JointUpcycleParams{x(t[0]), x(t[4]), x(t[6]), t[1], t[2], t[3], t[5]};
    case LawForm::rejected_joint:
      return RejectedJointParams{x(t[0]), x(t[2]), x(t[6]), t[1], t[3], t[4], t[5]};
    case LawForm::single_budget:
      return SingleBudgetParams{x(t[0]), t[1], x(t[2])};
  }
  throw std::logic_error("theta_to_params: unknown form");
}

inline std::vector<double> params_to_theta(LawForm form, const LawParams& p) {
  auto lg = [](double v) { return std::log(v); };
  switch (form) {
    case LawForm::chinchilla: {
      const auto& c = std::get<ChinchillaParams>(p);
      return {lg(c.a), c.alpha, lg(c.b), c.beta, lg(c.e)};
    }
    case LawForm::upcycle_data_multiplicative: {
      const auto& c = std::get<UpcycleDataParams>(p);
      return {lg(c.a), c.alpha1, c.alpha2, c.alpha3, lg(c.e)};
    }
    case LawForm::upcycle_data_multiplicative_no_interaction: {
      const auto& c = std::get<UpcycleDataParams>(p);
      return {lg(c.a), c.alpha1, c.alpha2, lg(c.e)};
    }
    case LawForm::upcycle_data_additive: {
      const auto& c = std::get<UpcycleDataParams>(p);
      return {lg(c.a), c.alpha1, lg(c.f), c.alpha2, c.alpha3, lg(c.e)};
    }
    case LawForm::upcycle_data_additive_no_interaction: {
      const auto& c = std::get<UpcycleDataParams>(p);
      return {lg(c.a), c.alpha1, lg(c.f), c.alpha2, lg(c.e)};
    }
    case LawForm::config_multiplicative: {
      const auto& c = std::get<ConfigLawParams>(p);
      return {lg(c.a), c.beta1, c.beta2, c.beta3, lg(c.e)};
    }
    case LawForm::config_multiplicative_no_interaction: {
      const auto& c = std::get<ConfigLawParams>(p);
      return {lg(c.a), c.beta1, c.beta2, lg(c.e)};
    }
    case LawForm::config_additive: {
      const auto& c = std::get<ConfigLawParams>(p);
      return {lg(c.a), c.beta1, lg(c.f), c.beta2, c.beta3, lg(c.e)};
    }
    case LawForm::config_additive_no_interaction: {
      const auto& c = std::get<ConfigLawParams>(p);
      return {lg(c.a), c.beta1, lg(c.f), c.beta2, lg(c.e)};
    }
    case LawForm::joint_upcycle: {
      const auto& c = std::get<JointUpcycleParams>(p);
      return {lg(c.a), c.alpha1, c.alpha2, c.alpha3, lg(c.b), c.beta, lg(c.e)};
    }
    case LawForm::rejected_joint: {
      const auto& c = std::get<RejectedJointParams>(p);
      return {lg(c.a), c.alpha1, lg(c.b), c.alpha2, c.beta2, c.alpha3, lg(c.e)};
    }
    case LawForm::single_budget: {
      const auto& c = std::get<SingleBudgetParams>(p);
      return {lg(c.a), c.alpha, lg(c.e)};
    }
  }
  throw std::logic_error("params_to_theta: unknown form");
}

inline double predict_observation(LawForm form, const LawParams& p, const Observation& obs) {
  switch (form) {
    case LawForm::chinchilla:
      return predict_chinchilla(std::get<ChinchillaParams>(p), obs.d1, obs.n1);
    case LawForm::upcycle_data_multiplicative:
    case LawForm::upcycle_data_additive:
    case LawForm::upcycle_data_multiplicative_no_interaction:
    case LawForm::upcycle_data_additive_no_interaction:
      return predict_upcycle_data(std::get<UpcycleDataParams>(p), obs.d1, obs.d2);
    case LawForm::config_multiplicative:
    case LawForm::config_additive:
    case LawForm::config_multiplicative_no_interaction:
    case LawForm::config_additive_no_interaction:
      return predict_config_law(std::get<ConfigLawParams>(p), obs.sparsity.value(),
                                obs.n2.value());
    case LawForm::joint_upcycle:
      return predict_joint(std::get<JointUpcycleParams>(p), obs.d1, obs.d2, obs.n1);
    case LawForm::rejected_joint:
      return predict_rejected_joint(std::get<RejectedJointParams>(p), obs.d1, obs.d2, obs.n1);
    case LawForm::single_budget: {
      const auto& c = std::get<SingleBudgetParams>(p);
      return predict_single_budget(c, obs.d2);
    }
  }
  throw std::logic_error("predict_observation: unknown form");
}

// Multistart lattice over the free coordinates. Full Cartesian product when
// it fits the cap, otherwise a Latin-hypercube subsample: each dimension's
// level sequence is stratified over the cap and permuted by a Fisher-Yates
// shuffle driven by the seed, keeping the draw identical across platforms.
inline std::vector<std::vector<double>> enumerate_starts(const Design& d,
                                                         const std::vector<int>& free_idx,
                                                         const MultistartGrid& grid,
                                                         std::uint64_t seed) {
  std::vector<const std::vector<double>*> levels;
  static const std::vector<double> kInteractionStart = {0.0};
  for (int idx : free_idx) {
    switch (d.roles[idx]) {
      case ParamRole::log_factor: levels.push_back(&grid.log_factor_levels); break;
      case ParamRole::exponent: levels.push_back(&grid.exponent_levels); break;
      case ParamRole::interaction: levels.push_back(&kInteractionStart); break;
    }
  }
  const std::size_t dims = levels.size();
  double total = 1;
  for (const auto* l : levels) total *= static_cast<double>(l->size());

  std::vector<std::vector<double>> starts;
  if (total <= grid.cap) {
    const std::size_t count = static_cast<std::size_t>(total);
    std::vector<std::size_t> counter(dims, 0);
    for (std::size_t c = 0; c < count; ++c) {
      std::vector<double> s(dims);
      for (std::size_t k = 0; k < dims; ++k) s[k] = (*levels[k])[counter[k]];
      starts.push_back(std::move(s));
      for (std::size_t k = dims; k-- > 0;) {
        if (++counter[k] < levels[k]->size()) break;
        counter[k] = 0;
      }
    }
    return starts;
  }

  const std::size_t cap = static_cast<std::size_t>(grid.cap);
  std::uint64_t state = seed ^ 0x9e3779b97f4a7c15ULL;
  auto next = [&state]() {  // splitmix64
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::vector<std::vector<double>> columns(dims);
  for (std::size_t k = 0; k < dims; ++k) {
    const auto& lv = *levels[k];
    std::vector<double>& col = columns[k];
    col.resize(cap);
    for (std::size_t i = 0; i < cap; ++i) col[i] = lv[(i * lv.size()) / cap];
    for (std::size_t i = cap; i-- > 1;) std::swap(col[i], col[next() % (i + 1)]);
  }
  starts.resize(cap, std::vector<double>(dims));
  for (std::size_t i = 0; i < cap; ++i)
    for (std::size_t k = 0; k < dims; ++k) starts[i][k] = columns[k][i];
  return starts;
}

struct StartOutcome {
  std::vector<double> theta;  // full-dimension vector
  double objective = std::numeric_limits<double>::infinity();
  bool converged = false;
};

// Minimize the design objective over the free coordinates, holding the rest
// of `base` fixed.
inline StartOutcome run_start(const Design& d, const std::vector<int>& free_idx,
                              std::vector<double> base, const std::vector<double>& start,
                              const FitConfig& cfg) {
  const std::size_t nfree = free_idx.size();
  std::vector<double> full = std::move(base);
  std::vector<double> full_grad(d.n_params);
  opt::ObjectiveFn fg = [&](const std::vector<double>& x, std::vector<double>& grad) {
    for (std::size_t k = 0; k < nfree; ++k) full[free_idx[k]] = x[k];
    std::fill(full_grad.begin(), full_grad.end(), 0.0);
    const double f = objective_value(d, full.data(), cfg.huber_delta, full_grad.data());
    for (std::size_t k = 0; k < nfree; ++k) grad[k] = full_grad[free_idx[k]];
    return f;
  };
  opt::MinimizeOptions mopt;
  mopt.max_iterations = cfg.max_iterations;
  mopt.gradient_tolerance = cfg.gradient_tolerance;
  opt::MinimizeResult res = opt::minimize_bfgs(fg, start, mopt);

  StartOutcome out;
  for (std::size_t k = 0; k < nfree; ++k) full[free_idx[k]] = res.x[k];
  out.theta = full;
  out.objective = res.f;
  out.converged = res.converged;
  return out;
}

inline StartOutcome best_of_starts(const Design& d, const std::vector<int>& free_idx,
                                   const std::vector<double>& base,
                                   const std::vector<std::vector<double>>& starts,
                                   const FitConfig& cfg) {
  std::vector<StartOutcome> results(starts.size());
  unsigned n_threads = cfg.threads == 0 ? std::max(1u, std::thread::hardware_concurrency())
                                        : static_cast<unsigned>(cfg.threads);
  n_threads = std::min<unsigned>(n_threads, starts.size());
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < starts.size(); ++i)
      results[i] = run_start(d, free_idx, base, starts[i], cfg);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) {
      pool.emplace_back([&, t]() {
        for (std::size_t i = t; i < starts.size(); i += n_threads)
          results[i] = run_start(d, free_idx, base, starts[i], cfg);
      });
    }
    for (auto& th : pool) th.join();
  }
  // Index-ordered reduction keeps parallel and serial picks identical.
  std::size_t best = starts.size();
  for (std::size_t i = 0; i < starts.size(); ++i) {
    if (!std::isfinite(results[i].objective)) continue;
    if (best == starts.size() || results[i].objective < results[best].objective) best = i;
  }
  if (best == starts.size())
    throw FitError("fit: no start reached a finite objective (" +
                   std::to_string(starts.size()) + " tried)");
  return results[best];
}

inline bool is_degenerate(const Design& d, const std::vector<double>& theta) {
  for (int i = 0; i < d.n_params; ++i) {
    if (d.roles[i] == ParamRole::log_factor) {
      if (theta[i] < std::log(1e-9)) return true;
    } else if (std::abs(theta[i]) < 1e-6) {
      return true;
    }
  }
  return false;
}

}  // namespace detail

/// Summed Huber penalty of the log-loss residuals at `theta` (log factors,
/// linear exponents; layout per detail::layout::skeleton).
inline double objective(std::span<const double> theta, std::span<const Observation> data,
                        LawForm form, double huber_delta = 1e-3) {
  detail::Design d = detail::build_design(form, data);
  if (static_cast<int>(theta.size()) != d.n_params)
    throw std::invalid_argument("objective: theta has wrong dimension");
  return detail::objective_value(d, theta.data(), huber_delta);
}

inline FitReport fit(std::span<const Observation> data, LawForm form, const FitConfig& cfg,
                         std::optional<double> fixed_e = std::nullopt) {
  detail::Design d = detail::build_design(form, data);

  std::vector<double> base(d.n_params, 0.0);
  std::vector<int> free_idx;
  for (int i = 0; i < d.n_params; ++i) free_idx.push_back(i);
  if (fixed_e) {
    if (!(*fixed_e > 0)) throw std::invalid_argument("fit: fixed E must be positive");
    base[d.n_params - 1] = std::log(*fixed_e);
    free_idx.pop_back();  // log_e is the last coordinate
  }
  if (data.size() < free_idx.size())
    throw std::invalid_argument("fit: " + std::to_string(data.size()) +
                                " observations cannot determine " +
                                std::to_string(free_idx.size()) + " free parameters");

  const auto starts = detail::enumerate_starts(d, free_idx, cfg.multistart_grid, cfg.seed);
  detail::StartOutcome best = detail::best_of_starts(d, free_idx, base, starts, cfg);

  FitReport report;
  report.form = form;
  report.params = detail::theta_to_params(form, best.theta);
  report.objective = best.objective;
  report.starts_tried = static_cast<int>(starts.size());
  report.converged = best.converged;
  report.degenerate = detail::is_degenerate(d, best.theta);
  report.fixed_e = fixed_e;
  report.residuals.reserve(data.size());
  for (const Observation& obs : data)
    report.residuals.push_back(obs.loss - detail::predict_observation(form, report.params, obs));
  return report;
}

/// Leave-one-out RMS of held-out residuals (raw nats unless
/// cfg.loo_log_residuals). Folds refit from the full-data optimum; a fold
/// that fails even after a multistart retry aborts with its index.
inline double loo_rms(std::span<const Observation> data, LawForm form, const FitConfig& cfg,
                      std::optional<double> fixed_e = std::nullopt) {
  detail::Design probe = detail::layout::skeleton(form);
  const std::size_t n_free = static_cast<std::size_t>(probe.n_params) - (fixed_e ? 1 : 0);
  if (data.size() < n_free + 1)
    throw std::invalid_argument("loo_rms: need at least " + std::to_string(n_free + 1) +
                                " observations");

  const FitReport full = fit(data, form, cfg, fixed_e);
  const std::vector<double> warm_full = detail::params_to_theta(form, full.params);

  std::vector<int> free_idx;
  for (std::size_t i = 0; i < static_cast<std::size_t>(probe.n_params); ++i)
    if (!(fixed_e && i + 1 == static_cast<std::size_t>(probe.n_params)))
      free_idx.push_back(static_cast<int>(i));
  std::vector<double> warm_free;
  for (int idx : free_idx) warm_free.push_back(warm_full[idx]);

  double sum_sq = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<Observation> foldset;
    foldset.reserve(data.size() - 1);
    for (std::size_t j = 0; j < data.size(); ++j)
      if (j != i) foldset.push_back(data[j]);

    detail::Design fold = detail::build_design(form, foldset);
    detail::StartOutcome out = detail::run_start(fold, free_idx, warm_full, warm_free, cfg);
    if (!std::isfinite(out.objective)) {
      try {
        const FitReport retry = fit(foldset, form, cfg, fixed_e);
        out.theta = detail::params_to_theta(form, retry.params);
        out.objective = retry.objective;
      } catch (const std::exception&) {
        throw FitError("loo_rms: fold " + std::to_string(i) + " failed to fit");
      }
    }
    const LawParams p = detail::theta_to_params(form, out.theta);
    const double pred = detail::predict_observation(form, p, data[i]);
    const double err =
        cfg.loo_log_residuals ? std::log(data[i].loss) - std::log(pred) : data[i].loss - pred;
    sum_sq += err * err;
  }
  return std::sqrt(sum_sq / static_cast<double>(data.size()));
}

struct FormComparison {
  std::vector<std::pair<LawForm, double>> loo_by_form;
  LawForm best = LawForm::chinchilla;
};

inline FormComparison compare_forms(std::span<const Observation> data,
                                    std::span<const LawForm> forms, const FitConfig& cfg,
                                    std::optional<double> fixed_e = std::nullopt) {
  if (forms.empty()) throw std::invalid_argument("compare_forms: no forms requested");
  FormComparison cmp;
  for (LawForm f : forms) cmp.loo_by_form.emplace_back(f, loo_rms(data, f, cfg, fixed_e));
  cmp.best = cmp.loo_by_form.front().first;
  double best_rms = cmp.loo_by_form.front().second;
  for (const auto& [f, rms] : cmp.loo_by_form) {
    if (rms < best_rms) {
      best_rms = rms;
      cmp.best = f;
    }
  }
  return cmp;
}

/// Stage 1 fits dense + MoE two-term laws with one shared E (a single
/// objective over both sets); stage 2 fits the upcycled joint law with E
/// frozen at the stage-1 estimate. All three reports carry the same E.
inline std::array<FitReport, 3> fit_two_stage(std::span<const Observation> dense_obs,
                                              std::span<const Observation> moe_obs,
                                              std::span<const Observation> upcycled_obs,
                                              const FitConfig& cfg) {
  if (dense_obs.empty() || moe_obs.empty() || upcycled_obs.empty())
    throw std::invalid_argument("fit_two_stage: all three observation sets must be non-empty");

  // Stacked design: [dense A, alpha, B, beta | moe A, alpha, B, beta | shared log E].
  detail::Design stacked;
  stacked.names = {"log_a_dense", "alpha_dense", "log_b_dense", "beta_dense", "log_a_moe",
                   "alpha_moe",   "log_b_moe",   "beta_moe",    "log_e"};
  using R = detail::ParamRole;
  stacked.roles = {R::log_factor, R::exponent, R::log_factor, R::exponent, R::log_factor,
                   R::exponent,   R::log_factor, R::exponent, R::log_factor};
  stacked.n_params = 9;

  detail::Design single = detail::layout::skeleton(LawForm::chinchilla);
  auto append_rows = [&](std::span<const Observation> obs, int offset) {
    for (std::size_t i = 0; i < obs.size(); ++i) {
      detail::DesignRow row = detail::make_row(LawForm::chinchilla, obs[i], i, single);
      for (int t = 0; t < row.n_terms; ++t) {
        for (int k = 0; k < row.terms[t].n; ++k) {
          int& idx = row.terms[t].entries[k].index;
          idx = (idx == single.n_params - 1) ? stacked.n_params - 1 : idx + offset;
        }
      }
      stacked.rows.push_back(row);
    }
  };
  append_rows(dense_obs, 0);
  append_rows(moe_obs, 4);

  std::vector<int> free_idx;
  for (int i = 0; i < stacked.n_params; ++i) free_idx.push_back(i);
  if (dense_obs.size() + moe_obs.size() < free_idx.size())
    throw std::invalid_argument("fit_two_stage: insufficient stage-1 data");
  std::vector<double> base(stacked.n_params, 0.0);
  const auto starts = detail::enumerate_starts(stacked, free_idx, cfg.multistart_grid, cfg.seed);
  detail::StartOutcome best;
  try {
    best = detail::best_of_starts(stacked, free_idx, base, starts, cfg);
  } catch (const FitError& err) {
    throw FitError(std::string("fit_two_stage: stage 1 failed: ") + err.what());
  }

  const double shared_e = std::exp(best.theta[8]);
  auto chinchilla_report = [&](std::span<const Observation> obs, int offset) {
    FitReport r;
    r.form = LawForm::chinchilla;
    r.params = ChinchillaParams{std::exp(best.theta[offset]), std::exp(best.theta[offset + 2]),
                                shared_e, best.theta[offset + 1], best.theta[offset + 3]};
    r.starts_tried = static_cast<int>(starts.size());
    r.converged = best.converged;
    r.fixed_e = shared_e;
    std::vector<double> theta = detail::params_to_theta(LawForm::chinchilla, r.params);
    detail::Design own = detail::build_design(LawForm::chinchilla, obs);
    r.objective = detail::objective_value(own, theta.data(), cfg.huber_delta);
    r.degenerate = detail::is_degenerate(own, theta);
    for (const Observation& o : obs)
      r.residuals.push_back(o.loss - detail::predict_observation(LawForm::chinchilla, r.params, o));
    return r;
  };
  FitReport dense_report = chinchilla_report(dense_obs, 0);
  FitReport moe_report = chinchilla_report(moe_obs, 4);

  FitReport upcycled_report;
  try {
    upcycled_report = fit(upcycled_obs, LawForm::joint_upcycle, cfg, shared_e);
  } catch (const FitError& err) {
    throw FitError(std::string("fit_two_stage: stage 2 failed: ") + err.what());
  }
  return {std::move(dense_report), std::move(moe_report), std::move(upcycled_report)};
}

/// Fit L(D2) = A*(1+D2)^-alpha + E to (D2, loss) points.
inline FitReport fit_single_budget(std::span<const std::pair<double, double>> points,
                                   const FitConfig& cfg) {
  if (points.size() < 4)
    throw std::invalid_argument("fit_single_budget: need at least 4 points");
  std::vector<Observation> obs;
  obs.reserve(points.size());
  for (const auto& [d2, loss] : points) {
    Observation o;
    o.kind = ObsKind::upcycled;
    o.d1 = 1;  // unused by the single-budget design
    o.d2 = d2;
    o.loss = loss;
    obs.push_back(o);
  }
  return fit(obs, LawForm::single_budget, cfg);
}

/// OLS of -alpha against ln D1: -alpha = gamma*ln(D1) + E'.
inline ExponentTrend fit_exponent_trend(std::span<const std::pair<double, double>> samples) {
  if (samples.size() < 2)
    throw std::invalid_argument("fit_exponent_trend: need at least 2 samples");
  double sx = 0, sy = 0;
  for (const auto& [d1, alpha] : samples) {
    if (!(d1 > 0)) throw std::invalid_argument("fit_exponent_trend: D1 must be positive");
    sx += std::log(d1);
    sy += -alpha;
  }
  const double n = static_cast<double>(samples.size());
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0;
  for (const auto& [d1, alpha] : samples) {
    const double dx = std::log(d1) - mx;
    sxx += dx * dx;
    sxy += dx * (-alpha - my);
  }
  if (sxx == 0) throw std::invalid_argument("fit_exponent_trend: all D1 values are equal");
  ExponentTrend t;
  t.gamma = sxy / sxx;
  t.e_prime = my - t.gamma * mx;
  double ss = 0;
  for (const auto& [d1, alpha] : samples) {
    const double r = -alpha - (t.gamma * std::log(d1) + t.e_prime);
    ss += r * r;
  }
  t.fit_rms = std::sqrt(ss / n);
  return t;
}

/// OLS of ln A against ln D1; the slope is -eta.
inline FactorTrend fit_factor_trend(std::span<const std::pair<double, double>> samples) {
  if (samples.size() < 2)
    throw std::invalid_argument("fit_factor_trend: need at least 2 samples");
  double sx = 0, sy = 0;
  for (const auto& [d1, a] : samples) {
    if (!(d1 > 0)) throw std::invalid_argument("fit_factor_trend: D1 must be positive");
    if (!(a > 0)) throw std::invalid_argument("fit_factor_trend: A must be positive");
    sx += std::log(d1);
    sy += std::log(a);
  }
  const double n = static_cast<double>(samples.size());
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0;
  for (const auto& [d1, a] : samples) {
    const double dx = std::log(d1) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(a) - my);
  }
  if (sxx == 0) throw std::invalid_argument("fit_factor_trend: all D1 values are equal");
  FactorTrend t;
  const double slope = sxy / sxx;
  t.eta = -slope;
  t.log_intercept = my - slope * mx;
  double ss = 0;
  for (const auto& [d1, a] : samples) {
    const double r = std::log(a) - (slope * std::log(d1) + t.log_intercept);
    ss += r * r;
  }
  t.fit_rms = std::sqrt(ss / n);
  return t;
}

}  // namespace moescale
