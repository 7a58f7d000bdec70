#pragma once

// Exact parameter counting for dense and mixture-of-experts transformer
// shapes, plus the 6*N*D FLOPs estimate.
//
// Counts cover non-embedding parameters only: per layer the attention block
// contributes 4*d_model^2, each SwiGLU MLP 3*d_model*d_mlp (= 12*d_model^2
// at the default d_mlp = 4*d_model), and pre-norm weights add
// (2*n_layer + 1)*d_model across the stack. MoE shapes add a router of
// n_layer*d_model*n_expert parameters which executes for every token and is
// therefore part of both the total and the active count.

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moescale {

struct ModelShape {
  std::int64_t n_layer = 0;
  std::int64_t d_model = 0;
  std::int64_t d_mlp = 0;   // 0 in the constructor means "use 4*d_model"
  std::int64_t n_head = 1;  // recorded only; does not affect counts

  ModelShape() = default;
  ModelShape(std::int64_t layers, std::int64_t dmodel, std::int64_t heads = 1,
             std::int64_t dmlp = 0)
      : n_layer(layers),
        d_model(dmodel),
        d_mlp(dmlp != 0 ? dmlp : 4 * dmodel),
        n_head(heads) {
    if (n_layer < 1 || d_model < 1 || d_mlp < 1 || n_head < 1)
      throw std::domain_error("ModelShape: all dimensions must be >= 1");
  }
};

struct MoEShape {
  ModelShape base;
  std::int64_t n_expert = 1;
  std::int64_t n_topk = 1;

  MoEShape() = default;
  MoEShape(ModelShape b, std::int64_t experts, std::int64_t topk)
      : base(b), n_expert(experts), n_topk(topk) {
    if (n_topk < 1 || n_expert < n_topk)
      throw std::domain_error("MoEShape: requires 1 <= n_topk <= n_expert");
  }
};

struct ParamCensus {
  std::int64_t n1_dense = 0;   // dense-equivalent non-embedding parameters
  std::int64_t n2_active = 0;  // parameters executed per token
  std::int64_t n_total = 0;    // all non-embedding parameters
  double sparsity = 1.0;       // n_total / n2_active
};

namespace detail {

inline std::int64_t checked_i64(unsigned __int128 v, const char* what) {
  if (v > static_cast<unsigned __int128>(INT64_MAX))
    throw std::overflow_error(std::string(what) + ": count exceeds 64-bit range");
  return static_cast<std::int64_t>(v);
}

// n_layer*(4*d^2 + 3*d*d_mlp*experts_counted) + (2*n_layer + 1)*d [+ router]
inline unsigned __int128 block_count(const ModelShape& s, std::int64_t mlp_copies,
                                     std::int64_t router_experts) {
  using u128 = unsigned __int128;
  const u128 L = s.n_layer, d = s.d_model, m = s.d_mlp;
  u128 per_layer = 4 * d * d + 3 * d * m * static_cast<u128>(mlp_copies);
  u128 total = L * per_layer + (2 * L + 1) * d;
  total += L * d * static_cast<u128>(router_experts);
  return total;
}

}  // namespace detail

/// Non-embedding parameter count of a dense transformer.
/// 16*n_layer*d_model^2 + (2*n_layer + 1)*d_model at the default d_mlp.
inline std::int64_t count_dense(const ModelShape& shape) {
  return detail::checked_i64(detail::block_count(shape, 1, 0), "count_dense");
}

/// Total, active and dense-equivalent counts for an MoE shape.
inline ParamCensus count_moe(const MoEShape& shape) {
  ParamCensus c;
  c.n1_dense = count_dense(shape.base);
  c.n_total = detail::checked_i64(
      detail::block_count(shape.base, shape.n_expert, shape.n_expert), "count_moe total");
  c.n2_active = detail::checked_i64(
      detail::block_count(shape.base, shape.n_topk, shape.n_expert), "count_moe active");
  c.sparsity = static_cast<double>(c.n_total) / static_cast<double>(c.n2_active);
  return c;
}

/// Sparsity P = N_total / N_2; equals 1 exactly when n_expert == n_topk.
inline double sparsity(const MoEShape& shape) {
  if (shape.n_expert == shape.n_topk) return 1.0;
  return count_moe(shape).sparsity;
}

/// Training cost estimate C = 6 * N_active * D, exact in 64-bit integers.
inline std::uint64_t flops(std::uint64_t n_active, std::uint64_t tokens) {
  unsigned __int128 prod = static_cast<unsigned __int128>(n_active) * tokens;
  if (prod > static_cast<unsigned __int128>(UINT64_MAX / 6))
    throw std::overflow_error("flops: product exceeds 64-bit range");
  return 6 * static_cast<std::uint64_t>(prod);
}

}  // namespace moescale
