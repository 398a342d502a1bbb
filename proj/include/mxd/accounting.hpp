#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "mxd/error.hpp"
#include "mxd/layers.hpp"

namespace mxd {

/// Shape description of a layer, independent of its parameter values.
struct LayerSpec {
    LayerKind kind = LayerKind::tc;
    std::size_t input = 0;    // I
    std::size_t hidden = 0;   // H
    std::size_t output = 0;   // O
    std::size_t experts = 0;  // N (MoE kinds)
    std::size_t rank = 0;     // R (μMoE)
    std::size_t k = 0;
    bool biases = true;
};

/// Exact parameter total for a layer of the given shape.
///
///   teacher_mlp   IH + HO                  (+ H + O)
///   teacher_glu   2IH + HO                 (+ H + O)
///   sae/tc        IH + HO                  (+ H + O)
///   stc           IH + HO + IO             (+ H + O)
///   mxd           IN + IH + NO + HO        (+ N + H + O)
///   mxd_glu       mxd + IH
///   mumoe         IN + IH + RN + RH + OR   (+ N + H + O)
///   mov           IN + IH + NH + HO        (+ N + H + O)
inline std::uint64_t param_count(const LayerSpec& s) {
    using u64 = std::uint64_t;
    const u64 I = s.input, H = s.hidden, O = s.output, N = s.experts, R = s.rank;
    const u64 dense_bias = s.biases ? H + O : 0;
    const u64 moe_bias = s.biases ? N + H + O : 0;
    switch (s.kind) {
        case LayerKind::teacher_mlp:
        case LayerKind::sae:
        case LayerKind::tc: return I * H + H * O + dense_bias;
        case LayerKind::teacher_glu: return 2 * I * H + H * O + dense_bias;
        case LayerKind::stc: return I * H + H * O + I * O + dense_bias;
        case LayerKind::mxd: return I * N + I * H + N * O + H * O + moe_bias;
        case LayerKind::mxd_glu: return I * N + 2 * I * H + N * O + H * O + moe_bias;
        case LayerKind::mumoe: return I * N + I * H + R * N + R * H + O * R + moe_bias;
        case LayerKind::mov: return I * N + I * H + N * H + H * O + moe_bias;
        case LayerKind::toy_lm: break;
    }
    throw UnsupportedError("param_count: no closed form for " + std::string(to_string(s.kind)));
}

/// Largest expert count N for which an MxD with hidden width H* costs no more
/// parameters than a transcoder of width tc_hidden (same bias convention).
inline std::size_t match_expert_count(std::size_t tc_hidden, std::size_t input, std::size_t output,
                                      std::size_t teacher_hidden, bool biases = true) {
    if (tc_hidden <= teacher_hidden)
        throw DomainError("match_expert_count: transcoder width " + std::to_string(tc_hidden) +
                          " must exceed teacher hidden width " + std::to_string(teacher_hidden));
    const std::uint64_t budget =
        param_count({LayerKind::tc, input, tc_hidden, output, 0, 0, 0, biases});
    // MxD cost is affine and increasing in N: fixed + N·per_expert.
    const std::uint64_t per_expert = input + output + (biases ? 1 : 0);
    const std::uint64_t fixed = param_count({LayerKind::mxd, input, teacher_hidden, output, 0, 0, 0, biases});
    if (fixed + per_expert > budget) throw DomainError("match_expert_count: no feasible expert count");
    return static_cast<std::size_t>((budget - fixed) / per_expert);
}

/// Largest μMoE expert count at CP rank R that fits into `budget` parameters.
inline std::size_t match_mumoe_experts(std::uint64_t budget, std::size_t input, std::size_t hidden,
                                       std::size_t output, std::size_t rank, bool biases = true) {
    const std::uint64_t fixed = param_count({LayerKind::mumoe, input, hidden, output, 0, rank, 0, biases});
    const std::uint64_t per_expert = input + rank + (biases ? 1 : 0);
    if (fixed + per_expert > budget) throw DomainError("match_mumoe_experts: no feasible expert count");
    return static_cast<std::size_t>((budget - fixed) / per_expert);
}

/// Spec describing an existing layer object.
/// Largest expert count N for which `base` (with experts = N) stays within
/// `budget` parameters. Parameter counts are affine in N for every MoE kind.
inline std::size_t match_experts(LayerSpec base, std::uint64_t budget) {
    base.experts = 0;
    const std::uint64_t fixed = param_count(base);
    base.experts = 1;
    const std::uint64_t per_expert = param_count(base) - fixed;
    if (per_expert == 0) throw DomainError("match_experts: layer kind has no experts");
    if (fixed + per_expert > budget) throw DomainError("match_experts: no feasible expert count");
    return static_cast<std::size_t>((budget - fixed) / per_expert);
}

template <class T>
LayerSpec spec_of(const Layer<T>& layer) {
    return std::visit(
        [](const auto& l) {
            LayerSpec s;
            s.kind = l.kind();
            s.input = l.input_dim();
            s.hidden = l.hidden_dim();
            s.output = l.output_dim();
            if constexpr (requires { l.experts(); }) s.experts = l.experts();
            if constexpr (requires { l.rank(); }) s.rank = l.rank();
            if constexpr (requires { l.k; }) s.k = l.k;
            return s;
        },
        layer);
}

} // namespace mxd
