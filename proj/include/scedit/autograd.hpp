#pragma once

#include <cstdint>
#include <span>

#include "scedit/tensor.hpp"

namespace scedit {

// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
// .grad of every reachable leaf with requires_grad. Leaves listed in
// `ensure` that the sweep does not reach receive a zero gradient.
void backward(const Tensor& loss, std::span<const Tensor> ensure = {});

// Number of op-produced tensor elements held for backward by the graph that
// ends at `root`. Each distinct tensor counts once; parameters and user
// inputs (leaves) are excluded.
std::int64_t retained_activation_elements(const Tensor& root);

// Number of recorded nodes reachable from `root`.
std::int64_t graph_node_count(const Tensor& root);

namespace detail {

// Whether an op over these operands should record a node under the current
// grad mode.
bool should_record(std::span<const Tensor> operands);

// Builds the edge for one operand.
Edge edge_for(const Tensor& operand);

// Attaches a node to `out`. `operands` define the edges in order; `saved`
// lists what the adjoint reads back.
void record(Tensor& out, const char* kind, std::span<const Tensor> operands,
            std::vector<Tensor> saved,
            std::function<std::vector<Tensor>(const Tensor&, const Node&)> backward);

// Marks a freshly computed op result.
void mark_op_output(Tensor& out);

}  // namespace detail

}  // namespace scedit
