#ifndef ATDT_LOSSES_HPP_
#define ATDT_LOSSES_HPP_

#include <array>
#include <string>
#include <vector>

#include "atdt/nn.hpp"
#include "atdt/ops.hpp"

// Task-loss dispatch, the norm-discrepancy alignment loss and the transfer
// loss reductions.

namespace atdt {

enum class TaskKind { Depth, Semseg, Edge, Reconstruction };

inline Head head_for_task(TaskKind t) {
    switch (t) {
        case TaskKind::Depth: return Head::Depth;
        case TaskKind::Semseg: return Head::Semseg;
        case TaskKind::Edge: return Head::Edge;
        case TaskKind::Reconstruction: return Head::Reconstruction;
    }
    return Head::Depth;
}

inline std::string task_name(TaskKind t) {
    switch (t) {
        case TaskKind::Depth: return "depth";
        case TaskKind::Semseg: return "semseg";
        case TaskKind::Edge: return "edge";
        case TaskKind::Reconstruction: return "reconstruction";
    }
    return "?";
}

// Per-batch supervision targets; only the fields a task needs are populated.
template <class S>
struct TaskTargets {
    const Tensor<S>* depth = nullptr;                 // [B,1,H,W]
    const std::vector<std::uint8_t>* depth_mask = nullptr;
    const std::vector<int>* labels = nullptr;         // flat [B*H*W], -1 = ignore
    const Tensor<S>* edges = nullptr;                 // [B,1,H,W]
    const Tensor<S>* image = nullptr;                 // [B,3,H,W] (reconstruction)
};

inline constexpr int kIgnoreIndex = -1;

// semseg -> pixel-wise cross entropy; depth -> masked L1 (sky supervised at
// the depth cap); edge / reconstruction -> mean squared error.
template <class S>
Tensor<S> loss_task(Tape<S>& tape, TaskKind kind, const Tensor<S>& pred,
                    const TaskTargets<S>& t) {
    switch (kind) {
        case TaskKind::Semseg:
            check(t.labels != nullptr, "loss_task: missing semseg labels");
            return spatial_softmax_cross_entropy(tape, pred, *t.labels, kIgnoreIndex);
        case TaskKind::Depth:
            check(t.depth != nullptr, "loss_task: missing depth target");
            return l1_loss(tape, pred, *t.depth, t.depth_mask);
        case TaskKind::Edge:
            check(t.edges != nullptr, "loss_task: missing edge target");
            return mse_loss(tape, pred, *t.edges);
        case TaskKind::Reconstruction:
            check(t.image != nullptr, "loss_task: missing reconstruction target");
            return mse_loss(tape, pred, *t.image);
    }
    throw Error("loss_task: unknown task kind");
}

// Norm Discrepancy Alignment: mean over batch and spatial locations of the
// absolute difference of channel-wise L2 norms. Symmetric and positively
// homogeneous; batch entries are paired positionally (pairing is random
// because batches are drawn independently each step).
template <class S>
Tensor<S> loss_nda(Tape<S>& tape, const Tensor<S>& f_a, const Tensor<S>& f_b) {
    check(same_shape(f_a, f_b), "loss_nda: shape mismatch");
    Tensor<S> na = channel_l2_norm(tape, f_a);
    Tensor<S> nb = channel_l2_norm(tape, f_b);
    return mean(tape, abs_op(tape, sub(tape, na, nb)));
}

enum class TrReduction { Mean, Sum, RootSum };

inline TrReduction tr_reduction_from_string(const std::string& s) {
    if (s == "mean") return TrReduction::Mean;
    if (s == "sum") return TrReduction::Sum;
    if (s == "root-sum") return TrReduction::RootSum;
    throw Error("unknown transfer reduction: " + s);
}

// Feature transfer loss between G(f1) and f2. The written form is an L2 norm
// with no stated reduction; the default resolves it as a mean over elements.
template <class S>
Tensor<S> loss_transfer(Tape<S>& tape, const Tensor<S>& transferred, const Tensor<S>& target,
                        TrReduction reduction = TrReduction::Mean) {
    switch (reduction) {
        case TrReduction::Mean: return mse_loss(tape, transferred, target);
        case TrReduction::Sum: return sum(tape, square(tape, sub(tape, transferred, target)));
        case TrReduction::RootSum:
            return sqrt_op(tape, sum(tape, square(tape, sub(tape, transferred, target))));
    }
    throw Error("loss_transfer: unknown reduction");
}

}  // namespace atdt

#endif  // ATDT_LOSSES_HPP_
