#pragma once

// Training objectives: the semantic alignment loss between student projections
// and the frozen teacher's tokens at the visible positions, the equal-weight
// Stage-1 combination, and the Stage-2 latent prediction distance.

#include "epd/ops.hpp"

namespace epd {

// -mean cosine between per-token student projections and the teacher tokens
// of the same (full) video gathered at the student's visible positions.
template <class T>
Tensor<T> semantic_alignment_loss(const Tensor<T>& student_proj, const Tensor<T>& teacher_tokens,
                                  const std::vector<int64_t>& visible_positions) {
    if (student_proj.rank() != 3 || teacher_tokens.rank() != 3)
        throw shape_error(strcat("semantic_alignment_loss: want [B,Nv,d]/[B,N,d], got ",
                                 shape_str(student_proj.shape()), " and ",
                                 shape_str(teacher_tokens.shape())));
    if (student_proj.dim(2) != teacher_tokens.dim(2))
        throw shape_error(strcat("semantic_alignment_loss: teacher dim ", teacher_tokens.dim(2),
                                 " vs student projection dim ", student_proj.dim(2)));
    if (int64_t(visible_positions.size()) != student_proj.dim(1))
        throw contract_error(strcat("semantic_alignment_loss: ", visible_positions.size(),
                                    " positions for ", student_proj.dim(1), " student tokens"));
    Tensor<T> gathered = ops::gather_rows(teacher_tokens, visible_positions);
    return ops::neg_mean_cosine(student_proj, gathered);
}

struct Stage1Weights {
    double recon = 1.0;
    double sem = 1.0;
};

template <class T>
Tensor<T> stage1_loss(const Tensor<T>& recon_loss, const Tensor<T>& sem_loss,
                      const Stage1Weights& w = {}) {
    if (!std::isfinite(double(recon_loss.item())) || !std::isfinite(double(sem_loss.item())))
        throw contract_error("stage1_loss: non-finite component");
    return ops::add(ops::scale(recon_loss, T(w.recon)), ops::scale(sem_loss, T(w.sem)));
}

enum class LatentDistance { mse, l1, neg_cosine };

inline LatentDistance latent_distance_from_string(const std::string& s) {
    if (s == "mse") return LatentDistance::mse;
    if (s == "l1") return LatentDistance::l1;
    if (s == "neg_cosine") return LatentDistance::neg_cosine;
    throw config_error(strcat("unknown stage-2 distance '", s, "' (mse | l1 | neg_cosine)"));
}

// Distance between predicted latents and the frozen teacher's latents at the
// masked positions. The target must carry no graph.
template <class T>
Tensor<T> latent_prediction_loss(const Tensor<T>& pred, const Tensor<T>& target,
                                 LatentDistance kind = LatentDistance::mse) {
    ops::check_same_shape(pred.shape(), target.shape(), "latent_prediction_loss");
    switch (kind) {
        case LatentDistance::mse: return ops::mse_loss(pred, target);
        case LatentDistance::l1: return ops::l1_loss(pred, target);
        default: return ops::neg_mean_cosine(pred, target);
    }
}

}  // namespace epd
