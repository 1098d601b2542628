#pragma once

#include <Eigen/Dense>

namespace ieegclip::objective {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr double kNormFloor = 1e-12;

template <class T>
struct SimilarityMatrix {
  Mat<T> values;  // N x N, cosine similarities
  T temperature = 1;
};

// Rows of U and V are examples. Norms below 1e-12 are floored, with a warning.
template <class T>
SimilarityMatrix<T> cosine_similarity(const Mat<T>& u, const Mat<T>& v);

// -(1/N) sum_i log softmax_j(t * S_ij)[i], t = exp(t_prime). With
// `symmetric`, the mean of this and the same term over columns.
template <class T>
T clip_loss(const Mat<T>& s, T t_prime, bool symmetric = false);

template <class T>
struct LossGrad {
  T loss = 0;
  Mat<T> du;  // N x d
  Mat<T> dv;  // N x d
  T dt_prime = 0;
};

// Loss and exact gradients through the cosine normalization and t = exp(t').
template <class T>
LossGrad<T> clip_loss_grad(const Mat<T>& u, const Mat<T>& v, T t_prime, bool symmetric = false);

}  // namespace ieegclip::objective
