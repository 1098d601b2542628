#include "ieegclip/objective.hpp"

#include <cmath>
#include <string>

#include "ieegclip/error.hpp"
#include "ieegclip/log.hpp"

namespace ieegclip::objective {

namespace {

template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> row_norms(const Mat<T>& x, const char* which) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> n = x.rowwise().norm();
  for (Eigen::Index i = 0; i < n.size(); ++i) {
    if (n(i) < static_cast<T>(kNormFloor)) {
      warn(std::string("cosine_similarity: zero-norm row in ") + which + "; norm floored at 1e-12");
      n(i) = static_cast<T>(kNormFloor);
    }
  }
  return n;
}

// Row-wise softmax of z, and the mean over rows of (logsumexp - diagonal).
template <class T>
T row_softmax_loss(const Mat<T>& z, Mat<T>* prob) {
  const auto n = z.rows();
  T total = 0;
  if (prob) prob->resize(n, z.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const T m = z.row(i).maxCoeff();
    const auto e = (z.row(i).array() - m).exp();
    const T sum = e.sum();
    total += m + std::log(sum) - z(i, i);
    if (prob) prob->row(i) = e / sum;
  }
  return total / static_cast<T>(n);
}

template <class T>
void check_square(const Mat<T>& s) {
  if (s.rows() == 0) throw Error(ErrorKind::empty_dataset, "clip_loss: empty batch");
  if (s.rows() != s.cols()) throw Error(ErrorKind::shape_mismatch, "clip_loss: similarity matrix is not square");
}

}  // namespace

template <class T>
SimilarityMatrix<T> cosine_similarity(const Mat<T>& u, const Mat<T>& v) {
  if (u.cols() != v.cols()) throw Error(ErrorKind::shape_mismatch, "cosine_similarity: dimension mismatch");
  const Mat<T> un = row_norms(u, "U").cwiseInverse().asDiagonal() * u;
  const Mat<T> vn = row_norms(v, "V").cwiseInverse().asDiagonal() * v;
  return {un * vn.transpose(), 1};
}

template <class T>
T clip_loss(const Mat<T>& s, T t_prime, bool symmetric) {
  check_square(s);
  const Mat<T> z = std::exp(t_prime) * s;
  const T rows = row_softmax_loss<T>(z, nullptr);
  if (!symmetric) return rows;
  return (rows + row_softmax_loss<T>(z.transpose(), nullptr)) / 2;
}

template <class T>
LossGrad<T> clip_loss_grad(const Mat<T>& u, const Mat<T>& v, T t_prime, bool symmetric) {
  if (u.rows() != v.rows() || u.cols() != v.cols()) {
    throw Error(ErrorKind::shape_mismatch, "clip_loss_grad: U and V differ in shape");
  }
  const auto nu = row_norms(u, "U");
  const auto nv = row_norms(v, "V");
  const Mat<T> un = nu.cwiseInverse().asDiagonal() * u;
  const Mat<T> vn = nv.cwiseInverse().asDiagonal() * v;
  const Mat<T> s = un * vn.transpose();
  check_square(s);
  const auto n = s.rows();
  const T t = std::exp(t_prime);
  const Mat<T> z = t * s;

  LossGrad<T> out;
  Mat<T> p;
  out.loss = row_softmax_loss<T>(z, &p);
  Mat<T> dz = p;
  dz.diagonal().array() -= 1;
  if (symmetric) {
    Mat<T> pc;
    out.loss = (out.loss + row_softmax_loss<T>(z.transpose(), &pc)) / 2;
    pc.diagonal().array() -= 1;
    dz = (dz + pc.transpose()) / 2;
  }
  dz /= static_cast<T>(n);

  out.dt_prime = t * (dz.array() * s.array()).sum();
  const Mat<T> ds = t * dz;
  const Mat<T> dun = ds * vn;
  const Mat<T> dvn = ds.transpose() * un;
  // d(x/|x|) = (I - x̂x̂ᵀ)/|x|; floored rows have a constant norm.
  out.du.resize(u.rows(), u.cols());
  out.dv.resize(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool fu = nu(i) <= static_cast<T>(kNormFloor);
    const bool fv = nv(i) <= static_cast<T>(kNormFloor);
    out.du.row(i) = (fu ? dun.row(i) : (dun.row(i) - dun.row(i).dot(un.row(i)) * un.row(i)).eval()) / nu(i);
    out.dv.row(i) = (fv ? dvn.row(i) : (dvn.row(i) - dvn.row(i).dot(vn.row(i)) * vn.row(i)).eval()) / nv(i);
  }
  return out;
}

template SimilarityMatrix<float> cosine_similarity<float>(const Mat<float>&, const Mat<float>&);
template SimilarityMatrix<double> cosine_similarity<double>(const Mat<double>&, const Mat<double>&);
template float clip_loss<float>(const Mat<float>&, float, bool);
template double clip_loss<double>(const Mat<double>&, double, bool);
template LossGrad<float> clip_loss_grad<float>(const Mat<float>&, const Mat<float>&, float, bool);
template LossGrad<double> clip_loss_grad<double>(const Mat<double>&, const Mat<double>&, double, bool);

}  // namespace ieegclip::objective
