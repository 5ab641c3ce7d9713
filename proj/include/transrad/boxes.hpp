#pragma once

// Axis-aligned boxes and their overlap measures. The geometry is templated
// on the scalar so the same code yields values (double) and exact
// derivatives (Dual<N>) for the regression losses.

#include <cmath>
#include <numbers>

#include "transrad/dual.hpp"

namespace transrad {

template <class T>
struct Box2T {
  T x1{}, y1{}, x2{}, y2{};

  T width() const { return x2 - x1; }
  T height() const { return y2 - y1; }
  T cx() const { return (x1 + x2) * 0.5; }
  T cy() const { return (y1 + y2) * 0.5; }
};

template <class T>
struct Box3T {
  T x1{}, y1{}, z1{}, x2{}, y2{}, z2{};

  Box2T<T> ra() const { return {x1, y1, x2, y2}; }
  // RD plane: range on the first axis, Doppler on the second.
  Box2T<T> rd() const { return {x1, z1, x2, z2}; }
};

using Box2D = Box2T<double>;
using Box3D = Box3T<double>;

inline bool operator==(const Box2D& a, const Box2D& b) {
  return a.x1 == b.x1 && a.y1 == b.y1 && a.x2 == b.x2 && a.y2 == b.y2;
}
inline bool operator==(const Box3D& a, const Box3D& b) {
  return a.x1 == b.x1 && a.y1 == b.y1 && a.z1 == b.z1 && a.x2 == b.x2 && a.y2 == b.y2 &&
         a.z2 == b.z2;
}

template <class T>
T overlap_1d(const T& a1, const T& a2, const T& b1, const T& b2) {
  return vmax(T(0.0), vmin(a2, b2) - vmax(a1, b1));
}

template <class T>
T box_area(const Box2T<T>& b) {
  return vmax(T(0.0), b.width()) * vmax(T(0.0), b.height());
}

// Intersection over union; a zero-area union yields 0.
template <class T>
T iou_2d(const Box2T<T>& a, const Box2T<T>& b) {
  const T inter = overlap_1d(a.x1, a.x2, b.x1, b.x2) * overlap_1d(a.y1, a.y2, b.y1, b.y2);
  const T uni = box_area(a) + box_area(b) - inter;
  if (value_of(uni) <= 0.0) return T(0.0);
  return inter / uni;
}

template <class T>
T box_volume(const Box3T<T>& b) {
  return vmax(T(0.0), b.x2 - b.x1) * vmax(T(0.0), b.y2 - b.y1) * vmax(T(0.0), b.z2 - b.z1);
}

template <class T>
T iou_3d(const Box3T<T>& a, const Box3T<T>& b) {
  const T inter = overlap_1d(a.x1, a.x2, b.x1, b.x2) * overlap_1d(a.y1, a.y2, b.y1, b.y2) *
                  overlap_1d(a.z1, a.z2, b.z1, b.z2);
  const T uni = box_volume(a) + box_volume(b) - inter;
  if (value_of(uni) <= 0.0) return T(0.0);
  return inter / uni;
}

// Squared distance between box centres, in squared plane units.
template <class T>
T center_distance_sq(const Box2T<T>& a, const Box2T<T>& b) {
  const T dx = a.cx() - b.cx();
  const T dy = a.cy() - b.cy();
  return dx * dx + dy * dy;
}

template <class T>
struct CiouParts {
  T iou{};
  T l_iou{};     // 1 - IoU
  T l_ncent{};   // centre distance squared over enclosing diagonal squared
  T l_aspect{};  // 4/pi^2 (atan(w_gt/h_gt) - atan(w/h))^2
  T alpha{};     // aspect gate, 0 below IoU 0.5
  T loss{};
};

template <class T>
CiouParts<T> ciou_parts(const Box2T<T>& pred, const Box2T<T>& gt) {
  using std::atan2;
  CiouParts<T> p;
  p.iou = iou_2d(pred, gt);
  p.l_iou = 1.0 - p.iou;

  const T ew = vmax(pred.x2, gt.x2) - vmin(pred.x1, gt.x1);
  const T eh = vmax(pred.y2, gt.y2) - vmin(pred.y1, gt.y1);
  const T diag_sq = ew * ew + eh * eh;
  p.l_ncent = value_of(diag_sq) > 0.0 ? center_distance_sq(pred, gt) / diag_sq : T(0.0);

  // atan2(w, h) equals atan(w / h) for h > 0 and stays finite at h = 0.
  const T da = atan2(gt.width(), gt.height()) - atan2(pred.width(), pred.height());
  p.l_aspect = (4.0 / (std::numbers::pi * std::numbers::pi)) * da * da;

  if (value_of(p.iou) < 0.5) {
    p.alpha = T(0.0);
  } else {
    const T denom = p.l_iou + p.l_aspect;
    p.alpha = value_of(denom) > 0.0 ? p.l_aspect / denom : T(0.0);
  }
  p.loss = p.l_iou + p.l_ncent + p.alpha * p.l_aspect;
  return p;
}

}  // namespace transrad
