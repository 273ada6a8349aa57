#include "rvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rvit/tensor.hpp"

namespace rvit {

MacroF1::MacroF1(std::size_t classes) : tp_(classes, 0), fp_(classes, 0), fn_(classes, 0) {}

void MacroF1::add_predicted(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  if (predicted.size() != tp_.size() || truth.size() != tp_.size()) {
    throw ShapeError("macro-F1: expected " + std::to_string(tp_.size()) + " labels per sample");
  }
  for (std::size_t c = 0; c < tp_.size(); ++c) {
    const bool p = predicted[c] != 0, t = truth[c] != 0;
    tp_[c] += p && t;
    fp_[c] += p && !t;
    fn_[c] += !p && t;
  }
}

void MacroF1::add(std::span<const double> logits, std::span<const std::uint8_t> truth) {
  std::vector<std::uint8_t> predicted(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) predicted[c] = logits[c] > 0.0;
  add_predicted(predicted, truth);
}

std::vector<double> MacroF1::per_class() const {
  std::vector<double> out(tp_.size());
  for (std::size_t c = 0; c < tp_.size(); ++c) {
    const double denom = static_cast<double>(2 * tp_[c] + fp_[c] + fn_[c]);
    out[c] = denom == 0.0 ? 1.0 : 2.0 * static_cast<double>(tp_[c]) / denom;
  }
  return out;
}

double MacroF1::value() const {
  const std::vector<double> f = per_class();
  if (f.empty()) return 0.0;
  return std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(f.size());
}

MeanIoU::MeanIoU(std::size_t classes) : classes_(classes), intersection_(classes, 0), union_(classes, 0) {}

void MeanIoU::add(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("mIoU: prediction and truth differ in length");
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const std::size_t p = predicted[i], t = truth[i];
    if (p >= classes_ || t >= classes_) throw ShapeError("mIoU: class index out of range");
    if (p == t) {
      ++intersection_[p];
      ++union_[p];
    } else {
      ++union_[p];
      ++union_[t];
    }
  }
}

double MeanIoU::value() const {
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < classes_; ++c) {
    if (union_[c] == 0) continue;
    total += static_cast<double>(intersection_[c]) / static_cast<double>(union_[c]);
    ++counted;
  }
  return counted == 0 ? 1.0 : total / static_cast<double>(counted);
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("spearman: series differ in length");
  if (a.size() < 2) return 0.0;
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / (n - 1.0));
  }
  return out;
}

}  // namespace rvit
