#include "advdef/dataset.hpp"

#include <algorithm>
#include <stdexcept>

namespace advdef {

Shape Dataset::image_shape() const {
  if (!images.defined()) return {};
  return Shape(images.shape().begin() + 1, images.shape().end());
}

void Dataset::validate() const {
  if (labels.empty()) {
    if (images.defined()) throw std::invalid_argument("dataset " + name + ": images without labels");
    return;
  }
  if (!images.defined() || images.rank() != 4)
    throw std::invalid_argument("dataset " + name + ": images must be [N, H, W, C]");
  if (images.dim(0) != labels.size())
    throw std::invalid_argument("dataset " + name + ": " + std::to_string(images.dim(0)) + " images but " +
                                std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw std::invalid_argument("dataset " + name + ": label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(classes) + ")");
  for (float v : images.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("dataset " + name + ": pixel outside [0, 1]");
}

Tensor take_rows(const Tensor& batch, std::size_t begin, std::size_t count) {
  if (begin + count > batch.dim(0)) throw std::out_of_range("take_rows: range exceeds batch");
  Shape s = batch.shape();
  const std::size_t row = batch.numel() / s[0];
  s[0] = count;
  auto d = batch.data();
  return Tensor(std::move(s), std::vector<float>(d.begin() + begin * row, d.begin() + (begin + count) * row));
}

Tensor gather_rows(const Tensor& batch, const std::vector<std::size_t>& index) {
  Shape s = batch.shape();
  const std::size_t row = batch.numel() / s[0];
  s[0] = index.size();
  std::vector<float> out(index.size() * row);
  auto d = batch.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= batch.dim(0)) throw std::out_of_range("gather_rows: index out of range");
    std::copy_n(d.begin() + index[i] * row, row, out.begin() + i * row);
  }
  return Tensor(std::move(s), std::move(out));
}

Dataset head(const Dataset& data, std::size_t count) {
  count = std::min(count, data.size());
  Dataset out = data;
  out.labels.resize(count);
  out.images = count ? take_rows(data.images, 0, count) : Tensor();
  return out;
}

}  // namespace advdef
