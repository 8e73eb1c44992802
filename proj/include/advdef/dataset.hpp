#pragma once

#include <string>
#include <vector>

#include "advdef/tensor.hpp"

namespace advdef {

enum class Split { train, test };

/// Labelled images [N, H, W, C] with pixels in [0, 1].
struct Dataset {
  std::string name;
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 0;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const;
  /// Throws std::invalid_argument on inconsistent counts, labels outside
  /// [0, classes) or pixels outside [0, 1].
  void validate() const;
};

/// Images [count, ...] starting at `begin`, copied out of a batch tensor.
Tensor take_rows(const Tensor& batch, std::size_t begin, std::size_t count);
/// Images at the given indices, in order.
Tensor gather_rows(const Tensor& batch, const std::vector<std::size_t>& index);
/// First `count` items of a dataset (all of it if count exceeds the size).
Dataset head(const Dataset& data, std::size_t count);

}  // namespace advdef
