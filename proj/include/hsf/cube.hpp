#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <string>

#include "hsf/errors.hpp"

namespace hsf {

/// W x H x S image cube stored band-sequentially: all of band 0, then band 1,
/// ...; each band row-major (H rows of W samples).
template <typename Scalar>
class Cube {
 public:
  using Index = Eigen::Index;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Cube() = default;
  Cube(Index width, Index height, Index bands, Scalar fill = Scalar(0))
      : width_(width), height_(height), bands_(bands) {
    check_extents();
    data_ = Vector::Constant(width * height * bands, fill);
  }
  Cube(Index width, Index height, Index bands, Vector data)
      : width_(width), height_(height), bands_(bands), data_(std::move(data)) {
    check_extents();
    if (data_.size() != width * height * bands)
      throw ShapeError("cube data length does not match " + std::to_string(width) + "x" +
                       std::to_string(height) + "x" + std::to_string(bands));
  }

  Index width() const { return width_; }
  Index height() const { return height_; }
  Index bands() const { return bands_; }
  Index pixels() const { return width_ * height_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }

  Scalar& operator()(Index band, Index row, Index col) {
    return data_[(band * height_ + row) * width_ + col];
  }
  Scalar operator()(Index band, Index row, Index col) const {
    return data_[(band * height_ + row) * width_ + col];
  }

  /// One band as an H x W row-major view.
  Eigen::Map<RowMatrix> band(Index b) { return {data_.data() + b * pixels(), height_, width_}; }
  Eigen::Map<const RowMatrix> band(Index b) const {
    return {data_.data() + b * pixels(), height_, width_};
  }

  /// The (W*H) x S matrix form: each column is one band, each row one pixel.
  Eigen::Map<Matrix> as_matrix() { return {data_.data(), pixels(), bands_}; }
  Eigen::Map<const Matrix> as_matrix() const { return {data_.data(), pixels(), bands_}; }

  template <typename U>
  Cube<U> cast() const {
    return Cube<U>(width_, height_, bands_, data_.template cast<U>().eval());
  }

  bool same_dims(const Cube& o) const {
    return width_ == o.width_ && height_ == o.height_ && bands_ == o.bands_;
  }

 private:
  void check_extents() const {
    if (width_ <= 0 || height_ <= 0 || bands_ <= 0) throw ShapeError("cube extents must be positive");
  }

  Index width_ = 0;
  Index height_ = 0;
  Index bands_ = 0;
  Vector data_;
};

using HsiCube = Cube<double>;

/// HSC file: "HSC1", then W, H, S as little-endian u32, then W*H*S
/// little-endian float32 values in band-sequential order.
void write_hsc(const std::filesystem::path& path, const HsiCube& cube);
HsiCube read_hsc(const std::filesystem::path& path);

/// 8-bit binary PGM of one band, values clamped to [0, 1].
void write_band_pgm(const std::filesystem::path& path, const HsiCube& cube, Eigen::Index band);

}  // namespace hsf
