#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace onrep {

using Index = Eigen::Index;

/// Extents of a rank-4 tensor in (batch, channel, height, width) order.
/// Convolution kernels reuse the same layout as (out, in, kh, kw).
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index numel() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

/// Dense row-major rank-4 array backed by an Eigen column vector.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Vector::Zero(checked(shape))) {}
  Tensor(const Shape& shape, Vector data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw std::invalid_argument("tensor data length does not match shape " + shape_.str());
  }
  Tensor(const Shape& shape, std::initializer_list<Scalar> values) : Tensor(shape) {
    if (static_cast<Index>(values.size()) != shape_.numel())
      throw std::invalid_argument("initializer length does not match shape " + shape_.str());
    Index i = 0;
    for (Scalar v : values) data_[i++] = v;
  }

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor constant(const Shape& shape, Scalar value) {
    return Tensor(shape, Vector::Constant(checked(shape), value));
  }
  /// Column vector of length n stored as (n, 1, 1, 1); the bias layout.
  static Tensor vector(std::initializer_list<Scalar> values) {
    return Tensor({static_cast<Index>(values.size()), 1, 1, 1}, values);
  }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  auto array() { return data_.array(); }
  auto array() const { return data_.array(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }

  /// Row-major (rows x cols) view of the whole buffer.
  MatrixMap matrix(Index rows, Index cols) {
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  /// (C, H*W) view of one batch item.
  MatrixMap item(Index n) {
    return MatrixMap(data_.data() + n * shape_.c * shape_.plane(), shape_.c, shape_.plane());
  }
  ConstMatrixMap item(Index n) const {
    return ConstMatrixMap(data_.data() + n * shape_.c * shape_.plane(), shape_.c,
                          shape_.plane());
  }
  /// (N, C*H*W) view, the layout kernels are multiplied in.
  MatrixMap rows() { return matrix(shape_.n, shape_.c * shape_.plane()); }
  ConstMatrixMap rows() const { return matrix(shape_.n, shape_.c * shape_.plane()); }

  Tensor reshaped(const Shape& shape) const {
    if (shape.numel() != shape_.numel())
      throw std::invalid_argument("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(shape, data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  static Index checked(const Shape& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
      throw std::invalid_argument("negative tensor extent");
    return s.numel();
  }

  Shape shape_;
  Vector data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// max|a - b| / max|b|, the norm-wise relative error used throughout the tests.
template <typename Scalar>
double relative_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!(a.shape() == b.shape())) throw std::invalid_argument("relative_error: shape mismatch");
  if (a.size() == 0) return 0.0;
  const double diff = (a.data() - b.data()).template lpNorm<Eigen::Infinity>();
  const double ref = b.data().template lpNorm<Eigen::Infinity>();
  return ref > 0 ? diff / ref : diff;
}

// Tensor file: "RNVT", four u64 LE extents, N*C*H*W f32 LE values.

namespace detail {
inline void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}
inline std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), 8);
  if (!in) throw std::runtime_error("truncated tensor header");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline void put_f32(std::ostream& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                     static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
  out.write(b, 4);
}
inline float get_f32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("truncated float data");
  const std::uint32_t u = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}
}  // namespace detail

template <typename Scalar>
void write_tensor(std::ostream& out, const Tensor<Scalar>& t) {
  out.write("RNVT", 4);
  const Shape& s = t.shape();
  for (Index e : {s.n, s.c, s.h, s.w}) detail::put_u64(out, static_cast<std::uint64_t>(e));
  for (Index i = 0; i < t.size(); ++i) detail::put_f32(out, static_cast<float>(t[i]));
}

template <typename Scalar = float>
Tensor<Scalar> read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "RNVT") throw std::runtime_error("not an RNVT tensor file");
  Shape s;
  s.n = static_cast<Index>(detail::get_u64(in));
  s.c = static_cast<Index>(detail::get_u64(in));
  s.h = static_cast<Index>(detail::get_u64(in));
  s.w = static_cast<Index>(detail::get_u64(in));
  Tensor<Scalar> t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(detail::get_f32(in));
  return t;
}

template <typename Scalar>
void save_tensor(const std::string& path, const Tensor<Scalar>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(out, t);
}

template <typename Scalar = float>
Tensor<Scalar> load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_tensor<Scalar>(in);
}

}  // namespace onrep
