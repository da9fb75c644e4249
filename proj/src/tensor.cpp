#include "dexpr/tensor.hpp"

#include <istream>
#include <ostream>

#include "binary_io.hpp"

namespace dexpr {

namespace {
constexpr std::uint32_t kMaxRank = 8;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  detail::put_u32(out, static_cast<std::uint32_t>(t.shape().rank()));
  for (std::size_t d : t.shape().dims()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (float v : t.data()) detail::put_f32(out, v);
}

Tensor read_tensor(std::istream& in) {
  const std::uint32_t rank = detail::get_u32(in);
  if (rank == 0 || rank > kMaxRank) throw FormatError("invalid tensor rank " + std::to_string(rank));
  std::vector<std::size_t> dims(rank);
  std::size_t count = 1;
  for (auto& d : dims) {
    d = detail::get_u32(in);
    if (d == 0) throw FormatError("zero tensor extent");
    count *= d;
    if (count > (std::size_t{1} << 32)) throw FormatError("tensor too large");
  }
  std::vector<float> data(count);
  for (auto& v : data) v = detail::get_f32(in);
  return Tensor(Shape(std::move(dims)), std::move(data));
}

}  // namespace dexpr
