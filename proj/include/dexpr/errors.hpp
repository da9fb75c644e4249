#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace dexpr {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation, or an inconsistent graph.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated, or incompatible checkpoint files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Problems with dataset contents: empty classes, bad labels, class-count mismatches.
class DatasetError : public Error {
 public:
  using Error::Error;
};

/// Files that cannot be read or decoded.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training loss became NaN or infinite.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch, std::optional<std::size_t> fold = std::nullopt)
      : Error(describe(epoch, batch, fold)), epoch_(epoch), batch_(batch), fold_(fold) {}

  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }
  std::optional<std::size_t> fold() const { return fold_; }

  DivergenceError with_fold(std::size_t fold) const { return DivergenceError(epoch_, batch_, fold); }

 private:
  static std::string describe(std::size_t epoch, std::size_t batch, std::optional<std::size_t> fold) {
    std::string msg = "training diverged (non-finite loss) at epoch " + std::to_string(epoch) + ", batch " +
                      std::to_string(batch);
    if (fold) msg += ", fold " + std::to_string(*fold);
    return msg;
  }

  std::size_t epoch_;
  std::size_t batch_;
  std::optional<std::size_t> fold_;
};

}  // namespace dexpr
