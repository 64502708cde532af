#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tmx {

// Shape/validation failures of a primitive; message names the op and extents.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite value produced by a primitive.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Out-of-range id in an embedding/table lookup.
class LookupError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

}  // namespace tmx
