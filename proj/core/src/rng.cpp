#include "uniseg/rng.hpp"

#include <sstream>

#include "uniseg/error.hpp"

namespace uniseg {

std::string serialize_rng(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

Rng deserialize_rng(const std::string& text) {
  std::istringstream is(text);
  Rng rng;
  is >> rng;
  if (!is) throw Error(ErrorCode::Parse, "bad rng state");
  return rng;
}

}  // namespace uniseg
