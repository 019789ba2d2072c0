#include "ltkd/common.hpp"

#include <cstdio>

namespace ltkd {

std::string Fnv1a::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash_));
  return buf;
}

}  // namespace ltkd
