#include "eagle/version.hpp"

namespace eagle {

const char* version_string() { return "0.1.0"; }

}  // namespace eagle
