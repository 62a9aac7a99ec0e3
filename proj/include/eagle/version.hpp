#pragma once

namespace eagle {

const char* version_string();

}  // namespace eagle
