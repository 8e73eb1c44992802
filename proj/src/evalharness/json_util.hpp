#pragma once

#include <initializer_list>
#include <string>

#include "advdef/evalharness.hpp"

namespace advdef::eval {

/// Throws std::invalid_argument when `j` is not an object or holds a key
/// outside `allowed`.
void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

}  // namespace advdef::eval
