#pragma once

#include <string>

namespace tta {

// printf-style %.{digits}g rendering used by every CSV writer.
std::string format_double(double v, int significant_digits = 9);

}  // namespace tta
