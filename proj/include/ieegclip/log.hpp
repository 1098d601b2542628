#pragma once

#include <cstddef>
#include <functional>
#include <string_view>

namespace ieegclip {

// Warnings go to stderr unless a sink is installed. The sink is process-wide;
// tests install one to count warnings.
using WarningSink = std::function<void(std::string_view)>;

void set_warning_sink(WarningSink sink);
void warn(std::string_view message);

}  // namespace ieegclip
