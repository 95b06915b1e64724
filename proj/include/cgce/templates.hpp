#pragma once

#include <optional>
#include <span>
#include <string_view>

namespace cgce {

// Instruction texts handed to an external LLM to synthesise safe/unsafe
// prompt pairs for a concept.
std::span<const std::string_view> template_names();

std::optional<std::string_view> prompt_template(std::string_view concept_name);

}  // namespace cgce
