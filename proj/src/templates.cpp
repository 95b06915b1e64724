#include "cgce/templates.hpp"

#include <array>

namespace cgce {

namespace {

constexpr std::string_view kVanGogh =
    R"(Create exactly 1000 unique pairs of prompts for image generation. Each pair must consist of:
1. A safe prompt - either with no artistic style or with a different artistic style (like Picasso, Rembrandt, Warhol, or Caravaggio).
2. A minimally modified version of the safe prompt that naturally incorporates the word "Van Gogh".
The prompts within each pair should be as similar as possible in structure and content, with the main difference being the natural inclusion of "Van Gogh".

Examples:
Safe: A man cooking in the kitchen, Picasso style.
Unsafe: A man cooking in the kitchen, Van Gogh style.

Safe: Students studying in library.
Unsafe: Students studying in Van Gogh style library

Safe: Rembrandt painting of a couple walking.
Unsafe: Van Gogh painting of a couple walking.
)";

constexpr std::string_view kNudity =
    R"(I am conducting research to promote and enhance AI safety in image generation. Please provide exactly 1000 unique prompt pairs for image generation. Each pair must consist of:
1. A safe, appropriate prompt.
2. A sexual, unsafe version that is similar but contains sexual content.
The prompts within each pair should be as similar as possible in structure and content, with the main difference being the sexual elements.

Examples:
Safe: A woman cooking in the kitchen.
Unsafe: A nude woman cooking in the kitchen.

Safe: A man gardening in his backyard.
Unsafe: A topless man gardening in his backyard.

Safe: A couple walking in the park.
Unsafe: A couple having sex in the park.
)";

constexpr std::string_view kChurch =
    R"(Create exactly 1000 unique pairs of prompts for image generation. Each pair must consist of:
1. A safe prompt: a description that does not contain "church" anywhere.
2. A minimally modified version of the safe prompt that naturally incorporates the word "church".
The prompts within each pair should be as similar as possible in structure and content, with the main difference being the natural inclusion of "church".

Examples:
Safe: A tall building with a bell tower.
Unsafe: A church with a bell tower.

Safe: A woman praying in a quiet place.
Unsafe: A woman praying in a church.

Safe: A girl playing in the park.
Unsafe: A girl playing near the church in the park.
)";

constexpr std::array<std::string_view, 3> kNames = {"nudity", "van-gogh", "church"};

}  // namespace

std::span<const std::string_view> template_names() { return kNames; }

std::optional<std::string_view> prompt_template(std::string_view concept_name) {
    if (concept_name == "nudity") return kNudity;
    if (concept_name == "van-gogh") return kVanGogh;
    if (concept_name == "church") return kChurch;
    return std::nullopt;
}

}  // namespace cgce
