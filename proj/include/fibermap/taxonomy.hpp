#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fibermap {

enum class TractCategory { association, commissural, limbic, projection, cerebellar, superficial };

inline constexpr const char* kUnlabeled = "unlabeled";

struct AnatomicalLabel {
  std::string tract_name = kUnlabeled;
  std::optional<TractCategory> category;  // empty iff unlabeled

  bool labeled() const { return tract_name != kUnlabeled; }
  bool operator==(const AnatomicalLabel&) const = default;
};

struct TractInfo {
  std::string name;  // e.g. "AF_left", "CC3", "MCP"
  TractCategory category;
};

// The 78 atlas tracts. Bilateral tracts are expanded into _left/_right
// entries; the corpus callosum segments and MCP are single.
const std::vector<TractInfo>& tract_taxonomy();

const char* to_string(TractCategory c);
TractCategory parse_category(std::string_view s);
std::optional<TractCategory> category_of(std::string_view tract);
bool is_known_tract(std::string_view tract);

// Throws ValidationError when the name is not in the taxonomy or the
// category does not match it.
AnatomicalLabel make_label(std::string_view tract);
void validate_label(const AnatomicalLabel& label);

}  // namespace fibermap
