#include "fibermap/taxonomy.hpp"

#include "fibermap/error.hpp"

namespace fibermap {

namespace {

std::vector<TractInfo> build() {
  struct Row {
    TractCategory category;
    std::vector<const char*> bilateral;
    std::vector<const char*> single;
  };
  const std::vector<Row> rows = {
      {TractCategory::association,
       {"AF", "EC", "EmC", "ILF", "IOFF", "MdLF", "SLF-I", "SLF-II", "SLF-III", "UF"},
       {}},
      {TractCategory::commissural, {}, {"CC1", "CC2", "CC3", "CC4", "CC5", "CC6", "CC7"}},
      {TractCategory::limbic, {"CB-D", "CB-V"}, {}},
      {TractCategory::projection,
       {"CST", "CR-F", "CR-P", "SF", "SO", "SP", "TF", "TO", "TT", "TP"},
       {}},
      {TractCategory::cerebellar, {"CPC", "ICP", "Intra-CBLM-I&P", "Intra-CBLM-PaT", "SCP"}, {"MCP"}},
      {TractCategory::superficial,
       {"Sup-F", "Sup-FP", "Sup-O", "Sup-OT", "Sup-P", "Sup-PO", "Sup-PT", "Sup-T"},
       {}},
  };
  std::vector<TractInfo> out;
  for (const auto& r : rows) {
    for (const char* b : r.bilateral) {
      out.push_back({std::string(b) + "_left", r.category});
      out.push_back({std::string(b) + "_right", r.category});
    }
    for (const char* s : r.single) out.push_back({s, r.category});
  }
  return out;
}

}  // namespace

const std::vector<TractInfo>& tract_taxonomy() {
  static const std::vector<TractInfo> table = build();
  return table;
}

const char* to_string(TractCategory c) {
  switch (c) {
    case TractCategory::association: return "association";
    case TractCategory::commissural: return "commissural";
    case TractCategory::limbic: return "limbic";
    case TractCategory::projection: return "projection";
    case TractCategory::cerebellar: return "cerebellar";
    default: return "superficial";
  }
}

TractCategory parse_category(std::string_view s) {
  for (auto c : {TractCategory::association, TractCategory::commissural, TractCategory::limbic,
                 TractCategory::projection, TractCategory::cerebellar, TractCategory::superficial})
    if (s == to_string(c)) return c;
  throw ValidationError("unknown tract category '" + std::string(s) + "'");
}

std::optional<TractCategory> category_of(std::string_view tract) {
  for (const auto& t : tract_taxonomy())
    if (t.name == tract) return t.category;
  return std::nullopt;
}

bool is_known_tract(std::string_view tract) { return category_of(tract).has_value(); }

AnatomicalLabel make_label(std::string_view tract) {
  if (tract == kUnlabeled) return {};
  const auto c = category_of(tract);
  if (!c) throw ValidationError("'" + std::string(tract) + "' is not a tract in the atlas taxonomy");
  return {std::string(tract), c};
}

void validate_label(const AnatomicalLabel& label) {
  if (!label.labeled()) {
    if (label.category) throw ValidationError("unlabeled cluster carries a category");
    return;
  }
  const auto c = category_of(label.tract_name);
  if (!c) throw ValidationError("'" + label.tract_name + "' is not a tract in the atlas taxonomy");
  if (!label.category || *label.category != *c)
    throw ValidationError("category of '" + label.tract_name + "' does not match the taxonomy");
}

}  // namespace fibermap
