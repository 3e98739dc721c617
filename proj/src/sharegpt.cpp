#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bft/data.hpp"
#include "bft/errors.hpp"

namespace bft {

using nlohmann::json;

void Conversation::validate() const {
  if (turns.empty()) throw ValidationError("conversation has no turns");
  bool any_gpt = false;
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const Role expected = i % 2 == 0 ? Role::human : Role::gpt;
    if (turns[i].role != expected) {
      throw ValidationError("turn " + std::to_string(i) + " should be from '" +
                            (expected == Role::human ? "human" : "gpt") + "'");
    }
    any_gpt = any_gpt || turns[i].role == Role::gpt;
  }
  if (!any_gpt) throw ValidationError("conversation has no gpt turn");
}

std::vector<Conversation> parse_sharegpt(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("sharegpt: invalid JSON: ") + e.what());
  }
  if (!doc.is_array()) throw ParseError("sharegpt: top level must be an array of records");

  std::vector<Conversation> out;
  for (std::size_t r = 0; r < doc.size(); ++r) {
    const auto fail = [r](const std::string& what) {
      return ParseError("sharegpt record " + std::to_string(r) + ": " + what);
    };
    const json& record = doc[r];
    if (!record.is_object() || !record.contains("conversations") ||
        !record["conversations"].is_array()) {
      throw fail("missing \"conversations\" list");
    }
    Conversation conv;
    for (const json& turn : record["conversations"]) {
      if (!turn.is_object() || !turn.contains("from") || !turn["from"].is_string())
        throw fail("turn missing string \"from\"");
      if (!turn.contains("value") || !turn["value"].is_string())
        throw fail("turn missing string \"value\"");
      const std::string from = turn["from"].get<std::string>();
      Role role;
      if (from == "human") role = Role::human;
      else if (from == "gpt") role = Role::gpt;
      else throw fail("unknown role \"" + from + "\"");
      conv.turns.push_back({role, turn["value"].get<std::string>()});
    }
    try {
      conv.validate();
    } catch (const ValidationError& e) {
      throw ValidationError("sharegpt record " + std::to_string(r) + ": " + e.what());
    }
    out.push_back(std::move(conv));
  }
  return out;
}

std::vector<Conversation> load_sharegpt(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_sharegpt(text.str());
}

std::string dump_sharegpt(std::span<const Conversation> conversations) {
  json doc = json::array();
  for (const Conversation& conv : conversations) {
    json turns = json::array();
    for (const Turn& t : conv.turns)
      turns.push_back({{"from", t.role == Role::human ? "human" : "gpt"}, {"value", t.text}});
    doc.push_back({{"conversations", std::move(turns)}});
  }
  return doc.dump(1);
}

void save_sharegpt(const std::string& path, std::span<const Conversation> conversations) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << dump_sharegpt(conversations) << '\n';
}

}  // namespace bft
