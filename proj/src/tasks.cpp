// SPDX-License-Identifier: Apache-2.0

#include "adaptkit/tasks.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "adaptkit/data.hpp"
#include "json.hpp"

namespace adaptkit::data {

using nlohmann::json;

namespace {

const std::vector<std::pair<TaskKind, const char*>> kKindNames = {
    {TaskKind::nli, "nli"},
    {TaskKind::paraphrase, "paraphrase"},
    {TaskKind::completion_choice, "completion-choice"},
    {TaskKind::cause_effect, "cause-effect"},
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<std::string> required_fields(TaskKind k) {
  switch (k) {
    case TaskKind::nli:
      return {"premise", "hypothesis"};
    case TaskKind::paraphrase:
      return {"sentence1", "sentence2"};
    case TaskKind::completion_choice:
      return {"context"};
    case TaskKind::cause_effect:
      return {"sentence1", "question"};
  }
  return {};
}

bool has_choices(TaskKind k) { return k == TaskKind::completion_choice || k == TaskKind::cause_effect; }

template <typename F>
void for_each_record(std::string_view jsonl, const std::string& origin, F&& f) {
  if (auto bad = first_invalid_utf8(jsonl))
    throw std::runtime_error(origin + ": invalid UTF-8 at byte offset " + std::to_string(*bad));
  const auto lines = split_documents(jsonl);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    const auto where = origin + ":" + std::to_string(i + 1) + ": ";
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw std::runtime_error(where + "record is not an object");
    try {
      f(j);
    } catch (const std::exception& e) {
      throw std::runtime_error(where + e.what());
    }
  }
}

std::string get_string(const json& j, const std::string& key) {
  if (!j.contains(key)) throw std::runtime_error("missing field '" + key + "'");
  if (!j.at(key).is_string()) throw std::runtime_error("field '" + key + "' must be a string");
  return j.at(key).get<std::string>();
}

}  // namespace

std::string to_string(TaskKind k) {
  for (const auto& [kind, name] : kKindNames)
    if (kind == k) return name;
  throw std::logic_error("unknown task kind");
}

TaskKind task_kind_from_string(const std::string& s) {
  for (const auto& [kind, name] : kKindNames)
    if (s == name) return kind;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

int TaskDataset::class_count() const {
  switch (kind) {
    case TaskKind::nli:
      return 3;
    case TaskKind::paraphrase:
      return 2;
    default:
      return examples.empty() ? 0 : static_cast<int>(examples.front().choices.size());
  }
}

TaskDataset parse_task_data(std::string_view jsonl, TaskKind kind, const std::string& language,
                            const std::string& origin) {
  TaskDataset ds;
  ds.kind = kind;
  ds.language = language;
  ds.name = origin;
  const auto required = required_fields(kind);
  std::set<std::string> allowed(required.begin(), required.end());
  allowed.insert({"label", "language", "id"});
  if (has_choices(kind)) allowed.insert("choices");

  std::optional<std::size_t> choice_count;
  for_each_record(jsonl, origin, [&](const json& j) {
    for (const auto& [key, _] : j.items())
      if (!allowed.contains(key)) throw std::runtime_error("unexpected field '" + key + "' for " + to_string(kind));
    TaskExample ex;
    for (const auto& f : required) ex.fields[f] = get_string(j, f);
    if (kind == TaskKind::cause_effect && ex.fields["question"] != "cause" && ex.fields["question"] != "effect")
      throw std::runtime_error("question must be 'cause' or 'effect'");
    if (has_choices(kind)) {
      if (!j.contains("choices") || !j.at("choices").is_array() || j.at("choices").size() < 2)
        throw std::runtime_error("field 'choices' must list at least two strings");
      for (const auto& c : j.at("choices")) {
        if (!c.is_string()) throw std::runtime_error("choices must be strings");
        ex.choices.push_back(c.get<std::string>());
      }
      if (choice_count && *choice_count != ex.choices.size())
        throw std::runtime_error("choice count " + std::to_string(ex.choices.size()) + " differs from earlier " +
                                 std::to_string(*choice_count));
      choice_count = ex.choices.size();
    }
    if (!j.contains("label") || !j.at("label").is_number_integer()) throw std::runtime_error("missing integer 'label'");
    ex.label = j.at("label").get<int>();
    const int classes = kind == TaskKind::nli ? 3 : kind == TaskKind::paraphrase ? 2 : static_cast<int>(ex.choices.size());
    if (ex.label < 0 || ex.label >= classes)
      throw std::runtime_error("label " + std::to_string(ex.label) + " out of range for " + std::to_string(classes) +
                               " classes");
    ex.language = j.contains("language") ? get_string(j, "language") : language;
    ds.examples.push_back(std::move(ex));
  });
  return ds;
}

TaskDataset load_task_data(const std::filesystem::path& path, TaskKind kind, const std::string& language) {
  auto ds = parse_task_data(read_file(path), kind, language, path.string());
  ds.name = path.stem().string();
  return ds;
}

std::string serialize_task_data(const TaskDataset& ds) {
  std::string out;
  for (const auto& ex : ds.examples) {
    json j = json::object();
    for (const auto& [k, v] : ex.fields) j[k] = v;
    if (has_choices(ds.kind)) j["choices"] = ex.choices;
    j["label"] = ex.label;
    if (!ex.language.empty() && ex.language != ds.language) j["language"] = ex.language;
    out += j.dump() + "\n";
  }
  return out;
}

void PromptTemplate::validate() const {
  auto count = [](const std::string& s) {
    std::size_t n = 0;
    for (auto pos = s.find(kLabelSlot); pos != std::string::npos; pos = s.find(kLabelSlot, pos + 1)) ++n;
    return n;
  };
  if (label_slot == LabelSlot::pattern) {
    if (count(pattern) != 1) throw std::invalid_argument("template " + name + ": pattern needs exactly one [Label]");
    if (kind == TaskKind::cause_effect && count(effect_pattern) != 1)
      throw std::invalid_argument("template " + name + ": effect_pattern needs exactly one [Label]");
  } else if (pattern.find("{Context}") == std::string::npos) {
    throw std::invalid_argument("template " + name + ": underscore slot needs a {Context} placeholder");
  }
  if (kind == TaskKind::nli && verbalizers.size() != 3)
    throw std::invalid_argument("template " + name + ": nli needs 3 verbalizers");
  if (kind == TaskKind::paraphrase && verbalizers.size() != 2)
    throw std::invalid_argument("template " + name + ": paraphrase needs 2 verbalizers");
  if (has_choices(kind) && !verbalizers.empty())
    throw std::invalid_argument("template " + name + ": choice tasks use the identity verbalizer");
}

std::vector<PromptTemplate> parse_templates(std::string_view jsonl, const std::string& origin) {
  std::vector<PromptTemplate> out;
  for_each_record(jsonl, origin, [&](const json& j) {
    PromptTemplate t;
    t.name = get_string(j, "name");
    t.language = get_string(j, "language");
    t.kind = task_kind_from_string(get_string(j, "kind"));
    t.pattern = get_string(j, "pattern");
    if (j.contains("effect_pattern")) t.effect_pattern = get_string(j, "effect_pattern");
    if (j.contains("label_slot")) {
      const auto slot = get_string(j, "label_slot");
      if (slot == "underscore")
        t.label_slot = LabelSlot::underscore;
      else if (slot != "pattern")
        throw std::runtime_error("label_slot must be 'pattern' or 'underscore'");
    }
    if (!j.contains("verbalizers")) throw std::runtime_error("missing field 'verbalizers'");
    const auto& v = j.at("verbalizers");
    if (v.is_string()) {
      if (v.get<std::string>() != "identity") throw std::runtime_error("verbalizers must be a list or \"identity\"");
    } else if (v.is_array()) {
      for (const auto& w : v) t.verbalizers.push_back(w.get<std::string>());
    } else {
      throw std::runtime_error("verbalizers must be a list or \"identity\"");
    }
    t.validate();
    out.push_back(std::move(t));
  });
  return out;
}

std::vector<PromptTemplate> load_templates(const std::filesystem::path& path) {
  return parse_templates(read_file(path), path.string());
}

std::string serialize_templates(const std::vector<PromptTemplate>& templates) {
  std::string out;
  for (const auto& t : templates) {
    json j = {{"name", t.name}, {"language", t.language}, {"kind", to_string(t.kind)}, {"pattern", t.pattern}};
    if (!t.effect_pattern.empty()) j["effect_pattern"] = t.effect_pattern;
    if (t.label_slot == LabelSlot::underscore) j["label_slot"] = "underscore";
    j["verbalizers"] = t.identity() ? json("identity") : json(t.verbalizers);
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace adaptkit::data
