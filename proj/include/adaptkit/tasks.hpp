// SPDX-License-Identifier: Apache-2.0
//
// Task examples and prompt templates. Both ship as JSON lines.
//
// Task records, by kind:
//   nli                {"premise": .., "hypothesis": .., "label": 0..2}
//   paraphrase         {"sentence1": .., "sentence2": .., "label": 0..1}
//   completion-choice  {"context": .., "choices": [..], "label": i}
//   cause-effect       {"sentence1": .., "question": "cause"|"effect", "choices": [..], "label": i}
// An optional "language" overrides the dataset language per record.
//
// Template records:
//   {"name": .., "language": .., "kind": .., "pattern": .., "verbalizers": [..] | "identity",
//    "effect_pattern": .. (cause-effect), "label_slot": "pattern" | "underscore"}

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace adaptkit::data {

enum class TaskKind { nli, paraphrase, completion_choice, cause_effect };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

struct TaskExample {
  std::map<std::string, std::string> fields;
  std::vector<std::string> choices;  // completion-choice and cause-effect
  int label = 0;
  std::string language;
};

struct TaskDataset {
  TaskKind kind = TaskKind::nli;
  std::string name;
  std::string language;
  std::string split = "test";
  std::vector<TaskExample> examples;

  // Fixed for nli (3) and paraphrase (2); the shared choice count otherwise.
  int class_count() const;
};

// Throws std::runtime_error("<origin>:<line>: ...") on malformed records.
TaskDataset parse_task_data(std::string_view jsonl, TaskKind kind, const std::string& language,
                            const std::string& origin = "<memory>");
TaskDataset load_task_data(const std::filesystem::path& path, TaskKind kind, const std::string& language = "");
std::string serialize_task_data(const TaskDataset& ds);

enum class LabelSlot { pattern, underscore };

struct PromptTemplate {
  std::string name;
  std::string language;
  TaskKind kind = TaskKind::nli;
  std::string pattern;
  std::string effect_pattern;  // cause-effect only
  LabelSlot label_slot = LabelSlot::pattern;
  std::vector<std::string> verbalizers;  // empty: identity (the example's choices)

  bool identity() const { return verbalizers.empty(); }
  // Throws std::invalid_argument when the pattern lacks its single [Label] slot.
  void validate() const;
};

inline constexpr std::string_view kLabelSlot = "[Label]";

std::vector<PromptTemplate> parse_templates(std::string_view jsonl, const std::string& origin = "<memory>");
std::vector<PromptTemplate> load_templates(const std::filesystem::path& path);
std::string serialize_templates(const std::vector<PromptTemplate>& templates);

}  // namespace adaptkit::data
