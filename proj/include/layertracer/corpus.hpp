#pragma once

// Prompt corpus ingestion. Two source formats:
//   - plain text: one prompt per line, blank lines skipped
//   - JSON lines: one object per line with "text" and optional "category"
// Files named *.jsonl / *.ndjson, or whose first non-blank line starts with
// '{', are parsed as JSON lines.

#include <optional>
#include <string>
#include <vector>

namespace layertracer {

struct CorpusEntry {
  std::string text;
  std::optional<std::string> category;
};

// Throws std::runtime_error (with a line number for parse failures) on
// unreadable files, malformed JSON lines, or an empty corpus.
std::vector<CorpusEntry> load_corpus(const std::string& path);

// Parsing core, exposed for tests. `jsonl` forces the JSON-lines reading.
std::vector<CorpusEntry> parse_corpus(const std::string& content, bool jsonl);

}  // namespace layertracer
