#include "layertracer/corpus.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace layertracer {

namespace {

std::string strip_trailing_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

bool is_blank(const std::string& line) {
  return line.find_first_not_of(" \t\r\n") == std::string::npos;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<CorpusEntry> parse_corpus(const std::string& content, bool jsonl) {
  std::vector<CorpusEntry> entries;
  std::istringstream in(content);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_trailing_cr(line);
    if (is_blank(line)) continue;
    if (jsonl) {
      nlohmann::json obj;
      try {
        obj = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("corpus: line " + std::to_string(line_no) +
                                 ": " + e.what());
      }
      if (!obj.is_object() || !obj.contains("text") ||
          !obj["text"].is_string()) {
        throw std::runtime_error("corpus: line " + std::to_string(line_no) +
                                 ": expected an object with a \"text\" string");
      }
      CorpusEntry entry;
      entry.text = obj["text"].get<std::string>();
      if (obj.contains("category") && obj["category"].is_string()) {
        entry.category = obj["category"].get<std::string>();
      }
      if (is_blank(entry.text)) {
        throw std::runtime_error("corpus: line " + std::to_string(line_no) +
                                 ": empty \"text\"");
      }
      entries.push_back(std::move(entry));
    } else {
      entries.push_back(CorpusEntry{line, std::nullopt});
    }
  }
  if (entries.empty()) throw std::runtime_error("corpus: no prompts found");
  return entries;
}

std::vector<CorpusEntry> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("corpus: cannot open '" + path + "'");
  std::string content((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("corpus: read failed for '" + path + "'");

  bool jsonl = ends_with(path, ".jsonl") || ends_with(path, ".ndjson");
  if (!jsonl) {
    const size_t first = content.find_first_not_of(" \t\r\n");
    jsonl = first != std::string::npos && content[first] == '{';
  }
  return parse_corpus(content, jsonl);
}

}  // namespace layertracer
