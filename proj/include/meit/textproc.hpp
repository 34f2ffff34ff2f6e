// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <string>
#include <vector>

namespace meit {

inline std::string to_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Shared tokenizer for reports, prompts and all NLG metrics: lowercase,
// split on whitespace, punctuation becomes its own token.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      out.push_back(std::string(1, ch));
    }
  }
  flush();
  return out;
}

inline bool is_double_consonant_tail(const std::string& w) {
  if (w.size() < 2) return false;
  const char a = w[w.size() - 2], b = w[w.size() - 1];
  if (a != b) return false;
  return std::string("aeiou").find(b) == std::string::npos;
}

// Light suffix stripper in the Porter spirit: plural, -ing, -ed and a
// final -e collapse, with consonant undoubling ("running" -> "run").
// Both sides of a match are stemmed with the same rules, so the collapsed
// forms only need to agree, not to be dictionary stems.
inline std::string stem_light(const std::string& word) {
  std::string w = word;
  if (w.size() <= 3) return w;

  auto ends = [&](const char* suf) {
    const size_t n = std::char_traits<char>::length(suf);
    return w.size() >= n && w.compare(w.size() - n, n, suf) == 0;
  };

  if (ends("ies")) {
    w.replace(w.size() - 3, 3, "i");
  } else if (ends("sses")) {
    w.erase(w.size() - 2);
  } else if (!ends("ss") && ends("s")) {
    w.pop_back();
  }

  if (w.size() >= 6 && w.compare(w.size() - 3, 3, "ing") == 0) {
    w.erase(w.size() - 3);
    if (is_double_consonant_tail(w)) w.pop_back();
  } else if (w.size() >= 5 && w.compare(w.size() - 2, 2, "ed") == 0) {
    w.erase(w.size() - 2);
    if (is_double_consonant_tail(w)) w.pop_back();
  }

  if (w.size() >= 4 && w.back() == 'e') w.pop_back();
  return w;
}

}  // namespace meit
