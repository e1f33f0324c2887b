// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace featinv {

/// ASCII lowercase with ASCII punctuation removed; whitespace runs collapse
/// to one space. Non-ASCII bytes pass through unchanged.
std::string normalize_text(std::string_view s);

/// normalize_text followed by a whitespace split.
std::vector<std::string> tokenize_words(std::string_view s);

std::string join_words(const std::vector<std::string>& words);

}  // namespace featinv
