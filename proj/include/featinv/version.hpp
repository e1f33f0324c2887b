// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace featinv {

/// Toolkit version string, e.g. "0.1.0".
const char* version();

}  // namespace featinv
