// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#include "featinv/version.hpp"

namespace featinv {

const char* version() { return FEATINV_VERSION; }

}  // namespace featinv
