// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

namespace blu {

std::string sha256_hex(std::string_view bytes);
/// Git blob object id: SHA-1 over "blob <size>\0" followed by the bytes.
std::string git_blob_sha1_hex(std::string_view bytes);

}  // namespace blu
