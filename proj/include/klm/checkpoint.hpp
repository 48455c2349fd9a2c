#pragma once
// Bit-exact checkpoint container: magic "KLMC1", then repeated entries
// {name-len u32 LE, name, ndim u32 LE, dims u32 LE, dtype byte 0 (f64 LE),
// raw data}. A JSON sidecar manifest records config/seed/freeze flags.

#include <iosfwd>
#include <string>

#include "klm/model.hpp"

namespace klm {

void write_checkpoint(std::ostream& out, const NamedParams& params);
std::string checkpoint_bytes(const NamedParams& params);

// Writes `path` and, when manifest_json is non-empty, `path + ".json"`.
void save_checkpoint(const std::string& path, const NamedParams& params,
                     const std::string& manifest_json = "");

// Loads entries into the given tensors; every name must be present with a
// matching shape.
void load_checkpoint_into(const std::string& path, const NamedParams& params);

}  // namespace klm
