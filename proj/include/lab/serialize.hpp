#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "lab/tensor.hpp"

namespace lab {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Parameter blob: magic "LATB", version u32, then per-parameter records
// (name length u32, UTF-8 name, rank u32, dims u32 each, f32 LE values).
// Values are stored as f32; save_params also rounds the in-memory doubles to
// the stored values so that save -> load reproduces the live model exactly.
void save_params(std::ostream& os, const NamedParams& params);
// Reads records until EOF and fills matching names; throws on unknown or
// missing names or shape mismatch.
void load_params(std::istream& is, const NamedParams& params);

// In-memory image of save_params output (used for frozen-model byte checks).
std::vector<unsigned char> params_bytes(const NamedParams& params);

void write_u32(std::ostream& os, uint32_t v);
uint32_t read_u32(std::istream& is);
void write_f32(std::ostream& os, float v);
float read_f32(std::istream& is);

// Length-prefixed UTF-8 block; model files put a config header in front of
// the parameter blob this way.
void write_text_block(std::ostream& os, const std::string& text);
std::string read_text_block(std::istream& is);

}  // namespace lab
