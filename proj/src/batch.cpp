#include "captlab/batch.hpp"

#include <string>

#include "captlab/errors.hpp"

namespace captlab {

std::size_t Batch::unpadded_length(std::size_t b) const {
  std::size_t n = 0;
  for (std::uint8_t m : mask_row(b)) n += m ? 1 : 0;
  return n;
}

void Batch::validate() const {
  const std::size_t cells = batch_size * seq_len;
  if (token_ids.size() != cells || mask.size() != cells) {
    throw ShapeError("batch ids/mask do not cover " + std::to_string(batch_size) + "x" +
                     std::to_string(seq_len));
  }
  if (!labels.empty() && labels.size() != batch_size) throw ShapeError("batch label count mismatch");
  if (!structural_indices.empty() && structural_indices.size() != batch_size) {
    throw ShapeError("batch structural index lists mismatch");
  }
}

std::string_view role_name(TokenRole role) {
  switch (role) {
    case TokenRole::prompt: return "prompt";
    case TokenRole::capsule: return "capsule";
    case TokenRole::instance_pooled: return "instance_pooled";
    case TokenRole::input: return "input";
    case TokenRole::structural_input: return "structural_input";
    case TokenRole::pad: return "pad";
  }
  return "?";
}

TokenRole parse_role(std::string_view name) {
  for (TokenRole r : {TokenRole::prompt, TokenRole::capsule, TokenRole::instance_pooled,
                      TokenRole::input, TokenRole::structural_input, TokenRole::pad}) {
    if (role_name(r) == name) return r;
  }
  throw ContractError("unknown token role '" + std::string(name) + "'");
}

}  // namespace captlab
