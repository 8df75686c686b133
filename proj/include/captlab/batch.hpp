#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace captlab {

/// Right-padded token batch, B rows of T positions.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> token_ids;  // B*T
  std::vector<std::uint8_t> mask;       // B*T, 1 = real token
  std::vector<std::size_t> labels;      // B
  std::vector<std::vector<std::size_t>> structural_indices;  // per example

  std::span<const std::uint8_t> mask_row(std::size_t b) const {
    return {mask.data() + b * seq_len, seq_len};
  }
  std::span<const std::int32_t> ids_row(std::size_t b) const {
    return {token_ids.data() + b * seq_len, seq_len};
  }
  std::size_t unpadded_length(std::size_t b) const;

  void validate() const;
};

/// What a sequence position holds, as seen by the attention analysis.
enum class TokenRole : std::uint8_t {
  prompt,
  capsule,
  instance_pooled,
  input,
  structural_input,
  pad,
};

std::string_view role_name(TokenRole role);
TokenRole parse_role(std::string_view name);

// Guidance tokens are everything the strategy prepends.
inline bool is_guidance(TokenRole r) {
  return r == TokenRole::prompt || r == TokenRole::capsule || r == TokenRole::instance_pooled;
}
inline bool is_input(TokenRole r) {
  return r == TokenRole::input || r == TokenRole::structural_input;
}

}  // namespace captlab
