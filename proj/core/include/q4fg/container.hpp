#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "q4fg/model.hpp"

namespace q4fg {

/// On-disk layout:
///
///   "Q4FG" | u16 version | u16 reserved (0) | u64 metadata length |
///   metadata JSON (canonical) | zero padding to a 64-byte boundary |
///   data section: tensor payloads, each starting 64-byte aligned
///
/// All integers and floats are little-endian. Offsets in the metadata are
/// relative to the start of the data section.
inline constexpr std::array<char, 4> kContainerMagic = {'Q', '4', 'F', 'G'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

class ContainerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// f32 floats; i8/u8 byte codes; i4/u4 nibble-packed rows; u1 bit-packed masks.
enum class DType { f32, i8, u8, i4, u4, u1 };

std::string to_string(DType d);
DType dtype_from_string(const std::string& s);
/// Payload size in bytes of a tensor (4-bit rows are padded to whole bytes).
std::size_t payload_size(DType d, const Shape& shape);

struct TensorEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct ContainerContents {
  Transformer<float> model;
  /// Deployment strategy recorded by `quantize`, if any.
  std::optional<QuantStrategy> strategy;
};

std::vector<std::uint8_t> serialize_model(const Transformer<float>& model,
                                          const std::optional<QuantStrategy>& strategy = std::nullopt);
ContainerContents deserialize_model(std::span<const std::uint8_t> bytes);

/// Tensor index of a serialized container, after full validation.
std::vector<TensorEntry> container_index(std::span<const std::uint8_t> bytes);

void save_container(const std::string& path, const Transformer<float>& model,
                    const std::optional<QuantStrategy>& strategy = std::nullopt);
ContainerContents load_container(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

/// Replaces the weights of the selected parts with stored integer codes
/// (the float weight becomes their dequantized value). Masks are honoured in
/// the model's composition order. Throws ContainerError if a selected part
/// is already quantized.
void quantize_parts(Transformer<float>& model, const QuantScheme& weight_scheme, const std::array<bool, 4>& parts);

/// Token files: little-endian u32 ids.
std::vector<std::int32_t> read_tokens(const std::string& path);
void write_tokens(const std::string& path, std::span<const std::int32_t> tokens);

}  // namespace q4fg
