#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace advrestore {

// Incremental SHA-256. Used for checkpoint integrity digests and manifest
// provenance fields.
class Sha256 {
  public:
    Sha256();
    void update(const void* data, std::size_t len);
    void update(const std::string& s) { update(s.data(), s.size()); }
    // Finalizes and returns the lowercase hex digest; the object must not be
    // updated afterwards.
    std::string hex_digest();

    static std::string of(const void* data, std::size_t len);
    static std::string of_file(const std::string& path);

  private:
    void process_block(const std::uint8_t* block);
    std::uint32_t state_[8];
    std::uint8_t buffer_[64];
    std::size_t buffer_len_ = 0;
    std::uint64_t total_len_ = 0;
    bool finalized_ = false;
};

}  // namespace advrestore
