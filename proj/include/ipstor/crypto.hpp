#pragma once

#include <array>
#include <cstdint>

#include "ipstor/bytes.hpp"

// Thin wrappers over libcrypto. Failures inside the library are reported as
// std::runtime_error; authentication failures are reported by return value so
// callers can raise the protocol-specific error.
namespace ipstor::crypto {

using Key256 = std::array<std::uint8_t, 32>;
using Digest = std::array<std::uint8_t, 32>;

Digest sha256(ByteView data);
Digest hmac_sha256(ByteView key, ByteView data);

/// AES-256-GCM with a 12-byte nonce; returns ciphertext || 16-byte tag.
Bytes aes_gcm_seal(const Key256& key, const std::array<std::uint8_t, 12>& nonce, ByteView aad,
                   ByteView plaintext);

/// Returns false on tag mismatch; `plaintext` is then unspecified.
bool aes_gcm_open(const Key256& key, const std::array<std::uint8_t, 12>& nonce, ByteView aad,
                  ByteView sealed, Bytes& plaintext);

/// AES-256-CBC without padding; input length must be a multiple of 16.
Bytes aes_cbc_encrypt(const Key256& key, const std::array<std::uint8_t, 16>& iv, ByteView data);
Bytes aes_cbc_decrypt(const Key256& key, const std::array<std::uint8_t, 16>& iv, ByteView data);

/// Constant-time comparison.
bool equal(ByteView a, ByteView b);

void random_bytes(std::uint8_t* out, std::size_t n);

struct X25519KeyPair
{
    Key256 private_key;
    Key256 public_key;
};

X25519KeyPair x25519_from_private(const Key256& private_key);

/// Throws std::runtime_error when the peer key is invalid.
Key256 x25519_shared(const Key256& private_key, const Key256& peer_public);

} // namespace ipstor::crypto
