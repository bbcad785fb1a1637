#include "ipstor/crypto.hpp"

#include <memory>
#include <stdexcept>

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/rand.h>
#include <openssl/sha.h>

namespace ipstor::crypto {

namespace {

struct CipherCtxDeleter
{
    void operator()(EVP_CIPHER_CTX* ctx) const { EVP_CIPHER_CTX_free(ctx); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CipherCtxDeleter>;

struct PkeyDeleter
{
    void operator()(EVP_PKEY* key) const { EVP_PKEY_free(key); }
};
using Pkey = std::unique_ptr<EVP_PKEY, PkeyDeleter>;

struct PkeyCtxDeleter
{
    void operator()(EVP_PKEY_CTX* ctx) const { EVP_PKEY_CTX_free(ctx); }
};
using PkeyCtx = std::unique_ptr<EVP_PKEY_CTX, PkeyCtxDeleter>;

void check(int rc, const char* what)
{
    if (rc != 1)
        throw std::runtime_error(std::string("libcrypto: ") + what);
}

CipherCtx new_ctx()
{
    CipherCtx ctx(EVP_CIPHER_CTX_new());
    if (!ctx)
        throw std::runtime_error("libcrypto: EVP_CIPHER_CTX_new");
    return ctx;
}

} // namespace

Digest sha256(ByteView data)
{
    Digest out;
    SHA256(data.data(), data.size(), out.data());
    return out;
}

Digest hmac_sha256(ByteView key, ByteView data)
{
    Digest out;
    unsigned int len = 0;
    if (!HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(),
              out.data(), &len))
        throw std::runtime_error("libcrypto: HMAC");
    return out;
}

Bytes aes_gcm_seal(const Key256& key, const std::array<std::uint8_t, 12>& nonce, ByteView aad,
                   ByteView plaintext)
{
    auto ctx = new_ctx();
    check(EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(), nonce.data()),
          "gcm init");
    int len = 0;
    if (!aad.empty())
        check(EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())),
              "gcm aad");
    Bytes out(plaintext.size() + 16);
    if (!plaintext.empty())
        check(EVP_EncryptUpdate(ctx.get(), out.data(), &len, plaintext.data(),
                                static_cast<int>(plaintext.size())),
              "gcm update");
    check(EVP_EncryptFinal_ex(ctx.get(), out.data() + plaintext.size(), &len), "gcm final");
    check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, 16, out.data() + plaintext.size()),
          "gcm tag");
    return out;
}

bool aes_gcm_open(const Key256& key, const std::array<std::uint8_t, 12>& nonce, ByteView aad,
                  ByteView sealed, Bytes& plaintext)
{
    if (sealed.size() < 16)
        return false;
    const std::size_t n = sealed.size() - 16;
    auto ctx = new_ctx();
    check(EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.data(), nonce.data()),
          "gcm init");
    int len = 0;
    if (!aad.empty())
        check(EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())),
              "gcm aad");
    plaintext.resize(n);
    if (n > 0)
        check(EVP_DecryptUpdate(ctx.get(), plaintext.data(), &len, sealed.data(),
                                static_cast<int>(n)),
              "gcm update");
    std::array<std::uint8_t, 16> tag;
    std::copy(sealed.begin() + static_cast<std::ptrdiff_t>(n), sealed.end(), tag.begin());
    check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, 16, tag.data()), "gcm set tag");
    return EVP_DecryptFinal_ex(ctx.get(), plaintext.data() + n, &len) == 1;
}

namespace {

Bytes aes_cbc(bool encrypt, const Key256& key, const std::array<std::uint8_t, 16>& iv,
              ByteView data)
{
    if (data.size() % 16 != 0)
        throw std::invalid_argument("CBC input is not a multiple of the block size");
    auto ctx = new_ctx();
    check(EVP_CipherInit_ex(ctx.get(), EVP_aes_256_cbc(), nullptr, key.data(), iv.data(),
                            encrypt ? 1 : 0),
          "cbc init");
    check(EVP_CIPHER_CTX_set_padding(ctx.get(), 0), "cbc padding");
    Bytes out(data.size());
    int len = 0;
    if (!data.empty())
        check(EVP_CipherUpdate(ctx.get(), out.data(), &len, data.data(),
                               static_cast<int>(data.size())),
              "cbc update");
    int tail = 0;
    check(EVP_CipherFinal_ex(ctx.get(), out.data() + len, &tail), "cbc final");
    return out;
}

} // namespace

Bytes aes_cbc_encrypt(const Key256& key, const std::array<std::uint8_t, 16>& iv, ByteView data)
{
    return aes_cbc(true, key, iv, data);
}

Bytes aes_cbc_decrypt(const Key256& key, const std::array<std::uint8_t, 16>& iv, ByteView data)
{
    return aes_cbc(false, key, iv, data);
}

bool equal(ByteView a, ByteView b)
{
    return a.size() == b.size() && CRYPTO_memcmp(a.data(), b.data(), a.size()) == 0;
}

void random_bytes(std::uint8_t* out, std::size_t n)
{
    check(RAND_bytes(out, static_cast<int>(n)), "RAND_bytes");
}

X25519KeyPair x25519_from_private(const Key256& private_key)
{
    Pkey key(EVP_PKEY_new_raw_private_key(EVP_PKEY_X25519, nullptr, private_key.data(),
                                          private_key.size()));
    if (!key)
        throw std::runtime_error("libcrypto: X25519 private key");
    X25519KeyPair pair;
    pair.private_key = private_key;
    std::size_t len = pair.public_key.size();
    check(EVP_PKEY_get_raw_public_key(key.get(), pair.public_key.data(), &len), "X25519 public");
    return pair;
}

Key256 x25519_shared(const Key256& private_key, const Key256& peer_public)
{
    Pkey ours(EVP_PKEY_new_raw_private_key(EVP_PKEY_X25519, nullptr, private_key.data(),
                                           private_key.size()));
    Pkey theirs(EVP_PKEY_new_raw_public_key(EVP_PKEY_X25519, nullptr, peer_public.data(),
                                            peer_public.size()));
    if (!ours || !theirs)
        throw std::runtime_error("libcrypto: X25519 key import");
    PkeyCtx ctx(EVP_PKEY_CTX_new(ours.get(), nullptr));
    if (!ctx)
        throw std::runtime_error("libcrypto: EVP_PKEY_CTX_new");
    check(EVP_PKEY_derive_init(ctx.get()), "derive init");
    check(EVP_PKEY_derive_set_peer(ctx.get(), theirs.get()), "derive peer");
    Key256 secret;
    std::size_t len = secret.size();
    check(EVP_PKEY_derive(ctx.get(), secret.data(), &len), "derive");
    return secret;
}

} // namespace ipstor::crypto
