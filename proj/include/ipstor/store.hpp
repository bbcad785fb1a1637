#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <string>

#include "ipstor/bytes.hpp"

namespace ipstor {

/// Fixed-size array of 512-byte blocks. Access is serialized internally.
class BlockStore
{
public:
    virtual ~BlockStore() = default;

    std::uint64_t blocks() const { return blocks_; }
    std::uint64_t size_bytes() const { return blocks_ * 512; }

    /// Both throw std::out_of_range when [lba, lba + n) leaves the store.
    void write(std::uint64_t lba, ByteView data);
    Bytes read(std::uint64_t lba, std::uint64_t count);

    virtual void flush() {}

protected:
    explicit BlockStore(std::uint64_t blocks) : blocks_(blocks) {}

    virtual void do_write(std::uint64_t offset, ByteView data) = 0;
    virtual void do_read(std::uint64_t offset, std::uint8_t* out, std::size_t n) = 0;

private:
    void check(std::uint64_t lba, std::uint64_t count) const;

    std::uint64_t blocks_;
    std::mutex mutex_;
};

/// Zero-initialised RAM disk.
class MemoryStore final : public BlockStore
{
public:
    explicit MemoryStore(std::uint64_t blocks);

private:
    void do_write(std::uint64_t offset, ByteView data) override;
    void do_read(std::uint64_t offset, std::uint8_t* out, std::size_t n) override;

    Bytes data_;
};

/// Disk image file, created or extended to the configured size. Throws
/// StartupError when the file cannot be opened for writing.
class FileStore final : public BlockStore
{
public:
    FileStore(const std::string& path, std::uint64_t blocks);
    ~FileStore() override;

    void flush() override;

private:
    void do_write(std::uint64_t offset, ByteView data) override;
    void do_read(std::uint64_t offset, std::uint8_t* out, std::size_t n) override;

    int fd_ = -1;
    std::string path_;
};

} // namespace ipstor
