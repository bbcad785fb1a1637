#include "ipstor/store.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <stdexcept>

#include "ipstor/error.hpp"

namespace ipstor {

void BlockStore::check(std::uint64_t lba, std::uint64_t count) const
{
    if (lba > blocks_ || count > blocks_ - lba)
        throw std::out_of_range("block range outside the store");
}

void BlockStore::write(std::uint64_t lba, ByteView data)
{
    if (data.size() % 512 != 0)
        throw std::invalid_argument("write length is not a whole number of blocks");
    check(lba, data.size() / 512);
    std::lock_guard lock(mutex_);
    do_write(lba * 512, data);
}

Bytes BlockStore::read(std::uint64_t lba, std::uint64_t count)
{
    check(lba, count);
    Bytes out(count * 512);
    std::lock_guard lock(mutex_);
    do_read(lba * 512, out.data(), out.size());
    return out;
}

MemoryStore::MemoryStore(std::uint64_t blocks) : BlockStore(blocks), data_(blocks * 512, 0) {}

void MemoryStore::do_write(std::uint64_t offset, ByteView data)
{
    std::copy(data.begin(), data.end(), data_.begin() + static_cast<std::ptrdiff_t>(offset));
}

void MemoryStore::do_read(std::uint64_t offset, std::uint8_t* out, std::size_t n)
{
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(offset), n, out);
}

FileStore::FileStore(const std::string& path, std::uint64_t blocks) : BlockStore(blocks), path_(path)
{
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0)
        throw StartupError("cannot open backing file " + path + ": " + std::strerror(errno));
    struct stat st{};
    if (::fstat(fd_, &st) != 0 ||
        (static_cast<std::uint64_t>(st.st_size) < size_bytes() &&
         ::ftruncate(fd_, static_cast<off_t>(size_bytes())) != 0)) {
        const std::string why = std::strerror(errno);
        ::close(fd_);
        throw StartupError("cannot size backing file " + path + ": " + why);
    }
}

FileStore::~FileStore()
{
    if (fd_ >= 0) {
        ::fsync(fd_);
        ::close(fd_);
    }
}

void FileStore::flush()
{
    if (::fsync(fd_) != 0)
        throw IoError("fsync " + path_ + ": " + std::strerror(errno));
}

void FileStore::do_write(std::uint64_t offset, ByteView data)
{
    std::size_t done = 0;
    while (done < data.size()) {
        const ssize_t n = ::pwrite(fd_, data.data() + done, data.size() - done,
                                   static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR)
                continue;
            throw IoError("write " + path_ + ": " + std::strerror(errno));
        }
        done += static_cast<std::size_t>(n);
    }
}

void FileStore::do_read(std::uint64_t offset, std::uint8_t* out, std::size_t n)
{
    std::size_t done = 0;
    while (done < n) {
        const ssize_t r = ::pread(fd_, out + done, n - done, static_cast<off_t>(offset + done));
        if (r < 0) {
            if (errno == EINTR)
                continue;
            throw IoError("read " + path_ + ": " + std::strerror(errno));
        }
        if (r == 0) {
            std::fill(out + done, out + n, 0);
            return;
        }
        done += static_cast<std::size_t>(r);
    }
}

} // namespace ipstor
