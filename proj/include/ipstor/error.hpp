#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ipstor {

/// Base of every error raised by the stack. Each subclass names one failure
/// class so callers (and the CLI) can map it to a verdict or exit code.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or out-of-sequence protocol data.
class ProtocolError : public Error
{
public:
    using Error::Error;
};

/// Authentication tag or integrity check value mismatch.
class IntegrityError : public Error
{
public:
    using Error::Error;
};

/// ESP sequence number at or below the highest one already accepted.
class ReplayError : public Error
{
public:
    using Error::Error;
};

class HandshakeError : public Error
{
public:
    using Error::Error;
};

/// CHAP failure during login.
class AuthFailure : public Error
{
public:
    using Error::Error;
};

/// Login rejected for a reason other than authentication.
class LoginRejected : public Error
{
public:
    LoginRejected(const std::string& what, std::uint8_t status_class, std::uint8_t status_detail)
        : Error(what), status_class_(status_class), status_detail_(status_detail)
    {}

    std::uint8_t status_class() const { return status_class_; }
    std::uint8_t status_detail() const { return status_detail_; }

private:
    std::uint8_t status_class_;
    std::uint8_t status_detail_;
};

/// Connection refused, closed, stalled or timed out.
class TransportError : public Error
{
public:
    using Error::Error;
};

/// SCSI command completed with a non-GOOD status.
class StorageError : public Error
{
public:
    StorageError(const std::string& what, std::uint8_t status, std::uint8_t sense_key = 0,
                 std::uint8_t asc = 0)
        : Error(what), status_(status), sense_key_(sense_key), asc_(asc)
    {}

    std::uint8_t status() const { return status_; }
    std::uint8_t sense_key() const { return sense_key_; }
    std::uint8_t asc() const { return asc_; }

private:
    std::uint8_t status_;
    std::uint8_t sense_key_;
    std::uint8_t asc_;
};

class StartupError : public Error
{
public:
    using Error::Error;
};

class AnalysisError : public Error
{
public:
    using Error::Error;
};

/// API misuse: operation on a closed session, concurrent use of a
/// single-owner handle, invalid configuration value.
class UsageError : public Error
{
public:
    using Error::Error;
};

class IoError : public Error
{
public:
    using Error::Error;
};

} // namespace ipstor
