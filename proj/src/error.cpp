#include "cmargin/error.hpp"

namespace cmargin {

FormatError::FormatError(Kind kind, const std::string& what)
    : DataError(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

const char* to_string(FormatError::Kind kind) noexcept {
    switch (kind) {
        case FormatError::Kind::bad_magic: return "bad magic";
        case FormatError::Kind::truncated: return "truncated payload";
        case FormatError::Kind::extent_overflow: return "extent overflow";
        case FormatError::Kind::trailing_bytes: return "trailing bytes";
        case FormatError::Kind::io: return "i/o failure";
    }
    return "format error";
}

}  // namespace cmargin
