#include "forge/error.hpp"

namespace forge {

const char * error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config:    return "configuration";
        case ErrorKind::input:     return "input";
        case ErrorKind::load:      return "load";
        case ErrorKind::plan:      return "plan";
        case ErrorKind::surgery:   return "surgery";
        case ErrorKind::graft:     return "graft";
        case ErrorKind::assembly:  return "assembly";
        case ErrorKind::tokenize:  return "tokenization";
        case ErrorKind::detection: return "detection";
        case ErrorKind::data:      return "data";
        case ErrorKind::numeric:   return "numeric";
        case ErrorKind::protocol:  return "protocol";
    }
    return "unknown";
}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config:
        case ErrorKind::plan:
        case ErrorKind::surgery:
        case ErrorKind::graft:
            return 2;
        case ErrorKind::numeric:
            return 4;
        case ErrorKind::protocol:
            return 5;
        default:
            return 3;
    }
}

} // namespace forge
